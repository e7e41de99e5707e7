"""Gaussian primitives and the growing scene map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Parameter groups and their per-Gaussian widths, in storage order.
PARAM_GROUPS = {
    "positions": 3,
    "log_scales": 3,
    "rotations": 4,
    "opacity_logits": 1,
    "colors": 3,
}


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian:
    """One splat in decoded form (metric scale, probability opacity)."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    opacity: float = 0.5
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.scale = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (3,)).copy()
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if np.any(self.scale <= 0):
            raise ValueError("Gaussian scale must be positive")
        if not 0.0 < self.opacity < 1.0:
            raise ValueError("Gaussian opacity must lie strictly inside (0, 1)")


class GaussianMap:
    """Structure-of-arrays Gaussian store with per-parameter Adam moments.

    Scales are stored as logs and opacities as logits so optimisation is
    unconstrained. Rotations are raw quaternions, normalised on use.
    """

    def __init__(self):
        self.params = {name: np.zeros((0, w)) for name, w in PARAM_GROUPS.items()}
        self.exp_avg = {name: np.zeros((0, w)) for name, w in PARAM_GROUPS.items()}
        self.exp_avg_sq = {name: np.zeros((0, w)) for name, w in PARAM_GROUPS.items()}
        self.steps = np.zeros(0, dtype=np.int64)

    def __len__(self):
        return self.params["positions"].shape[0]

    @property
    def positions(self):
        return self.params["positions"]

    @property
    def log_scales(self):
        return self.params["log_scales"]

    @property
    def rotations(self):
        return self.params["rotations"]

    @property
    def opacity_logits(self):
        return self.params["opacity_logits"][:, 0]

    @property
    def colors(self):
        return self.params["colors"]

    @property
    def scales(self):
        return np.exp(self.params["log_scales"])

    @property
    def opacities(self):
        return sigmoid(self.params["opacity_logits"][:, 0])

    @classmethod
    def from_arrays(cls, positions, scales, rotations=None, opacities=None, colors=None):
        gmap = cls()
        gmap.append_arrays(positions, scales, rotations, opacities, colors)
        return gmap

    def append_arrays(self, positions, scales, rotations=None, opacities=None, colors=None):
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = positions.shape[0]
        scales = np.asarray(scales, dtype=np.float64)
        if scales.ndim == 1:
            # one isotropic scale per Gaussian
            scales = scales.reshape(-1, 1)
        scales = np.broadcast_to(scales, (n, 3))
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if opacities is None:
            opacities = np.full(n, 0.5)
        if colors is None:
            colors = np.full((n, 3), 0.5)
        opacities = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        if np.any(scales <= 0):
            raise ValueError("Gaussian scale must be positive")
        if np.any((opacities <= 0) | (opacities >= 1)):
            raise ValueError("Gaussian opacity must lie strictly inside (0, 1)")
        new = {
            "positions": positions,
            "log_scales": np.log(scales),
            "rotations": np.asarray(rotations, dtype=np.float64).reshape(n, 4),
            "opacity_logits": logit(opacities).reshape(n, 1),
            "colors": np.asarray(colors, dtype=np.float64).reshape(n, 3),
        }
        for name, w in PARAM_GROUPS.items():
            self.params[name] = np.concatenate([self.params[name], new[name]])
            self.exp_avg[name] = np.concatenate([self.exp_avg[name], np.zeros((n, w))])
            self.exp_avg_sq[name] = np.concatenate([self.exp_avg_sq[name], np.zeros((n, w))])
        self.steps = np.concatenate([self.steps, np.zeros(n, dtype=np.int64)])
        return len(self)

    def keep(self, mask):
        """Drop every Gaussian whose mask entry is False, optimiser state included."""
        mask = np.asarray(mask, dtype=bool)
        for name in PARAM_GROUPS:
            self.params[name] = self.params[name][mask]
            self.exp_avg[name] = self.exp_avg[name][mask]
            self.exp_avg_sq[name] = self.exp_avg_sq[name][mask]
        self.steps = self.steps[mask]

    def copy(self):
        out = GaussianMap()
        for name in PARAM_GROUPS:
            out.params[name] = self.params[name].copy()
            out.exp_avg[name] = self.exp_avg[name].copy()
            out.exp_avg_sq[name] = self.exp_avg_sq[name].copy()
        out.steps = self.steps.copy()
        return out

    def gaussian(self, i) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            scale=self.scales[i],
            rotation=self.rotations[i] / np.linalg.norm(self.rotations[i]),
            opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
        )

    def __iter__(self):
        for i in range(len(self)):
            yield self.gaussian(i)


def insert_gaussians(gmap: GaussianMap, batch) -> int:
    """Append Gaussians to the map and return the new count.

    ``batch`` is a sequence of :class:`Gaussian` or another :class:`GaussianMap`.
    New entries start with zeroed optimiser moments.
    """
    if isinstance(batch, GaussianMap):
        if len(batch) == 0:
            return len(gmap)
        return gmap.append_arrays(batch.positions, batch.scales, batch.rotations,
                                  batch.opacities, batch.colors)
    batch = list(batch)
    if not batch:
        return len(gmap)
    return gmap.append_arrays(
        np.stack([g.position for g in batch]),
        np.stack([g.scale for g in batch]),
        np.stack([g.rotation for g in batch]),
        np.array([g.opacity for g in batch]),
        np.stack([g.color for g in batch]),
    )
