"""Gaussian seeding and densification.

New Gaussians come from two sources: the tracker's sparse feature points and a
handful of pixels where the current rendering disagrees structurally with the
observed image. Both are sized from their depth (``d / f + eps``) and pass
through the occupancy hash before they are added to the map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import NoTrackedPoints, NonPositiveInput
from .gaussians import GaussianMap
from .geometry import Intrinsics, Pose, backproject
from .metrics import ssim_map
from .mohv import Mohv

FEATURE = "feature"
ERROR_COMP = "error_comp"


@dataclass
class ManagementConfig:
    eps: float = 1e-4            # additive floor on Gaussian size, metres
    eps_e: float = 0.5           # SSIM threshold for error compensation
    k: int = 200                 # compensation pixels per keyframe
    opacity_init: float = 0.5
    grid_cells: int = 16         # stratification grid is grid_cells x grid_cells


@dataclass
class FrameInput:
    index: int
    pose: Pose
    K: Intrinsics
    image: np.ndarray
    tracked_world: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    tracked_pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    tracked_depths: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.tracked_world = np.asarray(self.tracked_world, dtype=np.float64).reshape(-1, 3)
        self.tracked_pixels = np.asarray(self.tracked_pixels, dtype=np.float64).reshape(-1, 2)
        self.tracked_depths = np.asarray(self.tracked_depths, dtype=np.float64).reshape(-1)

    @property
    def n_tracked(self):
        return self.tracked_world.shape[0]


@dataclass
class SeedCandidates:
    """A batch of seed candidates, one row per candidate."""

    world: np.ndarray
    pixels: np.ndarray
    depths: np.ndarray
    colors: np.ndarray
    source: np.ndarray  # FEATURE or ERROR_COMP per row

    def __len__(self):
        return self.world.shape[0]

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)),
                   np.zeros(0, dtype="<U10"))

    @classmethod
    def concat(cls, *batches):
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty()
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("world", "pixels", "depths", "colors", "source")))


class DepthProvider(Protocol):
    def depths(self, frame: FrameInput, pixels: np.ndarray) -> np.ndarray:
        """Depth per pixel; NaN marks "no estimate"."""


class GroundTruthDepth:
    """Looks depths up in per-frame depth maps (synthetic scenes)."""

    def __init__(self, depth_maps):
        self.depth_maps = depth_maps

    def depths(self, frame, pixels):
        dm = self.depth_maps.get(frame.index)
        if dm is None:
            return np.full(len(pixels), np.nan)
        px = np.asarray(pixels)
        u = np.clip(np.rint(px[:, 0]).astype(int), 0, dm.shape[1] - 1)
        v = np.clip(np.rint(px[:, 1]).astype(int), 0, dm.shape[0] - 1)
        d = dm[v, u].astype(np.float64)
        d[~(d > 0)] = np.nan
        return d


class NearestTrackedDepth:
    """Depth of the nearest tracked point within ``radius`` pixels."""

    def __init__(self, radius=40.0):
        self.radius = radius

    def depths(self, frame, pixels):
        pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        if frame.n_tracked == 0 or len(pixels) == 0:
            return np.full(len(pixels), np.nan)
        d2 = ((pixels[:, None, :] - frame.tracked_pixels[None, :, :]) ** 2).sum(axis=2)
        j = np.argmin(d2, axis=1)
        out = frame.tracked_depths[j].copy()
        out[d2[np.arange(len(pixels)), j] > self.radius**2] = np.nan
        return out


def gaussian_scale(d_t, f, eps):
    """World-space Gaussian size for a pixel at depth ``d_t`` and focal ``f``."""
    d_t = np.asarray(d_t, dtype=np.float64)
    if np.any(d_t < 0) or not f > 0 or eps < 0:
        raise NonPositiveInput("gaussian_scale needs d_t >= 0, f > 0, eps >= 0")
    out = d_t / f + eps
    return float(out) if out.ndim == 0 else out


def camera_scale(frame: FrameInput, eps=ManagementConfig.eps):
    """Lower median of the tracked points' Gaussian sizes."""
    if frame.n_tracked == 0:
        raise NoTrackedPoints(f"frame {frame.index} has no tracked points")
    s = np.sort(gaussian_scale(frame.tracked_depths, frame.K.focal, eps))
    return float(s[(len(s) - 1) // 2])


def bilinear_sample(image, pixels):
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    h, w = image.shape[:2]
    x = np.clip(pixels[:, 0], 0, w - 1)
    y = np.clip(pixels[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2) if w > 1 else np.zeros(len(x), int)
    y0 = np.minimum(np.floor(y).astype(int), h - 2) if h > 1 else np.zeros(len(y), int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bottom = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def seed_from_features(frame: FrameInput) -> SeedCandidates:
    n = frame.n_tracked
    if n == 0:
        return SeedCandidates.empty()
    return SeedCandidates(
        world=frame.tracked_world.copy(),
        pixels=frame.tracked_pixels.copy(),
        depths=frame.tracked_depths.copy(),
        colors=np.clip(bilinear_sample(frame.image, frame.tracked_pixels), 0.0, 1.0),
        source=np.full(n, FEATURE, dtype="<U10"),
    )


def select_error_pixels(ssim, k, eps_e, grid_cells=16):
    """Pick up to ``k`` pixels with SSIM below ``eps_e``, spread over a cell grid.

    Eligible pixels are ranked by ascending SSIM; each occupied cell contributes
    at most ``ceil(k / n_cells)`` of its worst pixels, and the union is cut back
    to the ``k`` lowest overall. Returns ``(x, y)`` integer pixel coordinates.
    """
    h, w = ssim.shape
    ys, xs = np.nonzero(ssim < eps_e)
    if k <= 0 or ys.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    vals = ssim[ys, xs]
    cell = (ys * grid_cells // h) * grid_cells + (xs * grid_cells // w)
    n_cells = np.unique(cell).size
    per_cell = math.ceil(k / n_cells)
    # stable sort: ascending SSIM, then raster order
    order = np.lexsort((ys * w + xs, vals))
    taken = {}
    chosen = []
    for i in order:
        c = cell[i]
        if taken.get(c, 0) < per_cell:
            taken[c] = taken.get(c, 0) + 1
            chosen.append(i)
            if len(chosen) == k:
                break
    chosen = np.array(chosen, dtype=np.int64)
    return np.stack([xs[chosen], ys[chosen]], axis=1)


def error_compensation(frame: FrameInput, rendered_image, k, eps_e, dp: DepthProvider,
                       grid_cells=16) -> SeedCandidates:
    """Seed candidates at pixels where the rendering's SSIM falls below ``eps_e``."""
    rendered_image = getattr(rendered_image, "image", rendered_image)
    s = ssim_map(rendered_image, frame.image)
    pix = select_error_pixels(s, k, eps_e, grid_cells)
    if len(pix) == 0:
        return SeedCandidates.empty()
    depths = np.asarray(dp.depths(frame, pix.astype(np.float64)), dtype=np.float64)
    ok = np.isfinite(depths) & (depths > 0)
    pix = pix[ok]
    depths = depths[ok]
    if len(pix) == 0:
        return SeedCandidates.empty()
    pixf = pix.astype(np.float64)
    return SeedCandidates(
        world=backproject(frame.pose, frame.K, pixf, depths),
        pixels=pixf,
        depths=depths,
        colors=np.clip(frame.image[pix[:, 1], pix[:, 0]], 0.0, 1.0),
        source=np.full(len(pix), ERROR_COMP, dtype="<U10"),
    )


def densify(gmap: GaussianMap, mohv: Mohv | None, frame: FrameInput,
            candidates: SeedCandidates, cfg: ManagementConfig = ManagementConfig()) -> int:
    """Filter candidates through the occupancy hash and add survivors to the map.

    Feature candidates are considered before error-compensation ones. Passing
    ``mohv=None`` keeps every candidate. Returns the number inserted.
    """
    if len(candidates) == 0:
        return 0
    order = np.concatenate([np.flatnonzero(candidates.source == FEATURE),
                            np.flatnonzero(candidates.source != FEATURE)])
    world = candidates.world[order]
    if mohv is not None:
        if frame.n_tracked:
            cam_scale = camera_scale(frame, cfg.eps)
        else:
            # no tracker points: size the camera from the candidates themselves
            s = np.sort(gaussian_scale(candidates.depths, frame.K.focal, cfg.eps))
            cam_scale = float(s[(len(s) - 1) // 2])
        kept = order[mohv.filter_candidates(world, mohv.level_for_scale(cam_scale))]
    else:
        kept = order
    if len(kept) == 0:
        return 0
    scales = gaussian_scale(candidates.depths[kept], frame.K.focal, cfg.eps)
    gmap.append_arrays(candidates.world[kept], scales, None,
                       np.full(len(kept), cfg.opacity_init), candidates.colors[kept])
    return len(kept)
