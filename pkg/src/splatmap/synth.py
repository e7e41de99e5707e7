"""Synthetic scenes, camera trajectories and a simulated sparse tracker.

Ground-truth images are rendered with the package's own rasterizer from a
ground-truth Gaussian map. The simulated tracker keeps a persistent pool of
landmarks: every frame re-observes visible pool landmarks that sit on strong
image gradients and tops the pool up with new high-gradient pixels, so the
same world points recur across frames the way a feature tracker's map points
do.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .gaussians import GaussianMap
from .geometry import Intrinsics, Pose, backproject, look_at, project_points, se3_exp
from .management import FrameInput
from .rasterizer import render, render_depth

SCENES = ("plane", "plane-patch", "gaussian-cloud", "corridor")
TRAJECTORIES = ("orbit", "sweep")


@dataclass
class SynthConfig:
    seed: int = 0
    scene: str = "plane"
    gaussian_count: int = 200
    trajectory: str = "orbit"
    frames: int = 60
    image_size: int = 96
    tracker_points: int = 120
    pose_noise_rot_deg: float = 0.0
    pose_noise_trans: float = 0.0
    background: tuple = (0.0, 0.0, 0.0)
    # world-space box (xmin, xmax, ymin, ymax) on the plane where the tracker sees nothing
    tracker_exclusion: tuple | None = None

    def __post_init__(self):
        if self.scene not in SCENES:
            raise ValueError(f"unknown scene {self.scene!r}; expected one of {SCENES}")
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.gaussian_count <= 0 or self.frames <= 0 or self.tracker_points <= 0:
            raise ValueError("counts must be positive")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        self.background = tuple(float(c) for c in self.background)
        if self.tracker_exclusion is not None:
            self.tracker_exclusion = tuple(float(c) for c in self.tracker_exclusion)

    def to_dict(self):
        return asdict(self)


PRESETS = {
    "plane": SynthConfig(scene="plane"),
    "plane-patch": SynthConfig(scene="plane-patch", tracker_exclusion=(-0.45, 0.45, -0.45, 0.45)),
    "gaussian-cloud": SynthConfig(scene="gaussian-cloud", gaussian_count=300),
    "corridor": SynthConfig(scene="corridor", trajectory="sweep", gaussian_count=240, frames=64),
    "noisy-plane": SynthConfig(scene="plane", pose_noise_rot_deg=0.5, pose_noise_trans=0.01),
}


@dataclass
class SynthScene:
    config: SynthConfig
    gt_map: GaussianMap
    K: Intrinsics
    frames: list                     # FrameInput with tracker poses and points
    true_poses: list
    depth_maps: dict                 # frame index -> (H, W) ground-truth depth
    segments: dict = field(default_factory=dict)   # name -> frame indices


def _plane_map(rng, count, half, z=0.0, sigma=None, flat=0.004):
    pos = np.c_[rng.uniform(-half, half, (count, 2)), np.full(count, z)]
    if sigma is None:
        sigma = 0.75 * (2 * half) / np.sqrt(count)
    scales = np.c_[sigma * rng.uniform(0.7, 1.3, (count, 2)), np.full(count, flat)]
    ang = rng.uniform(0, np.pi, count)
    rot = np.c_[np.cos(ang / 2), np.zeros(count), np.zeros(count), np.sin(ang / 2)]
    colors = rng.uniform(0.05, 0.95, (count, 3))
    opac = rng.uniform(0.85, 0.97, count)
    return GaussianMap.from_arrays(pos, scales, rot, opac, colors)


def _wall_map(rng, count, x0, x1, z, height, flat=0.004):
    """Gaussians on the plane ``Z = z`` (facing -Z cameras), spanning ``x0..x1``."""
    area = (x1 - x0) * height
    sigma = 0.75 * np.sqrt(area / count)
    pos = np.c_[rng.uniform(x0, x1, count), rng.uniform(-height / 2, height / 2, count),
                np.full(count, z)]
    scales = np.c_[sigma * rng.uniform(0.7, 1.3, (count, 2)), np.full(count, flat)]
    ang = rng.uniform(0, np.pi, count)
    rot = np.c_[np.cos(ang / 2), np.zeros(count), np.zeros(count), np.sin(ang / 2)]
    return GaussianMap.from_arrays(pos, scales, rot, rng.uniform(0.85, 0.97, count),
                                   rng.uniform(0.05, 0.95, (count, 3)))


def _merge(*maps):
    out = GaussianMap()
    for m in maps:
        out.append_arrays(m.positions, m.scales, m.rotations, m.opacities, m.colors)
    return out


def build_scene_map(cfg: SynthConfig, rng) -> GaussianMap:
    n = cfg.gaussian_count
    if cfg.scene == "plane":
        return _plane_map(rng, n, 1.5)
    if cfg.scene == "plane-patch":
        base = _plane_map(rng, n, 1.5)
        # fine, high-contrast checker-like patch sitting just above the base plane
        m = 8
        xs = np.linspace(-0.4, 0.4, m)
        gx, gy = np.meshgrid(xs, xs)
        pos = np.c_[gx.ravel(), gy.ravel(), np.full(m * m, -0.002)]
        checker = ((np.arange(m)[:, None] + np.arange(m)[None, :]) % 2).ravel()
        colors = np.where(checker[:, None] == 1, [[0.95, 0.9, 0.2]], [[0.1, 0.05, 0.4]])
        patch = GaussianMap.from_arrays(pos, np.c_[np.full((m * m, 2), 0.05), np.full(m * m, 0.004)],
                                        None, np.full(m * m, 0.97), colors)
        return _merge(base, patch)
    if cfg.scene == "gaussian-cloud":
        pos = np.c_[rng.uniform(-0.8, 0.8, (n, 2)), rng.uniform(-0.4, 0.4, n)]
        q = rng.normal(size=(n, 4))
        return GaussianMap.from_arrays(pos, rng.uniform(0.04, 0.12, (n, 3)),
                                       q / np.linalg.norm(q, axis=1, keepdims=True),
                                       rng.uniform(0.6, 0.95, n), rng.uniform(0.05, 0.95, (n, 3)))
    if cfg.scene == "corridor":
        # two disjoint rooms along x, separated by a gap
        a = _wall_map(rng, n // 2, -3.2, -0.6, 0.0, 2.6)
        b = _wall_map(rng, n - n // 2, 0.6, 3.2, 0.0, 2.6)
        return _merge(a, b)
    raise ValueError(cfg.scene)


def make_intrinsics(size) -> Intrinsics:
    f = 0.85 * size
    c = (size - 1) / 2.0
    return Intrinsics(f, f, c, c, size, size)


def build_trajectory(cfg: SynthConfig):
    n = cfg.frames
    poses = []
    if cfg.trajectory == "orbit":
        for i in range(n):
            a = 2 * np.pi * i / n
            eye = np.array([0.55 * np.cos(a), 0.55 * np.sin(a), -1.6])
            target = np.array([0.45 * np.cos(a + 0.6), 0.45 * np.sin(a + 0.6), 0.0])
            poses.append(look_at(eye, target))
    else:
        # sweep along +x past one segment, then the next, facing the walls
        xs = np.linspace(-2.6, 2.6, n)
        for i, x in enumerate(xs):
            eye = np.array([x, 0.15 * np.sin(2 * np.pi * i / n), -1.5])
            poses.append(look_at(eye, eye + np.array([0.0, 0.0, 1.5])))
    return poses


def gradient_magnitude(image):
    gray = image @ np.array([0.299, 0.587, 0.114])
    gx = ndimage.sobel(gray, axis=1, mode="reflect")
    gy = ndimage.sobel(gray, axis=0, mode="reflect")
    return np.hypot(gx, gy)


class SimulatedTracker:
    """Persistent-landmark sparse tracker over ground-truth renders."""

    def __init__(self, rng, n_points, exclusion=None):
        self.rng = rng
        self.n_points = n_points
        self.exclusion = exclusion
        self.landmarks = np.zeros((0, 3))

    def _excluded(self, world):
        if self.exclusion is None or len(world) == 0:
            return np.zeros(len(world), dtype=bool)
        x0, x1, y0, y1 = self.exclusion
        return ((world[:, 0] >= x0) & (world[:, 0] <= x1)
                & (world[:, 1] >= y0) & (world[:, 1] <= y1))

    def observe(self, image, depth, true_pose: Pose, tracker_pose: Pose, K: Intrinsics):
        grad = gradient_magnitude(image)
        valid = np.isfinite(depth)
        if not valid.any():
            return np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0)
        thresh = np.quantile(grad[valid], 0.75)
        strong = valid & (grad >= thresh) & (grad > 1e-6)

        # re-observe existing landmarks that are visible and on strong gradients
        obs_pix, obs_depth = [], []
        if len(self.landmarks):
            pix, z = project_points(true_pose, K, self.landmarks)
            ok = np.isfinite(pix[:, 0]) & K.contains(np.nan_to_num(pix, nan=-1e9))
            idx = np.flatnonzero(ok)
            u = np.rint(pix[idx, 0]).astype(int)
            v = np.rint(pix[idx, 1]).astype(int)
            d = depth[v, u]
            vis = strong[v, u] & (np.abs(z[idx] - d) < 0.02 * d)
            idx = idx[vis]
            if len(idx) > self.n_points:
                idx = np.sort(self.rng.choice(len(idx), self.n_points, replace=False))
            obs_pix.append(pix[idx])
            obs_depth.append(z[idx])
        n_old = sum(len(d) for d in obs_depth)

        need = self.n_points - n_old
        if need > 0:
            vs, us = np.nonzero(strong)
            if len(vs):
                cand = self.rng.permutation(len(vs))
                pix_new = np.c_[us[cand], vs[cand]].astype(np.float64)
                d_new = depth[vs[cand], us[cand]]
                world_new = backproject(true_pose, K, pix_new, d_new)
                ok = np.flatnonzero(~self._excluded(world_new))[:need]
                self.landmarks = np.concatenate([self.landmarks, world_new[ok]])
                obs_pix.append(pix_new[ok])
                obs_depth.append(d_new[ok])

        if not obs_pix:
            return np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0)
        pix = np.concatenate(obs_pix)
        depths = np.concatenate(obs_depth)
        # express the observation in the tracker's (possibly drifted) frame
        return backproject(tracker_pose, K, pix, depths), pix, depths


def synth_scene(cfg: SynthConfig) -> SynthScene:
    """Build a deterministic synthetic sequence from ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    gt = build_scene_map(cfg, rng)
    K = make_intrinsics(cfg.image_size)
    poses = build_trajectory(cfg)
    tracker = SimulatedTracker(np.random.default_rng(cfg.seed + 1), cfg.tracker_points,
                               cfg.tracker_exclusion)
    noise_rng = np.random.default_rng(cfg.seed + 2)
    frames, depth_maps = [], {}
    for i, pose in enumerate(poses):
        image = np.clip(render(gt, pose, K, cfg.background).image, 0.0, 1.0)
        depth = render_depth(gt, pose, K)
        if cfg.pose_noise_rot_deg > 0 or cfg.pose_noise_trans > 0:
            twist = np.concatenate([
                noise_rng.normal(scale=np.radians(cfg.pose_noise_rot_deg) / np.sqrt(3), size=3),
                noise_rng.normal(scale=cfg.pose_noise_trans / np.sqrt(3), size=3)])
            tracker_pose = se3_exp(twist).compose(pose)
        else:
            tracker_pose = pose
        world, pix, d = tracker.observe(image, depth, pose, tracker_pose, K)
        frames.append(FrameInput(index=i, pose=tracker_pose, K=K, image=image,
                                 tracked_world=world, tracked_pixels=pix, tracked_depths=d))
        depth_maps[i] = depth
    segments = {}
    if cfg.scene == "corridor":
        centers = np.array([p.camera_center()[0] for p in poses])
        segments = {"A": [i for i, x in enumerate(centers) if x < 0],
                    "B": [i for i, x in enumerate(centers) if x >= 0]}
    return SynthScene(config=cfg, gt_map=gt, K=K, frames=frames, true_poses=poses,
                      depth_maps=depth_maps, segments=segments)
