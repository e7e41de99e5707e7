"""View selection and joint optimisation of Gaussians and keyframe poses.

Each keyframe step optimises the map against the current view, the most
covisible recent frames from a small FIFO bank, and historical keyframes
drawn with probability proportional to ``exp(sigma1 * (j - i)) * exp(sigma2 * err_j)``,
where ``err_j`` is the latest mean absolute error of keyframe ``j``.
"""

from __future__ import annotations

import dataclasses
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyKeyframeSet, NoKeyframes, NoTrackedPoints
from .gaussians import PARAM_GROUPS, GaussianMap
from .geometry import Pose, project_points, se3_exp
from .management import FrameInput
from .metrics import LAMBDA_SSIM, mae, photometric_loss
from .rasterizer import FAST_WINDOW_Q, render, render_backward


@dataclass
class SelectionConfig:
    covis_threshold: float = 0.85
    t_k: int = 15
    n_local: int = 1
    local_bank_size: int = 5
    t_local: int = 3
    n_global: int = 2
    sigma1: float = 0.05
    sigma2: float = 10.0
    iters_per_keyframe: int = 60
    err_init: float = 1.0
    use_global_views: bool = True
    refine_poses: bool = True
    prune_opacity: float = 0.005


@dataclass
class OptimizerConfig:
    lr_position: float = 1.6e-4      # multiplied by scene_extent
    lr_log_scale: float = 0.02
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_color: float = 2.5e-3
    lr_pose_rot: float = 2e-5
    lr_pose_trans: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    scene_extent: float = 1.0
    lambda_ssim: float = LAMBDA_SSIM
    render_window_q: float = FAST_WINDOW_Q
    # post-refinement decays every learning rate by half each this many steps
    post_lr_halflife: float = 1000.0
    post_lr_floor: float = 0.01

    def scaled(self, factor) -> "OptimizerConfig":
        """Copy with every learning rate multiplied by ``factor``."""
        return dataclasses.replace(
            self, lr_position=self.lr_position * factor, lr_log_scale=self.lr_log_scale * factor,
            lr_rotation=self.lr_rotation * factor, lr_opacity=self.lr_opacity * factor,
            lr_color=self.lr_color * factor, lr_pose_rot=self.lr_pose_rot * factor,
            lr_pose_trans=self.lr_pose_trans * factor)

    def post_lr_factor(self, step) -> float:
        if self.post_lr_halflife <= 0:
            return 1.0
        return max(self.post_lr_floor, 0.5 ** (step / self.post_lr_halflife))

    def group_lrs(self):
        return {
            "positions": self.lr_position * self.scene_extent,
            "log_scales": self.lr_log_scale,
            "rotations": self.lr_rotation,
            "opacity_logits": self.lr_opacity,
            "colors": self.lr_color,
        }


@dataclass(eq=False)
class Keyframe:
    """A frame taking part in optimisation, with its own refinable pose."""

    frame: FrameInput
    kf_id: int = -1                  # ordinal in the keyframe store; -1 for bank-only views
    pose: Pose = None
    err: float = 1.0
    last_optimized: int = -1
    pose_m: np.ndarray = field(default_factory=lambda: np.zeros(6))
    pose_v: np.ndarray = field(default_factory=lambda: np.zeros(6))
    pose_steps: int = 0

    def __post_init__(self):
        if self.pose is None:
            self.pose = self.frame.pose

    @property
    def index(self):
        return self.frame.index


class LocalBank:
    """FIFO of recent frames, one admitted every ``t_local`` frames."""

    def __init__(self, size, t_local):
        self.size = size
        self.t_local = max(1, t_local)
        self.views = deque()
        self.counter = 0

    def offer(self, view: Keyframe) -> bool:
        admit = self.counter % self.t_local == 0
        self.counter += 1
        if admit and self.size > 0:
            self.views.append(view)
            while len(self.views) > self.size:
                self.views.popleft()
        return admit

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)


def covisibility(a: FrameInput, b: FrameInput) -> float:
    """Fraction of ``a``'s tracked points that land inside ``b``'s image in front of it."""
    if a.n_tracked == 0:
        raise NoTrackedPoints(f"frame {a.index} has no tracked points")
    pix, z = project_points(b.pose, b.K, a.tracked_world)
    inside = (z > 0) & np.isfinite(pix[:, 0]) & b.K.contains(np.nan_to_num(pix, nan=-1e9))
    return float(inside.mean())


def maybe_add_keyframe(store: list, frame: FrameInput, cfg: SelectionConfig) -> bool:
    """Admit ``frame`` as a keyframe when overlap is low or ``t_k`` frames have passed."""
    if not store:
        admit = True
    else:
        last = store[-1].frame
        elapsed = frame.index - last.index
        if elapsed >= cfg.t_k:
            admit = True
        elif frame.n_tracked == 0:
            admit = False
        else:
            admit = covisibility(frame, last) < cfg.covis_threshold
    if admit:
        store.append(Keyframe(frame=frame, kf_id=len(store), err=cfg.err_init))
    return admit


def select_local_views(bank, current: FrameInput, n_local: int):
    """The ``n_local`` bank views most covisible with ``current``; newer wins ties."""
    views = [v for v in bank if v.index != current.index]
    if n_local <= 0 or not views or current.n_tracked == 0:
        return []
    scored = [(covisibility(current, v.frame), pos, v) for pos, v in enumerate(views)]
    scored.sort(key=lambda t: (-t[0], -t[1]))
    return [v for _, _, v in scored[:n_local]]


def global_sampling_probs(indices, errs, current_index, sigma1, sigma2):
    """Normalised ``exp(sigma1 * (j - i) + sigma2 * err_j)`` over keyframes ``j``."""
    indices = np.asarray(indices, dtype=np.float64)
    errs = np.asarray(errs, dtype=np.float64)
    if indices.size == 0:
        raise EmptyKeyframeSet("no keyframes to sample from")
    logw = sigma1 * (indices - current_index) + sigma2 * errs
    logw -= logw.max()
    w = np.exp(logw)
    return w / w.sum()


def sample_global_views(keyframes, current_index, n_global, rng, sigma1, sigma2, exclude=()):
    """Draw ``n_global`` keyframes without replacement, renormalising after each draw.

    ``exclude`` holds keyframe objects never to draw (the current view and the
    chosen local views).
    """
    skip = {id(v) for v in exclude}
    pool = [kf for kf in keyframes if id(kf) not in skip]
    if n_global <= 0 or not pool:
        return []
    if n_global >= len(pool):
        return pool
    p = global_sampling_probs([kf.kf_id for kf in pool], [kf.err for kf in pool],
                              current_index, sigma1, sigma2)
    chosen = []
    alive = np.ones(len(pool), dtype=bool)
    for _ in range(n_global):
        w = np.where(alive, p, 0.0)
        cdf = np.cumsum(w)
        j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        j = min(j, len(pool) - 1)
        while not alive[j]:  # guard against landing on a zero-width slot
            j -= 1
        alive[j] = False
        chosen.append(pool[j])
    return chosen


def adam_update_map(gmap: GaussianMap, grads: dict, opt: OptimizerConfig, mask=None):
    """One Adam step on the map. Only Gaussians in ``mask`` (default all) are touched."""
    if len(gmap) == 0:
        return
    idx = np.arange(len(gmap)) if mask is None else np.flatnonzero(mask)
    if idx.size == 0:
        return
    gmap.steps[idx] += 1
    t = gmap.steps[idx][:, None].astype(np.float64)
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    for name, lr in opt.group_lrs().items():
        g = grads[name][idx]
        m = gmap.exp_avg[name][idx] * opt.beta1 + (1 - opt.beta1) * g
        v = gmap.exp_avg_sq[name][idx] * opt.beta2 + (1 - opt.beta2) * g * g
        gmap.exp_avg[name][idx] = m
        gmap.exp_avg_sq[name][idx] = v
        gmap.params[name][idx] -= lr * (m / bc1) / (np.sqrt(v / bc2) + opt.adam_eps)
    gmap.params["colors"][idx] = np.clip(gmap.params["colors"][idx], 0.0, 1.0)
    q = gmap.params["rotations"][idx]
    gmap.params["rotations"][idx] = q / np.linalg.norm(q, axis=1, keepdims=True)


def refine_pose(kf: Keyframe, twist_grad, opt: OptimizerConfig):
    """Adam step on a left-multiplied twist; the pose stays a unit-quaternion rigid motion."""
    g = np.asarray(twist_grad, dtype=np.float64)
    if not np.any(g):
        return
    kf.pose_steps += 1
    kf.pose_m = opt.beta1 * kf.pose_m + (1 - opt.beta1) * g
    kf.pose_v = opt.beta2 * kf.pose_v + (1 - opt.beta2) * g * g
    m_hat = kf.pose_m / (1 - opt.beta1**kf.pose_steps)
    v_hat = kf.pose_v / (1 - opt.beta2**kf.pose_steps)
    lr = np.array([opt.lr_pose_rot] * 3 + [opt.lr_pose_trans] * 3)
    step = -lr * m_hat / (np.sqrt(v_hat) + 1e-12)
    kf.pose = se3_exp(step).compose(kf.pose)


@dataclass
class StepReport:
    views: list
    losses: list
    err_updates: dict
    pruned: int = 0


def optimize_views(gmap, views, frozen, opt, background, step_counter, refine_poses=True):
    """One joint iteration: render every view, backprop, update map and poses.

    ``frozen`` holds views whose pose must not move. Returns per-view losses and
    the new MAE of each view.
    """
    n = len(gmap)
    acc = {name: np.zeros((n, w)) for name, w in PARAM_GROUPS.items()}
    touched = np.zeros(n, dtype=bool)
    losses, errs, pose_grads = [], {}, []
    scale = 1.0 / len(views)
    for v in views:
        out = render(gmap, v.pose, v.frame.K, background, window_q=opt.render_window_q)
        loss, g_img = photometric_loss(out.image, v.frame.image, opt.lambda_ssim)
        grads = render_backward(gmap, v.pose, v.frame.K, background, g_img * scale, forward=out)
        for name, g in grads.as_dict().items():
            acc[name] += g
        touched[out.projection.ids] = True
        losses.append(loss)
        errs[id(v)] = mae(out.image, v.frame.image)
        pose_grads.append(grads.pose)
    adam_update_map(gmap, acc, opt, touched)
    frozen_ids = {id(v) for v in frozen}
    for v, pg in zip(views, pose_grads):
        v.err = errs[id(v)]
        v.last_optimized = step_counter
        if refine_poses and id(v) not in frozen_ids:
            refine_pose(v, pg, opt)
    return losses, errs


def prune_transparent(gmap: GaussianMap, threshold):
    """Remove Gaussians whose opacity fell below ``threshold``; returns how many."""
    if len(gmap) == 0 or threshold <= 0:
        return 0
    keep = gmap.opacities >= threshold
    dropped = int((~keep).sum())
    if dropped:
        gmap.keep(keep)
    return dropped


def map_update_step(gmap: GaussianMap, keyframes: list, bank: LocalBank, current: Keyframe,
                    cfg: SelectionConfig, opt: OptimizerConfig, rng,
                    background=(0.0, 0.0, 0.0), timer=None) -> StepReport:
    """Optimise the map for one keyframe over ``cfg.iters_per_keyframe`` iterations.

    Local views are chosen once; global views are re-drawn every iteration.
    Without global views the local budget grows by ``n_global`` so the number
    of views per iteration stays the same.
    """
    if not keyframes:
        raise NoKeyframes("map_update_step needs at least one keyframe")
    timer = timer or _NullTimer()
    n_local = cfg.n_local + (0 if cfg.use_global_views else cfg.n_global)
    with timer("view_selection"):
        local = select_local_views(bank, current.frame, n_local)
    report = StepReport(views=[], losses=[], err_updates={})
    for it in range(cfg.iters_per_keyframe):
        with timer("view_selection"):
            glob = []
            if cfg.use_global_views:
                glob = sample_global_views(keyframes, current.kf_id, cfg.n_global, rng,
                                           cfg.sigma1, cfg.sigma2, exclude=[current, *local])
        views = [current, *local, *glob]
        with timer("optimization"):
            losses, errs = optimize_views(gmap, views, [current], opt, background, it,
                                          cfg.refine_poses)
        report.views.append([v.index for v in views])
        report.losses.append(float(np.mean(losses)))
        for v in views:
            report.err_updates[v.index] = errs[id(v)]
    with timer("optimization"):
        report.pruned = prune_transparent(gmap, cfg.prune_opacity)
    return report


def post_refine(gmap: GaussianMap, keyframes: list, steps: int, cfg: SelectionConfig,
                opt: OptimizerConfig, rng, background=(0.0, 0.0, 0.0), start=0):
    """Extra optimisation after the online pass, drawing views uniformly over keyframes.

    Learning rates decay with the post-refinement step count; ``start`` (steps
    already taken) lets a later call continue the same schedule.
    """
    if steps <= 0 or not keyframes:
        return
    n_views = min(len(keyframes), 1 + cfg.n_local + cfg.n_global)
    for it in range(start, start + steps):
        pick = rng.choice(len(keyframes), size=n_views, replace=False)
        views = [keyframes[i] for i in sorted(pick)]
        optimize_views(gmap, views, [], opt.scaled(opt.post_lr_factor(it)), background, it,
                       cfg.refine_poses)
    prune_transparent(gmap, cfg.prune_opacity)


class _NullTimer:
    def __call__(self, name):
        return _NullContext()


class _NullContext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def rotation_error_deg(a: Pose, b: Pose):
    dR = a.R @ b.R.T
    return math.degrees(math.acos(max(-1.0, min(1.0, (np.trace(dR) - 1) / 2))))
