"""Differentiable Gaussian splat rasterizer.

Forward: EWA projection of every Gaussian, a global front-to-back depth sort,
then per-pixel alpha compositing. Backward: exact adjoint of the compositing
followed by the analytic chain through the projection into position,
log-scale, raw quaternion, opacity logit, colour and a left-multiplied pose
twist ``[omega; v]``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np

from . import _kernels
from .gaussians import Gaussian, GaussianMap, sigmoid
from .geometry import DEPTH_EPSILON, Intrinsics, Pose, quat_to_rotmat

ALPHA_MAX = 0.999
T_STOP = 1e-4
COV_FLOOR = 0.3
# Mahalanobis radius^2 holding 99% of a 2D Gaussian's mass (-2 ln 0.01).
CULL_Q = 9.210340371976184
# Per-pixel evaluation window: beyond it the kernel is below 1e-12, so skipping
# it is invisible even to finite differences.
WINDOW_Q = 55.262042231857095
# Cheaper window (kernel below 1e-4) for optimisation loops; the backward pass
# stays the exact adjoint of whichever window the forward used.
FAST_WINDOW_Q = 18.420680743952367


if "NUMBA_THREADING_LAYER" not in os.environ:
    # avoids the TBB version probe; workqueue ships with every numba build
    numba.config.THREADING_LAYER = "workqueue"


def _apply_thread_cap():
    cap = os.environ.get("MAPPER_THREADS")
    if cap:
        try:
            n = max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS))
        except ValueError:
            return
        numba.set_num_threads(n)


_apply_thread_cap()


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


CULLED = None


@dataclass
class Projection:
    """Batched projection of a map into one camera (visible splats only)."""

    ids: np.ndarray          # map indices of visible Gaussians
    means2d: np.ndarray      # (M, 2)
    cov2d: np.ndarray        # (M, 2, 2), floor included
    conics: np.ndarray       # (M, 3) entries a, b, c of the inverse covariance
    depths: np.ndarray       # (M,)
    opacities: np.ndarray    # (M,)
    colors: np.ndarray       # (M, 3)
    # kept for the backward pass
    p_cam: np.ndarray
    J: np.ndarray
    cov_cam: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    quat_norm: np.ndarray


def project_map(gmap: GaussianMap, pose: Pose, K: Intrinsics) -> Projection:
    W = pose.R
    p_cam = gmap.positions @ W.T + pose.translation
    z = p_cam[:, 2]
    front = z > DEPTH_EPSILON
    zs = np.where(front, z, 1.0)

    qn = np.linalg.norm(gmap.rotations, axis=1)
    qn = np.where(qn > 0, qn, 1.0)
    rot = quat_to_rotmat(gmap.rotations / qn[:, None])
    scales = gmap.scales
    M = rot * scales[:, None, :]
    sigma = M @ M.transpose(0, 2, 1)
    cov_cam = W @ sigma @ W.T

    J = np.zeros((len(gmap), 2, 3))
    J[:, 0, 0] = K.fx / zs
    J[:, 0, 2] = -K.fx * p_cam[:, 0] / zs**2
    J[:, 1, 1] = K.fy / zs
    J[:, 1, 2] = -K.fy * p_cam[:, 1] / zs**2
    cov2d = J @ cov_cam @ J.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV_FLOOR
    cov2d[:, 1, 1] += COV_FLOOR
    means = np.stack([K.fx * p_cam[:, 0] / zs + K.cx, K.fy * p_cam[:, 1] / zs + K.cy], axis=1)

    rx = np.sqrt(CULL_Q * cov2d[:, 0, 0])
    ry = np.sqrt(CULL_Q * cov2d[:, 1, 1])
    onscreen = ((means[:, 0] + rx >= -0.5) & (means[:, 0] - rx <= K.width - 0.5)
                & (means[:, 1] + ry >= -0.5) & (means[:, 1] - ry <= K.height - 0.5))
    vis = front & onscreen & np.all(np.isfinite(cov2d), axis=(1, 2))
    ids = np.flatnonzero(vis)

    c = cov2d[ids]
    det = c[:, 0, 0] * c[:, 1, 1] - c[:, 0, 1] ** 2
    conics = np.stack([c[:, 1, 1] / det, -c[:, 0, 1] / det, c[:, 0, 0] / det], axis=1)
    return Projection(
        ids=ids,
        means2d=means[ids],
        cov2d=c,
        conics=conics,
        depths=z[ids],
        opacities=sigmoid(gmap.opacity_logits[ids]),
        colors=gmap.colors[ids],
        p_cam=p_cam[ids],
        J=J[ids],
        cov_cam=cov_cam[ids],
        rot=rot[ids],
        scales=scales[ids],
        quat_norm=qn[ids],
    )


def project_gaussian(g: Gaussian, pose: Pose, K: Intrinsics):
    """EWA projection of a single Gaussian; returns ``CULLED`` (None) if not visible."""
    proj = project_map(GaussianMap.from_arrays(g.position[None], g.scale[None], g.rotation[None],
                                               [g.opacity], g.color[None]), pose, K)
    if proj.ids.size == 0:
        return CULLED
    return Splat2D(mean2d=proj.means2d[0], cov2d=proj.cov2d[0], depth=float(proj.depths[0]),
                   color=proj.colors[0], opacity=float(proj.opacities[0]))


@dataclass
class RenderOutput:
    image: np.ndarray                 # (H, W, 3)
    final_transmittance: np.ndarray   # (H, W)
    accumulated_weight: np.ndarray    # (H, W), sum of alpha_i * T_i
    # auxiliary state for the backward pass
    projection: Projection
    order: np.ndarray
    xmin: np.ndarray
    xmax: np.ndarray
    ymin: np.ndarray
    ymax: np.ndarray
    window_q: float
    offsets: np.ndarray
    items: np.ndarray
    n_walked: np.ndarray
    background: np.ndarray


def _window_bounds(proj: Projection, order, K: Intrinsics, window_q):
    c = proj.cov2d[order]
    m = proj.means2d[order]
    rx = np.sqrt(window_q * c[:, 0, 0])
    ry = np.sqrt(window_q * c[:, 1, 1])
    xmin = np.clip(np.ceil(m[:, 0] - rx), 0, K.width - 1).astype(np.int64)
    xmax = np.clip(np.floor(m[:, 0] + rx), -1, K.width - 1).astype(np.int64)
    ymin = np.clip(np.ceil(m[:, 1] - ry), 0, K.height).astype(np.int64)
    ymax = np.clip(np.floor(m[:, 1] + ry), -1, K.height - 1).astype(np.int64)
    return xmin, xmax, ymin, ymax


def render(gmap: GaussianMap, pose: Pose, K: Intrinsics, background=(0.0, 0.0, 0.0),
           colors=None, window_q=WINDOW_Q) -> RenderOutput:
    """Render the map from ``pose``.

    ``colors`` optionally overrides per-Gaussian colours (shape ``(N, 3)``),
    which is how depth maps are composited. ``window_q`` bounds the squared
    Mahalanobis radius evaluated per splat.
    """
    background = np.asarray(background, dtype=np.float64).reshape(3)
    proj = project_map(gmap, pose, K)
    if colors is not None:
        proj.colors = np.asarray(colors, dtype=np.float64)[proj.ids]
    order = np.argsort(proj.depths, kind="stable")
    xmin, xmax, ymin, ymax = _window_bounds(proj, order, K, window_q)
    offsets, items = _kernels.bin_tiles(xmin, xmax, ymin, ymax, K.height, K.width)
    image, t_final, wsum, n_walked = _kernels.composite_forward(
        np.ascontiguousarray(proj.means2d[order]), np.ascontiguousarray(proj.conics[order]),
        np.ascontiguousarray(proj.opacities[order]), np.ascontiguousarray(proj.colors[order]),
        xmin, xmax, ymin, ymax, offsets, items, K.height, K.width, background,
        ALPHA_MAX, T_STOP, window_q)
    return RenderOutput(image=image, final_transmittance=t_final, accumulated_weight=wsum,
                        projection=proj, order=order, xmin=xmin, xmax=xmax, ymin=ymin, ymax=ymax, window_q=window_q,
                        offsets=offsets, items=items, n_walked=n_walked, background=background)


def render_depth(gmap: GaussianMap, pose: Pose, K: Intrinsics, min_weight=0.5):
    """Alpha-normalised expected camera depth; NaN where coverage is below ``min_weight``."""
    z = pose.apply(gmap.positions)[:, 2]
    out = render(gmap, pose, K, colors=np.repeat(z[:, None], 3, axis=1))
    w = out.accumulated_weight
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = out.image[..., 0] / w
    depth[w < min_weight] = np.nan
    return depth


@dataclass
class MapGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    pose: np.ndarray  # (6,) twist [omega; v], left-multiplied

    def as_dict(self):
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "opacity_logits": self.opacity_logits.reshape(-1, 1),
            "colors": self.colors,
        }


def _drot_dquat(q, dR):
    """Chain ``dL/dR`` (M, 3, 3) to ``dL/dq`` for unit quaternions ``q`` (M, 4)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0]
              - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1]
              - w * g[:, 1, 2] + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0]
              + z * g[:, 1, 2] - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0]
              - 2 * z * g[:, 1, 1] + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


def render_backward(gmap: GaussianMap, pose: Pose, K: Intrinsics, background, grad_image,
                    forward: RenderOutput | None = None) -> MapGradients:
    """Gradients of ``sum(grad_image * render(...).image)`` w.r.t. map and pose."""
    if forward is None:
        forward = render(gmap, pose, K, background)
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    if grad_image.shape != forward.image.shape:
        raise ValueError(f"grad_image shape {grad_image.shape} != {forward.image.shape}")
    proj = forward.projection
    order = forward.order
    n = len(gmap)
    out = MapGradients(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros(n),
                       np.zeros((n, 3)), np.zeros(6))
    if order.size == 0:
        return out

    packed = _kernels.composite_backward(
        np.ascontiguousarray(proj.means2d[order]), np.ascontiguousarray(proj.conics[order]),
        np.ascontiguousarray(proj.opacities[order]), np.ascontiguousarray(proj.colors[order]),
        forward.xmin, forward.xmax, forward.ymin, forward.ymax, forward.offsets, forward.items, K.height, K.width,
        forward.background, ALPHA_MAX, forward.window_q,
        forward.final_transmittance, forward.n_walked, grad_image)
    g = np.empty_like(packed)
    g[order] = packed  # back to projection order

    d_mean = g[:, 0:2]
    A = np.empty((len(g), 2, 2))
    A[:, 0, 0] = proj.conics[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = proj.conics[:, 1]
    A[:, 1, 1] = proj.conics[:, 2]
    gA = np.empty_like(A)
    gA[:, 0, 0] = g[:, 2]
    gA[:, 0, 1] = gA[:, 1, 0] = 0.5 * g[:, 3]
    gA[:, 1, 1] = g[:, 4]
    g_cov2d = -A @ gA @ A

    J = proj.J
    Jt = J.transpose(0, 2, 1)
    g_cov_cam = Jt @ g_cov2d @ J
    g_J = 2.0 * g_cov2d @ J @ proj.cov_cam

    x, y, z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    fx, fy = K.fx, K.fy
    g_pc = np.empty((len(g), 3))
    g_pc[:, 0] = d_mean[:, 0] * fx / z - g_J[:, 0, 2] * fx / z**2
    g_pc[:, 1] = d_mean[:, 1] * fy / z - g_J[:, 1, 2] * fy / z**2
    g_pc[:, 2] = (-d_mean[:, 0] * fx * x / z**2 - d_mean[:, 1] * fy * y / z**2
                  - g_J[:, 0, 0] * fx / z**2 + g_J[:, 0, 2] * 2 * fx * x / z**3
                  - g_J[:, 1, 1] * fy / z**2 + g_J[:, 1, 2] * 2 * fy * y / z**3)

    W = pose.R
    ids = proj.ids
    out.positions[ids] = g_pc @ W

    g_sigma = W.T @ g_cov_cam @ W
    M = proj.rot * proj.scales[:, None, :]
    g_M = 2.0 * g_sigma @ M
    g_scale = np.einsum("nij,nij->nj", g_M, proj.rot)
    out.log_scales[ids] = g_scale * proj.scales
    g_R = g_M * proj.scales[:, None, :]
    q_raw = gmap.rotations[ids]
    qn = q_raw / proj.quat_norm[:, None]
    g_qn = _drot_dquat(qn, g_R)
    g_q = (g_qn - qn * np.sum(qn * g_qn, axis=1, keepdims=True)) / proj.quat_norm[:, None]
    out.rotations[ids] = g_q

    o = proj.opacities
    out.opacity_logits[ids] = g[:, 5] * o * (1.0 - o)
    out.colors[ids] = g[:, 6:9]

    # left-multiplied twist: d p_cam = omega x p_cam + v, d cov_cam = [w]x C + C [w]x^T
    mx = np.einsum("nij,njk->ik", proj.cov_cam, g_cov_cam)
    g_omega = np.cross(proj.p_cam, g_pc).sum(axis=0)
    g_omega += 2.0 * np.array([mx[1, 2] - mx[2, 1], mx[2, 0] - mx[0, 2], mx[0, 1] - mx[1, 0]])
    out.pose = np.concatenate([g_omega, g_pc.sum(axis=0)])
    return out
