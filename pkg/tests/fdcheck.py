"""Central finite-difference oracle for the renderer's analytic gradients."""

import numpy as np

from splatmap.gaussians import PARAM_GROUPS, GaussianMap
from splatmap.geometry import Intrinsics, quat_normalize, se3_exp
from splatmap.rasterizer import render, render_backward

H = 1e-4
REL_TOL = 1e-4
ABS_TOL = 1e-6
TINY = 1e-8


def random_scene(rng, n=None, size=32):
    n = int(rng.integers(1, 11)) if n is None else n
    K = Intrinsics(30.0, 30.0, (size - 1) / 2, (size - 1) / 2, size, size)
    pos = np.c_[rng.uniform(-0.5, 0.5, (n, 2)), rng.uniform(2.0, 3.0, n)]
    scales = rng.uniform(0.05, 0.2, (n, 3))
    rot = quat_normalize(rng.normal(size=(n, 4)))
    opacity = rng.uniform(0.05, 0.7, n)
    color = rng.uniform(0.0, 1.0, (n, 3))
    gmap = GaussianMap.from_arrays(pos, scales, rot, opacity, color)
    pose = se3_exp(rng.normal(scale=0.02, size=6))
    background = rng.uniform(0.0, 1.0, 3)
    weights = rng.normal(size=(size, size, 3))
    return gmap, pose, K, background, weights


def _error(analytic, numeric):
    mag = max(abs(analytic), abs(numeric))
    if mag < TINY:
        return abs(analytic - numeric), abs(analytic - numeric) < ABS_TOL
    err = abs(analytic - numeric) / mag
    return err, err < REL_TOL


def check_scene(gmap, pose, K, background, weights):
    """Compare every analytic gradient with central differences.

    Returns ``(worst relative error, list of failures)``. The scalar under
    test is ``sum(weights * image)``, so ``weights`` is the image gradient.
    """
    def f(gm, p):
        return float(np.sum(weights * render(gm, p, K, background).image))

    backward = render_backward(gmap, pose, K, background, weights)
    grads = backward.as_dict()
    worst, failures = 0.0, []
    for name in PARAM_GROUPS:
        base = gmap.params[name]
        for i in range(base.shape[0]):
            for j in range(base.shape[1]):
                # positions step relative to the splat's own extent, the rest are unitless
                scale = gmap.scales[i].min() if name == "positions" else 1.0
                h = H * scale
                plus, minus = gmap.copy(), gmap.copy()
                plus.params[name][i, j] += h
                minus.params[name][i, j] -= h
                numeric = (f(plus, pose) - f(minus, pose)) / (2 * h)
                err, ok = _error(grads[name][i, j], numeric)
                worst = max(worst, err)
                if not ok:
                    failures.append((name, i, j, grads[name][i, j], numeric))
    pose_grad = backward.pose
    # camera steps move the splats by about a 1e-4 fraction of the smallest extent
    extent = gmap.scales.min()
    depth = pose.apply(gmap.positions)[:, 2].max()
    steps = [H * extent / depth] * 3 + [H * extent] * 3
    for k in range(6):
        e = np.zeros(6)
        e[k] = steps[k]
        numeric = (f(gmap, se3_exp(e).compose(pose)) - f(gmap, se3_exp(-e).compose(pose))) / (2 * steps[k])
        err, ok = _error(pose_grad[k], numeric)
        worst = max(worst, err)
        if not ok:
            failures.append(("pose", k, 0, pose_grad[k], numeric))
    return worst, failures
