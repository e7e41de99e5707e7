"""Render a handful of Gaussians and compare analytic gradients with finite differences.

The renderer is differentiable by hand: every parameter of every Gaussian, and
the camera pose, receives an exact gradient. Here we perturb one colour, one
opacity logit and one position coordinate and watch the two numbers agree.
"""

import numpy as np

from splatmap.gaussians import GaussianMap
from splatmap.geometry import Intrinsics, Pose
from splatmap.rasterizer import render, render_backward

rng = np.random.default_rng(3)
n, size = 6, 32
K = Intrinsics(30.0, 30.0, (size - 1) / 2, (size - 1) / 2, size, size)
gmap = GaussianMap.from_arrays(np.c_[rng.uniform(-0.4, 0.4, (n, 2)), rng.uniform(2.0, 3.0, n)],
                               rng.uniform(0.05, 0.2, (n, 3)), rng.normal(size=(n, 4)),
                               rng.uniform(0.2, 0.7, n), rng.uniform(0, 1, (n, 3)))
pose = Pose.identity()
weights = rng.normal(size=(size, size, 3))


def objective(m):
    return float(np.sum(weights * render(m, pose, K).image))


grads = render_backward(gmap, pose, K, (0, 0, 0), weights).as_dict()
print(f"rendered {n} Gaussians into a {size}x{size} image")
for group, index, h in [("colors", (2, 1), 1e-4), ("opacity_logits", (4, 0), 1e-4),
                        ("positions", (0, 0), 1e-5)]:
    plus, minus = gmap.copy(), gmap.copy()
    plus.params[group][index] += h
    minus.params[group][index] -= h
    numeric = (objective(plus) - objective(minus)) / (2 * h)
    print(f"  d/d {group}{list(index)}: analytic {grads[group][index]:+.6f}  numeric {numeric:+.6f}")
