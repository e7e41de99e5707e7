"""Image metrics: per-pixel SSIM, the photometric training loss, MAE and PSNR.

Images are ``(H, W, 3)`` float arrays with values in [0, 1].
"""

from functools import lru_cache

import numpy as np

from .errors import DimensionMismatch

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
LAMBDA_SSIM = 0.2
PSNR_CAP = 100.0


def _check_same(a, b):
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


@lru_cache(maxsize=32)
def _blur_matrix(n):
    """Dense 1-D Gaussian blur operator with half-sample reflective borders."""
    r = SSIM_WINDOW // 2
    k = np.arange(-r, r + 1)
    w = np.exp(-0.5 * (k / SSIM_SIGMA) ** 2)
    w /= w.sum()
    B = np.zeros((n, n))
    for i in range(n):
        for off, wk in zip(k, w):
            j = i + off
            # reflect about the outer pixel edges: -1 -> 0, n -> n-1
            while j < 0 or j >= n:
                j = -j - 1 if j < 0 else 2 * n - j - 1
            B[i, j] += wk
    B.setflags(write=False)
    return B


def _blur(x):
    """Blur every channel of ``(H, W, C)`` with the SSIM window."""
    Bh = _blur_matrix(x.shape[0])
    Bw = _blur_matrix(x.shape[1])
    return np.einsum("ij,jkc,lk->ilc", Bh, x, Bw, optimize=True)


def _blur_adjoint(x):
    Bh = _blur_matrix(x.shape[0])
    Bw = _blur_matrix(x.shape[1])
    return np.einsum("ji,jkc,kl->ilc", Bh, x, Bw, optimize=True)


def _ssim_terms(a, b):
    mu_a = _blur(a)
    mu_b = _blur(b)
    e_aa = _blur(a * a)
    e_bb = _blur(b * b)
    e_ab = _blur(a * b)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + SSIM_C1
    n2 = 2 * cov + SSIM_C2
    d1 = mu_a**2 + mu_b**2 + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return (n1 * n2) / (d1 * d2), (mu_a, mu_b, n1, n2, d1, d2)


def ssim_channels(a, b):
    """Per-pixel, per-channel SSIM ``(H, W, C)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    return _ssim_terms(a, b)[0]


def ssim_map(a, b):
    """Per-pixel SSIM averaged over channels, ``(H, W)`` in [-1, 1]."""
    return ssim_channels(a, b).mean(axis=2)


def ssim(a, b):
    return float(ssim_channels(a, b).mean())


def _mean_ssim_grad(a, b):
    """Mean SSIM over all pixels and channels, and its gradient w.r.t. ``a``."""
    s, (mu_a, mu_b, n1, n2, d1, d2) = _ssim_terms(a, b)
    g = 1.0 / s.size
    d_mu_a = g * s * (2 * mu_b / n1 - 2 * mu_a / d1 - 2 * mu_b / n2 + 2 * mu_a / d2)
    d_e_aa = g * s * (-1.0 / d2)
    d_e_ab = g * s * (2.0 / n2)
    grad = _blur_adjoint(d_mu_a) + 2 * a * _blur_adjoint(d_e_aa) + b * _blur_adjoint(d_e_ab)
    return float(s.mean()), grad


def photometric_loss(rendered, observed, lambda_ssim=LAMBDA_SSIM):
    """``(1 - lambda) * L1 + lambda * (1 - mean SSIM)`` and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    _check_same(rendered, observed)
    diff = rendered - observed
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    loss = (1.0 - lambda_ssim) * l1
    if lambda_ssim != 0.0:
        mean_ssim, g_ssim = _mean_ssim_grad(rendered, observed)
        loss += lambda_ssim * (1.0 - mean_ssim)
        grad -= lambda_ssim * g_ssim
    return loss, grad


def mae(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    return float(np.abs(a - b).mean())


def psnr(a, b, cap=PSNR_CAP):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return cap
    return min(cap, 10.0 * np.log10(1.0 / mse))
