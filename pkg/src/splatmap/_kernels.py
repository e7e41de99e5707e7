"""Per-pixel compositing kernels (numba).

Splats arrive already sorted front to back. They are binned into square
tiles so each pixel only walks the splats whose window overlaps its tile; the
walk order inside a tile is the global depth order, so binning changes
nothing but speed. Inside a tile the loop is splat-major: each splat touches
only the pixels of its window, and every pixel keeps its own running state.
"""

import math

import numpy as np
from numba import njit, prange

# Fixed number of row chunks for gradient accumulation. Independent of the
# thread count so reductions happen in the same order on every machine.
N_CHUNKS = 16
TILE = 8


@njit(cache=True)
def bin_tiles(xmin, xmax, ymin, ymax, height, width):
    """CSR lists of splat indices per tile, tiles in raster order."""
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    m = xmin.shape[0]
    counts = np.zeros(tw * th + 1, dtype=np.int64)
    for s in range(m):
        if xmax[s] < xmin[s] or ymax[s] < ymin[s]:
            continue
        for ty in range(ymin[s] // TILE, ymax[s] // TILE + 1):
            for tx in range(xmin[s] // TILE, xmax[s] // TILE + 1):
                counts[ty * tw + tx + 1] += 1
    offsets = np.cumsum(counts)
    items = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for s in range(m):
        if xmax[s] < xmin[s] or ymax[s] < ymin[s]:
            continue
        for ty in range(ymin[s] // TILE, ymax[s] // TILE + 1):
            for tx in range(xmin[s] // TILE, xmax[s] // TILE + 1):
                t = ty * tw + tx
                items[fill[t]] = s
                fill[t] += 1
    return offsets, items


@njit(parallel=True, cache=True)
def composite_forward(means, conics, opacities, colors, xmin, xmax, ymin, ymax, offsets, items,
                      height, width, background, alpha_max, t_stop, q_cut):
    image = np.empty((height, width, 3))
    t_final = np.empty((height, width))
    weight_sum = np.empty((height, width))
    n_walked = np.empty((height, width), dtype=np.int64)
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    for tile in prange(tw * th):
        ty0 = (tile // tw) * TILE
        tx0 = (tile % tw) * TILE
        ty1 = min(ty0 + TILE, height) - 1
        tx1 = min(tx0 + TILE, width) - 1
        T = np.ones((TILE, TILE))
        acc = np.zeros((TILE, TILE, 4))
        last = np.full((TILE, TILE), offsets[tile], dtype=np.int64)
        for k in range(offsets[tile], offsets[tile + 1]):
            s = items[k]
            ca = conics[s, 0]
            cb = conics[s, 1]
            cc = conics[s, 2]
            for y in range(max(ymin[s], ty0), min(ymax[s], ty1) + 1):
                dy = y - means[s, 1]
                for x in range(max(xmin[s], tx0), min(xmax[s], tx1) + 1):
                    j = y - ty0
                    i = x - tx0
                    t = T[j, i]
                    if t < t_stop:
                        continue
                    dx = x - means[s, 0]
                    q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if q > q_cut:
                        continue
                    a = opacities[s] * math.exp(-0.5 * q)
                    if a > alpha_max:
                        a = alpha_max
                    w = a * t
                    acc[j, i, 0] += colors[s, 0] * w
                    acc[j, i, 1] += colors[s, 1] * w
                    acc[j, i, 2] += colors[s, 2] * w
                    acc[j, i, 3] += w
                    T[j, i] = t * (1.0 - a)
                    last[j, i] = k + 1
        for y in range(ty0, ty1 + 1):
            for x in range(tx0, tx1 + 1):
                j = y - ty0
                i = x - tx0
                t = T[j, i]
                image[y, x, 0] = acc[j, i, 0] + background[0] * t
                image[y, x, 1] = acc[j, i, 1] + background[1] * t
                image[y, x, 2] = acc[j, i, 2] + background[2] * t
                t_final[y, x] = t
                weight_sum[y, x] = acc[j, i, 3]
                n_walked[y, x] = last[j, i]
    return image, t_final, weight_sum, n_walked


@njit(parallel=True, cache=True)
def composite_backward(means, conics, opacities, colors, xmin, xmax, ymin, ymax, offsets, items,
                       height, width, background, alpha_max, q_cut,
                       t_final, n_walked, grad_image):
    """Adjoint of :func:`composite_forward`.

    Returns per-splat gradients packed as columns
    ``[d mean x, d mean y, d conic a, d conic b, d conic c, d opacity, d r, d g, d b]``.
    """
    m = opacities.shape[0]
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    n_tiles = tw * th
    per = (n_tiles + N_CHUNKS - 1) // N_CHUNKS
    buf = np.zeros((N_CHUNKS, m, 9))
    for ch in prange(N_CHUNKS):
        T = np.empty((TILE, TILE))
        acc = np.empty((TILE, TILE, 3))
        for tile in range(ch * per, min(n_tiles, (ch + 1) * per)):
            ty0 = (tile // tw) * TILE
            tx0 = (tile % tw) * TILE
            ty1 = min(ty0 + TILE, height) - 1
            tx1 = min(tx0 + TILE, width) - 1
            for y in range(ty0, ty1 + 1):
                for x in range(tx0, tx1 + 1):
                    t = t_final[y, x]
                    T[y - ty0, x - tx0] = t
                    acc[y - ty0, x - tx0, 0] = background[0] * t
                    acc[y - ty0, x - tx0, 1] = background[1] * t
                    acc[y - ty0, x - tx0, 2] = background[2] * t
            for k in range(offsets[tile + 1] - 1, offsets[tile] - 1, -1):
                s = items[k]
                ca = conics[s, 0]
                cb = conics[s, 1]
                cc = conics[s, 2]
                op = opacities[s]
                r = colors[s, 0]
                gr = colors[s, 1]
                b = colors[s, 2]
                gmx = 0.0
                gmy = 0.0
                gca = 0.0
                gcb = 0.0
                gcc = 0.0
                gop = 0.0
                gcr = 0.0
                gcg = 0.0
                gcbl = 0.0
                hit = False
                for y in range(max(ymin[s], ty0), min(ymax[s], ty1) + 1):
                    dy = y - means[s, 1]
                    for x in range(max(xmin[s], tx0), min(xmax[s], tx1) + 1):
                        if k >= n_walked[y, x]:
                            continue
                        dx = x - means[s, 0]
                        q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                        if q > q_cut:
                            continue
                        hit = True
                        j = y - ty0
                        i = x - tx0
                        G = math.exp(-0.5 * q)
                        a = op * G
                        clamped = a > alpha_max
                        if clamped:
                            a = alpha_max
                        inv = 1.0 / (1.0 - a)
                        t = T[j, i] * inv
                        T[j, i] = t
                        w = a * t
                        g0 = grad_image[y, x, 0]
                        g1 = grad_image[y, x, 1]
                        g2 = grad_image[y, x, 2]
                        gcr += g0 * w
                        gcg += g1 * w
                        gcbl += g2 * w
                        a0 = acc[j, i, 0]
                        a1 = acc[j, i, 1]
                        a2 = acc[j, i, 2]
                        d_alpha = (g0 * (r * t - a0 * inv) + g1 * (gr * t - a1 * inv)
                                   + g2 * (b * t - a2 * inv))
                        acc[j, i, 0] = a0 + r * w
                        acc[j, i, 1] = a1 + gr * w
                        acc[j, i, 2] = a2 + b * w
                        if clamped:
                            continue
                        gop += d_alpha * G
                        d_q = -0.5 * op * G * d_alpha
                        gmx += -2.0 * (ca * dx + cb * dy) * d_q
                        gmy += -2.0 * (cb * dx + cc * dy) * d_q
                        gca += dx * dx * d_q
                        gcb += 2.0 * dx * dy * d_q
                        gcc += dy * dy * d_q
                if hit:
                    buf[ch, s, 0] += gmx
                    buf[ch, s, 1] += gmy
                    buf[ch, s, 2] += gca
                    buf[ch, s, 3] += gcb
                    buf[ch, s, 4] += gcc
                    buf[ch, s, 5] += gop
                    buf[ch, s, 6] += gcr
                    buf[ch, s, 7] += gcg
                    buf[ch, s, 8] += gcbl
    out = np.zeros((m, 9))
    for ch in range(N_CHUNKS):
        out += buf[ch]
    return out
