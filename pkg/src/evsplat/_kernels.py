"""Numba tile kernels for the rasterizer.

All kernels take the screen-space arrays produced by
:func:`evsplat.projection.project`; Gaussian indices inside the tile lists are
local to that projection.
"""

import numpy as np
from numba import njit, prange

# Mahalanobis^2 cutoff of the 3-sigma footprint; the kernel is zero beyond it.
CUTOFF = 9.0
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
# Compositing stops before a Gaussian that would push transmittance below this.
T_MIN = 1e-4


@njit(inline="always")
def _power(conic, g, dx, dy):
    return conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy


@njit(cache=True)
def _tile_hit(xy, conic, g, x0, x1, y0, y1):
    """True if any pixel center of the tile lies inside the 3-sigma ellipse."""
    mx, my = xy[g, 0], xy[g, 1]
    px = min(max(int(np.floor(mx + 0.5)), x0), x1)
    py = min(max(int(np.floor(my + 0.5)), y0), y1)
    if _power(conic, g, px - mx, py - my) <= CUTOFF:
        return True
    A, B, C = conic[g, 0], conic[g, 1], conic[g, 2]
    for yy in range(y0, y1 + 1):
        dy = yy - my
        disc = B * B * dy * dy - A * (C * dy * dy - CUTOFF)
        scale = B * B * dy * dy + A * C * dy * dy + A * CUTOFF
        if disc < -1e-9 * scale:
            continue
        root = np.sqrt(max(disc, 0.0))
        lo = int(np.floor(mx + (-B * dy - root) / A)) - 1
        hi = int(np.ceil(mx + (-B * dy + root) / A)) + 1
        for xx in range(max(lo, x0), min(hi, x1) + 1):
            if _power(conic, g, xx - mx, dy) <= CUTOFF:
                return True
    return False


@njit(cache=True)
def bin_gaussians(xy, cov, conic, order, width, height, tile, tiles_x):
    """Return (tile_id, gaussian) pairs, visiting Gaussians in ``order``."""
    n = len(order)
    bounds = np.empty((n, 4), dtype=np.int64)
    total = 0
    for i in range(n):
        g = order[i]
        rx = 3.0 * np.sqrt(cov[g, 0])
        ry = 3.0 * np.sqrt(cov[g, 2])
        # one pixel of slack; _tile_hit does the exact per-pixel test
        x0 = max(int(np.ceil(xy[g, 0] - rx)) - 1, 0)
        x1 = min(int(np.floor(xy[g, 0] + rx)) + 1, width - 1)
        y0 = max(int(np.ceil(xy[g, 1] - ry)) - 1, 0)
        y1 = min(int(np.floor(xy[g, 1] + ry)) + 1, height - 1)
        bounds[i, 0], bounds[i, 1], bounds[i, 2], bounds[i, 3] = x0, x1, y0, y1
        if x1 >= x0 and y1 >= y0:
            total += (x1 // tile - x0 // tile + 1) * (y1 // tile - y0 // tile + 1)
    tiles_out = np.empty(total, dtype=np.int64)
    gauss_out = np.empty(total, dtype=np.int64)
    k = 0
    for i in range(n):
        g = order[i]
        x0, x1, y0, y1 = bounds[i, 0], bounds[i, 1], bounds[i, 2], bounds[i, 3]
        if x1 < x0 or y1 < y0:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                ax0 = max(tx * tile, x0)
                ax1 = min(tx * tile + tile - 1, x1)
                ay0 = max(ty * tile, y0)
                ay1 = min(ty * tile + tile - 1, y1)
                if _tile_hit(xy, conic, g, ax0, ax1, ay0, ay1):
                    tiles_out[k] = ty * tiles_x + tx
                    gauss_out[k] = g
                    k += 1
    return tiles_out[:k], gauss_out[:k]


@njit(cache=True)
def gather_entries(xy, conic, opacity, color, cov, local, width, height):
    """Entry-ordered copies of the per-Gaussian data plus integer pixel bounds."""
    k = len(local)
    exy = np.empty((k, 2))
    econic = np.empty((k, 3))
    eopac = np.empty(k)
    ecolor = np.empty((k, 3))
    ebox = np.empty((k, 4), dtype=np.int64)
    for i in range(k):
        g = local[i]
        exy[i, 0] = xy[g, 0]
        exy[i, 1] = xy[g, 1]
        for j in range(3):
            econic[i, j] = conic[g, j]
            ecolor[i, j] = color[g, j]
        eopac[i] = opacity[g]
        rx = 3.0 * np.sqrt(cov[g, 0])
        ry = 3.0 * np.sqrt(cov[g, 2])
        ebox[i, 0] = max(int(np.ceil(xy[g, 0] - rx)) - 1, 0)
        ebox[i, 1] = min(int(np.floor(xy[g, 0] + rx)) + 1, width - 1)
        ebox[i, 2] = max(int(np.ceil(xy[g, 1] - ry)) - 1, 0)
        ebox[i, 3] = min(int(np.floor(xy[g, 1] + ry)) + 1, height - 1)
    return exy, econic, eopac, ecolor, ebox


@njit(inline="always")
def _row_entries(ebox, start, end, py, rows):
    """Fill ``rows`` with the entries whose pixel box spans row ``py``; returns the count."""
    m = 0
    for k in range(start, end):
        rows[m] = k
        m += (ebox[k, 2] <= py) & (py <= ebox[k, 3])
    return m


@njit(inline="always")
def _fill_row(exy, econic, eopac, ebox, rows, m, py, x0, tw, abuf, gbuf):
    """Alpha (and Gaussian falloff) of every row entry at the row's pixels.

    ``abuf[lx, j]`` is 0 where entry ``rows[j]`` is cut off or below the
    alpha threshold.  Along a row the falloff obeys
    ``G(x+1) = G(x) * exp(-dq(x)/2)`` with ``dq`` linear in x, so only three
    exponentials are needed per entry and row.
    """
    for j in range(m):
        k = rows[j]
        for lx in range(tw):
            abuf[lx, j] = 0.0
        xa = max(ebox[k, 0], x0)
        xb = min(ebox[k, 1], x0 + tw - 1)
        if xa > xb:
            continue
        A = econic[k, 0]
        B = econic[k, 1]
        C = econic[k, 2]
        o = eopac[k]
        dx = xa - exy[k, 0]
        dy = py - exy[k, 1]
        q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
        dq = A * (2.0 * dx + 1.0) + 2.0 * B * dy
        started = False
        G = 0.0
        rG = 0.0
        rr = 0.0
        for px in range(xa, xb + 1):
            if q <= CUTOFF:
                if not started:
                    G = np.exp(-0.5 * q)
                    rG = np.exp(-0.5 * dq)
                    rr = np.exp(-A)
                    started = True
                alpha = min(ALPHA_MAX, o * G)
                if alpha >= ALPHA_MIN:
                    abuf[px - x0, j] = alpha
                    gbuf[px - x0, j] = G
            elif started:
                break
            q += dq
            dq += 2.0 * A
            if started:
                G *= rG
                rG *= rr


@njit(parallel=True, cache=True)
def raster_forward(exy, econic, eopac, ecolor, ebox, offsets, background,
                   width, height, tile, tiles_x, image, t_final, n_last, contrib):
    n_tiles = len(offsets) - 1
    for ti in prange(n_tiles):
        ty = ti // tiles_x
        tx = ti % tiles_x
        start = offsets[ti]
        end = offsets[ti + 1]
        x0 = tx * tile
        tw = min(tile, width - x0)
        rows = np.empty(end - start, dtype=np.int64)
        abuf = np.empty((tw, end - start))
        gbuf = np.empty((tw, end - start))
        for py in range(ty * tile, min(ty * tile + tile, height)):
            m = _row_entries(ebox, start, end, py, rows)
            _fill_row(exy, econic, eopac, ebox, rows, m, py, x0, tw, abuf, gbuf)
            for lx in range(tw):
                px = x0 + lx
                T = 1.0
                r = 0.0
                gr = 0.0
                b = 0.0
                last = 0
                for j in range(m):
                    alpha = abuf[lx, j]
                    if alpha == 0.0:
                        continue
                    test_t = T * (1.0 - alpha)
                    if test_t < T_MIN:
                        break
                    k = rows[j]
                    w = T * alpha
                    r += w * ecolor[k, 0]
                    gr += w * ecolor[k, 1]
                    b += w * ecolor[k, 2]
                    T = test_t
                    last = k - start + 1
                    contrib[k] = True
                image[py, px, 0] = r + T * background[0]
                image[py, px, 1] = gr + T * background[1]
                image[py, px, 2] = b + T * background[2]
                t_final[py, px] = T
                n_last[py, px] = last


@njit(parallel=True, cache=True)
def raster_backward(exy, econic, eopac, ecolor, ebox, offsets, background,
                    width, height, tile, tiles_x, t_final, n_last, d_image,
                    g_xy, g_conic, g_opacity, g_color):
    """Per-entry gradients; entry ``k`` belongs to tile list position ``k``."""
    n_tiles = len(offsets) - 1
    for ti in prange(n_tiles):
        ty = ti // tiles_x
        tx = ti % tiles_x
        start = offsets[ti]
        end = offsets[ti + 1]
        x0 = tx * tile
        tw = min(tile, width - x0)
        rows = np.empty(end - start, dtype=np.int64)
        abuf = np.empty((tw, end - start))
        gbuf = np.empty((tw, end - start))
        for py in range(ty * tile, min(ty * tile + tile, height)):
            m = _row_entries(ebox, start, end, py, rows)
            filled = False
            for lx in range(tw):
                px = x0 + lx
                d0 = d_image[py, px, 0]
                d1 = d_image[py, px, 1]
                d2 = d_image[py, px, 2]
                if d0 == 0.0 and d1 == 0.0 and d2 == 0.0:
                    continue
                if not filled:
                    _fill_row(exy, econic, eopac, ebox, rows, m, py, x0, tw, abuf, gbuf)
                    filled = True
                T = t_final[py, px]
                s0 = background[0]
                s1 = background[1]
                s2 = background[2]
                stop = start + n_last[py, px]
                for j in range(m - 1, -1, -1):
                    alpha = abuf[lx, j]
                    if alpha == 0.0:
                        continue
                    k = rows[j]
                    if k >= stop:
                        continue
                    G = gbuf[lx, j]
                    a_raw = eopac[k] * G
                    T = T / (1.0 - alpha)
                    w = alpha * T
                    c0 = ecolor[k, 0]
                    c1 = ecolor[k, 1]
                    c2 = ecolor[k, 2]
                    g_color[k, 0] += w * d0
                    g_color[k, 1] += w * d1
                    g_color[k, 2] += w * d2
                    d_alpha = T * (d0 * (c0 - s0) + d1 * (c1 - s1) + d2 * (c2 - s2))
                    s0 = alpha * c0 + (1.0 - alpha) * s0
                    s1 = alpha * c1 + (1.0 - alpha) * s1
                    s2 = alpha * c2 + (1.0 - alpha) * s2
                    if a_raw < ALPHA_MAX:
                        g_opacity[k] += d_alpha * G
                        d_q = -0.5 * a_raw * d_alpha
                        dx = px - exy[k, 0]
                        dy = py - exy[k, 1]
                        A = econic[k, 0]
                        B = econic[k, 1]
                        C = econic[k, 2]
                        g_xy[k, 0] += -2.0 * d_q * (A * dx + B * dy)
                        g_xy[k, 1] += -2.0 * d_q * (B * dx + C * dy)
                        g_conic[k, 0] += d_q * dx * dx
                        g_conic[k, 1] += 2.0 * d_q * dx * dy
                        g_conic[k, 2] += d_q * dy * dy


@njit(cache=True)
def reduce_entries(gidx, n, e_xy, e_conic, e_opacity, e_color):
    """Sum per-entry gradients into per-Gaussian arrays in fixed entry order."""
    g_xy = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_color = np.zeros((n, 3))
    for k in range(len(gidx)):
        g = gidx[k]
        for j in range(2):
            g_xy[g, j] += e_xy[k, j]
        for j in range(3):
            g_conic[g, j] += e_conic[k, j]
            g_color[g, j] += e_color[k, j]
        g_opacity[g] += e_opacity[k]
    return g_xy, g_conic, g_opacity, g_color
