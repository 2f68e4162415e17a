"""Numpy rasterizer; used when the compiled kernel is unavailable.

Inputs are already depth-sorted (front first).  ``conics`` hold the inverse
2D covariance as (A, B, C) for ``A dx^2 + 2 B dx dy + C dy^2``.
"""
import numpy as np

POWER_CUTOFF = -4.5  # 3 sigma
ALPHA_MAX = 0.99


def _patch(mx, my, r, width, height):
    x0 = max(int(np.floor(mx - r)), 0)
    x1 = min(int(np.ceil(mx + r)), width - 1)
    y0 = max(int(np.floor(my - r)), 0)
    y1 = min(int(np.ceil(my + r)), height - 1)
    return x0, x1, y0, y1


def rasterize_forward(means2d, conics, opacity, colors, depths, radii, width, height):
    color = np.zeros((height, width, 3))
    dnum = np.zeros((height, width))
    trans = np.ones((height, width))
    count = np.zeros((height, width), dtype=np.int32)
    for i in range(means2d.shape[0]):
        mx, my = means2d[i]
        x0, x1, y0, y1 = _patch(mx, my, radii[i], width, height)
        if x0 > x1 or y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1) - mx
        dy = (np.arange(y0, y1 + 1) - my)[:, None]
        A, B, C = conics[i]
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        inside = power >= POWER_CUTOFF
        a = np.where(inside, np.minimum(ALPHA_MAX, opacity[i] * np.exp(np.minimum(power, 0.0))), 0.0)
        t = trans[y0:y1 + 1, x0:x1 + 1]
        w = a * t
        color[y0:y1 + 1, x0:x1 + 1] += w[..., None] * colors[i]
        dnum[y0:y1 + 1, x0:x1 + 1] += w * depths[i]
        t *= 1.0 - a
        count[y0:y1 + 1, x0:x1 + 1] += inside
    return color, trans, dnum, count


def rasterize_backward(means2d, conics, opacity, colors, depths, radii, width, height,
                       trans_final, g_color, g_alpha, g_dnum):
    p = means2d.shape[0]
    g_mean = np.zeros((p, 2))
    g_conic = np.zeros((p, 3))
    g_opac = np.zeros(p)
    g_col = np.zeros((p, 3))
    g_depth = np.zeros(p)
    trans = trans_final.copy()
    acc_c = np.zeros((height, width, 3))
    acc_z = np.zeros((height, width))
    for i in range(p - 1, -1, -1):
        mx, my = means2d[i]
        x0, x1, y0, y1 = _patch(mx, my, radii[i], width, height)
        if x0 > x1 or y0 > y1:
            continue
        dx = np.arange(x0, x1 + 1) - mx
        dy = (np.arange(y0, y1 + 1) - my)[:, None]
        dx, dy = np.broadcast_arrays(dx[None, :], dy)
        A, B, C = conics[i]
        power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
        inside = power >= POWER_CUTOFF
        gauss = np.exp(np.minimum(power, 0.0))
        raw = opacity[i] * gauss
        a = np.where(inside, np.minimum(ALPHA_MAX, raw), 0.0)
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        t_after = trans[sl]
        one_m = 1.0 - a
        t_before = t_after / one_m
        w = a * t_before
        gc = g_color[sl]
        gz = g_dnum[sl]
        ga = g_alpha[sl]
        tf = trans_final[sl]
        g_col[i] += (gc * w[..., None]).reshape(-1, 3).sum(0)
        g_depth[i] += (gz * w).sum()
        dl_da = ((gc * (colors[i] * t_before[..., None] - acc_c[sl] / one_m[..., None])).sum(-1)
                 + gz * (depths[i] * t_before - acc_z[sl] / one_m)
                 + ga * tf / one_m)
        live = inside & (raw < ALPHA_MAX)
        dl_da = np.where(live, dl_da, 0.0)
        g_opac[i] += (dl_da * gauss).sum()
        dl_dpow = dl_da * a
        g_mean[i, 0] += (dl_dpow * (A * dx + B * dy)).sum()
        g_mean[i, 1] += (dl_dpow * (C * dy + B * dx)).sum()
        g_conic[i, 0] += (dl_dpow * (-0.5 * dx * dx)).sum()
        g_conic[i, 1] += (dl_dpow * (-dx * dy)).sum()
        g_conic[i, 2] += (dl_dpow * (-0.5 * dy * dy)).sum()
        acc_c[sl] += w[..., None] * colors[i]
        acc_z[sl] += w * depths[i]
        trans[sl] = np.where(inside, t_before, t_after)
    return g_mean, g_conic, g_opac, g_col, g_depth
