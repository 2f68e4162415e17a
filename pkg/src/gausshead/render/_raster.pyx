# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled rasterizer kernels (same contract as ``_raster_py``)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor, ceil

cnp.import_array()

cdef double POWER_CUTOFF = -4.5
cdef double ALPHA_MAX = 0.99


cdef inline void _patch(double mx, double my, double r, int width, int height,
                        int* x0, int* x1, int* y0, int* y1) noexcept nogil:
    x0[0] = <int>floor(mx - r)
    if x0[0] < 0:
        x0[0] = 0
    x1[0] = <int>ceil(mx + r)
    if x1[0] > width - 1:
        x1[0] = width - 1
    y0[0] = <int>floor(my - r)
    if y0[0] < 0:
        y0[0] = 0
    y1[0] = <int>ceil(my + r)
    if y1[0] > height - 1:
        y1[0] = height - 1


def rasterize_forward(double[:, ::1] means2d, double[:, ::1] conics, double[::1] opacity,
                      double[:, ::1] colors, double[::1] depths, double[::1] radii,
                      int width, int height):
    cdef Py_ssize_t p = means2d.shape[0]
    color_a = np.zeros((height, width, 3))
    trans_a = np.ones((height, width))
    dnum_a = np.zeros((height, width))
    count_a = np.zeros((height, width), dtype=np.int32)
    cdef double[:, :, ::1] color = color_a
    cdef double[:, ::1] trans = trans_a
    cdef double[:, ::1] dnum = dnum_a
    cdef int[:, ::1] count = count_a
    cdef Py_ssize_t i
    cdef int x, y, x0, x1, y0, y1
    cdef double mx, my, A, B, C, dx, dy, power, a, w, o, z, c0, c1, c2
    with nogil:
        for i in range(p):
            mx = means2d[i, 0]
            my = means2d[i, 1]
            _patch(mx, my, radii[i], width, height, &x0, &x1, &y0, &y1)
            A = conics[i, 0]
            B = conics[i, 1]
            C = conics[i, 2]
            o = opacity[i]
            z = depths[i]
            c0 = colors[i, 0]
            c1 = colors[i, 1]
            c2 = colors[i, 2]
            for y in range(y0, y1 + 1):
                dy = y - my
                for x in range(x0, x1 + 1):
                    dx = x - mx
                    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
                    if power < POWER_CUTOFF:
                        continue
                    if power > 0:
                        power = 0
                    a = o * exp(power)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = a * trans[y, x]
                    color[y, x, 0] += w * c0
                    color[y, x, 1] += w * c1
                    color[y, x, 2] += w * c2
                    dnum[y, x] += w * z
                    trans[y, x] *= 1.0 - a
                    count[y, x] += 1
    return color_a, trans_a, dnum_a, count_a


def rasterize_backward(double[:, ::1] means2d, double[:, ::1] conics, double[::1] opacity,
                       double[:, ::1] colors, double[::1] depths, double[::1] radii,
                       int width, int height, double[:, ::1] trans_final,
                       double[:, :, ::1] g_color, double[:, ::1] g_alpha, double[:, ::1] g_dnum):
    cdef Py_ssize_t p = means2d.shape[0]
    g_mean_a = np.zeros((p, 2))
    g_conic_a = np.zeros((p, 3))
    g_opac_a = np.zeros(p)
    g_col_a = np.zeros((p, 3))
    g_depth_a = np.zeros(p)
    trans_a = np.array(trans_final, copy=True)
    acc_c_a = np.zeros((height, width, 3))
    acc_z_a = np.zeros((height, width))
    cdef double[:, ::1] g_mean = g_mean_a
    cdef double[:, ::1] g_conic = g_conic_a
    cdef double[::1] g_opac = g_opac_a
    cdef double[:, ::1] g_col = g_col_a
    cdef double[::1] g_depth = g_depth_a
    cdef double[:, ::1] trans = trans_a
    cdef double[:, :, ::1] acc_c = acc_c_a
    cdef double[:, ::1] acc_z = acc_z_a
    cdef Py_ssize_t i
    cdef int x, y, x0, x1, y0, y1
    cdef double mx, my, A, B, C, dx, dy, power, gauss, raw, a, one_m, tb, w, dl_da, dl_dpow
    cdef double o, z, c0, c1, c2
    cdef double s_m0, s_m1, s_A, s_B, s_C, s_o, s_c0, s_c1, s_c2, s_z
    with nogil:
        for i in range(p - 1, -1, -1):
            mx = means2d[i, 0]
            my = means2d[i, 1]
            _patch(mx, my, radii[i], width, height, &x0, &x1, &y0, &y1)
            A = conics[i, 0]
            B = conics[i, 1]
            C = conics[i, 2]
            o = opacity[i]
            z = depths[i]
            c0 = colors[i, 0]
            c1 = colors[i, 1]
            c2 = colors[i, 2]
            s_m0 = 0; s_m1 = 0; s_A = 0; s_B = 0; s_C = 0
            s_o = 0; s_c0 = 0; s_c1 = 0; s_c2 = 0; s_z = 0
            for y in range(y0, y1 + 1):
                dy = y - my
                for x in range(x0, x1 + 1):
                    dx = x - mx
                    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
                    if power < POWER_CUTOFF:
                        continue
                    if power > 0:
                        power = 0
                    gauss = exp(power)
                    raw = o * gauss
                    a = raw
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    one_m = 1.0 - a
                    tb = trans[y, x] / one_m
                    w = a * tb
                    s_c0 += g_color[y, x, 0] * w
                    s_c1 += g_color[y, x, 1] * w
                    s_c2 += g_color[y, x, 2] * w
                    s_z += g_dnum[y, x] * w
                    if raw < ALPHA_MAX:
                        dl_da = (g_color[y, x, 0] * (c0 * tb - acc_c[y, x, 0] / one_m)
                                 + g_color[y, x, 1] * (c1 * tb - acc_c[y, x, 1] / one_m)
                                 + g_color[y, x, 2] * (c2 * tb - acc_c[y, x, 2] / one_m)
                                 + g_dnum[y, x] * (z * tb - acc_z[y, x] / one_m)
                                 + g_alpha[y, x] * trans_final[y, x] / one_m)
                        s_o += dl_da * gauss
                        dl_dpow = dl_da * a
                        s_m0 += dl_dpow * (A * dx + B * dy)
                        s_m1 += dl_dpow * (C * dy + B * dx)
                        s_A += dl_dpow * (-0.5 * dx * dx)
                        s_B += dl_dpow * (-dx * dy)
                        s_C += dl_dpow * (-0.5 * dy * dy)
                    acc_c[y, x, 0] += w * c0
                    acc_c[y, x, 1] += w * c1
                    acc_c[y, x, 2] += w * c2
                    acc_z[y, x] += w * z
                    trans[y, x] = tb
            g_mean[i, 0] = s_m0
            g_mean[i, 1] = s_m1
            g_conic[i, 0] = s_A
            g_conic[i, 1] = s_B
            g_conic[i, 2] = s_C
            g_opac[i] = s_o
            g_col[i, 0] = s_c0
            g_col[i, 1] = s_c1
            g_col[i, 2] = s_c2
            g_depth[i] = s_z
    return g_mean_a, g_conic_a, g_opac_a, g_col_a, g_depth_a
