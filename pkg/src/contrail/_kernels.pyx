# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the rendering and decoding inner loops."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def zbuffer_winners(pix, depth, Py_ssize_t n_pix):
    cdef const long long[::1] p = np.ascontiguousarray(pix, dtype=np.int64)
    cdef const double[::1] d = np.ascontiguousarray(depth, dtype=np.float64)
    out = np.full(n_pix, -1, dtype=np.int64)
    cdef long long[::1] win = out
    cdef double[::1] best = np.empty(n_pix, dtype=np.float64)
    cdef Py_ssize_t i, k, n = p.shape[0]
    with nogil:
        for i in range(n):
            k = p[i]
            if win[k] < 0 or d[i] < best[k]:
                win[k] = i
                best[k] = d[i]
    return out


def lattice_scores(heat, rows, cols):
    cdef const double[:, :, ::1] hm = np.ascontiguousarray(heat, dtype=np.float64)
    cdef const double[:, ::1] r = np.ascontiguousarray(rows, dtype=np.float64)
    cdef const double[:, ::1] c = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t nv = hm.shape[0], h = hm.shape[1], w = hm.shape[2], m = r.shape[1]
    out = np.zeros(m, dtype=np.float64)
    cdef double[::1] s = out
    cdef Py_ssize_t v, j, y0, x0, y1, x1
    cdef double y, x, fy, fx, top, bot
    with nogil:
        for v in range(nv):
            for j in range(m):
                y = r[v, j] - 0.5
                x = c[v, j] - 0.5
                if y < 0.0:
                    y = 0.0
                if y > h - 1.0:
                    y = h - 1.0
                if x < 0.0:
                    x = 0.0
                if x > w - 1.0:
                    x = w - 1.0
                y0 = <Py_ssize_t>floor(y)
                x0 = <Py_ssize_t>floor(x)
                y1 = y0 + 1 if y0 + 1 < h else h - 1
                x1 = x0 + 1 if x0 + 1 < w else w - 1
                fy = y - y0
                fx = x - x0
                top = (1.0 - fx) * hm[v, y0, x0] + fx * hm[v, y0, x1]
                bot = (1.0 - fx) * hm[v, y1, x0] + fx * hm[v, y1, x1]
                s[j] = s[j] + ((1.0 - fy) * top + fy * bot)
    return out
