# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled block kernels; bit-identical twins of ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, floor, frexp, ldexp, log2, ceil

cnp.import_array()

cdef double SCALE_EPS = 1e-8
cdef int S_MIN = -127
cdef int S_MAX = 127


cdef inline int _scale_exp(double m, double q_pos, int e_max, int rule) noexcept nogil:
    cdef int s, e
    cdef double est
    if m == 0.0:
        m = SCALE_EPS
    if rule == 0:
        est = ceil(log2(m) - log2(q_pos))
        # keep the cast defined for subnormal or huge m; the clamp below decides
        if est < S_MIN - 2:
            est = S_MIN - 2
        elif est > S_MAX + 2:
            est = S_MAX + 2
        s = <int>est
        if m > ldexp(q_pos, s):
            s += 1
        if m <= ldexp(q_pos, s - 1):
            s -= 1
    else:
        frexp(m, &e)
        s = e - 1 - e_max
    if s < S_MIN:
        s = S_MIN
    elif s > S_MAX:
        s = S_MAX
    return s


cdef inline int _floor_index(double x, const double *grid, int top) noexcept nogil:
    # largest index with grid[i] <= x; x is pre-clamped into [grid[0], grid[top]].
    # A branch-free count beats an early-exit scan on unpredictable data.
    cdef int lo = 0, i
    for i in range(1, top + 1):
        lo += grid[i] <= x
    return lo


_TABLES = {}


def _bracket_table(const double[::1] grid):
    """``(table, 1/h)`` with ``table[k] = floor_index(k*h - q_pos)``, or ``None``.

    When every grid value is a multiple of a power of two ``h``, the largest
    grid value <= x equals the largest one <= floor(x/h)*h, and x/h is exact.
    """
    g = np.asarray(grid)
    key = g.tobytes()
    if key not in _TABLES:
        q_pos = float(g[-1])
        h = 1.0
        while h >= 2.0 ** -8 and not np.all(np.mod(g, h) == 0):
            h /= 2
        if h < 2.0 ** -8 or q_pos / h > 4096:
            _TABLES[key] = None
        else:
            k = int(q_pos / h)
            pts = np.arange(-k, k + 1) * h
            table = (np.searchsorted(g, pts, side="right") - 1).astype(np.int32)
            _TABLES[key] = (table, 1.0 / h, k)
    return _TABLES[key]


cdef inline int _bracket_lo(double x, const double *grid, int top,
                            const int *table, double inv_h, int k) noexcept nogil:
    if table != NULL:
        return table[<int>floor(x * inv_h) + k]
    return _floor_index(x, grid, top)


def scale_exponents(const double[:, ::1] groups, double q_pos, int e_max, int rule):
    cdef Py_ssize_t n = groups.shape[0], k = groups.shape[1], g, j
    cdef double m, a
    out = np.empty(n, dtype=np.int32)
    cdef int[::1] s = out
    with nogil:
        for g in range(n):
            m = 0.0
            for j in range(k):
                a = fabs(groups[g, j])
                if a > m:
                    m = a
            s[g] = _scale_exp(m, q_pos, e_max, rule)
    return out


def quantize_groups(groups, const double[::1] grid, const unsigned char[::1] code_of_index,
                    int e_max, int rule, uniforms=None):
    cdef const double[:, ::1] v = np.ascontiguousarray(groups, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], k = v.shape[1], g, j
    cdef const double[:, ::1] u
    cdef bint stochastic = uniforms is not None
    if stochastic:
        u = np.ascontiguousarray(uniforms, dtype=np.float64)
    codes_arr = np.empty((n, k), dtype=np.uint8)
    exps_arr = np.empty(n, dtype=np.int8)
    cdef unsigned char[:, ::1] codes = codes_arr
    cdef signed char[::1] exps = exps_arr
    cdef const double *gp = &grid[0]
    cdef const unsigned char *cp = &code_of_index[0]
    cdef int top = grid.shape[0] - 1
    cdef double q_pos = gp[top]
    cdef const int *tp = NULL
    cdef int[::1] tv
    cdef double inv_h = 0.0
    cdef int hk = 0
    lut = _bracket_table(grid)
    if lut is not None:
        tv = lut[0]
        tp = &tv[0]
        inv_h = lut[1]
        hk = lut[2]
    cdef double m, a, x, q1, q2, xi, inv
    cdef int s, i1, i2, high
    with nogil:
        for g in range(n):
            m = 0.0
            for j in range(k):
                a = fabs(v[g, j])
                if a > m:
                    m = a
            s = _scale_exp(m, q_pos, e_max, rule)
            exps[g] = <signed char>s
            # multiplying by an exact power of two rounds exactly like ldexp
            inv = ldexp(1.0, -s)
            for j in range(k):
                x = v[g, j] * inv
                if x > q_pos:
                    x = q_pos
                elif x < -q_pos:
                    x = -q_pos
                i1 = _bracket_lo(x, gp, top, tp, inv_h, hk)
                q1 = gp[i1]
                # on-grid values (including the clamped top) are their own upper neighbour
                i2 = i1 + (q1 != x)
                q2 = gp[i2]
                if stochastic:
                    xi = (u[g, j] - 0.5) * (q2 - q1)
                    high = not (x + xi < (q1 + q2) / 2)
                else:
                    high = not (fabs(x - q1) < fabs(x - q2))
                codes[g, j] = cp[i1 + (i2 - i1) * high]
    return codes_arr, exps_arr


def quantize_groups_ema(groups, ema_groups, const double[::1] grid,
                        const unsigned char[::1] code_of_index, int e_max):
    cdef const double[:, ::1] v = np.ascontiguousarray(groups, dtype=np.float64)
    cdef const double[:, ::1] w = np.ascontiguousarray(ema_groups, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], k = v.shape[1], g, j
    codes_arr = np.empty((n, k), dtype=np.uint8)
    exps_arr = np.empty(n, dtype=np.int8)
    cdef unsigned char[:, ::1] codes = codes_arr
    cdef signed char[::1] exps = exps_arr
    cdef const double *gp = &grid[0]
    cdef const unsigned char *cp = &code_of_index[0]
    cdef int top = grid.shape[0] - 1
    cdef double q_pos = gp[top]
    cdef const int *tp = NULL
    cdef int[::1] tv
    cdef double inv_h = 0.0
    cdef int hk = 0
    lut = _bracket_table(grid)
    if lut is not None:
        tv = lut[0]
        tp = &tv[0]
        inv_h = lut[1]
        hk = lut[2]
    cdef double m, a, x, e, inv
    cdef int s, i1, i2, high
    with nogil:
        for g in range(n):
            m = 0.0
            for j in range(k):
                a = fabs(v[g, j])
                if a > m:
                    m = a
            s = _scale_exp(m, q_pos, e_max, 0)
            exps[g] = <signed char>s
            inv = ldexp(1.0, -s)
            for j in range(k):
                x = v[g, j] * inv
                if x > q_pos:
                    x = q_pos
                elif x < -q_pos:
                    x = -q_pos
                e = w[g, j] * inv
                i1 = _bracket_lo(x, gp, top, tp, inv_h, hk)
                i2 = i1 + (gp[i1] != x)
                high = not (fabs(e - gp[i1]) < fabs(e - gp[i2]))
                codes[g, j] = cp[i1 + (i2 - i1) * high]
    return codes_arr, exps_arr


def dequantize_groups(const unsigned char[:, ::1] codes, const signed char[::1] exponents,
                      const double[::1] decode_table):
    cdef Py_ssize_t n = codes.shape[0], k = codes.shape[1], g, j
    out_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef const double *tab = &decode_table[0]
    cdef double sc
    with nogil:
        for g in range(n):
            sc = ldexp(1.0, exponents[g])
            for j in range(k):
                out[g, j] = tab[codes[g, j]] * sc
    return out_arr
