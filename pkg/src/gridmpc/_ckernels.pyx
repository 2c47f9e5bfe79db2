# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled solver kernels.

Mirrors ``_pykernels`` function by function.  Elementwise expressions
are written in the same operand order as the numpy versions and the
module is built with FMA contraction disabled, so vector outputs match
the fallback bit for bit; scalar totals use Neumaier summation.
"""

import numpy as np

from libc.math cimport fabs

BACKEND = "compiled"

ctypedef Py_ssize_t idx


cdef void _matvec(const idx[::1] indptr, const idx[::1] indices, const double[::1] data,
                  const double[::1] x, double[::1] out) noexcept nogil:
    cdef idx r, jj
    cdef double s
    for r in range(out.shape[0]):
        s = 0.0
        for jj in range(indptr[r], indptr[r + 1]):
            s += data[jj] * x[indices[jj]]
        out[r] = s


cdef void _chol_solve(const double[::1] packed, idx start, idx n, double[::1] b, idx off) noexcept nogil:
    # Forward then backward substitution on the row-major lower factor.
    cdef idx i, j
    cdef double s
    for i in range(n):
        s = b[off + i]
        for j in range(i):
            s -= packed[start + i * n + j] * b[off + j]
        b[off + i] = s / packed[start + i * n + i]
    for i in range(n - 1, -1, -1):
        s = b[off + i]
        for j in range(i + 1, n):
            s -= packed[start + j * n + i] * b[off + j]
        b[off + i] = s / packed[start + i * n + i]


cdef inline void _neumaier(double term, double* total, double* comp) noexcept nogil:
    cdef double t = total[0] + term
    if fabs(total[0]) >= fabs(term):
        comp[0] += (total[0] - t) + term
    else:
        comp[0] += (term - t) + total[0]
    total[0] = t


cdef double _cost_terms(const double[::1] x, const double[::1] quad, const double[::1] lin,
                        double* total, double* comp) noexcept nogil:
    cdef idx c
    for c in range(x.shape[0]):
        _neumaier(0.5 * quad[c] * x[c] * x[c] + lin[c] * x[c], total, comp)
    return total[0] + comp[0]


def matvec(a, x):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=float)
    out = np.empty(a.shape[0])
    _matvec(a.indptr, a.indices, a.data, xv, out)
    return out


def chol_solve(lower, b):
    cdef double[::1] packed = np.ascontiguousarray(lower, dtype=float).ravel()
    out = np.array(b, dtype=float, copy=True)
    _chol_solve(packed, 0, out.shape[0], out, 0)
    return out


def block_chol_solve(bc, rhs):
    cdef const idx[::1] offsets = bc.offsets
    cdef const idx[::1] starts = bc.starts
    cdef const double[::1] packed = bc.packed
    out = np.array(rhs, dtype=float, copy=True)
    cdef double[::1] ov = out
    cdef idx b
    with nogil:
        for b in range(offsets.shape[0] - 1):
            _chol_solve(packed, starts[b], offsets[b + 1] - offsets[b], ov, offsets[b])
    return out


def quad_cost(x, quad, lin):
    cdef double total = 0.0, comp = 0.0
    return _cost_terms(np.ascontiguousarray(x, dtype=float), quad, lin, &total, &comp)


def lagrangian(x, quad, lin, eta, g):
    cdef double total = 0.0, comp = 0.0
    cdef double cost = _cost_terms(np.ascontiguousarray(x, dtype=float), quad, lin, &total, &comp)
    cdef const double[::1] ev = np.ascontiguousarray(eta, dtype=float)
    cdef const double[::1] gv = np.ascontiguousarray(g, dtype=float)
    cdef idx r
    for r in range(ev.shape[0]):
        _neumaier(ev[r] * gv[r], &total, &comp)
    return total + comp, cost


def primal_from_dual(ht, eta, lin, quad):
    cdef const double[::1] lv = lin
    cdef const double[::1] qv = quad
    out = np.empty(ht.shape[0])
    cdef double[::1] ov = out
    _matvec(ht.indptr, ht.indices, ht.data, np.ascontiguousarray(eta, dtype=float), ov)
    cdef idx c
    for c in range(ov.shape[0]):
        ov[c] = -(lv[c] + ov[c]) / qv[c]
    return out


def dual_iteration(ht, h, lin, quad, rhs, eta_in, double step):
    cdef const double[::1] lv = lin
    cdef const double[::1] qv = quad
    cdef const double[::1] hv = rhs
    cdef const double[::1] eta = np.ascontiguousarray(eta_in, dtype=float)
    cdef idx n = ht.shape[0], m = h.shape[0], c, r
    x = np.empty(n)
    g = np.empty(m)
    eta_new = np.empty(m)
    cdef double[::1] xv = x, gv = g, ev = eta_new
    cdef double total = 0.0, comp = 0.0, cost, t, infeas = 0.0, dstep = 0.0
    cdef const idx[::1] tp = ht.indptr, ti = ht.indices, hp = h.indptr, hi = h.indices
    cdef const double[::1] td = ht.data, hd = h.data
    with nogil:
        _matvec(tp, ti, td, eta, xv)
        for c in range(n):
            xv[c] = -(lv[c] + xv[c]) / qv[c]
        _matvec(hp, hi, hd, xv, gv)
        for r in range(m):
            gv[r] = gv[r] - hv[r]
            t = eta[r] + step * gv[r]
            ev[r] = t if t > 0.0 else 0.0
            if gv[r] > infeas:
                infeas = gv[r]
            if fabs(ev[r] - eta[r]) > dstep:
                dstep = fabs(ev[r] - eta[r])
        cost = _cost_terms(xv, qv, lv, &total, &comp)
        for r in range(m):
            _neumaier(eta[r] * gv[r], &total, &comp)
    return x, g, eta_new, total + comp, cost, infeas, dstep


def admm_iteration(w_op, wt_op, h_in, lext_in, double rho, partner_in, bc, u_in, z_in, v_in, mu_in):
    cdef const double[::1] h = h_in
    cdef const double[::1] lext = lext_in
    cdef const idx[::1] partner = partner_in
    cdef double[::1] u = u_in, z = z_in, v = v_in, mu = mu_in
    cdef idx m = z.shape[0], n = u.shape[0], r, b
    w_arr = np.empty(m)
    t_arr = np.empty(m)
    rhs_arr = np.empty(n)
    cdef double[::1] w = w_arr, t = t_arr, rhs = rhs_arr
    cdef const idx[::1] wp = w_op.indptr, wi = w_op.indices, tp = wt_op.indptr, ti = wt_op.indices
    cdef const double[::1] wd = w_op.data, td = wt_op.data
    cdef const idx[::1] offsets = bc.offsets, starts = bc.starts
    cdef const double[::1] packed = bc.packed
    cdef double primal = 0.0, consensus = 0.0, dual = 0.0, vn, res
    with nogil:
        for r in range(m):
            w[r] = (z[r] - h[r]) - mu[r] / rho
        for r in range(m):
            if partner[r] < 0:
                vn = w[r] if w[r] > 0.0 else 0.0
            else:
                vn = 0.5 * (w[r] + w[partner[r]])
            if fabs(vn - v[r]) > dual:
                dual = fabs(vn - v[r])
            v[r] = vn
            t[r] = (v[r] + h[r]) + mu[r] / rho
        _matvec(tp, ti, td, t, rhs)
        for r in range(n):
            rhs[r] = rho * rhs[r] - lext[r]
        for b in range(offsets.shape[0] - 1):
            _chol_solve(packed, starts[b], offsets[b + 1] - offsets[b], rhs, offsets[b])
        for r in range(n):
            u[r] = rhs[r]
        _matvec(wp, wi, wd, u, z)
        for r in range(m):
            res = (z[r] - h[r]) - v[r]
            mu[r] = mu[r] - rho * res
            if partner[r] < 0:
                if fabs(res) > primal:
                    primal = fabs(res)
            elif fabs(res) > consensus:
                consensus = fabs(res)
    return primal, consensus, rho * dual
