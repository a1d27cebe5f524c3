# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the pure NumPy kernels (see pure.py for the contracts).

Only the serial time loops live here; reduction orders match pure.py except
for floating-point association inside row reductions, which both backends
keep deterministic (tests pin cross-backend agreement to ~1e-12).
"""

import numpy as np

cimport numpy as cnp

from libc.math cimport exp

cnp.import_array()


cdef inline cnp.ndarray _c(object a):
    return np.ascontiguousarray(a, dtype=np.float64)


def dwconv_forward(h, w, prefix):
    cdef cnp.ndarray[double, ndim=2] hv = _c(h)
    cdef cnp.ndarray[double, ndim=2] wv = _c(w)
    cdef cnp.ndarray[double, ndim=2] pv = _c(prefix)
    cdef Py_ssize_t n = hv.shape[0], c = hv.shape[1], k = wv.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((n, c))
    cdef double[:, ::1] hm = hv, wm = wv, pm = pv, om = out
    cdef Py_ssize_t t, j, ch, src
    cdef double acc
    with nogil:
        for t in range(n):
            for ch in range(c):
                acc = 0.0
                for j in range(k):
                    src = t - (k - 1) + j
                    if src < 0:
                        acc = acc + wm[j, ch] * pm[src + (k - 1), ch]
                    else:
                        acc = acc + wm[j, ch] * hm[src, ch]
                om[t, ch] = acc
    return out


def dwconv_backward(h, w, dout):
    cdef cnp.ndarray[double, ndim=2] hv = _c(h)
    cdef cnp.ndarray[double, ndim=2] wv = _c(w)
    cdef cnp.ndarray[double, ndim=2] dov = _c(dout)
    cdef Py_ssize_t n = hv.shape[0], c = hv.shape[1], k = wv.shape[0]
    cdef cnp.ndarray[double, ndim=2] dh = np.zeros((n, c))
    cdef cnp.ndarray[double, ndim=2] dw = np.zeros((k, c))
    cdef double[:, ::1] hm = hv, wm = wv, dom = dov, dhm = dh, dwm = dw
    cdef Py_ssize_t t, j, ch, src
    with nogil:
        for j in range(k):
            for t in range(n):
                src = t - (k - 1) + j
                for ch in range(c):
                    if src >= 0:
                        dhm[src, ch] = dhm[src, ch] + wm[j, ch] * dom[t, ch]
                        dwm[j, ch] = dwm[j, ch] + dom[t, ch] * hm[src, ch]
    return dh, dw


def s6_seq_forward(u, delta, ea, b, c, d, z0, save_states):
    cdef cnp.ndarray[double, ndim=2] uv = _c(u)
    cdef cnp.ndarray[double, ndim=2] dv = _c(delta)
    cdef cnp.ndarray[double, ndim=2] eav = _c(ea)
    cdef cnp.ndarray[double, ndim=2] bv = _c(b)
    cdef cnp.ndarray[double, ndim=2] cv = _c(c)
    cdef cnp.ndarray[double, ndim=1] skip = _c(d)
    cdef Py_ssize_t n = uv.shape[0], de = uv.shape[1], ds = eav.shape[1]
    cdef cnp.ndarray[double, ndim=2] y = np.empty((n, de))
    cdef cnp.ndarray[double, ndim=2] z = _c(z0).copy()
    cdef bint keep = bool(save_states)
    cdef cnp.ndarray[double, ndim=3] zs = np.empty((n if keep else 1, de, ds))
    cdef double[:, ::1] um = uv, dm = dv, eam = eav, bm = bv, cm = cv, ym = y, zm = z
    cdef double[::1] sk = skip
    cdef double[:, :, ::1] zsm = zs
    cdef Py_ssize_t t, e, s
    cdef double dt, injc, acc, zval
    with nogil:
        for t in range(n):
            for e in range(de):
                dt = dm[t, e]
                injc = dt * um[t, e]
                acc = 0.0
                for s in range(ds):
                    zval = exp(-dt * eam[e, s]) * zm[e, s] + injc * bm[t, s]
                    zm[e, s] = zval
                    if keep:
                        zsm[t, e, s] = zval
                    acc = acc + zval * cm[t, s]
                ym[t, e] = acc + sk[e] * um[t, e]
    return y, (zs if keep else None), z.copy()


def s6_chunk_forward(u, delta, ea, b, c, d, z0, chunk, save_states):
    cdef cnp.ndarray[double, ndim=2] uv = _c(u)
    cdef cnp.ndarray[double, ndim=2] dv = _c(delta)
    cdef cnp.ndarray[double, ndim=2] eav = _c(ea)
    cdef cnp.ndarray[double, ndim=2] bv = _c(b)
    cdef cnp.ndarray[double, ndim=2] cv = _c(c)
    cdef cnp.ndarray[double, ndim=1] skip = _c(d)
    cdef Py_ssize_t n = uv.shape[0], de = uv.shape[1], ds = eav.shape[1]
    cdef Py_ssize_t step = chunk
    cdef bint keep = bool(save_states)
    cdef cnp.ndarray[double, ndim=2] y = np.empty((n, de))
    cdef cnp.ndarray[double, ndim=2] carry = _c(z0).copy()
    cdef cnp.ndarray[double, ndim=3] zs = np.empty((n if keep else 1, de, ds))
    cdef Py_ssize_t mmax = step if step < n else n
    # per-chunk prefix pairs (decay product, folded injection)
    cdef cnp.ndarray[double, ndim=3] ap = np.empty((mmax, de, ds))
    cdef cnp.ndarray[double, ndim=3] bp = np.empty((mmax, de, ds))
    cdef double[:, ::1] um = uv, dm = dv, eam = eav, bm = bv, cm = cv, ym = y, carrym = carry
    cdef double[::1] sk = skip
    cdef double[:, :, ::1] zsm = zs, apm = ap, bpm = bp
    cdef Py_ssize_t s0, m, t, e, s, tt
    cdef double dt, injc, a, acc, zval
    with nogil:
        s0 = 0
        while s0 < n:
            m = n - s0
            if m > step:
                m = step
            for t in range(m):
                tt = s0 + t
                for e in range(de):
                    dt = dm[tt, e]
                    injc = dt * um[tt, e]
                    for s in range(ds):
                        a = exp(-dt * eam[e, s])
                        if t == 0:
                            apm[0, e, s] = a
                            bpm[0, e, s] = injc * bm[tt, s]
                        else:
                            apm[t, e, s] = a * apm[t - 1, e, s]
                            bpm[t, e, s] = a * bpm[t - 1, e, s] + injc * bm[tt, s]
            for t in range(m):
                tt = s0 + t
                for e in range(de):
                    acc = 0.0
                    for s in range(ds):
                        zval = apm[t, e, s] * carrym[e, s] + bpm[t, e, s]
                        if keep:
                            zsm[tt, e, s] = zval
                        acc = acc + zval * cm[tt, s]
                    ym[tt, e] = acc + sk[e] * um[tt, e]
            for e in range(de):
                for s in range(ds):
                    carrym[e, s] = apm[m - 1, e, s] * carrym[e, s] + bpm[m - 1, e, s]
            s0 = s0 + m
    return y, (zs if keep else None), carry


def s6_backward(u, delta, ea, b, c, d, z0, zs, dy, dzn):
    cdef cnp.ndarray[double, ndim=2] uv = _c(u)
    cdef cnp.ndarray[double, ndim=2] dv = _c(delta)
    cdef cnp.ndarray[double, ndim=2] eav = _c(ea)
    cdef cnp.ndarray[double, ndim=2] bv = _c(b)
    cdef cnp.ndarray[double, ndim=2] cv = _c(c)
    cdef cnp.ndarray[double, ndim=1] skip = _c(d)
    cdef cnp.ndarray[double, ndim=2] z0v = _c(z0)
    cdef cnp.ndarray[double, ndim=3] zsv = _c(zs)
    cdef cnp.ndarray[double, ndim=2] dyv = _c(dy)
    cdef Py_ssize_t n = uv.shape[0], de = uv.shape[1], ds = eav.shape[1]
    cdef cnp.ndarray[double, ndim=2] du = np.empty((n, de))
    cdef cnp.ndarray[double, ndim=2] ddelta = np.empty((n, de))
    cdef cnp.ndarray[double, ndim=2] dea = np.zeros((de, ds))
    cdef cnp.ndarray[double, ndim=2] db = np.zeros((n, ds))
    cdef cnp.ndarray[double, ndim=2] dc = np.zeros((n, ds))
    cdef cnp.ndarray[double, ndim=1] dd = np.zeros(de)
    cdef cnp.ndarray[double, ndim=2] lam = _c(dzn).copy()
    cdef double[:, ::1] um = uv, dm = dv, eam = eav, bm = bv, cm = cv
    cdef double[:, ::1] z0m = z0v, dym = dyv, dum = du, ddm = ddelta
    cdef double[:, ::1] deam = dea, dbm = db, dcm = dc, lamm = lam
    cdef double[::1] sk = skip, ddv = dd
    cdef double[:, :, ::1] zsm = zsv
    cdef Py_ssize_t t, e, s
    cdef double dt, a, lv, zp, ga, lam_b, acc_d
    with nogil:
        for t in range(n - 1, -1, -1):
            for e in range(de):
                dt = dm[t, e]
                lam_b = 0.0
                acc_d = 0.0
                for s in range(ds):
                    lv = lamm[e, s] + dym[t, e] * cm[t, s]
                    dcm[t, s] = dcm[t, s] + zsm[t, e, s] * dym[t, e]
                    if t > 0:
                        zp = zsm[t - 1, e, s]
                    else:
                        zp = z0m[e, s]
                    a = exp(-dt * eam[e, s])
                    ga = lv * zp * a
                    lam_b = lam_b + lv * bm[t, s]
                    acc_d = acc_d - ga * eam[e, s]
                    deam[e, s] = deam[e, s] - ga * dt
                    dbm[t, s] = dbm[t, s] + lv * dt * um[t, e]
                    lamm[e, s] = a * lv
                ddv[e] = ddv[e] + dym[t, e] * um[t, e]
                dum[t, e] = dym[t, e] * sk[e] + dt * lam_b
                ddm[t, e] = um[t, e] * lam_b + acc_d
    return du, ddelta, dea, db, dc, dd, lam
