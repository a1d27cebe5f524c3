"""Pure NumPy implementations of the hot kernels.

These are the fallback twins of the compiled core in ``_core.pyx``: the
causal depthwise convolution and the selective-scan recurrence, forward and
backward. Reduction orders are fixed (ascending tap index, ascending state index
within a channel) so results are reproducible and the chunked pass with
``chunk == n`` matches the sequential pass bit-for-bit when the initial
state is zero.
"""

import numpy as np


def dwconv_forward(h, w, prefix):
    """Causal depthwise convolution over the time axis.

    h: (n, c) input rows; w: (k, c) per-channel taps; prefix: (k-1, c) rows
    that precede h in time (zeros for a fresh sequence).
    out[t, c] = sum_j w[j, c] * hext[t + j, c] with hext = [prefix; h],
    i.e. tap j reads the row k-1-j steps in the past.
    """
    h = np.ascontiguousarray(h, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    prefix = np.ascontiguousarray(prefix, dtype=np.float64)
    n = h.shape[0]
    k = w.shape[0]
    hext = np.concatenate([prefix, h], axis=0)
    out = np.zeros_like(h)
    for j in range(k):
        out += w[j] * hext[j : j + n]
    return out


def dwconv_backward(h, w, dout):
    """Gradients of dwconv_forward w.r.t. h and w (zero prefix assumed)."""
    h = np.ascontiguousarray(h, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    dout = np.ascontiguousarray(dout, dtype=np.float64)
    n, c = h.shape
    k = w.shape[0]
    hext = np.concatenate([np.zeros((k - 1, c)), h], axis=0)
    dhext = np.zeros_like(hext)
    dw = np.zeros_like(w)
    for j in range(k):
        dhext[j : j + n] += w[j] * dout
        dw[j] = (dout * hext[j : j + n]).sum(axis=0)
    return dhext[k - 1 :], dw


def _as_f64(*arrays):
    return tuple(np.ascontiguousarray(a, dtype=np.float64) for a in arrays)


def s6_seq_forward(u, delta, ea, b, c, d, z0, save_states):
    """Sequential selective scan.

    u, delta: (n, de); ea = exp(A): (de, ds); b, c: (n, ds); d: (de,);
    z0: (de, ds). Per step: decay = exp(-delta_t * ea), state = decay*state
    + (delta_t*u_t) outer b_t, y_t = (state*c_t).sum(-1) + d*u_t.
    Returns (y (n,de), states (n,de,ds) or None, final state (de,ds)).
    """
    u, delta, ea, b, c, d, z0 = _as_f64(u, delta, ea, b, c, d, z0)
    n, de = u.shape
    ds = ea.shape[1]
    y = np.empty((n, de))
    zs = np.empty((n, de, ds)) if save_states else None
    z = z0.copy()
    for t in range(n):
        a_t = np.exp(-delta[t][:, None] * ea)
        z = a_t * z + (delta[t] * u[t])[:, None] * b[t][None, :]
        if save_states:
            zs[t] = z
        y[t] = (z * c[t][None, :]).sum(axis=1) + d * u[t]
    return y, zs, z.copy()


def s6_chunk_forward(u, delta, ea, b, c, d, z0, chunk, save_states):
    """Chunked associative scan, equivalent to s6_seq_forward.

    Within a chunk the prefix of the associative pairs (decay, injection)
    is folded across time, vectorized over all de*ds channels; the carry
    state threads chunk-final states sequentially.
    """
    u, delta, ea, b, c, d, z0 = _as_f64(u, delta, ea, b, c, d, z0)
    n, de = u.shape
    ds = ea.shape[1]
    y = np.empty((n, de))
    zs = np.empty((n, de, ds)) if save_states else None
    carry = z0.copy()
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        m = e - s
        a = np.exp(-delta[s:e, :, None] * ea[None])
        inj = (delta[s:e] * u[s:e])[:, :, None] * b[s:e, None, :]
        ap = np.empty_like(a)
        bp = np.empty_like(inj)
        ap[0] = a[0]
        bp[0] = inj[0]
        for t in range(1, m):
            ap[t] = a[t] * ap[t - 1]
            bp[t] = a[t] * bp[t - 1] + inj[t]
        z = ap * carry[None] + bp
        if save_states:
            zs[s:e] = z
        y[s:e] = (z * c[s:e, None, :]).sum(axis=2) + d[None, :] * u[s:e]
        carry = z[-1].copy()
    return y, zs, carry


def s6_backward(u, delta, ea, b, c, d, z0, zs, dy, dzn):
    """Reverse-time adjoint of the selective scan.

    Needs the forward per-step states zs (n, de, ds); decays are recomputed
    from (delta, ea). Returns (du, ddelta, dea, db, dc, dd, dz0); the caller
    chains dA = dea * ea.
    """
    u, delta, ea, b, c, d, z0, zs, dy, dzn = _as_f64(
        u, delta, ea, b, c, d, z0, zs, dy, dzn)
    n, de = u.shape
    du = np.empty_like(u)
    ddelta = np.empty_like(delta)
    dea = np.zeros_like(ea)
    db = np.empty_like(b)
    dc = np.empty_like(c)
    dd = np.zeros_like(d)
    lam = dzn.copy()
    for t in range(n - 1, -1, -1):
        zprev = zs[t - 1] if t > 0 else z0
        a_t = np.exp(-delta[t][:, None] * ea)
        lam += dy[t][:, None] * c[t][None, :]
        dc[t] = (zs[t] * dy[t][:, None]).sum(axis=0)
        dd += dy[t] * u[t]
        lam_b = lam @ b[t]
        du[t] = dy[t] * d + delta[t] * lam_b
        db[t] = lam.T @ (delta[t] * u[t])
        g_a = lam * zprev * a_t
        ddelta[t] = u[t] * lam_b - (g_a * ea).sum(axis=1)
        dea -= g_a * delta[t][:, None]
        lam = a_t * lam
    return du, ddelta, dea, db, dc, dd, lam
