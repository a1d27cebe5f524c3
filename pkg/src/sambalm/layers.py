"""The three layer species: Mamba, sliding-window attention, gated MLP.

Each species has a full-sequence forward used for training (tape-recorded)
and a single-token step used for streaming decode (plain arrays, no tape).
The full-sequence forwards also accept a streaming state, which turns them
into chunk continuations for bounded-memory prefill; both paths are held
equivalent by tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .numerics import (
    Tensor,
    _maybe_record,
    add,
    depthwise_conv1d_causal,
    inverse_softplus,
    matmul,
    mul,
    sigmoid_np,
    silu,
    softplus,
    softplus_np,
)
from .scan import s6_apply

DELTA_MIN = 1e-3
DELTA_MAX = 1e-1


# ---------------------------------------------------------------------------
# parameter records
# ---------------------------------------------------------------------------


@dataclass
class MambaParams:
    w_in: Tensor    # (d_m, d_e) input expansion
    w_conv: Tensor  # (k, d_e) depthwise conv taps
    w_r: Tensor     # (d_e, d_r) gate low-rank down
    w_q: Tensor     # (d_r, d_e) gate low-rank up
    b: Tensor       # (d_e,) gate bias
    w_b: Tensor     # (d_e, d_s) injection projection
    w_c: Tensor     # (d_e, d_s) readout projection
    a: Tensor       # (d_e, d_s) log decay rates
    d: Tensor       # (d_e,) skip scale
    w_g: Tensor     # (d_m, d_e) output gate
    w_out: Tensor   # (d_e, d_m) output projection

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        d_m, d_e = self.w_in.shape
        k = self.w_conv.shape[0]
        d_r = self.w_r.shape[1]
        d_s = self.a.shape[1]
        return d_m, d_e, d_r, d_s, k


@dataclass
class SWAParams:
    w_q_attn: Tensor  # (d_m, n_q*hd)
    w_k_attn: Tensor  # (d_m, n_kv*hd)
    w_v_attn: Tensor  # (d_m, n_kv*hd)
    w_o_attn: Tensor  # (n_q*hd, d_m)
    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    window: int
    rope_base: float = 10000.0
    rope_enabled: bool = True


@dataclass
class MLPParams:
    w_gate: Tensor  # (d_m, d_p)
    w_up: Tensor    # (d_m, d_p)
    w_down: Tensor  # (d_p, d_m)


# ---------------------------------------------------------------------------
# streaming states
# ---------------------------------------------------------------------------


class MambaState:
    """Recurrent state plus the ring of the last k-1 post-expansion rows.

    Buffers are allocated at full capacity up front so the footprint never
    depends on how many tokens have been seen.
    """

    def __init__(self, d_e: int, d_s: int, k: int):
        self.z = np.zeros((d_e, d_s))
        self.conv = np.zeros((k - 1, d_e))
        self.steps = 0

    def push_rows(self, rows: np.ndarray) -> None:
        """Append post-w_in rows (m, d_e) in arrival order, keeping the last k-1."""
        m = rows.shape[0]
        cap = self.conv.shape[0]
        if cap > 0:
            if m >= cap:
                self.conv[:] = rows[-cap:]
            else:
                self.conv[: cap - m] = self.conv[m:].copy()
                self.conv[cap - m :] = rows
        self.steps += m

    def nbytes(self) -> int:
        return self.z.nbytes + self.conv.nbytes


class KVCache:
    """Ring of at most ``window`` post-rotation (key, value) rows per kv head.

    Rows are kept in arrival order; ``next_pos`` counts absolute positions so
    rotary angles stay consistent across evictions.
    """

    def __init__(self, window: int, n_kv_heads: int, head_dim: int):
        self.k = np.zeros((n_kv_heads, window, head_dim))
        self.v = np.zeros((n_kv_heads, window, head_dim))
        self.count = 0
        self.next_pos = 0

    @property
    def window(self) -> int:
        return self.k.shape[1]

    def append(self, k_rows: np.ndarray, v_rows: np.ndarray) -> None:
        """Append (n_kv, m, hd) rows, evicting the oldest beyond the window."""
        m = k_rows.shape[1]
        w = self.window
        if m >= w:
            self.k[:] = k_rows[:, -w:]
            self.v[:] = v_rows[:, -w:]
            self.count = w
        else:
            keep = min(self.count, w - m)
            if keep:
                self.k[:, :keep] = self.k[:, self.count - keep : self.count].copy()
                self.v[:, :keep] = self.v[:, self.count - keep : self.count].copy()
            self.k[:, keep : keep + m] = k_rows
            self.v[:, keep : keep + m] = v_rows
            self.count = keep + m
        self.next_pos += m

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        return self.k[:, : self.count], self.v[:, : self.count]

    def nbytes(self) -> int:
        return self.k.nbytes + self.v.nbytes


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------


def _rope_tables(positions: np.ndarray, head_dim: int, base: float):
    half = head_dim // 2
    inv_freq = base ** (-2.0 * np.arange(half) / head_dim)
    ang = positions[:, None] * inv_freq[None, :]
    return np.cos(ang), np.sin(ang)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """Rotate adjacent pairs of the last axis; sign=-1 applies the inverse."""
    s = sign * sin
    xe = x[..., 0::2]
    xo = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * s
    out[..., 1::2] = xe * s + xo * cos
    return out


def rope_apply(x: Tensor, positions, base: float) -> Tensor:
    """Rotate pairs (x[2i], x[2i+1]) by pos * base^(-2i/head_dim) per position.

    x has shape (heads, n, head_dim) with even head_dim; norm per pair is
    preserved (pure rotation).
    """
    if x.ndim != 3:
        raise DimensionError(f"rope_apply: expected (heads, n, head_dim), got {x.shape}")
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ContractError(f"rope_apply: head_dim must be even, got {head_dim}")
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (x.shape[1],):
        raise DimensionError(
            f"rope_apply: positions shape {positions.shape} != ({x.shape[1]},)"
        )
    cos, sin = _rope_tables(positions, head_dim, base)
    out = Tensor(_rotate(x.data, cos, sin))

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            x.accum_grad(_rotate(g, cos, sin, sign=-1.0), own=True)

    return _maybe_record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# Mamba layer
# ---------------------------------------------------------------------------


def mamba_forward(x: Tensor, p: MambaParams, state: MambaState | None = None,
                  on_delta=None, scan_chunk: int = 64) -> Tensor:
    """Full-sequence Mamba layer: expand, smooth, gate, scan, gate, project.

    With ``state`` the call continues a stream: the conv ring supplies the
    left context, the recurrence starts from the carried state, and the state
    is advanced in place (used by chunked prefill; inference only).
    """
    h = matmul(x, p.w_in)
    prefix = state.conv.copy() if state is not None else None
    u = silu(depthwise_conv1d_causal(h, p.w_conv, prefix))
    delta = softplus(add(matmul(matmul(u, p.w_r), p.w_q), p.b))
    if on_delta is not None:
        on_delta(delta.data.copy())
    bm = matmul(u, p.w_b)
    cm = matmul(u, p.w_c)
    z0 = state.z.copy() if state is not None else None
    y, zn = s6_apply(u, delta, p.a, bm, cm, p.d, z0=z0, chunk=scan_chunk)
    o = matmul(mul(y, silu(matmul(x, p.w_g))), p.w_out)
    if state is not None:
        state.z = zn
        state.push_rows(h.data)
    return o


def mamba_step(x, p: MambaParams, s: MambaState):
    """One streaming token through the Mamba layer (no tape)."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    d_m, d_e, d_r, d_s, k = p.dims
    if xd.shape != (d_m,):
        raise ContractError(f"mamba_step: input shape {xd.shape} != ({d_m},)")
    if s.z.shape != (d_e, d_s) or s.conv.shape != (k - 1, d_e):
        raise ContractError(
            f"mamba_step: state shapes {s.z.shape}/{s.conv.shape} do not match params"
        )
    h = xd @ p.w_in.data
    win = np.concatenate([s.conv, h[None, :]], axis=0)
    u_pre = (p.w_conv.data * win).sum(axis=0)
    u = u_pre * sigmoid_np(u_pre)
    delta = softplus_np(u @ p.w_r.data @ p.w_q.data + p.b.data)
    bt = u @ p.w_b.data
    ct = u @ p.w_c.data
    decay = np.exp(-delta[:, None] * np.exp(p.a.data))
    z = decay * s.z + (delta * u)[:, None] * bt[None, :]
    y = (z * ct[None, :]).sum(axis=1) + p.d.data * u
    gate = xd @ p.w_g.data
    o = (y * (gate * sigmoid_np(gate))) @ p.w_out.data
    s.z = z
    s.push_rows(h[None, :])
    return o, s


# ---------------------------------------------------------------------------
# sliding-window attention layer
# ---------------------------------------------------------------------------


def _attend(q: Tensor, k: Tensor, v: Tensor, p: SWAParams, pos_offset: int,
            cache: KVCache | None, on_probs=None) -> Tensor:
    """Windowed causal attention over [cache rows; current rows].

    Fused tape op with a hand-written backward (RoPE backward is the inverse
    rotation). Query rows are processed in window-sized blocks so the score
    matrices stay O(n * w) instead of O(n^2); kv index j (on the combined
    [prefix; current] timeline) is visible to query row i iff
    m + i - w + 1 <= j <= m + i, with m cached rows in the prefix.
    """
    nq = q.shape[0]
    hq, hkv, hd = p.n_q_heads, p.n_kv_heads, p.head_dim
    g = hq // hkv
    w = p.window
    scale = 1.0 / math.sqrt(hd)
    positions = np.arange(pos_offset, pos_offset + nq, dtype=np.float64)

    qh = q.data.reshape(nq, hq, hd).transpose(1, 0, 2)
    kh = k.data.reshape(nq, hkv, hd).transpose(1, 0, 2)
    vh = v.data.reshape(nq, hkv, hd).transpose(1, 0, 2)
    if p.rope_enabled:
        cos, sin = _rope_tables(positions, hd, p.rope_base)
        qr = _rotate(qh, cos, sin)
        kr = _rotate(kh, cos, sin)
    else:
        cos = sin = None
        qr, kr = qh, kh

    if cache is not None:
        pk, pv = cache.view()
        m = cache.count
        k_all = np.concatenate([pk, kr], axis=1)
        v_all = np.concatenate([pv, vh], axis=1)
    else:
        m = 0
        k_all, v_all = kr, vh
    nk = m + nq

    k_exp = np.repeat(k_all, g, axis=0)
    v_exp = np.repeat(v_all, g, axis=0)
    ctx = np.empty((hq, nq, hd))
    blocks = []  # (row start, row end, kv slice start, probs)
    for s in range(0, nq, w):
        e = min(s + w, nq)
        lo = max(0, m + s - (w - 1))
        hi = m + e
        rows = np.arange(s, e)[:, None]
        cols = np.arange(lo, hi)[None, :]
        allowed = (cols <= m + rows) & (cols >= m + rows - (w - 1))
        scores = np.where(allowed[None],
                          qr[:, s:e] @ k_exp[:, lo:hi].transpose(0, 2, 1) * scale,
                          -np.inf)
        probs = np.exp(scores - scores.max(axis=2, keepdims=True))
        probs /= probs.sum(axis=2, keepdims=True)
        if on_probs is not None:
            on_probs(probs.copy())
        ctx[:, s:e] = probs @ v_exp[:, lo:hi]
        blocks.append((s, e, lo, probs))
    out = Tensor(ctx.transpose(1, 0, 2).reshape(nq, hq * hd))

    if cache is not None:
        cache.append(kr, vh)

    def bwd():
        gout = out.grad
        if gout is None:
            return
        g_h = gout.reshape(nq, hq, hd).transpose(1, 0, 2)
        dq_rot = np.empty_like(qr)
        dk_exp = np.zeros((hq, nk, hd))
        dv_exp = np.zeros((hq, nk, hd))
        for s, e, lo, probs in blocks:
            hi = m + e
            g_blk = g_h[:, s:e]
            dprobs = g_blk @ v_exp[:, lo:hi].transpose(0, 2, 1)
            dv_exp[:, lo:hi] += probs.transpose(0, 2, 1) @ g_blk
            dscores = probs * (dprobs - (dprobs * probs).sum(axis=2, keepdims=True))
            dq_rot[:, s:e] = dscores @ k_exp[:, lo:hi] * scale
            dk_exp[:, lo:hi] += dscores.transpose(0, 2, 1) @ qr[:, s:e] * scale
        dk_cur = dk_exp.reshape(hkv, g, nk, hd).sum(axis=1)[:, m:]
        dv_cur = dv_exp.reshape(hkv, g, nk, hd).sum(axis=1)[:, m:]
        if p.rope_enabled:
            dq_rot = _rotate(dq_rot, cos, sin, sign=-1.0)
            dk_cur = _rotate(dk_cur, cos, sin, sign=-1.0)
        if q.requires_grad:
            q.accum_grad(dq_rot.transpose(1, 0, 2).reshape(nq, hq * hd), own=True)
        if k.requires_grad:
            k.accum_grad(dk_cur.transpose(1, 0, 2).reshape(nq, hkv * hd), own=True)
        if v.requires_grad:
            v.accum_grad(dv_cur.transpose(1, 0, 2).reshape(nq, hkv * hd), own=True)

    return _maybe_record(out, (q, k, v), bwd)


def swa_forward(x: Tensor, p: SWAParams, pos_offset: int = 0,
                cache: KVCache | None = None, on_probs=None) -> Tensor:
    """Sliding-window attention: token i attends to [max(0, i-w+1), i].

    RoPE rotates queries/keys at absolute positions pos_offset + i. With
    ``cache`` the rows extend a stream (chunked prefill); pos_offset must
    then equal cache.next_pos.
    """
    if pos_offset < 0:
        raise ContractError(f"swa_forward: pos_offset must be >= 0, got {pos_offset}")
    if cache is not None and pos_offset != cache.next_pos:
        raise ContractError(
            f"swa_forward: pos_offset {pos_offset} != cache.next_pos {cache.next_pos}"
        )
    q = matmul(x, p.w_q_attn)
    k = matmul(x, p.w_k_attn)
    v = matmul(x, p.w_v_attn)
    ctx = _attend(q, k, v, p, pos_offset, cache, on_probs)
    return matmul(ctx, p.w_o_attn)


def swa_step(x, p: SWAParams, c: KVCache):
    """One streaming token of windowed attention (no tape)."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    hq, hkv, hd = p.n_q_heads, p.n_kv_heads, p.head_dim
    if c.k.shape != (hkv, p.window, hd):
        raise ContractError(
            f"swa_step: cache geometry {c.k.shape} != {(hkv, p.window, hd)}"
        )
    g = hq // hkv
    q = (xd @ p.w_q_attn.data).reshape(hq, hd)
    kn = (xd @ p.w_k_attn.data).reshape(hkv, hd)
    vn = (xd @ p.w_v_attn.data).reshape(hkv, hd)
    if p.rope_enabled:
        cos, sin = _rope_tables(np.array([c.next_pos], dtype=np.float64), hd, p.rope_base)
        q = _rotate(q[:, None, :], cos, sin)[:, 0, :]
        kn = _rotate(kn[:, None, :], cos, sin)[:, 0, :]
    c.append(kn[:, None, :], vn[:, None, :])
    keys, vals = c.view()
    scale = 1.0 / math.sqrt(hd)
    out = np.empty((hq, hd))
    for i in range(hq):
        scores = keys[i // g] @ q[i] * scale
        e = np.exp(scores - scores.max())
        out[i] = (e / e.sum()) @ vals[i // g]
    return out.reshape(-1) @ p.w_o_attn.data, c


# ---------------------------------------------------------------------------
# gated MLP layer
# ---------------------------------------------------------------------------


def mlp_forward(x: Tensor, p: MLPParams) -> Tensor:
    return matmul(mul(silu(matmul(x, p.w_gate)), matmul(x, p.w_up)), p.w_down)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    bound = scale / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_mamba_params(rng: np.random.Generator, d_m: int, d_e: int, d_r: int,
                      d_s: int, k: int, out_scale: float) -> MambaParams:
    # delta bias: sample targets log-uniformly inside [DELTA_MIN, DELTA_MAX]
    # (with a one-ulp inset so the softplus round trip stays in range) and
    # zero w_q so softplus(b) is the exact gate value at step 0
    lo = DELTA_MIN * (1.0 + 1e-12)
    hi = DELTA_MAX / (1.0 + 1e-12)
    delta0 = np.exp(rng.uniform(np.log(lo), np.log(hi), size=d_e))
    log_rates = np.log(np.arange(1, d_s + 1, dtype=np.float64))
    return MambaParams(
        w_in=Tensor(_uniform(rng, (d_m, d_e), d_m), requires_grad=True),
        w_conv=Tensor(_uniform(rng, (k, d_e), k), requires_grad=True),
        w_r=Tensor(_uniform(rng, (d_e, d_r), d_e), requires_grad=True),
        w_q=Tensor(np.zeros((d_r, d_e)), requires_grad=True),
        b=Tensor(inverse_softplus(delta0), requires_grad=True),
        w_b=Tensor(_uniform(rng, (d_e, d_s), d_e), requires_grad=True),
        w_c=Tensor(_uniform(rng, (d_e, d_s), d_e), requires_grad=True),
        a=Tensor(np.broadcast_to(log_rates, (d_e, d_s)).copy(), requires_grad=True),
        d=Tensor(np.ones(d_e), requires_grad=True),
        w_g=Tensor(_uniform(rng, (d_m, d_e), d_m), requires_grad=True),
        w_out=Tensor(_uniform(rng, (d_e, d_m), d_e, scale=out_scale), requires_grad=True),
    )


def init_swa_params(rng: np.random.Generator, d_m: int, n_q_heads: int, n_kv_heads: int,
                    head_dim: int, window: int, rope_base: float, rope_enabled: bool,
                    out_scale: float) -> SWAParams:
    qw = n_q_heads * head_dim
    kvw = n_kv_heads * head_dim
    return SWAParams(
        w_q_attn=Tensor(_uniform(rng, (d_m, qw), d_m), requires_grad=True),
        w_k_attn=Tensor(_uniform(rng, (d_m, kvw), d_m), requires_grad=True),
        w_v_attn=Tensor(_uniform(rng, (d_m, kvw), d_m), requires_grad=True),
        w_o_attn=Tensor(_uniform(rng, (qw, d_m), qw, scale=out_scale), requires_grad=True),
        n_q_heads=n_q_heads,
        n_kv_heads=n_kv_heads,
        head_dim=head_dim,
        window=window,
        rope_base=rope_base,
        rope_enabled=rope_enabled,
    )


def init_mlp_params(rng: np.random.Generator, d_m: int, d_p: int, out_scale: float) -> MLPParams:
    return MLPParams(
        w_gate=Tensor(_uniform(rng, (d_m, d_p), d_m), requires_grad=True),
        w_up=Tensor(_uniform(rng, (d_m, d_p), d_m), requires_grad=True),
        w_down=Tensor(_uniform(rng, (d_p, d_m), d_p, scale=out_scale), requires_grad=True),
    )
