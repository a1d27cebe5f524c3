"""Dense float64 tensors with reverse-mode autodiff on a linear tape.

Everything above this module is built from a small op set: matmul, shape-
restricted elementwise add/mul, SiLU/Softplus, row softmax, RMSNorm, the
causal depthwise convolution, embedding lookup, and cross-entropy. Each op
computes its forward with NumPy and, when a tape is active and an input
requires grad, appends one backward closure to the tape. ``backward`` then
replays the tape in exact reverse execution order.

Conventions (fixed for reproducibility):
  * compute precision is float64 everywhere; checkpoints alone are f32
  * reductions run sequentially within a row, vectorized only across
    independent rows/channels
  * broadcasting is restricted to equal shapes or a trailing vector over
    the rows of a matrix -- anything else is a DimensionError
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, NumericError


class Tensor:
    """A dense float64 array with an optional gradient accumulation buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accum_grad(self, g: np.ndarray, own: bool = False) -> None:
        """Add g into the grad buffer; own=True adopts a caller-fresh array."""
        if self.grad is None:
            self.grad = g if own else np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Wengert list: ops append in execution order, backward replays reversed."""

    __slots__ = ("_steps",)

    def __init__(self):
        self._steps: list[Callable[[], None]] = []

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._steps.append(backward_fn)

    def __len__(self) -> int:
        return len(self._steps)


_ACTIVE: Tape | None = None


def active_tape() -> Tape | None:
    return _ACTIVE


@contextmanager
def recording(tape: Tape):
    """Make ``tape`` the recording target for ops executed in the block."""
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = tape
    try:
        yield tape
    finally:
        _ACTIVE = prev


def _maybe_record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    tape = _ACTIVE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate grads of all requires_grad leaves reachable from ``loss``."""
    if loss.data.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for step in reversed(tape._steps):
        step()


# ---------------------------------------------------------------------------
# numeric helpers (stable forms, shared by ops and fused layers)
# ---------------------------------------------------------------------------


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # tanh form: stable on both tails and a single vectorized transcendental
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus_np(x: np.ndarray) -> np.ndarray:
    # logaddexp evaluates x + log1p(exp(-x)) for x > 0, log1p(exp(x)) otherwise
    return np.logaddexp(0.0, x)


def inverse_softplus(y):
    """Solve softplus(x) = y for y > 0: x = log(e^y - 1)."""
    return np.log(np.expm1(y))


def softmax_np(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.accum_grad(g @ b.data.T, own=True)
        if b.requires_grad:
            b.accum_grad(a.data.T @ g, own=True)

    return _maybe_record(out, (a, b), bwd)


def _broadcast_kind(a: Tensor, b: Tensor, opname: str) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return "rowvec"
    raise DimensionError(
        f"{opname}: shapes {a.shape} and {b.shape} are neither equal nor matrix+trailing-vector"
    )


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.accum_grad(g)
        if b.requires_grad:
            if kind == "rowvec":
                b.accum_grad(g.sum(axis=0), own=True)
            else:
                b.accum_grad(g)

    return _maybe_record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if a.requires_grad:
            a.accum_grad(g * b.data, own=True)
        if b.requires_grad:
            gb = g * a.data
            b.accum_grad(gb.sum(axis=0) if kind == "rowvec" else gb, own=True)

    return _maybe_record(out, (a, b), bwd)


def silu(x: Tensor) -> Tensor:
    sig = sigmoid_np(x.data)
    out = Tensor(x.data * sig)

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            x.accum_grad(g * sig * (1.0 + x.data * (1.0 - sig)), own=True)

    return _maybe_record(out, (x,), bwd)


def softplus(x: Tensor) -> Tensor:
    out = Tensor(softplus_np(x.data))

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            x.accum_grad(g * sigmoid_np(x.data), own=True)

    return _maybe_record(out, (x,), bwd)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim < 1 or x.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim: last extent must be >= 1, got shape {x.shape}")
    p = softmax_np(x.data)
    out = Tensor(p)

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            inner = (g * p).sum(axis=-1, keepdims=True)
            x.accum_grad(p * (g - inner), own=True)

    return _maybe_record(out, (x,), bwd)


def rmsnorm(x: Tensor, gamma: Tensor, eps: float) -> Tensor:
    if eps < 0:
        raise ContractError(f"rmsnorm: eps must be >= 0, got {eps}")
    if x.ndim != 2 or gamma.ndim != 1 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"rmsnorm: shapes {x.shape} / {gamma.shape}")
    d = x.shape[1]
    scale = 1.0 / np.sqrt((x.data * x.data).mean(axis=1, keepdims=True) + eps)
    xhat = x.data * scale
    out = Tensor(xhat * gamma.data)

    def bwd():
        g = out.grad
        if g is None:
            return
        if gamma.requires_grad:
            gamma.accum_grad((g * xhat).sum(axis=0), own=True)
        if x.requires_grad:
            gg = g * gamma.data
            inner = (gg * x.data).sum(axis=1, keepdims=True)
            x.accum_grad(gg * scale - x.data * inner * scale**3 / d, own=True)

    return _maybe_record(out, (x, gamma), bwd)


def depthwise_conv1d_causal(h: Tensor, w: Tensor, prefix: np.ndarray | None = None) -> Tensor:
    """out[t,c] = sum_j w[j,c] * h[t-k+1+j, c], zero (or ``prefix``) left pad.

    ``prefix`` supplies the k-1 rows preceding h for streaming continuation;
    it is a constant (no gradient flows into it).
    """
    if h.ndim != 2 or w.ndim != 2 or h.shape[1] != w.shape[1]:
        raise DimensionError(f"depthwise_conv1d_causal: shapes {h.shape} / {w.shape}")
    k = w.shape[0]
    if k < 1:
        raise ContractError("depthwise_conv1d_causal: kernel size must be >= 1")
    if prefix is None:
        prefix = np.zeros((k - 1, h.shape[1]))
    elif prefix.shape != (k - 1, h.shape[1]):
        raise DimensionError(
            f"depthwise_conv1d_causal: prefix shape {prefix.shape} != {(k - 1, h.shape[1])}"
        )
    out = Tensor(kernels.dwconv_forward(h.data, w.data, prefix))

    def bwd():
        g = out.grad
        if g is None:
            return
        dh, dw = kernels.dwconv_backward(h.data, w.data, g)
        if h.requires_grad:
            h.accum_grad(dh, own=True)
        if w.requires_grad:
            w.accum_grad(dw, own=True)

    return _maybe_record(out, (h, w), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise DimensionError(f"embedding_lookup: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: token id out of range [0, {table.shape[0]}): "
            f"min={ids.min()} max={ids.max()}"
        )
    out = Tensor(table.data[ids])

    def bwd():
        g = out.grad
        if g is None:
            return
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            np.add.at(dt, ids, g)
            table.accum_grad(dt, own=True)

    return _maybe_record(out, (table,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean over (masked) positions of -log softmax(logits)[target]."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    targets = np.asarray(targets)
    n, v = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(
            f"cross_entropy: target out of range [0, {v}): min={targets.min()} max={targets.max()}"
        )
    if mask is None:
        mask = np.ones(n)
    else:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (n,):
            raise DimensionError(f"cross_entropy: mask shape {mask.shape} != ({n},)")
    count = mask.sum()
    if count <= 0:
        raise ContractError("cross_entropy: mask selects no positions")
    m = logits.data.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits.data - m).sum(axis=1))
    nll = lse - logits.data[np.arange(n), targets]
    out = Tensor((nll * mask).sum() / count)

    def bwd():
        g = out.grad
        if g is None:
            return
        if logits.requires_grad:
            p = np.exp(logits.data - lse[:, None])
            p[np.arange(n), targets] -= 1.0
            logits.accum_grad(p * (mask * (float(g) / count))[:, None], own=True)

    return _maybe_record(out, (logits,), bwd)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar projection sum(x * weights); the standard scalarizer for checks."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise DimensionError(f"weighted_sum: weights shape {weights.shape} != {x.shape}")
    out = Tensor((x.data * weights).sum())

    def bwd():
        g = out.grad
        if g is None:
            return
        if x.requires_grad:
            x.accum_grad(float(g) * weights, own=True)

    return _maybe_record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# verification utilities
# ---------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[], float], theta: Tensor, h: float) -> Tensor:
    """Central-difference gradient of f w.r.t. theta, one coordinate at a time.

    ``f`` is a zero-argument callable that reads ``theta`` (mutated in place
    and restored around each evaluation).
    """
    if h <= 0:
        raise ContractError(f"finite_diff_grad: h must be > 0, got {h}")
    flat = theta.data.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(theta.data.shape))


def grad_close(analytic: np.ndarray, numeric: np.ndarray, rel_tol: float, abs_floor: float = 1e-8):
    """Max relative error with an absolute comparison for tiny entries.

    Returns (ok, worst) where worst is the largest offending error measure.
    """
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    small = np.abs(analytic) < abs_floor
    rel = np.where(small, diff, diff / np.maximum(np.abs(analytic), abs_floor))
    worst = float(rel.max()) if rel.size else 0.0
    return worst < rel_tol, worst


def assert_finite(x, label: str = "tensor") -> None:
    """Raise NumericError with diagnostics if x contains NaN/Inf."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    bad = ~np.isfinite(arr)
    if bad.any():
        n_nan = int(np.isnan(arr).sum())
        n_inf = int(np.isinf(arr).sum())
        first = np.argwhere(bad)[0].tolist()
        raise NumericError(
            f"{label}: {n_nan} NaN / {n_inf} Inf values (first at index {first}, shape {arr.shape})"
        )
