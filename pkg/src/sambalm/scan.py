"""The selective-state recurrence in two interchangeable realizations.

Per step t over an expanded state Z of shape (d_e, d_s):

    Z_t = exp(-Delta_t * exp(A)) * Z_{t-1} + Delta_t * (B_t outer U_t)
    Y_t = Z_t @ C_t + D * U_t

``s6_sequential`` folds the recurrence step by step; ``s6_parallel`` uses the
associative pair combine (a1,b1)o(a2,b2) = (a2*a1, a2*b1+b2) within chunks
and threads a sequential carry of chunk-final states. Both delegate the time
loops to the kernel backend. ``s6_backward`` is the reverse-time adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError
from .numerics import Tensor, _maybe_record


@dataclass
class ScanInputs:
    u: Tensor       # (n, d_e) smoothed inputs
    delta: Tensor   # (n, d_e) positive selective gate
    a: Tensor       # (d_e, d_s) log decay rates; exp(a) is the rate
    b: Tensor       # (n, d_s) input injection directions
    c: Tensor       # (n, d_s) state readout directions
    d: Tensor       # (d_e,) skip scale
    z0: Tensor      # (d_e, d_s) initial state

    def dims(self) -> tuple[int, int, int]:
        n, de = self.u.shape
        ds = self.a.shape[1]
        return n, de, ds


@dataclass
class ScanOutputs:
    y: Tensor                       # (n, d_e)
    zn: Tensor                      # (d_e, d_s) final state
    states: np.ndarray | None = None  # (n, d_e, d_s) per-step states when saved


@dataclass
class ScanGrads:
    u: Tensor
    delta: Tensor
    a: Tensor
    b: Tensor
    c: Tensor
    d: Tensor
    z0: Tensor


def _check_inputs(si: ScanInputs, allow_nonpositive_delta: bool) -> None:
    n, de = si.u.shape
    ds = si.a.shape[1]
    expect = {
        "u": (n, de),
        "delta": (n, de),
        "a": (de, ds),
        "b": (n, ds),
        "c": (n, ds),
        "d": (de,),
        "z0": (de, ds),
    }
    for name, shape in expect.items():
        got = getattr(si, name).shape
        if got != shape:
            raise DimensionError(f"scan: {name} has shape {got}, expected {shape}")
    if not allow_nonpositive_delta and si.delta.data.size and si.delta.data.min() <= 0:
        raise ContractError(
            f"scan: delta must be > 0 elementwise (min={si.delta.data.min()})"
        )


def s6_sequential(si: ScanInputs, save_states: bool = False,
                  allow_nonpositive_delta: bool = False) -> ScanOutputs:
    """Reference realization: one sequential fold over time."""
    _check_inputs(si, allow_nonpositive_delta)
    ea = np.exp(si.a.data)
    y, zs, zn = kernels.s6_seq_forward(
        si.u.data, si.delta.data, ea, si.b.data, si.c.data, si.d.data, si.z0.data,
        save_states,
    )
    return ScanOutputs(Tensor(y), Tensor(zn), zs)


def s6_parallel(si: ScanInputs, chunk: int, save_states: bool = False,
                allow_nonpositive_delta: bool = False) -> ScanOutputs:
    """Chunked associative realization; contract identical to s6_sequential."""
    if chunk < 1:
        raise ContractError(f"scan: chunk must be >= 1, got {chunk}")
    _check_inputs(si, allow_nonpositive_delta)
    ea = np.exp(si.a.data)
    y, zs, zn = kernels.s6_chunk_forward(
        si.u.data, si.delta.data, ea, si.b.data, si.c.data, si.d.data, si.z0.data,
        chunk, save_states,
    )
    return ScanOutputs(Tensor(y), Tensor(zn), zs)


def combine(e1, e2):
    """Associative combine on (decay, offset) pairs representing z -> a*z+b."""
    a1, b1 = e1
    a2, b2 = e2
    return a2 * a1, a2 * b1 + b2


def s6_backward(si: ScanInputs, so: ScanOutputs, dy: Tensor, dzn: Tensor) -> ScanGrads:
    """Reverse-time adjoint; needs per-step states saved by the forward."""
    if so.states is None:
        raise ContractError("s6_backward: forward was run without save_states")
    _check_inputs(si, allow_nonpositive_delta=True)
    n, de, ds = si.dims()
    if dy.shape != (n, de):
        raise DimensionError(f"s6_backward: dy shape {dy.shape} != {(n, de)}")
    if dzn.shape != (de, ds):
        raise DimensionError(f"s6_backward: dzn shape {dzn.shape} != {(de, ds)}")
    ea = np.exp(si.a.data)
    du, ddelta, dea, db, dc, dd, dz0 = kernels.s6_backward(
        si.u.data, si.delta.data, ea, si.b.data, si.c.data, si.d.data, si.z0.data,
        so.states, dy.data, dzn.data,
    )
    return ScanGrads(
        u=Tensor(du), delta=Tensor(ddelta), a=Tensor(dea * ea),
        b=Tensor(db), c=Tensor(dc), d=Tensor(dd), z0=Tensor(dz0),
    )


def s6_apply(u: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor,
             z0: np.ndarray | None = None, chunk: int = 64) -> tuple[Tensor, np.ndarray]:
    """Tape-integrated scan used by the Mamba layer.

    Returns (y, zn) where zn is a plain array for streaming continuation;
    gradients flow into u/delta/a/b/c/d (z0 is treated as a constant).
    """
    n, de = u.shape
    ds = a.shape[1]
    if z0 is None:
        z0 = np.zeros((de, ds))
    ea = np.exp(a.data)
    need_grad = any(t.requires_grad for t in (u, delta, a, b, c, d))
    y, zs, zn = kernels.s6_chunk_forward(
        u.data, delta.data, ea, b.data, c.data, d.data, z0, min(chunk, max(n, 1)),
        need_grad,
    )
    out = Tensor(y)

    def bwd():
        g = out.grad
        if g is None:
            return
        du, ddelta, dea, db, dc, dd, _dz0 = kernels.s6_backward(
            u.data, delta.data, ea, b.data, c.data, d.data, z0,
            zs, g, np.zeros((de, ds)),
        )
        if u.requires_grad:
            u.accum_grad(du, own=True)
        if delta.requires_grad:
            delta.accum_grad(ddelta, own=True)
        if a.requires_grad:
            a.accum_grad(dea * ea, own=True)
        if b.requires_grad:
            b.accum_grad(db, own=True)
        if c.requires_grad:
            c.accum_grad(dc, own=True)
        if d.requires_grad:
            d.accum_grad(dd, own=True)

    return _maybe_record(out, (u, delta, a, b, c, d), bwd), zn
