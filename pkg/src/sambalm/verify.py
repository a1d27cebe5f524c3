"""Oracle suites behind ``sambalm verify``.

Three independent cross-checks: finite-difference gradients against the
tape, chunked-vs-sequential scan equivalence, and streaming-vs-batch logits
fidelity. Each check returns a record the CLI prints as one pass/fail line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .inference import Session, decode_step, prefill
from .layers import mamba_forward, mlp_forward, swa_forward
from .model import ModelConfig, build
from .numerics import (
    Tape,
    Tensor,
    backward,
    cross_entropy,
    depthwise_conv1d_causal,
    finite_diff_grad,
    grad_close,
    matmul,
    recording,
    rmsnorm,
    silu,
    softmax_lastdim,
    softplus,
    weighted_sum,
)
from .scan import ScanInputs, combine, s6_backward, s6_parallel, s6_sequential


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


def fd_check(name: str, make_loss, tensors, tol: float = 1e-5, h: float = 1e-5,
             abs_floor: float = 1e-8) -> Check:
    """Compare tape gradients of make_loss() against central finite differences.

    Elements below ``abs_floor`` are compared absolutely: central differences
    of an O(1) loss cannot certify relative accuracy below ~|loss|*eps/h.
    """
    for t in tensors:
        t.zero_grad()
    tape = Tape()
    with recording(tape):
        loss = make_loss()
    backward(loss, tape)
    worst = 0.0
    for t in tensors:
        fd = finite_diff_grad(lambda: make_loss().item(), t, h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        _, w = grad_close(analytic, fd.data, tol, abs_floor=abs_floor)
        worst = max(worst, w)
    return Check(name, worst < tol, f"max rel err {worst:.3g} (tol {tol:g})")


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def check_op_gradients(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []

    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    r = rng.standard_normal((3, 2))
    checks.append(fd_check("gradcheck/matmul",
                           lambda: weighted_sum(matmul(a, b), r), [a, b]))

    x = _rand(rng, 4, 5)
    r = rng.standard_normal((4, 5))
    checks.append(fd_check("gradcheck/silu", lambda: weighted_sum(silu(x), r), [x]))
    checks.append(fd_check("gradcheck/softplus", lambda: weighted_sum(softplus(x), r), [x]))
    checks.append(fd_check("gradcheck/softmax",
                           lambda: weighted_sum(softmax_lastdim(x), r), [x]))

    g = _rand(rng, 5)
    checks.append(fd_check("gradcheck/rmsnorm",
                           lambda: weighted_sum(rmsnorm(x, g, 1e-5), r), [x, g]))

    h = _rand(rng, 6, 3)
    w = _rand(rng, 4, 3)
    rc = rng.standard_normal((6, 3))
    checks.append(fd_check("gradcheck/depthwise_conv",
                           lambda: weighted_sum(depthwise_conv1d_causal(h, w), rc), [h, w]))

    logits = _rand(rng, 5, 7)
    targets = rng.integers(0, 7, size=5)
    checks.append(fd_check("gradcheck/cross_entropy",
                           lambda: cross_entropy(logits, targets), [logits]))
    return checks


def _toy_cfg(arch: str = "samba", **over) -> ModelConfig:
    base = dict(d_m=16, d_e=32, d_r=2, d_s=4, k=4, d_p=24, w=8, n_layers=4,
                n_q_heads=2, n_kv_heads=1, head_dim=8, vocab_size=61, arch=arch, seed=7)
    base.update(over)
    cfg = ModelConfig(**base)
    period = {"samba": 4, "mamba-swa-mlp": 3, "mamba-mlp": 2, "mamba": 1, "llama-swa": 2}[arch]
    if cfg.n_layers % period:
        cfg.n_layers = period
    return cfg


def check_layer_gradients(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    model = build(_toy_cfg())
    checks = []
    x = _rand(rng, 6, 16)
    for slot in model.layers[:3]:
        r = rng.standard_normal((6, 16))
        if slot.kind == "mamba":
            fn = lambda: weighted_sum(mamba_forward(x, slot.params), r)
            tensors = [x, slot.params.w_conv, slot.params.a, slot.params.b]
        elif slot.kind == "swa":
            fn = lambda: weighted_sum(swa_forward(x, slot.params), r)
            tensors = [x, slot.params.w_q_attn, slot.params.w_k_attn]
        else:
            fn = lambda: weighted_sum(mlp_forward(x, slot.params), r)
            tensors = [x, slot.params.w_gate]
        checks.append(fd_check(f"gradcheck/layer-{slot.kind}", fn, tensors, tol=1e-4,
                               abs_floor=1e-6))
    return checks


def _random_scan(rng, n, de, ds) -> ScanInputs:
    return ScanInputs(
        u=Tensor(rng.standard_normal((n, de))),
        delta=Tensor(rng.uniform(0.01, 0.5, size=(n, de))),
        a=Tensor(rng.uniform(-1.0, 1.5, size=(de, ds))),
        b=Tensor(rng.standard_normal((n, ds))),
        c=Tensor(rng.standard_normal((n, ds))),
        d=Tensor(rng.standard_normal(de)),
        z0=Tensor(rng.standard_normal((de, ds))),
    )


def check_scan(seed: int = 0, instances: int = 20) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 65))
        de = int(rng.integers(1, 9))
        ds = int(rng.integers(1, 6))
        si = _random_scan(rng, n, de, ds)
        ref = s6_sequential(si)
        for chunk in (1, 4, 8, n):
            out = s6_parallel(si, chunk)
            worst = max(worst, float(np.abs(out.y.data - ref.y.data).max()),
                        float(np.abs(out.zn.data - ref.zn.data).max()))
    checks = [Check("scan/parallel-vs-sequential", worst < 1e-10,
                    f"max abs diff {worst:.3g} over {instances} instances")]

    si = _random_scan(rng, 24, 4, 3)
    full = s6_sequential(si)
    m = 11
    first = s6_sequential(ScanInputs(
        u=Tensor(si.u.data[:m]), delta=Tensor(si.delta.data[:m]), a=si.a,
        b=Tensor(si.b.data[:m]), c=Tensor(si.c.data[:m]), d=si.d, z0=si.z0))
    second = s6_sequential(ScanInputs(
        u=Tensor(si.u.data[m:]), delta=Tensor(si.delta.data[m:]), a=si.a,
        b=Tensor(si.b.data[m:]), c=Tensor(si.c.data[m:]), d=si.d, z0=first.zn))
    stitched = np.concatenate([first.y.data, second.y.data])
    split_exact = np.array_equal(stitched, full.y.data) and np.array_equal(
        second.zn.data, full.zn.data)
    checks.append(Check("scan/streaming-split-exact", split_exact,
                        "continuing from the carried state reproduces the unsplit run"))

    w = 0.0
    for _ in range(50):
        e1, e2, e3 = ((rng.standard_normal(4), rng.standard_normal(4)) for _ in range(3))
        l = combine(combine(e1, e2), e3)
        r = combine(e1, combine(e2, e3))
        w = max(w, float(np.abs(l[0] - r[0]).max()), float(np.abs(l[1] - r[1]).max()))
    checks.append(Check("scan/associativity", w < 1e-12, f"max abs diff {w:.3g}"))

    si = _random_scan(rng, 5, 3, 2)
    so = s6_sequential(si, save_states=True)
    dy = Tensor(rng.standard_normal((5, 3)))
    dzn = Tensor(rng.standard_normal((3, 2)))
    grads = s6_backward(si, so, dy, dzn)
    worst = 0.0
    for name in ("u", "delta", "a", "b", "c", "d", "z0"):
        t = getattr(si, name)

        def scalar():
            out = s6_sequential(si)
            return float((out.y.data * dy.data).sum() + (out.zn.data * dzn.data).sum())

        fd = np.empty_like(t.data.reshape(-1))
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = scalar()
            flat[i] = orig - 1e-5
            fm = scalar()
            flat[i] = orig
            fd[i] = (fp - fm) / 2e-5
        _, wrel = grad_close(getattr(grads, name).data.reshape(-1), fd, 1e-5)
        worst = max(worst, wrel)
    checks.append(Check("scan/backward-vs-fd", worst < 1e-5,
                        f"max rel err {worst:.3g}"))
    return checks


def check_streaming(seed: int = 0, prompt_len: int = 32, decode_len: int = 8) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for arch in ("samba", "mamba-swa-mlp", "mamba-mlp", "mamba", "llama-swa"):
        model = build(_toy_cfg(arch))
        prompt = rng.integers(0, model.config.vocab_size, size=prompt_len)
        session = Session(model)
        stream = [prefill(session, prompt)]
        tokens = list(prompt)
        for _ in range(decode_len):
            nxt = int(np.argmax(stream[-1]))
            tokens.append(nxt)
            stream.append(decode_step(session, nxt))
        worst = 0.0
        for i in range(decode_len + 1):
            ref = model.forward(np.array(tokens[: prompt_len + i])).data[-1]
            worst = max(worst, float(np.abs(stream[i] - ref).max()))
        checks.append(Check(f"streaming/{arch}", worst < 1e-8,
                            f"max abs logits diff {worst:.3g}"))
    return checks


SUITES = {
    "gradcheck": (check_op_gradients, check_layer_gradients),
    "scan": (check_scan,),
    "streaming": (check_streaming,),
}


def run_suite(suite: str) -> list[Check]:
    if suite == "all":
        names = ("gradcheck", "scan", "streaming")
    elif suite in SUITES:
        names = (suite,)
    else:
        raise ConfigError(f"unknown suite {suite!r}; choose gradcheck|scan|streaming|all")
    checks: list[Check] = []
    for name in names:
        for fn in SUITES[name]:
            checks.extend(fn())
    return checks
