#!/usr/bin/env python3
"""Compare the compiled kernel core against the pure NumPy fallback.

Times the selective-scan forward/backward and the causal depthwise conv at
training-sized shapes, plus a whole forward+backward step of the default
model on each backend. Run from the repo root:

    python3 benchmarks/bench_kernels.py
"""

import time

import sambalm  # noqa: F401  (sets BLAS thread defaults before numpy loads)
import numpy as np

from sambalm.kernels import pure

try:
    from sambalm.kernels import _core
except ImportError:
    _core = None


def timeit(fn, reps=20):
    fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1e3


def row(name, pure_ms, compiled_ms):
    speedup = f"{pure_ms / compiled_ms:5.1f}x" if compiled_ms else "    -"
    compiled_txt = f"{compiled_ms:9.2f}" if compiled_ms else "        -"
    print(f"{name:34s} {pure_ms:9.2f} {compiled_txt} {speedup}")


def main():
    rng = np.random.default_rng(0)
    n, de, ds, k = 256, 128, 16, 4
    u = rng.standard_normal((n, de))
    delta = rng.uniform(0.001, 0.1, (n, de))
    ea = np.exp(np.broadcast_to(np.log(np.arange(1, ds + 1.0)), (de, ds)).copy())
    b = rng.standard_normal((n, ds))
    c = rng.standard_normal((n, ds))
    d = np.ones(de)
    z0 = np.zeros((de, ds))
    h = rng.standard_normal((n, de))
    taps = rng.standard_normal((k, de))
    prefix = np.zeros((k - 1, de))
    _, zs, _ = pure.s6_seq_forward(u, delta, ea, b, c, d, z0, True)
    dy = rng.standard_normal((n, de))
    dzn = np.zeros((de, ds))

    cases = [
        ("scan sequential fwd (save)",
         lambda m: m.s6_seq_forward(u, delta, ea, b, c, d, z0, True)),
        ("scan chunked fwd (chunk=64, save)",
         lambda m: m.s6_chunk_forward(u, delta, ea, b, c, d, z0, 64, True)),
        ("scan backward",
         lambda m: m.s6_backward(u, delta, ea, b, c, d, z0, zs, dy, dzn)),
        ("depthwise conv fwd",
         lambda m: m.dwconv_forward(h, taps, prefix)),
        ("depthwise conv bwd",
         lambda m: m.dwconv_backward(h, taps, dy)),
    ]

    print(f"shapes: n={n}, d_e={de}, d_s={ds}, k={k}")
    print(f"{'kernel':34s} {'pure ms':>9s} {'compiled':>9s} {'speedup':>6s}")
    for name, call in cases:
        p = timeit(lambda: call(pure))
        q = timeit(lambda: call(_core)) if _core is not None else None
        row(name, p, q)

    # end-to-end: one training sequence through the default model
    from sambalm.model import ModelConfig, build
    from sambalm.numerics import Tape, backward, recording

    model = build(ModelConfig(seed=1))
    tokens = rng.integers(0, 256, size=257)

    def step(module):
        import sambalm.kernels as kern
        saved = (kern.s6_seq_forward, kern.s6_chunk_forward, kern.s6_backward,
                 kern.dwconv_forward, kern.dwconv_backward)
        kern.s6_seq_forward = module.s6_seq_forward
        kern.s6_chunk_forward = module.s6_chunk_forward
        kern.s6_backward = module.s6_backward
        kern.dwconv_forward = module.dwconv_forward
        kern.dwconv_backward = module.dwconv_backward
        try:
            model.zero_grad()
            tape = Tape()
            with recording(tape):
                loss = model.loss(tokens)
            backward(loss, tape)
        finally:
            (kern.s6_seq_forward, kern.s6_chunk_forward, kern.s6_backward,
             kern.dwconv_forward, kern.dwconv_backward) = saved

    p = timeit(lambda: step(pure), reps=5)
    q = timeit(lambda: step(_core), reps=5) if _core is not None else None
    row("model fwd+bwd (n=256, d_m=64, N=8)", p, q)
    if _core is None:
        print("compiled core not built; showing pure backend only")


if __name__ == "__main__":
    main()
