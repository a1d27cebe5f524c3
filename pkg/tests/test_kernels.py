"""Cross-backend equivalence of the compiled and pure kernels."""

import numpy as np
import pytest

from sambalm.kernels import BACKEND, pure

try:
    from sambalm.kernels import _core
except ImportError:
    _core = None

needs_compiled = pytest.mark.skipif(_core is None, reason="compiled core not built")


def scan_case(rng, n=37, de=6, ds=4):
    return dict(
        u=rng.standard_normal((n, de)),
        delta=rng.uniform(0.005, 0.3, (n, de)),
        ea=np.exp(rng.uniform(-1, 1.5, (de, ds))),
        b=rng.standard_normal((n, ds)),
        c=rng.standard_normal((n, ds)),
        d=rng.standard_normal(de),
        z0=rng.standard_normal((de, ds)),
    )


def test_backend_selected():
    assert BACKEND in ("pure", "compiled")


@needs_compiled
def test_seq_forward_matches(rng):
    case = scan_case(rng)
    y1, zs1, zn1 = pure.s6_seq_forward(**case, save_states=True)
    y2, zs2, zn2 = _core.s6_seq_forward(**case, save_states=True)
    assert np.abs(y1 - y2).max() < 1e-12
    assert np.abs(zs1 - zs2).max() < 1e-12
    assert np.abs(zn1 - zn2).max() < 1e-12


@needs_compiled
@pytest.mark.parametrize("chunk", [1, 5, 16, 37])
def test_chunk_forward_matches(rng, chunk):
    case = scan_case(rng)
    y1, _, zn1 = pure.s6_chunk_forward(**case, chunk=chunk, save_states=False)
    y2, _, zn2 = _core.s6_chunk_forward(**case, chunk=chunk, save_states=False)
    assert np.abs(y1 - y2).max() < 1e-12
    assert np.abs(zn1 - zn2).max() < 1e-12


@needs_compiled
def test_backward_matches(rng):
    case = scan_case(rng)
    _, zs, _ = pure.s6_seq_forward(**case, save_states=True)
    dy = rng.standard_normal(case["u"].shape)
    dzn = rng.standard_normal(case["z0"].shape)
    g1 = pure.s6_backward(**case, zs=zs, dy=dy, dzn=dzn)
    g2 = _core.s6_backward(**case, zs=zs, dy=dy, dzn=dzn)
    for a, b in zip(g1, g2):
        assert np.abs(a - b).max() < 1e-11


@needs_compiled
def test_dwconv_matches(rng):
    h = rng.standard_normal((19, 5))
    w = rng.standard_normal((4, 5))
    prefix = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(pure.dwconv_forward(h, w, prefix),
                                  _core.dwconv_forward(h, w, prefix))
    dout = rng.standard_normal((19, 5))
    dh1, dw1 = pure.dwconv_backward(h, w, dout)
    dh2, dw2 = _core.dwconv_backward(h, w, dout)
    np.testing.assert_array_equal(dh1, dh2)
    np.testing.assert_array_equal(dw1, dw2)


def test_env_override_forces_pure(tmp_path):
    import subprocess
    import sys

    code = ("import os; os.environ['SAMBA_KERNEL'] = 'pure'; "
            "import sambalm.kernels as k; print(k.BACKEND)")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True)
    assert out.stdout.strip() == "pure"
