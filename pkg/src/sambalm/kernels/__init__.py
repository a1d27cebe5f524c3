"""Hot-kernel backend selection.

The compiled Cython core is used when its extension module is importable;
otherwise the pure NumPy twins take over. ``SAMBA_KERNEL`` overrides the
choice: ``pure`` forces the fallback, ``compiled`` demands the extension
(raising if it is missing), ``auto`` (default) prefers compiled.

``benchmarks/bench_kernels.py`` times both backends side by side.
"""

import os

from . import pure

_choice = os.environ.get("SAMBA_KERNEL", "auto")
if _choice not in ("auto", "compiled", "pure"):
    raise ValueError(f"SAMBA_KERNEL must be auto|compiled|pure, got {_choice!r}")

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _core as _impl
    except ImportError:
        if _choice == "compiled":
            raise
        _impl = None
if _impl is None:
    _impl = pure

BACKEND = "pure" if _impl is pure else "compiled"

dwconv_forward = _impl.dwconv_forward
dwconv_backward = _impl.dwconv_backward
s6_seq_forward = _impl.s6_seq_forward
s6_chunk_forward = _impl.s6_chunk_forward
s6_backward = _impl.s6_backward
