"""Hot-kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
numpy fallback is used.  ``SURGSCENE_KERNELS`` overrides: ``compiled``
(fail hard if missing), ``python`` (force fallback), or ``auto``.
"""

from __future__ import annotations

import os

from . import pyfallback

_requested = os.environ.get("SURGSCENE_KERNELS", "auto")
if _requested not in ("auto", "compiled", "python"):
    raise RuntimeError(
        f"SURGSCENE_KERNELS must be auto|compiled|python, got {_requested!r}"
    )

BACKEND = "python"
_impl = pyfallback
if _requested in ("auto", "compiled"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = pyfallback

rle_encode = _impl.rle_encode
rle_decode = _impl.rle_decode
fused_mask_loss = _impl.fused_mask_loss


def available_backends() -> dict[str, object]:
    """Importable backend modules keyed by name (for tests and benchmarks)."""
    backends: dict[str, object] = {"python": pyfallback}
    try:
        from . import _ckernels

        backends["compiled"] = _ckernels
    except ImportError:
        pass
    return backends
