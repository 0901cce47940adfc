"""Hot kernels, compiled when available.

The Cython extension ``_ckernels`` is used if it was built; otherwise the
numpy fallback in ``_pykernels`` is imported. Set ``DCELAB_PURE_PYTHON=1``
to force the fallback.
"""

import os

from . import _pykernels as python

if os.environ.get("DCELAB_PURE_PYTHON", "") not in ("", "0"):
    compiled = None
else:
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else python
BACKEND = "cython" if compiled is not None else "python"

mf_logits = _impl.mf_logits
mf_scatter_grad = _impl.mf_scatter_grad
dr_enumerate = _impl.dr_enumerate

__all__ = ["BACKEND", "compiled", "python", "mf_logits", "mf_scatter_grad", "dr_enumerate"]
