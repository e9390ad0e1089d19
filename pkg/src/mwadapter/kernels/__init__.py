"""Row-wise numeric kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imported successfully; otherwise the
numpy reference implementations are bound. :func:`use_backend` switches at
runtime, which the benchmark and the cross-backend tests rely on.
"""
from . import _reference

try:
    from . import _compiled
except ImportError:  # extension not built (e.g. source checkout without a compiler)
    _compiled = None

KERNEL_NAMES = (
    "layer_norm_forward",
    "layer_norm_backward",
    "softmax_forward",
    "softmax_backward",
    "gelu_forward",
    "gelu_backward",
    "diagonal_ranks",
)

BACKEND = "python"


def available_backends():
    return ["compiled", "python"] if _compiled is not None else ["python"]


def use_backend(name):
    """Bind the kernel functions of ``name`` ("compiled" or "python")."""
    global BACKEND
    if name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available; build the extension first")
        module = _compiled
    elif name == "python":
        module = _reference
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    for fn in KERNEL_NAMES:
        globals()[fn] = getattr(module, fn)
    BACKEND = name


use_backend("compiled" if _compiled is not None else "python")
