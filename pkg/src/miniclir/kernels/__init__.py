"""Late-interaction (MaxSim) scoring kernels with two interchangeable backends.

The hot loops of training and reranking all reduce to one primitive: for
each attended token of an anchor span, the maximum dot product against the
attended tokens of another span, summed over anchor tokens. This package
dispatches that primitive to either

* ``cython`` — a compiled extension (BLAS GEMM + C max-reduction), built
  opportunistically at install time; or
* ``numpy`` — a pure-numpy fallback that is always available.

Selection happens at import: the compiled backend is used when present,
unless the ``MINICLIR_KERNELS`` environment variable forces a choice
(``cython``, ``numpy``, or ``auto``). `set_backend` switches at runtime,
which the parity tests and the benchmark rely on.

Both backends implement identical semantics: PAD positions never score,
anchor positions that are masked contribute zero and report argmax -1, and
ties in the max take the first (lowest-index) position. Scores from a
single backend are bitwise-reproducible; across backends they agree to
floating-point tolerance (summation order differs).
"""

import os

import numpy as np

from ..errors import ContractError, ShapeError
from . import _maxsim_np

try:
    from . import _maxsim_cy
except ImportError:
    _maxsim_cy = None

_BACKENDS = {"numpy": _maxsim_np}
if _maxsim_cy is not None:
    _BACKENDS["cython"] = _maxsim_cy

_ALIASES = {
    "auto": "auto",
    "": "auto",
    "numpy": "numpy",
    "np": "numpy",
    "python": "numpy",
    "cython": "cython",
    "cy": "cython",
    "compiled": "cython",
}


def _resolve(name: str) -> str:
    key = _ALIASES.get((name or "auto").strip().lower())
    if key is None:
        raise ValueError(f"unknown kernels backend {name!r}; choose auto, cython, or numpy")
    if key == "auto":
        return "cython" if "cython" in _BACKENDS else "numpy"
    if key not in _BACKENDS:
        raise ImportError(
            "compiled MaxSim backend requested but the extension is not built; "
            "reinstall with cython and scipy available, or set MINICLIR_KERNELS=numpy"
        )
    return key


_active = _resolve(os.environ.get("MINICLIR_KERNELS", "auto"))


def backend_name() -> str:
    """Name of the backend currently serving kernel calls."""
    return _active


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> str:
    """Switch backends at runtime; returns the previously active name."""
    global _active
    prev = _active
    _active = _resolve(name)
    return prev


def _prepare(x, x_mask, y, y_mask, aligned: bool):
    x = np.asarray(x)
    y = np.asarray(y)
    dtype = np.float32 if x.dtype == np.float32 and y.dtype == np.float32 else np.float64
    x = np.ascontiguousarray(x, dtype=dtype)
    y = np.ascontiguousarray(y, dtype=dtype)
    if x.ndim != 3 or y.ndim != 3:
        raise ShapeError(
            f"maxsim: token arrays must be 3-D (spans, positions, dim), got {x.shape} and {y.shape}"
        )
    if x.shape[2] != y.shape[2]:
        raise ShapeError(f"maxsim: hidden dims disagree for shapes {x.shape} and {y.shape}")
    if aligned and x.shape[0] != y.shape[0]:
        raise ShapeError(f"maxsim: aligned call needs equal span counts, got {x.shape[0]} and {y.shape[0]}")
    xm = np.ascontiguousarray((np.asarray(x_mask) != 0).astype(np.uint8))
    ym = np.ascontiguousarray((np.asarray(y_mask) != 0).astype(np.uint8))
    if xm.shape != x.shape[:2] or ym.shape != y.shape[:2]:
        raise ShapeError(
            f"maxsim: mask shapes {xm.shape}/{ym.shape} do not match token shapes {x.shape}/{y.shape}"
        )
    for side, m in (("left", xm), ("right", ym)):
        empty = np.nonzero(m.sum(axis=1) == 0)[0]
        if empty.size:
            raise ContractError(f"maxsim: {side} span {int(empty[0])} has zero attended tokens")
    return x, xm, y, ym


def maxsim_pairs(x, x_mask, y, y_mask):
    """Scores of row-aligned span pairs: out[a] = maxsim(x[a], y[a]).

    Returns ``(scores, argmax)`` where ``argmax[a, i]`` is the position of
    y[a] that won the max for anchor token i (or -1 where i is masked);
    the argmax is exactly what the backward pass needs.
    """
    x, xm, y, ym = _prepare(x, x_mask, y, y_mask, aligned=True)
    return _BACKENDS[_active].maxsim_pairs(x, xm, y, ym)


def maxsim_pairs_backward(grad_out, argmax, x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    dtype = np.float32 if x.dtype == np.float32 and y.dtype == np.float32 else np.float64
    x = np.ascontiguousarray(x, dtype=dtype)
    y = np.ascontiguousarray(y, dtype=dtype)
    g = np.ascontiguousarray(grad_out, dtype=dtype)
    am = np.ascontiguousarray(argmax, dtype=np.intc)
    return _BACKENDS[_active].maxsim_pairs_backward(g, am, x, y)


def maxsim_matrix(x, x_mask, y, y_mask):
    """All-pairs scores: out[a, b] = maxsim(x[a], y[b]); argmax shaped (A, B, len_x)."""
    x, xm, y, ym = _prepare(x, x_mask, y, y_mask, aligned=False)
    return _BACKENDS[_active].maxsim_matrix(x, xm, y, ym)


def maxsim_matrix_backward(grad_out, argmax, x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    dtype = np.float32 if x.dtype == np.float32 and y.dtype == np.float32 else np.float64
    x = np.ascontiguousarray(x, dtype=dtype)
    y = np.ascontiguousarray(y, dtype=dtype)
    g = np.ascontiguousarray(grad_out, dtype=dtype)
    am = np.ascontiguousarray(argmax, dtype=np.intc)
    return _BACKENDS[_active].maxsim_matrix_backward(g, am, x, y)


def maxsim_scores(query_tokens, query_mask, doc_tokens, doc_mask):
    """Forward-only scores of one query against many documents, shape (num_docs,)."""
    q = np.asarray(query_tokens)
    scores, _ = maxsim_matrix(q[None, :, :], np.asarray(query_mask)[None, :], doc_tokens, doc_mask)
    return scores[0]
