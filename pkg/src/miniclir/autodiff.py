"""Reverse-mode automatic differentiation over numpy arrays.

Define-by-run tape: every operation returns a `Tensor` holding the forward
value, references to its parent tensors, and a VJP closure mapping the
output gradient to per-parent gradients. `backward()` walks the graph in
reverse topological order and accumulates into `.grad`.

Precision is caller-controlled: parameters created as float64 give a
float64 graph (the verification mode used by every gradient check),
float32 gives the fast mode. Evaluation is single-threaded numpy, so
repeated runs over identical inputs produce bitwise-identical values and
gradients within one precision mode.

Forward evaluation never mutates inputs; sharing parameters across threads
for concurrent forward passes is safe. Gradient accumulation into one
parameter set must stay on a single training thread.
"""

import math
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, ShapeError

_GRAD_ENABLED = True

GELU_COEFF = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A node in the computation graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named trainable leaf. Gradient buffer always allocated, zeroed between steps."""

    def __init__(self, name: str, data):
        super().__init__(np.asarray(data), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    @property
    def gradient(self) -> np.ndarray:
        return self.grad


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    """Build a graph node; drops the tape when grads are off or unneeded."""
    need = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=need)
    if need:
        out._parents = parents
        out._vjp = vjp
    return out


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable `.grad`. Root must be scalar."""
    if root.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {root.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._vjp is None or node.grad is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(node.grad)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += pg


def gradients(loss: Tensor, params) -> dict[str, np.ndarray]:
    """Backward pass filling each parameter's gradient; returns {name: grad}."""
    backward(loss)
    out = {}
    for p in _param_list(params):
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out[p.name] = p.grad
    return out


def zero_grads(params) -> None:
    for p in _param_list(params):
        p.grad = np.zeros_like(p.data)


def _param_list(params) -> list[Parameter]:
    if isinstance(params, dict):
        return [params[k] for k in sorted(params)]
    return list(params)


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    y = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return make_node(y, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    y = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return make_node(y, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    y = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return make_node(y, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, incl. numpy-style batched operands (leading dims broadcast)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul: operands must be at least 2-D, got shapes {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for shapes {a.data.shape} and {b.data.shape}"
        )
    y = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return make_node(y, (a, b), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    y = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return make_node(y, (a,), vjp)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    y = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return make_node(y, (a,), vjp)


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing only; slices never overlap so the VJP is a plain scatter."""
    y = a.data[index]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[index] += g
        return (out,)

    return make_node(y, (a,), vjp)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    y = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return make_node(y, tuple(tensors), vjp)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, a.data.shape).copy(),)

    return make_node(y, (a,), vjp)


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def vjp(g):
        return (g * y,)

    return make_node(y, (a,), vjp)


def log(a: Tensor) -> Tensor:
    y = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return make_node(y, (a,), vjp)


def gather_pairs(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick matrix entries a[rows[k], cols[k]] into a vector."""
    y = a.data[rows, cols]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return make_node(y, (a,), vjp)


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Shift-stable softmax along `axis`. Rows of -inf entries get exact zeros."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return make_node(y, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    gain_b = gain.data.reshape((1,) * (a.data.ndim - 1) + (-1,))
    y = xhat * gain_b + bias.data.reshape(gain_b.shape)

    def vjp(g):
        reduce_axes = tuple(range(a.data.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes).reshape(gain.data.shape)
        dbias = g.sum(axis=reduce_axes).reshape(bias.data.shape)
        dxhat = g * gain_b
        # d/dx of (x - mu) / sqrt(var + eps), means taken over the last axis
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return make_node(y, (a, gain, bias), vjp)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation (the variant all gradient checks assume)."""
    x = a.data
    u = GELU_COEFF * (x + GELU_CUBIC * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = GELU_COEFF * (1.0 + 3.0 * GELU_CUBIC * x**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du
        return (g * dy,)

    return make_node(y, (a,), vjp)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale rows to unit L2 norm; all-zero rows pass through unchanged."""
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0.0, norm, 1.0)
    y = a.data / safe

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        # zero rows keep the identity Jacobian (y == x there)
        return ((g - y * inner) / safe,)

    return make_node(y, (a,), vjp)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` by integer array `ids` (any shape)."""
    ids = np.asarray(ids)
    vocab = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise IndexError(f"embedding_lookup: id {bad} out of range for table of {vocab} rows")
    y = table.data[ids]

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        return (out,)

    return make_node(y, (table,), vjp)


def cross_entropy_with_ignore_index(
    logits: Tensor, labels: np.ndarray, ignore_index: int = -1
) -> Tensor:
    """Mean token-level cross entropy over positions whose label is not ignored.

    `logits` is (N, V), `labels` (N,) integers in [0, V) or `ignore_index`.
    Returns a scalar; exactly zero when every position is ignored.
    """
    labels = np.asarray(labels)
    n, v = logits.data.shape
    valid = labels != ignore_index
    checked = labels[valid]
    if checked.size and (checked.min() < 0 or checked.max() >= v):
        bad = int(checked.min()) if checked.min() < 0 else int(checked.max())
        raise IndexError(f"cross_entropy: label {bad} out of range for {v} classes")
    count = int(valid.sum())
    if count == 0:
        zero = np.zeros((), dtype=logits.data.dtype)

        def vjp_zero(g):
            return (np.zeros_like(logits.data),)

        return make_node(zero, (logits,), vjp_zero)

    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, labels[rows]].sum() / count
    y = np.asarray(loss, dtype=logits.data.dtype)

    def vjp(g):
        probs = np.exp(logp)
        dlogits = np.zeros_like(logits.data)
        dlogits[rows] = probs[rows]
        dlogits[rows, labels[rows]] -= 1.0
        dlogits *= g / count
        return (dlogits,)

    return make_node(y, (logits,), vjp)
