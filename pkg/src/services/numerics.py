import itertools
import logging
import math
import zlib
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

INIT_SCHEMES = ("zeros", "ones", "scaled-normal", "scaled-uniform")

_node_counter = itertools.count()
_leaf_counter = itertools.count()
_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)

ArrayLike = Union[np.ndarray, Sequence[float], float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    pass


class NonFiniteError(ValueError):
    """Raised when a primitive sees NaN/inf input or would produce it."""

    pass


@dataclass(eq=False)
class GradNode:
    """One recorded primitive application."""

    node_id: int
    op: str
    parents: Tuple[Optional["Tensor"], ...]
    backward: BackwardFn


class Tensor:
    """
    Dense float64 array participating in a differentiation graph.

    Leaf tensors with ``requires_grad=True`` are tunable parameters and are
    identified in gradient maps by ``name`` (the parameter path). Tensors
    produced by a primitive carry the ``GradNode`` that made them when any
    input required gradients.

    Example:
        w = Tensor(np.ones((2, 2)), requires_grad=True, name="w")
        loss = sum_(mul(w, w))
        grads = backward(GradGraph.trace(loss), loss)
    """

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        copy: bool = True,
    ):
        arr = np.array(data, dtype=np.float64, copy=copy) if copy else np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name if name is not None else f"tensor{next(_leaf_counter)}"
        self._node: Optional[GradNode] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def node_id(self) -> Optional[int]:
        return self._node.node_id if self._node is not None else None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(name={self.name!r}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class GradGraph:
    """
    Append-only record of primitive applications reachable from a loss.

    Nodes are kept in insertion order (global creation order of the
    primitives); backward walks them in reverse, visiting each once.
    """

    def __init__(self, nodes: Optional[List[GradNode]] = None):
        self.nodes: List[GradNode] = nodes or []

    @classmethod
    def trace(cls, output: Tensor) -> "GradGraph":
        """Collect every node the output depends on."""
        seen: Dict[int, GradNode] = {}
        stack = [output]
        while stack:
            tensor = stack.pop()
            node = tensor._node
            if node is None or node.node_id in seen:
                continue
            seen[node.node_id] = node
            stack.extend(p for p in node.parents if p is not None)
        return cls([seen[k] for k in sorted(seen)])

    def __len__(self) -> int:
        return len(self.nodes)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


def constant(data: ArrayLike) -> Tensor:
    """Wrap an array as a tensor that never receives gradients."""
    return Tensor(data, requires_grad=False, name="const")


# ---------------------------------------------------------------------------
# recording helpers
# ---------------------------------------------------------------------------


def _require_finite(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op}: produced non-finite output of shape {out.shape}")
    result = Tensor(out, copy=False, name=op)
    if not is_grad_enabled() or not any(t.requires_grad for t in inputs):
        return result
    result.requires_grad = True
    parents = tuple(t if t.requires_grad else None for t in inputs)
    result._node = GradNode(next(_node_counter), op, parents, backward)
    return result


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _axis(op: str, t: Tensor, axis: int) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {t.shape}")
    return axis % t.ndim


# ---------------------------------------------------------------------------
# primitive catalog
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    _require_finite("matmul", a, b)
    out = np.matmul(a.data, b.data)

    def backward(g: np.ndarray):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    _require_finite("add", a, b)
    out = a.data + b.data

    def backward(g: np.ndarray):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _make("add", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with broadcasting."""
    _broadcast_shape("mul", a, b)
    _require_finite("mul", a, b)
    out = a.data * b.data

    def backward(g: np.ndarray):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _make("mul", out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    if not math.isfinite(factor):
        raise NonFiniteError(f"scale: non-finite factor {factor}")
    _require_finite("scale", a)
    out = a.data * factor

    def backward(g: np.ndarray):
        return (g * factor,)

    return _make("scale", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no operands")
    ax = _axis("concat", tensors[0], axis)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[x.shape for x in tensors]} differ off axis {axis}")
    _require_finite("concat", *tensors)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g: np.ndarray):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _make("concat", out, tuple(tensors), backward)


def slice_(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start, stop)`` along one axis."""
    ax = _axis("slice", a, axis)
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for axis {axis} of shape {a.shape}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    out = a.data[index].copy()

    def backward(g: np.ndarray):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _make("slice", out, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: needs at least 2 axes, got shape {a.shape}")
    out = np.swapaxes(a.data, -1, -2).copy()

    def backward(g: np.ndarray):
        return (np.swapaxes(g, -1, -2),)

    return _make("transpose", out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}")
    out = a.data.reshape(shape).copy()

    def backward(g: np.ndarray):
        return (g.reshape(a.shape),)

    return _make("reshape", out, (a,), backward)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    _require_finite("mean", a)
    ax = None if axis is None else _axis("mean", a, axis)
    out = np.asarray(a.data.mean(axis=ax, keepdims=keepdims))
    count = a.data.size if ax is None else a.shape[ax]

    def backward(g: np.ndarray):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make("mean", out, (a,), backward)


def sum_(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    _require_finite("sum", a)
    ax = None if axis is None else _axis("sum", a, axis)
    out = np.asarray(a.data.sum(axis=ax, keepdims=keepdims))

    def backward(g: np.ndarray):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    _require_finite("relu", a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def backward(g: np.ndarray):
        return (g * mask,)

    return _make("relu", out, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    _require_finite("gelu", a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make("gelu", out, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    _require_finite("softmax", a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax", y, (a,), backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    _require_finite("layer_norm", a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd

    def backward(g: np.ndarray):
        g_mean = g.mean(axis=-1, keepdims=True)
        gy_mean = (g * y).mean(axis=-1, keepdims=True)
        return (rstd * (g - g_mean - y * gy_mean),)

    return _make("layer_norm", y, (a,), backward)


def cross_entropy(logits: Tensor, targets: Union[np.ndarray, Sequence[int]]) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ShapeError(f"cross_entropy: targets out of range for {logits.shape[1]} classes")
    _require_finite("cross_entropy", logits)
    n = logits.shape[0]
    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    total = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(total))[:, 0]
    picked = logits.data[np.arange(n), targets]
    out = np.asarray((lse - picked).mean())
    probs = e / total

    def backward(g: np.ndarray):
        grad = probs.copy()
        grad[np.arange(n), targets] -= 1.0
        return (grad * (g / n),)

    return _make("cross_entropy", out, (logits,), backward)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale every row (last axis) to unit Euclidean norm."""
    _require_finite("l2_normalize", a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    if (norm == 0).any():
        raise NonFiniteError(f"l2_normalize: zero-norm row in shape {a.shape}")
    y = a.data / norm

    def backward(g: np.ndarray):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (a,), backward)


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product of two matrices: block (i, j) is ``a[i, j] * b``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"kron: expects matrices, got {a.shape} and {b.shape}")
    _require_finite("kron", a, b)
    m, n = a.shape
    p, q = b.shape
    out = np.kron(a.data, b.data)

    def backward(g: np.ndarray):
        blocks = g.reshape(m, p, n, q)
        ga = np.einsum("ipjq,pq->ij", blocks, b.data) if a.requires_grad else None
        gb = np.einsum("ipjq,ij->pq", blocks, a.data) if b.requires_grad else None
        return ga, gb

    return _make("kron", out, (a, b), backward)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast by adding to a zero constant of the target shape."""
    return add(constant(np.zeros(tuple(shape))), a)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------


def backward(graph: GradGraph, loss: Tensor) -> Dict[str, Tensor]:
    """
    Propagate d(loss)/d(.) back to every tunable leaf.

    Args:
        graph: Graph traced from ``loss`` (``GradGraph.trace(loss)``)
        loss: Scalar tensor

    Returns:
        Map from parameter name to a gradient tensor of the parameter's shape.
        Tensors with ``requires_grad=False`` never appear.

    Raises:
        ShapeError: If ``loss`` is not a scalar
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    leaf_grads: Dict[str, np.ndarray] = {}
    if loss._node is None:
        if loss.requires_grad:
            leaf_grads[loss.name] = np.ones_like(loss.data)
        return {k: Tensor(v, copy=False, name=k) for k, v in leaf_grads.items()}

    pending: Dict[int, np.ndarray] = {loss._node.node_id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = pending.pop(node.node_id, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if parent is None or pg is None:
                continue
            if parent._node is not None:
                key = parent._node.node_id
                pending[key] = pending[key] + pg if key in pending else pg
            else:
                key = parent.name
                leaf_grads[key] = leaf_grads[key] + pg if key in leaf_grads else pg
    return {k: Tensor(v, copy=False, name=k) for k, v in leaf_grads.items()}


def grad(loss: Tensor) -> Dict[str, Tensor]:
    """Shorthand for ``backward(GradGraph.trace(loss), loss)``."""
    return backward(GradGraph.trace(loss), loss)


# ---------------------------------------------------------------------------
# seeded initialization
# ---------------------------------------------------------------------------


def substream(seed: int, path: str) -> np.random.Generator:
    """Independent generator for (global seed, parameter path)."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(path.encode("utf-8"))]))


def seeded_init(
    shape: Sequence[int],
    scheme: str,
    seed: int,
    path: str = "",
    fan_in: Optional[int] = None,
    requires_grad: bool = False,
) -> Tensor:
    """
    Deterministically initialize a tensor.

    The generator is derived from ``(seed, path)`` only, so the same pair
    always yields a bitwise identical buffer whatever else was initialized.

    Raises:
        ValueError: If the scheme is not in the catalog
    """
    shape = tuple(int(s) for s in shape)
    if scheme not in INIT_SCHEMES:
        raise ValueError(f"Unknown init scheme '{scheme}', expected one of {INIT_SCHEMES}")
    if scheme == "zeros":
        data = np.zeros(shape)
    elif scheme == "ones":
        data = np.ones(shape)
    else:
        fan = fan_in if fan_in is not None else (shape[0] if shape else 1)
        std = 1.0 / math.sqrt(fan)
        rng = substream(seed, path)
        if scheme == "scaled-normal":
            data = rng.standard_normal(shape) * std
        else:
            bound = std * math.sqrt(3.0)
            data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=requires_grad, name=path or None, copy=False)
