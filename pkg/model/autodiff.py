"""
Reverse-mode Automatic Differentiation
Dense float64 tensors over numpy with a recorded graph, topological backward
and a central finite-difference gradient checker.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.error_handler import DimensionError, NumericError

ArrayLike = Union[np.ndarray, float, int, Sequence]
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """N-d array that records the ops producing it"""
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track)
    if track:
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back to an operand shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast", original_error=e)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))
    return _result(out, (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)
    return _result(np.where(mask, x.data, 0.0), (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)
    return _result(out, (x,), bw)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        out = np.log(x.data)

    def bw(g):
        return (g / x.data,)
    return _result(out, (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)
    return _result(out, (x,), bw)


def where(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Keep x where mask is true, constant fill elsewhere (no gradient there)"""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"where: mask {mask.shape} vs tensor {x.shape}")

    def bw(g):
        return (np.where(mask, g, 0.0),)
    return _result(np.where(mask, x.data, fill), (x,), bw)


# ---------------------------------------------------------------------------
# Shape ops and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul needs at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = a.data @ b.data
    except ValueError as e:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape}", original_error=e)

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = (g[..., None, :] @ np.swapaxes(bd, -1, -2))[..., 0, :]
            gb = ad[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        if bd.ndim == 1:
            ga = g[..., :, None] * bd
            gb = (np.swapaxes(ad, -1, -2) @ g[..., :, None])[..., 0]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _result(out, (a, b), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(sorted(a % x.ndim for a in axes))
            for ax in axes:
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)
    return _result(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise NumericError("mean over an empty axis")
    return tsum(x, axis, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape {x.shape} -> {shape}", original_error=e)

    def bw(g):
        return (g.reshape(x.shape),)
    return _result(out, (x,), bw)


def transpose(x: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inverse),)
    return _result(np.transpose(x.data, axes), (x,), bw)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)
    return _result(np.array(out, dtype=np.float64), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError("concat: incompatible shapes " + str([t.shape for t in tensors]), original_error=e)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))
    return _result(out, tuple(tensors), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError("stack: incompatible shapes " + str([t.shape for t in tensors]), original_error=e)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return _result(out, tuple(tensors), bw)


def broadcast_to(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as e:
        raise DimensionError(f"broadcast {x.shape} -> {shape}", original_error=e)

    def bw(g):
        return (_unbroadcast(g, x.shape),)
    return _result(out, (x,), bw)


# ---------------------------------------------------------------------------
# Normalizing ops
# ---------------------------------------------------------------------------

def _stable_lse(data: np.ndarray, axis: int) -> np.ndarray:
    """logsumexp with keepdims; rows that are all -inf give -inf"""
    peak = np.max(data, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    with np.errstate(divide="ignore"):
        return np.log(np.sum(np.exp(data - peak), axis=axis, keepdims=True)) + peak


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    lse = _stable_lse(x.data, axis)
    out = lse if keepdims else np.squeeze(lse, axis=axis)

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        finite = np.isfinite(lse)
        weights = np.where(finite, np.exp(x.data - np.where(finite, lse, 0.0)), 0.0)
        return (gk * weights,)
    return _result(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    lse = _stable_lse(x.data, axis)
    finite = np.isfinite(lse)
    out = np.where(finite, np.exp(x.data - np.where(finite, lse, 0.0)), 0.0)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)
    return _result(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    lse = _stable_lse(x.data, axis)
    finite = np.broadcast_to(np.isfinite(lse), x.shape)
    out = np.where(finite, x.data - np.where(np.isfinite(lse), lse, 0.0), -np.inf)
    probs = np.exp(out)

    def bw(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)
    return _result(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    centered = x - mean(x, axis=-1, keepdims=True)
    variance = mean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(variance + eps) * gain + bias


def l2_distance(u, v, axis: int = -1) -> Tensor:
    """Euclidean distance along an axis, with broadcasting"""
    u, v = as_tensor(u), as_tensor(v)
    _check_broadcast(u, v, "l2_distance")
    diff = u.data - v.data
    out = np.sqrt(np.sum(diff * diff, axis=axis))

    def bw(g):
        dist = np.expand_dims(out, axis)
        scale = np.where(dist > 0, np.expand_dims(g, axis) / np.where(dist > 0, dist, 1.0), 0.0)
        grad = scale * diff
        return _unbroadcast(grad, u.shape), _unbroadcast(-grad, v.shape)
    return _result(out, (u, v), bw)


def mean_pool(sequence: Tensor) -> Tensor:
    return mean(sequence, axis=0)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-d score vector"""
    return -log_softmax(logits, axis=-1)[target]


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        current, expanded = stack.pop()
        if expanded:
            order.append(current)
            continue
        if id(current) in visited:
            continue
        visited.add(id(current))
        stack.append((current, True))
        for parent in current._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into the grad field of every leaf that requires grad"""
    if loss.size != 1:
        raise NumericError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for current in reversed(_topological_order(loss)):
        g = grads.pop(id(current), None)
        if g is None:
            continue
        if current._backward is None:
            current.grad = g.copy() if current.grad is None else current.grad + g
            continue
        for parent, pg in zip(current._parents, current._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Max relative error of analytic vs central-difference gradients"""
    max_rel_error: float
    per_tensor: Dict[str, float] = field(default_factory=dict)
    coordinates_checked: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-6, abs(analytic) + abs(numeric))


def grad_check(f: Callable[[], Tensor], params: Dict[str, Tensor], step: float = 1e-4,
               tol: float = 1e-4, samples: int = 64,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """
    Compare backward() with central differences.

    Args:
        f: Deterministic closure building a scalar loss from the current params
        params: Named tensors to check (perturbed in place, then restored)
        step: Finite-difference step
        tol: Pass threshold stored on the report
        samples: Coordinates checked per tensor (all when the tensor is smaller)
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for tensor in params.values():
        if not np.all(np.isfinite(tensor.data)):
            raise NumericError("grad_check: parameters contain non-finite values")
        tensor.zero_grad()

    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("grad_check: loss is not finite")
    backward(loss)

    report = GradCheckReport(max_rel_error=0.0, tol=tol)
    for name, tensor in params.items():
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        count = flat.size
        coords = np.arange(count) if count <= samples else rng.choice(count, size=samples, replace=False)
        worst = 0.0
        for coord in coords:
            original = flat[coord]
            with no_grad():
                flat[coord] = original + step
                plus = float(f().data)
                flat[coord] = original - step
                minus = float(f().data)
            flat[coord] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"grad_check: non-finite loss while perturbing {name}")
            numeric = (plus - minus) / (2 * step)
            worst = max(worst, relative_error(float(analytic.reshape(-1)[coord]), numeric))
        report.per_tensor[name] = worst
        report.coordinates_checked += len(coords)
        report.max_rel_error = max(report.max_rel_error, worst)
    return report


def zero_grads(params: Iterable[Tensor]) -> None:
    for tensor in params:
        tensor.zero_grad()
