"""Dense float64 tensors with a reverse-mode tape.

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output adjoint to parent adjoints.
:func:`backward` walks the tape in reverse topological order; adjoints live in a
dictionary local to the call, so calling it twice on the same graph gives two
independent results.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractError

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Immutable float64 array plus the record needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        op: str = "leaf",
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.flags.writeable:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op) -> Tensor:
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, op=op, parents=parents, backward=backward)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# backward pass


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> Dict[Tensor, np.ndarray]:
    """Return ``{leaf: d root / d leaf}`` for every differentiable leaf reachable from ``root``.

    Raises :class:`ContractError` if ``root`` is not scalar.
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    adjoint: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    grads: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topological(root)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            grads[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg
    return grads


def grad(root: Tensor, wrt: Union[Tensor, Sequence[Tensor]]):
    """Gradient of scalar ``root`` w.r.t. one leaf or a sequence of leaves (zeros if unreachable)."""
    grads = backward(root)
    if isinstance(wrt, Tensor):
        return grads.get(wrt, np.zeros_like(wrt.data))
    return [grads.get(w, np.zeros_like(w.data)) for w in wrt]


def grad_check(fn: Callable[[Tensor], Tensor], x: ArrayLike, h: float = 1e-5) -> float:
    """Max over coordinates of ``|autodiff - central difference| / max(1, |central difference|)``."""
    if h <= 0:
        raise ContractError("step size must be positive")
    x0 = np.array(x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = fn(leaf)
    auto = grad(out, leaf)
    if not np.all(np.isfinite(auto)):
        raise FloatingPointError("non-finite autodiff gradient")
    flat = x0.reshape(-1)
    worst = 0.0
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = fn(Tensor(x0)).item()
        flat[k] = orig - h
        fm = fn(Tensor(x0)).item()
        flat[k] = orig
        fd = (fp - fm) / (2.0 * h)
        if not np.isfinite(fd):
            raise FloatingPointError(f"non-finite function value near coordinate {k}")
        err = abs(auto.reshape(-1)[k] - fd) / max(1.0, abs(fd))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError("matmul expects two matrices")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), back, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows ``a[index]`` along the first axis."""
    index = np.asarray(index, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), back, "take")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


# ---------------------------------------------------------------------------
# losses


def log_softmax(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return _make(out, (z,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),), "log_softmax")


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Per-sample ``-log softmax(logits)[label]`` for logits of shape (batch, classes)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError("label outside [0, n_classes)")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    out = -logp[rows, labels]

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return _make(out, (logits,), back, "cross_entropy")
