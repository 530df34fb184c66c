"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op returns a new :class:`Tensor` that records its parents and a
vector-Jacobian product. Calling :func:`backward` on a scalar root walks the
graph in reverse topological order and accumulates gradients.

Forward values are checked for NaN/Inf after every op; a non-finite result
raises :class:`NonFiniteError` naming the op that produced it.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, Iterator, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by op '{op}'")
        self.op = op


class NonDeterministicLossError(RuntimeError):
    pass


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._vjp: Optional[Callable] = None
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

    @property
    def parents(self) -> Tuple["Tensor", ...]:
        return self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def square(self):
        return square(self)

    def abs(self):
        return abs_(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], op: str, vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", vjp)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("subtract", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "subtract", vjp)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("multiply", a, b)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "multiply", vjp)


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data == 0):
        raise ZeroDivisionError("reciprocal: zero in input")
    out_data = 1.0 / a.data

    def vjp(g):
        return (-g * out_data * out_data,)

    return _result(out_data, (a,), "reciprocal", vjp)


def divide(a, b) -> Tensor:
    return multiply(a, reciprocal(b))


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), "negate", lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and structure

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), "matmul", vjp)


def affine(x, weight, bias) -> Tensor:
    """``x @ weight + bias`` as one node."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine: incompatible shapes {x.shape} and {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine: bias shape {bias.shape} does not match {weight.shape}")

    def vjp(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(x.data @ weight.data + bias.data, (x, weight, bias), "affine", vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    ax = axis % data.ndim
    cuts = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(data, tensors, "concat", vjp)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in items)


def slice_(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), "slice", vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(data, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum", vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), "mean", vjp)


# ---------------------------------------------------------------------------
# elementwise unary ops

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    return _result(out_data, (a,), "exp", lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError(f"log: non-positive input (min {a.data.min():.6g})")
    return _result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.data)
    return _result(s, (a,), "sigmoid", lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _result(t, (a,), "tanh", lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), (a,), "softplus", lambda g: (g * expit(a.data),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), "square", lambda g: (2.0 * g * a.data,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


# ---------------------------------------------------------------------------
# reverse pass

def topological_order(root: Tensor) -> list:
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor, params: Optional["ParameterStore"] = None) -> Optional[Dict[str, np.ndarray]]:
    """Accumulate d(root)/d(node) into ``node.grad`` for every node under ``root``.

    If ``params`` is given, returns a name -> gradient map over the store;
    parameters that do not feed into ``root`` get zeros.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be a scalar, got shape {root.shape}")
    order = topological_order(root)
    pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    if params is None:
        return None
    reached = {id(n) for n in order}
    return {
        name: (p.grad if id(p) in reached else np.zeros_like(p.data))
        for name, p in params.items()
    }


# ---------------------------------------------------------------------------
# parameters

class ParameterStore:
    """Named trainable tensors plus the seed used to initialise them."""

    def __init__(self, seed: Optional[int] = 0):
        self.seed = seed
        self._rng = np.random.default_rng(seed) if seed is not None else None
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, shape: Sequence[int], init: str = "normal", value=None) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter '{name}'")
        shape = tuple(int(s) for s in shape)
        if value is not None:
            data = np.broadcast_to(np.asarray(value, dtype=np.float64), shape).copy()
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "normal":
            if self._rng is None:
                raise ValueError("a merged store cannot initialise new parameters")
            fan_in = shape[0] if len(shape) > 1 else 1
            data = self._rng.standard_normal(shape) / np.sqrt(fan_in)
        else:
            raise ValueError(f"unknown init '{init}'")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def dense(self, name: str, fan_in: int, fan_out: int, zero: bool = False) -> Tuple[Tensor, Tensor]:
        w = self.add(f"{name}/W", (fan_in, fan_out), init="zeros" if zero else "normal")
        b = self.add(f"{name}/b", (fan_out,), init="zeros")
        return w, b

    @classmethod
    def merged(cls, stores: Dict[str, "ParameterStore"]) -> "ParameterStore":
        """A view sharing the tensors of several stores under prefixed names."""
        out = cls(seed=None)
        for prefix, store in stores.items():
            if store is None:
                continue
            for name, t in store.items():
                out._params[f"{prefix}.{name}"] = t
        return out

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._params.items()

    def names(self) -> list:
        return list(self._params)

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load(self, values: Dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter '{name}'")
            target = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != target.shape:
                raise ShapeError(f"load: '{name}' has shape {target.shape}, got {arr.shape}")
            target.data = arr.copy()

    def num_values(self) -> int:
        return int(sum(t.size for t in self._params.values()))


# ---------------------------------------------------------------------------
# optimisation

def sgd_step(
    params: ParameterStore,
    grads: Dict[str, np.ndarray],
    learning_rate: float,
    momentum: float = 0.0,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> ParameterStore:
    """In-place SGD update ``v <- momentum*v + g; theta <- theta - lr*v``."""
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if velocity is None:
        velocity = {}
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        p.data = p.data - learning_rate * v
    return params


class SGD:
    def __init__(self, params: ParameterStore, learning_rate: float, momentum: float = 0.0):
        self.params = params
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, grads: Dict[str, np.ndarray]) -> None:
        sgd_step(self.params, grads, self.learning_rate, self.momentum, self.velocity)


# ---------------------------------------------------------------------------
# gradient checking

def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterStore,
    epsilon: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    analytic: Optional[Dict[str, np.ndarray]] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` takes no arguments and must rebuild the graph from the
    current parameter values, drawing any noise from a freshly seeded
    stream so that repeated calls agree exactly. ``max_coords`` caps the
    number of coordinates probed per tensor (sampled with ``rng``).
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    first = loss_fn().item()
    if loss_fn().item() != first:
        raise NonDeterministicLossError("loss_fn is not repeatable under its fixed random stream")
    if analytic is None:
        analytic = backward(loss_fn(), params)
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = np.asarray(analytic[name]).reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = loss_fn().item()
            flat[i] = orig - epsilon
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(a_flat[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
