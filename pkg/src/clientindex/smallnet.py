"""Small reverse-mode differentiable kernel over float64 numpy arrays.

Only the primitives needed by the index-generation and local-training
losses are supported: dense layers, tanh/relu, elementwise arithmetic,
matrix products, column slicing and concatenation, reductions, exp/log,
masked log-sum-exp and log-softmax.  Parameter containers are dataclasses
(or lists of them) whose array leaves are walked by :func:`tree_map`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class GradientError(RuntimeError):
    """Raised when a graph uses an operation the kernel cannot differentiate."""


class ShapeError(ValueError):
    pass


# --------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    """A float64 array that records how it was computed."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")
    # numpy must not absorb Tensors into ufuncs: unsupported ops fail loudly
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    def __float__(self) -> float:
        return float(self.value)

    def __array__(self, dtype=None, copy=None):
        raise GradientError("Tensor cannot be converted implicitly to an ndarray; use .value")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> Tensor:
        def backward(g):
            return (g.T,)

        return Tensor(self.value.T, _parents=(self,), _backward=backward)

    def item(self) -> float:
        return float(self.value)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor(self.value + other.value, _parents=(self, other), _backward=backward)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        return Tensor(-self.value, _parents=(self,), _backward=lambda g: (-g,))

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor(self.value - other.value, _parents=(self, other), _backward=backward)

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.value, other.value

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor(a * b, _parents=(self, other), _backward=backward)

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.value, other.value
        out = a / b

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)

        return Tensor(out, _parents=(self, other), _backward=backward)

    def __rtruediv__(self, other) -> Tensor:
        return as_tensor(other) / self

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self.value, other.value
        if a.ndim != 2 or b.ndim != 2:
            raise GradientError("matmul is supported for 2-d operands only")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

        def backward(g):
            return g @ b.T, a.T @ g

        return Tensor(a @ b, _parents=(self, other), _backward=backward)

    def __rmatmul__(self, other) -> Tensor:
        return as_tensor(other) @ self

    def __getitem__(self, key) -> Tensor:
        shape = self.shape

        def backward(g):
            out = np.zeros(shape)
            np.add.at(out, key, g)
            return (out,)

        return Tensor(self.value[key], _parents=(self,), _backward=backward)

    # elementwise ------------------------------------------------------------
    def tanh(self) -> Tensor:
        out = np.tanh(self.value)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * (1.0 - out * out),))

    def relu(self) -> Tensor:
        mask = self.value > 0
        return Tensor(np.where(mask, self.value, 0.0), _parents=(self,),
                      _backward=lambda g: (g * mask,))

    def exp(self) -> Tensor:
        out = np.exp(self.value)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * out,))

    def log(self) -> Tensor:
        x = self.value
        return Tensor(np.log(x), _parents=(self,), _backward=lambda g: (g / x,))

    def sqrt(self) -> Tensor:
        out = np.sqrt(self.value)
        return Tensor(out, _parents=(self,), _backward=lambda g: (g * 0.5 / out,))

    def abs(self) -> Tensor:
        sign = np.sign(self.value)
        return Tensor(np.abs(self.value), _parents=(self,), _backward=lambda g: (g * sign,))

    def square(self) -> Tensor:
        x = self.value
        return Tensor(x * x, _parents=(self,), _backward=lambda g: (2.0 * g * x,))

    # reductions -------------------------------------------------------------
    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(self.value.sum(axis=axis, keepdims=keepdims), _parents=(self,),
                      _backward=backward)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        n = self.value.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def logsumexp(self, axis: int = 1, mask: np.ndarray | None = None) -> Tensor:
        """Stable log-sum-exp along ``axis``; entries where ``mask`` is False are left out."""
        x = self.value
        keep = np.ones(x.shape, dtype=bool) if mask is None else np.broadcast_to(mask, x.shape)
        if not keep.any(axis=axis).all():
            raise GradientError("logsumexp over an empty set")
        m = np.max(np.where(keep, x, -np.inf), axis=axis, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, x - m, 0.0)), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        out = (np.log(s) + m).squeeze(axis)
        w = e / s

        def backward(g):
            return (np.expand_dims(g, axis) * w,)

        return Tensor(out, _parents=(self,), _backward=backward)

    def log_softmax(self, axis: int = -1) -> Tensor:
        x = self.value
        m = x.max(axis=axis, keepdims=True)
        shifted = x - m
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse
        sm = np.exp(out)

        def backward(g):
            return (g - sm * g.sum(axis=axis, keepdims=True),)

        return Tensor(out, _parents=(self,), _backward=backward)

    def detach(self) -> Tensor:
        return Tensor(self.value)

    # backprop ---------------------------------------------------------------
    def backward(self) -> None:
        if self.value.size != 1:
            raise GradientError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.ndarray, np.floating, np.integer)):
        return Tensor(x)
    raise GradientError(f"unsupported operand of type {type(x).__name__}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return Tensor(np.concatenate([p.value for p in parts], axis=axis), _parents=tuple(parts),
                  _backward=backward)


def stop_gradient(x) -> Tensor:
    return as_tensor(x).detach()


# --------------------------------------------------------------------------
# parameter containers


@dataclass
class DenseParams:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpParams:
    layers: list[DenseParams]
    activations: list[str] = field(metadata={"static": True})

    def __post_init__(self):
        if len(self.layers) != len(self.activations):
            raise ShapeError("one activation per layer is required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for k in range(1, len(self.layers)):
            if self.layers[k - 1].out_dim != self.layers[k].in_dim:
                raise ShapeError(
                    f"layer {k} expects {self.layers[k].in_dim} inputs, "
                    f"layer {k - 1} emits {self.layers[k - 1].out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim


def glorot_dense(in_dim: int, out_dim: int, rng: np.random.Generator) -> DenseParams:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    return DenseParams(rng.uniform(-limit, limit, size=(in_dim, out_dim)), np.zeros(out_dim))


def init_mlp(dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform MLP with zero biases; ``dims`` lists input then every layer width."""
    if len(dims) - 1 != len(activations):
        raise ShapeError("need len(dims) - 1 activations")
    layers = [glorot_dense(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
    return MlpParams(layers, list(activations))


def _is_leaf(x) -> bool:
    return isinstance(x, (np.ndarray, Tensor))


def tree_map(fn: Callable, tree, *rest, path: tuple = ()):
    """Apply ``fn(path, leaf, *other_leaves)`` to every array leaf of a parameter tree.

    Dataclass fields tagged ``metadata={"static": True}`` are passed through
    untouched from the first tree; so are ``None`` and scalars.
    """
    if _is_leaf(tree):
        return fn(path, tree, *rest)
    if dataclasses.is_dataclass(tree) and not isinstance(tree, type):
        kwargs = {}
        for f in dataclasses.fields(tree):
            value = getattr(tree, f.name)
            if f.metadata.get("static"):
                kwargs[f.name] = value
            else:
                others = [getattr(r, f.name) for r in rest]
                kwargs[f.name] = tree_map(fn, value, *others, path=path + (f.name,))
        return _rebuild(tree, kwargs)
    if isinstance(tree, (list, tuple)):
        out = [tree_map(fn, v, *[r[k] for r in rest], path=path + (k,))
               for k, v in enumerate(tree)]
        return type(tree)(out)
    return tree


def _rebuild(obj, kwargs):
    # bypass __post_init__ validation: Tensor leaves have the same shapes
    new = object.__new__(type(obj))
    for k, v in kwargs.items():
        object.__setattr__(new, k, v)
    return new


def tree_leaves(tree) -> Iterator[tuple[tuple, Any]]:
    out: list = []
    tree_map(lambda p, x: out.append((p, x)), tree)
    return iter(out)


def tree_copy(tree):
    return tree_map(lambda _, x: np.array(x, dtype=np.float64, copy=True), tree)


def tree_zeros(tree):
    return tree_map(lambda _, x: np.zeros(np.shape(x.value if isinstance(x, Tensor) else x)), tree)


def tree_allfinite(tree) -> bool:
    return all(np.isfinite(x).all() for _, x in tree_leaves(tree))


def is_bias(path: tuple) -> bool:
    return bool(path) and path[-1] == "bias"


# --------------------------------------------------------------------------
# forward passes


def dense(params: DenseParams, x: Tensor) -> Tensor:
    return as_tensor(x) @ params.weight + params.bias


def activate(x: Tensor, name: str) -> Tensor:
    if name == "tanh":
        return x.tanh()
    if name == "relu":
        return x.relu()
    if name == "identity":
        return x
    raise GradientError(f"unsupported activation {name!r}")


def mlp_apply(params: MlpParams, x) -> Tensor:
    """Differentiable MLP forward; params may hold arrays or Tensors."""
    h = as_tensor(x)
    if h.value.ndim != 2:
        raise ShapeError("input must be a 2-d batch")
    for k, (layer, act) in enumerate(zip(params.layers, params.activations)):
        if h.shape[1] != layer.weight.shape[0]:
            raise ShapeError(
                f"layer {k}: input has {h.shape[1]} columns, weight expects {layer.weight.shape[0]}"
            )
        h = activate(dense(layer, h), act)
    return h


def mlp_forward(params: MlpParams, x: np.ndarray) -> np.ndarray:
    return mlp_apply(params, np.asarray(x, dtype=np.float64)).value


# --------------------------------------------------------------------------
# vector functions


def row_norms(x: Tensor) -> Tensor:
    return (x * x).sum(axis=1, keepdims=True).sqrt()


def _check_nonzero(norms: np.ndarray, what: str) -> None:
    if np.any(norms == 0.0):
        raise ValueError(f"cosine similarity of a zero-norm {what}")


def cosine_rows(a, b) -> Tensor:
    """Row-wise cosine similarity of two (B, d) batches; returns shape (B,)."""
    a, b = as_tensor(a), as_tensor(b)
    na, nb = row_norms(a), row_norms(b)
    _check_nonzero(na.value, "row")
    _check_nonzero(nb.value, "row")
    return ((a * b).sum(axis=1, keepdims=True) / (na * nb)).sum(axis=1)


def normalize_rows(x) -> Tensor:
    x = as_tensor(x)
    n = row_norms(x)
    _check_nonzero(n.value, "row")
    return x / n


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"vector lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def softmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def kl_rows(p_logits, q_logits) -> Tensor:
    """Per-row KL(softmax(p) || softmax(q)); shape (B,)."""
    lp = as_tensor(p_logits).log_softmax(axis=1)
    lq = as_tensor(q_logits).log_softmax(axis=1)
    return (lp.exp() * (lp - lq)).sum(axis=1)


def kl_from_logits(p_logits, q_logits) -> float:
    p = np.atleast_2d(np.asarray(p_logits, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q_logits, dtype=np.float64))
    return max(0.0, float(kl_rows(p, q).value.sum()))


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    logits = as_tensor(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(logits.log_softmax(axis=1) * onehot).sum() * (1.0 / len(labels))


# --------------------------------------------------------------------------
# gradients and optimisation


def grad(loss_fn: Callable, params) -> Any:
    """Gradients of ``loss_fn(params)`` (a scalar Tensor) w.r.t. every array leaf."""
    leaves = tree_map(lambda _, x: Tensor(x, requires_grad=True), params)
    loss = loss_fn(leaves)
    if not isinstance(loss, Tensor):
        raise GradientError("loss_fn must return a Tensor built from the given parameters")
    loss.backward()
    return tree_map(lambda _, t: np.zeros_like(t.value) if t.grad is None else t.grad, leaves)


def value_and_grad(loss_fn: Callable, params) -> tuple[float, Any]:
    leaves = tree_map(lambda _, x: Tensor(x, requires_grad=True), params)
    loss = loss_fn(leaves)
    loss.backward()
    grads = tree_map(lambda _, t: np.zeros_like(t.value) if t.grad is None else t.grad, leaves)
    return float(loss.value), grads


def finite_diff_check(loss_fn: Callable, params, h: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences."""
    if h <= 0:
        raise ValueError("h must be positive")
    analytic = grad(loss_fn, params)
    work = tree_copy(params)

    def evaluate():
        return float(loss_fn(tree_map(lambda _, x: Tensor(x), work)).value)

    worst = 0.0
    for (_, arr), (_, g) in zip(tree_leaves(work), tree_leaves(analytic)):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            hi = flat[k]
            up = evaluate()
            flat[k] = orig - h
            lo = flat[k]
            down = evaluate()
            flat[k] = orig
            # divide by the step actually taken after rounding
            numeric = (up - down) / (hi - lo)
            denom = max(abs(gflat[k]), abs(numeric), 1e-8)
            worst = max(worst, abs(gflat[k] - numeric) / denom)
    return worst


@dataclass
class SgdState:
    buffers: Any
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def sgd_init(params, learning_rate: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> SgdState:
    return SgdState(tree_zeros(params), learning_rate, momentum, weight_decay)


def sgd_step(params, grads, state: SgdState):
    """One momentum-SGD step; returns ``(new_params, new_state)`` without mutating inputs.

    v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v.
    Biases are not decayed.
    """
    def new_buffer(path, p, g, v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} at {path}")
        d = g if (state.weight_decay == 0.0 or is_bias(path)) else g + state.weight_decay * p
        return state.momentum * v + d

    buffers = tree_map(new_buffer, params, grads, state.buffers)
    new_params = tree_map(lambda _, p, v: p - state.learning_rate * v, params, buffers)
    return new_params, dataclasses.replace(state, buffers=buffers)
