"""Reverse-mode automatic differentiation over numpy arrays

Shapes are explicit everywhere; the only broadcast is the bias add inside `linear`.
"""

from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple
import logging
import math
import threading

import numpy as np

from pcdenoise.core.errors import InvalidArgumentError, InvalidStateError, NumericFailureError
from pcdenoise.core.geometry import NeighborGraph

logger = logging.getLogger(__name__)

_DTYPE = [np.float32]
_grad_mode = threading.local()


def current_dtype():
    return _DTYPE[0]


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Storage precision of tensors created inside the block (process-wide)"""
    previous = _DTYPE[0]
    _DTYPE[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE[0] = previous


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Skip graph recording in the current thread"""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense array with an optional backward-graph record"""

    __slots__ = ("values", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[BackwardFn] = None,
        name: Optional[str] = None,
    ):
        self.values = np.asarray(values, dtype=current_dtype())
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values)


def _result(values: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(values)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., c) @ (c, d) -> (..., d)"""
    if b.values.ndim != 2 or a.values.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.values @ b.values

    def backward(g):
        ga = g @ b.values.T
        gb = a.values.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias, the bias broadcast over all leading axes"""
    if bias.values.ndim != 1 or bias.shape[0] != weight.shape[1]:
        raise InvalidArgumentError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    y = matmul(x, weight)
    out = y.values + bias.values

    def backward(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _result(out, (y, bias), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _result(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _result(a.values - b.values, (a, b), lambda g: (g, -g))


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.values * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _result(np.where(mask, a.values, 0), (a,), lambda g: (g * mask,))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis"""
    if not tensors:
        raise InvalidArgumentError("concat: no inputs")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise InvalidArgumentError(f"concat: leading shapes differ {lead} vs {t.shape[:-1]}")
    out = np.concatenate([t.values for t in tensors], axis=-1)
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _result(out, tuple(tensors), backward)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """(n, c) rows picked by an integer index array of any shape -> index.shape + (c,)"""
    index = np.asarray(index, dtype=np.int64)
    if x.values.ndim != 2:
        raise InvalidArgumentError(f"gather_rows: expected a 2-D tensor, got {x.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise InvalidArgumentError("gather_rows: index out of range", rows=x.shape[0])
    out = x.values[index]

    def backward(g):
        gx = np.zeros_like(x.values)
        np.add.at(gx, index.ravel(), g.reshape(-1, x.shape[1]))
        return (gx,)

    return _result(out, (x,), backward)


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient goes to the lowest-index maximizer"""
    axis = axis % x.values.ndim
    arg = np.expand_dims(np.argmax(x.values, axis=axis), axis)
    out = np.take_along_axis(x.values, arg, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.values)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    n = x.values.size
    return _result(np.asarray(x.values.mean()), (x,), lambda g: (np.full_like(x.values, g / n),))


def sum_of_squares(x: Tensor) -> Tensor:
    return _result(np.asarray(np.sum(x.values * x.values)), (x,), lambda g: (2.0 * g * x.values,))


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(original),))


def objective(x: Tensor, value: float, gradient: np.ndarray) -> Tensor:
    """Scalar node whose value and gradient with respect to x are supplied by the caller"""
    gradient = np.asarray(gradient)
    if gradient.shape != x.shape:
        raise InvalidArgumentError(f"objective: gradient {gradient.shape} does not match {x.shape}")
    return _result(np.asarray(value), (x,), lambda g: (g * gradient,))


def mean_squared_error(prediction: Tensor, target: np.ndarray) -> Tensor:
    """mean over rows of the squared row-wise error"""
    rows = prediction.shape[0]
    return scale(sum_of_squares(sub(prediction, constant(target))), 1.0 / rows)


# --- backward -----------------------------------------------------------------


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """
    Accumulate d(loss)/d(leaf) into the .grad of every leaf that requires a gradient

    Intermediate gradients live only for the duration of the call, so repeated calls add
    their contributions to leaf gradients.

    Raises:
        InvalidArgumentError: If loss is not a scalar
    """
    if loss.values.size != 1:
        raise InvalidArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# --- parameters and layers ----------------------------------------------------


class ParamStore:
    """Named parameters, their Adam moments and the optimizer step counter"""

    def __init__(self):
        self.params: Dict[str, Tensor] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise InvalidStateError(f"parameter '{name}' registered twice")
        tensor = Tensor(values, requires_grad=True, name=name)
        self.params[name] = tensor
        self.m[name] = np.zeros_like(tensor.values)
        self.v[name] = np.zeros_like(tensor.values)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self, prefix: Optional[str] = None) -> List[str]:
        return [n for n in self.params if prefix is None or n.startswith(prefix)]

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def freeze(self, prefix: str) -> None:
        for name in self.names(prefix):
            self.params[name].requires_grad = False

    def unfreeze(self, prefix: str) -> None:
        for name in self.names(prefix):
            self.params[name].requires_grad = True

    def trainable(self) -> List[str]:
        return [n for n, t in self.params.items() if t.requires_grad]

    def parameter_count(self, prefix: Optional[str] = None) -> int:
        return int(sum(self.params[n].values.size for n in self.names(prefix)))

    def reset_optimizer(self) -> None:
        self.step = 0
        for name, tensor in self.params.items():
            self.m[name] = np.zeros_like(tensor.values)
            self.v[name] = np.zeros_like(tensor.values)

    def adam_step(self, lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
        """
        One bias-corrected Adam update of every trainable parameter

        Raises:
            InvalidStateError: If a trainable parameter has no gradient
            NumericFailureError: If an update produces a non-finite value
        """
        names = self.trainable()
        missing = [n for n in names if self.params[n].grad is None]
        if missing:
            raise InvalidStateError("adam_step called before gradients were populated", missing=missing[:5])

        beta1, beta2 = betas
        self.step += 1
        correction1 = 1.0 - beta1**self.step
        correction2 = 1.0 - beta2**self.step
        for name in names:
            tensor = self.params[name]
            g = tensor.grad.astype(tensor.values.dtype)
            self.m[name] = beta1 * self.m[name] + (1.0 - beta1) * g
            self.v[name] = beta2 * self.v[name] + (1.0 - beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            updated = tensor.values - lr * m_hat / (np.sqrt(v_hat) + eps)
            if not np.all(np.isfinite(updated)):
                raise NumericFailureError(f"non-finite value in parameter '{name}'", iteration=self.step)
            tensor.values = updated.astype(tensor.values.dtype)

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and moment, plus the step counter"""
        state = {f"param.{n}": t.values.copy() for n, t in self.params.items()}
        state.update({f"m.{n}": a.copy() for n, a in self.m.items()})
        state.update({f"v.{n}": a.copy() for n, a in self.v.items()})
        state["step"] = np.asarray(self.step)
        return state

    def restore(self, state: Dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            tensor.values = state[f"param.{name}"].copy()
            self.m[name] = state[f"m.{name}"].copy()
            self.v[name] = state[f"v.{name}"].copy()
        self.step = int(state["step"])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t.values)) for t in self.params.values())


def _uniform_init(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Affine map registered as <name>.weight / <name>.bias"""

    def __init__(self, store: ParamStore, name: str, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.name = name
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.weight = store.add(f"{name}.weight", _uniform_init(rng, fan_in, (fan_in, fan_out)))
        self.bias = store.add(f"{name}.bias", _uniform_init(rng, fan_in, (fan_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class SharedMLP:
    """Point-wise MLP; ReLU after every layer except optionally the last"""

    def __init__(
        self,
        store: ParamStore,
        name: str,
        widths: Sequence[int],
        rng: np.random.Generator,
        final_activation: bool = True,
    ):
        if len(widths) < 2:
            raise InvalidArgumentError("SharedMLP needs input and output widths", widths=list(widths))
        self.layers = [
            Linear(store, f"{name}.{i}", widths[i], widths[i + 1], rng) for i in range(len(widths) - 1)
        ]
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = relu(x)
        return x


def edge_features(features: Tensor, graph: NeighborGraph) -> Tensor:
    """(n, c) -> (n, k, 2c) edge features concat(f_i, f_j - f_i)"""
    n = features.shape[0]
    if graph.n != n:
        raise InvalidArgumentError("neighbour graph and features disagree on the point count",
                                   graph_rows=graph.n, n=n)
    centers = gather_rows(features, np.repeat(np.arange(n)[:, None], graph.k, axis=1))
    neighbors = gather_rows(features, graph.indices)
    return concat([centers, sub(neighbors, centers)])


def dense_edge_conv(features: Tensor, graph: NeighborGraph, blocks: Sequence[Linear]) -> Tensor:
    """
    Densely connected edge convolution

    Block b sees concat(edge features, outputs of blocks 0..b-1). The block outputs are
    concatenated and max-pooled over the k edges of every point.

    Args:
        features: (n, c) point features
        graph: kNN graph over the same n points
        blocks: Linear layers; block b has fan_in 2c + sum of earlier widths

    Returns:
        (n, sum of block widths) Tensor
    """
    edges = edge_features(features, graph)
    outputs: List[Tensor] = []
    for block in blocks:
        block_input = concat([edges] + outputs)
        if block_input.shape[-1] != block.fan_in:
            raise InvalidArgumentError(
                f"dense block '{block.name}' expects {block.fan_in} inputs, got {block_input.shape[-1]}"
            )
        outputs.append(relu(block(block_input)))
    return reduce_max(concat(outputs), axis=1)


class DenseEdgeConv:
    """Dense edge convolution layer with its own parameters"""

    def __init__(self, store: ParamStore, name: str, in_channels: int, widths: Sequence[int],
                 rng: np.random.Generator):
        self.in_channels = in_channels
        self.blocks: List[Linear] = []
        fan_in = 2 * in_channels
        for b, width in enumerate(widths):
            self.blocks.append(Linear(store, f"{name}.block{b}", fan_in, width, rng))
            fan_in += width
        self.out_channels = int(sum(widths))

    def __call__(self, features: Tensor, graph: NeighborGraph) -> Tensor:
        if features.shape[-1] != self.in_channels:
            raise InvalidArgumentError(
                f"edge conv expects {self.in_channels} channels, got {features.shape[-1]}"
            )
        return dense_edge_conv(features, graph, self.blocks)


# --- finite-difference check --------------------------------------------------


def gradcheck_error(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    max_elements: Optional[int] = None,
    seed: int = 0,
    atol: float = 1e-7,
) -> float:
    """
    Largest relative error between backward() and central finite differences

    The error of an input is ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12) over
    the checked elements, or 0 when ||analytic - numeric|| <= atol (finite-difference roundoff on
    elements whose gradient is exactly zero). With max_elements only a seeded random subset of
    each input is perturbed.
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    backward(loss)
    analytic = [np.zeros_like(t.values) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.values.reshape(-1)
            elements = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                elements = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            numeric = np.empty(elements.size)
            for j, e in enumerate(elements):
                original = flat[e]
                flat[e] = original + eps
                plus = float(fn(*inputs).values)
                flat[e] = original - eps
                minus = float(fn(*inputs).values)
                flat[e] = original
                numeric[j] = (plus - minus) / (2.0 * eps)
            a_sel = a.reshape(-1)[elements]
            diff = float(np.linalg.norm(a_sel - numeric))
            if diff <= atol:
                continue
            denom = max(np.linalg.norm(a_sel), np.linalg.norm(numeric), 1e-12)
            worst = max(worst, diff / denom)
    return worst


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-3,
              rtol: float = 1e-3, **kwargs) -> bool:
    error = gradcheck_error(fn, inputs, eps=eps, **kwargs)
    if error > rtol:
        logger.debug(f"gradcheck failed: relative error {error:.3e} > {rtol:.1e}")
    return error <= rtol
