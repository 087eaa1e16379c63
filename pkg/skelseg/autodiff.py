"""
Dense tensors with reverse-mode differentiation.

The substrate records every primitive operation applied to tensors that
require gradients, then replays the recorded graph backwards from a scalar
loss. It supports exactly the operations the segmentation model needs:
dilated and pointwise temporal convolutions, fully-connected layers, relu,
elementwise arithmetic, reshapes and gathers, squared-error reductions,
pairwise joint distances, stop-gradient and the straight-through estimator.

Gradients of leaves accumulate additively across uses and across backward
calls until `zero_grad` is called, which is what ragged-batch accumulation in
the trainer relies on.
"""

import contextlib
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

# Central-difference step for gradient checks (64-bit builds)
FD_EPSILON = 1e-5
FD_TOLERANCE = 1e-4

_grad_enabled = True
_detect_anomaly = False


class Tensor:
    """
    Dense row-major array plus the bookkeeping needed to differentiate it.

    Leaves are tensors created directly (parameters, inputs, constants);
    interior nodes are produced by the operations in this module and keep a
    reference to their inputs and a backward closure.
    """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 dtype: Optional[np.dtype] = None):
        array = np.asarray(data, dtype=dtype)
        if array.dtype.kind != "f":
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other))

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad}{label})"


def parameter(data: ArrayLike, name: Optional[str] = None, dtype: Optional[np.dtype] = None) -> Tensor:
    """Create a trainable leaf that owns a copy of `data`"""
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)


def constant(data: ArrayLike, dtype: Optional[np.dtype] = None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def detect_anomaly(enabled: bool = True) -> Iterator[None]:
    """Raise NumericError as soon as any operation produces NaN or Inf"""
    global _detect_anomaly
    previous = _detect_anomaly
    _detect_anomaly = enabled
    try:
        yield
    finally:
        _detect_anomaly = previous


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    if _detect_anomaly and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")
    needs_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    out._op = op
    if needs_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Propagate d(loss)/d(leaf) into every reachable leaf's `.grad`.

    Returns a map from each leaf reached in this call to its accumulated
    gradient. Constants (leaves without requires_grad) never appear.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    touched: Dict[Tensor, np.ndarray] = {}
    if not loss.requires_grad:
        return touched

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            touched[node] = node.grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return touched


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def add_scalar(x: Tensor, value: float) -> Tensor:
    return _result(x.data + value, (x,), lambda g: (g,), "add_scalar")


def relu(x: Tensor) -> Tensor:
    # Subgradient at exactly zero is zero
    active = x.data > 0
    return _result(np.where(active, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * active,), "relu")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return scale(sum_all(x), 1.0 / n)


def sum_squares(x: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """Sum of w * x**2; `weights` is a constant array of x's shape"""
    if weights is None:
        return _result(np.asarray((x.data * x.data).sum()), (x,), lambda g: (2.0 * g * x.data,), "sum_squares")
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"sum_squares: weights {w.shape} do not match input {x.shape}")
    return _result(np.asarray((w * x.data * x.data).sum()), (x,), lambda g: (2.0 * g * w * x.data,),
                   "sum_squares")


def mse(a: Tensor, b: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean of squared differences"""
    b = constant(b, dtype=a.dtype)
    _same_shape("mse", a, b)
    diff = a.data - b.data
    n = diff.size

    def backward_fn(g):
        grad_a = 2.0 * g * diff / n
        return grad_a, -grad_a

    return _result(np.asarray((diff * diff).sum() / n), (a, b), backward_fn, "mse")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {original} into {tuple(shape)}") from e
    return _result(data, (x,), lambda g: (g.reshape(original),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for {x.ndim} dimensions")
    inverse = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def take(x: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along `axis`; repeated indices accumulate their gradients"""
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def backward_fn(g):
        grad = np.zeros(shape, dtype=g.dtype)
        np.add.at(np.moveaxis(grad, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return _result(np.take(x.data, idx, axis=axis), (x,), backward_fn, "take")


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def _batched(op: str, x: Tensor) -> bool:
    if x.ndim == 2:
        return False
    if x.ndim == 3:
        return True
    raise ShapeError(f"{op}: expected [channels x time] or [batch x channels x time], got {x.shape}")


def conv1d_dilated(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, dilation: int = 1) -> Tensor:
    """
    Dilated cross-correlation with "same" zero padding.

    x: [Cin x T] or [B x Cin x T]; weight: [Cout x Cin x K] with K odd.
    Output keeps the time length of the input.
    """
    batched = _batched("conv1d_dilated", x)
    if weight.ndim != 3:
        raise ShapeError(f"conv1d_dilated: weight must be [Cout x Cin x K], got {weight.shape}")
    c_out, c_in, kernel = weight.shape
    if kernel % 2 != 1:
        raise ShapeError(f"conv1d_dilated: kernel size must be odd, got {kernel}")
    if dilation < 1:
        raise ShapeError(f"conv1d_dilated: dilation must be >= 1, got {dilation}")
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != c_in:
        raise ShapeError(f"conv1d_dilated: input has {xd.shape[1]} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv1d_dilated: bias must be ({c_out},), got {bias.shape}")

    steps = xd.shape[2]
    batch = xd.shape[0]
    pad = dilation * (kernel - 1) // 2
    # channels first, batch folded into time: one GEMM over every tap and sequence
    padded = np.pad(xd, ((0, 0), (0, 0), (pad, pad))).transpose(1, 0, 2)
    cols = np.stack([padded[:, :, k * dilation:k * dilation + steps] for k in range(kernel)])
    cols = cols.reshape(kernel * c_in, batch * steps)
    w = weight.data
    w2 = w.transpose(0, 2, 1).reshape(c_out, kernel * c_in)
    out = np.ascontiguousarray((w2 @ cols).reshape(c_out, batch, steps).transpose(1, 0, 2))
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward_fn(g):
        gb = g if batched else g[None]
        g2 = gb.transpose(1, 0, 2).reshape(c_out, batch * steps)
        grad_w = (g2 @ cols.T).reshape(c_out, kernel, c_in).transpose(0, 2, 1)
        grad_cols = (w2.T @ g2).reshape(kernel, c_in, batch, steps)
        grad_padded = np.zeros_like(padded)
        for k in range(kernel):
            grad_padded[:, :, k * dilation:k * dilation + steps] += grad_cols[k]
        grad_x = grad_padded[:, :, pad:pad + steps].transpose(1, 0, 2)
        grad_x = grad_x if batched else grad_x[0]
        grad_b = gb.sum(axis=(0, 2)) if bias is not None else None
        return grad_x, np.ascontiguousarray(grad_w), grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out if batched else out[0], parents, backward_fn, f"conv1d_d{dilation}")


def pointwise_conv(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution: per-timestep affine map across channels"""
    batched = _batched("pointwise_conv", x)
    if weight.ndim != 2:
        raise ShapeError(f"pointwise_conv: weight must be [Cout x Cin], got {weight.shape}")
    c_out, c_in = weight.shape
    xd = x.data if batched else x.data[None]
    if xd.shape[1] != c_in:
        raise ShapeError(f"pointwise_conv: input has {xd.shape[1]} channels, weight expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"pointwise_conv: bias must be ({c_out},), got {bias.shape}")

    w = weight.data
    batch, _, steps = xd.shape
    flat = xd.transpose(1, 0, 2).reshape(c_in, batch * steps)
    out = np.ascontiguousarray((w @ flat).reshape(c_out, batch, steps).transpose(1, 0, 2))
    if bias is not None:
        out = out + bias.data[None, :, None]

    def backward_fn(g):
        gb = g if batched else g[None]
        g2 = gb.transpose(1, 0, 2).reshape(c_out, batch * steps)
        grad_x = (w.T @ g2).reshape(c_in, batch, steps).transpose(1, 0, 2)
        grad_w = g2 @ flat.T
        grad_b = gb.sum(axis=(0, 2)) if bias is not None else None
        return (grad_x if batched else grad_x[0]), grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out if batched else out[0], parents, backward_fn, "pointwise_conv")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully-connected layer: x [B x in] -> [B x out]"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias must be ({weight.shape[0]},), got {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data[None, :]

    def backward_fn(g):
        grad_b = g.sum(axis=0) if bias is not None else None
        return g @ weight.data, g.T @ x.data, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward_fn, "linear")


affine = linear


def pairwise_sq_dists(x: Tensor) -> Tensor:
    """
    Squared distances between all ordered joint pairs.

    x: [N x C x T x V] -> [N x T x V x V], entry (n, t, v, w) is
    ||x[n, :, t, v] - x[n, :, t, w]||^2.
    """
    if x.ndim != 4:
        raise ShapeError(f"pairwise_sq_dists: expected [N x C x T x V], got {x.shape}")
    diff = x.data[..., :, None] - x.data[..., None, :]
    out = (diff * diff).sum(axis=1)

    def backward_fn(g):
        sym = g + np.swapaxes(g, -1, -2)
        row = sym.sum(axis=-1)
        grad = x.data * row[:, None] - np.einsum("ntuw,nctw->nctu", sym, x.data)
        return (2.0 * grad,)

    return _result(out, (x,), backward_fn, "pairwise_sq_dists")


# ---------------------------------------------------------------------------
# Gradient routing
# ---------------------------------------------------------------------------

def stop_gradient(x: Tensor) -> Tensor:
    """Same value, no gradient path back to `x`"""
    return Tensor(x.data, requires_grad=False)


def straight_through(pre: Tensor, quantized: Union[Tensor, np.ndarray],
                     anchor: Optional[np.ndarray] = None) -> Tensor:
    """
    Forward value of `quantized`, gradient copied unchanged to `pre`.

    When `anchor` (the value of `pre` at which the quantization was taken) is
    given, the forward value becomes quantized + (pre - anchor). It equals
    `quantized` at the anchor and gives finite differences the same
    derivative the backward pass reports.
    """
    q = quantized.data if isinstance(quantized, Tensor) else np.asarray(quantized, dtype=pre.dtype)
    if q.shape != pre.shape:
        raise ShapeError(f"straight_through: shapes {pre.shape} and {q.shape} differ")
    value = q.copy() if anchor is None else q + (pre.data - anchor)
    return _result(value, (pre,), lambda g: (g,), "straight_through")


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = FD_EPSILON) -> np.ndarray:
    """Central-difference estimate of d(loss)/d(param); perturbs `param.data` in place"""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = float(loss_fn().data)
            flat[i] = original - eps
            minus = float(loss_fn().data)
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
    return grad


def gradient_errors(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    eps: float = FD_EPSILON) -> Dict[str, float]:
    """
    Worst relative disagreement between analytic and numeric gradients.

    Error per entry is |analytic - numeric| / max(1, |numeric|); the result
    maps each parameter's name (or position) to its maximum error.
    """
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    errors: Dict[str, float] = {}
    for position, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numerical_gradient(loss_fn, p, eps)
        err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
        errors[p.name or str(position)] = float(err.max()) if err.size else 0.0
    return errors


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = FD_EPSILON,
                    tolerance: float = FD_TOLERANCE) -> bool:
    errors = gradient_errors(loss_fn, params, eps)
    worst = max(errors.values()) if errors else 0.0
    if worst > tolerance:
        logger.warning(f"Gradient check failed: worst relative error {worst:.3e} ({errors})")
    return worst <= tolerance
