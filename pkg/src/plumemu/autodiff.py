"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations needed by the convolutional VAE are provided: elementwise
arithmetic, reductions, reshapes, dense layers, 2D convolution and its
transpose, max pooling, selu and leaky relu.  Image tensors are laid out as
``(batch, channel, height, width)``; the layer functions also accept a single
``(channel, height, width)`` image.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


class Tensor:
    """A float64 array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # arithmetic -------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        if exponent != 2:
            raise ValueError("only squaring is supported")
        return square(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def exp(self):
        return exp(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _node(data, parents, backward_fn, op) -> Tensor:
    if not _needs_grad(*parents):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# elementwise ops -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a: Tensor) -> Tensor:
    """Flatten everything but the leading batch axis."""
    return reshape(a, (a.shape[0], -1))


# activations -----------------------------------------------------------------

def selu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    expx = np.exp(np.minimum(x.data, 0.0))
    out = SELU_SCALE * np.where(pos, x.data, SELU_ALPHA * (expx - 1.0))
    deriv = SELU_SCALE * np.where(pos, 1.0, SELU_ALPHA * expx)
    return _node(out, (x,), lambda g: (g * deriv,), "selu")


def leaky_relu(x: Tensor, slope: float = 0.3) -> Tensor:
    x = as_tensor(x)
    deriv = np.where(x.data >= 0, 1.0, slope)
    return _node(x.data * deriv, (x,), lambda g: (g * deriv,), "leaky_relu")


# layers ----------------------------------------------------------------------

def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weights @ x + bias`` for a vector or a batch of row vectors."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    m, n = weights.shape
    if x.shape[-1] != n or bias.shape != (m,):
        raise DimensionError("dense", expected=(n, m), got=(x.shape, bias.shape))
    out = x.data @ weights.data.T + bias.data

    def bw(g):
        g2 = g.reshape(-1, m)
        x2 = x.data.reshape(-1, n)
        return (g @ weights.data, g2.T @ x2, g2.sum(axis=0))

    return _node(out, (x, weights, bias), bw, "dense")


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError("image tensor", expected="3 or 4 dims", got=x.shape)
    return x, False


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided view (N, C, H', W', k, k) of the k×k patches of a padded batch."""
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _corr(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    # x (N,C,H,W), w (O,C,k,k) -> (N,O,H',W')
    k = w.shape[-1]
    win = _windows(_pad(x, padding), k, stride)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _corr_adjoint(g: np.ndarray, w: np.ndarray, stride: int, padding: int,
                  out_hw: tuple[int, int]) -> np.ndarray:
    # Adjoint of _corr w.r.t. its input: g (N,O,H',W'), w (O,C,k,k) -> (N,C,H,W).
    n, _, ho, wo = g.shape
    c, k = w.shape[1], w.shape[-1]
    h, wd = out_hw
    cols = np.tensordot(g, w, axes=([1], [0]))  # (N,H',W',C,k,k)
    cols = cols.transpose(0, 3, 4, 5, 1, 2)     # (N,C,k,k,H',W')
    hp = max(h + 2 * padding, (ho - 1) * stride + k)
    wp = max(wd + 2 * padding, (wo - 1) * stride + k)
    buf = np.zeros((n, c, hp, wp))
    for i in range(k):
        for j in range(k):
            buf[:, :, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    return buf[:, :, padding:padding + h, padding:padding + wd]


def _corr_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int,
                      padding: int) -> np.ndarray:
    win = _windows(_pad(x, padding), k, stride)
    ho, wo = g.shape[2], g.shape[3]
    win = win[:, :, :ho, :wo]
    return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of an image batch with ``kernels`` of shape (C_out, C_in, k, k)."""
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    x4, single = _batched(x)
    c_out, c_in, k, k2 = kernels.shape
    if k != k2 or x4.shape[1] != c_in:
        raise DimensionError("conv2d channels", expected=c_in, got=x4.shape[1])
    if bias.shape != (c_out,):
        raise DimensionError("conv2d bias", expected=(c_out,), got=bias.shape)
    if stride < 1 or k > x4.shape[2] + 2 * padding or k > x4.shape[3] + 2 * padding:
        raise DimensionError("conv2d kernel", expected="k <= H+2p, stride >= 1", got=(k, stride))
    h, w = x4.shape[2:]
    out = _corr(x4.data, kernels.data, stride, padding) + bias.data[:, None, None]

    def bw(g):
        gx = _corr_adjoint(g, kernels.data, stride, padding, (h, w))
        gw = _corr_weight_grad(x4.data, g, k, stride, padding)
        return gx, gw, g.sum(axis=(0, 2, 3))

    y = _node(out, (x4, kernels, bias), bw, "conv2d")
    return reshape(y, y.shape[1:]) if single else y


def conv2d_transpose(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1,
                     padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``kernels`` has shape (C_in, C_out, k, k).

    This is the adjoint of :func:`conv2d` run with the same kernel tensor, so the
    output side is ``(H - 1) * stride - 2 * padding + k + output_padding``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    x4, single = _batched(x)
    c_in, c_out, k, _ = kernels.shape
    if x4.shape[1] != c_in:
        raise DimensionError("conv2d_transpose channels", expected=c_in, got=x4.shape[1])
    if bias.shape != (c_out,):
        raise DimensionError("conv2d_transpose bias", expected=(c_out,), got=bias.shape)
    if stride < 1 or not 0 <= output_padding < stride:
        raise DimensionError("conv2d_transpose stride", expected="output_padding < stride",
                             got=(stride, output_padding))
    h, w = x4.shape[2:]
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (w - 1) * stride - 2 * padding + k + output_padding
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d_transpose output", expected="positive size", got=(ho, wo))
    out = _corr_adjoint(x4.data, kernels.data, stride, padding, (ho, wo))
    out = out + bias.data[:, None, None]

    def bw(g):
        gx = _corr(g, kernels.data, stride, padding)[:, :, :h, :w]
        gw = _corr_weight_grad(g, x4.data, k, stride, padding)
        return gx, gw, g.sum(axis=(0, 2, 3))

    y = _node(out, (x4, kernels, bias), bw, "conv2d_transpose")
    return reshape(y, y.shape[1:]) if single else y


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first maximum."""
    x = as_tensor(x)
    x4, single = _batched(x)
    n, c, h, w = x4.shape
    if h % window or w % window:
        raise DimensionError("max_pool2d", expected=f"sides divisible by {window}", got=(h, w))
    blocks = x4.data.reshape(n, c, h // window, window, w // window, window)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // window, w // window, -1)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, h // window, w // window, window, window)
        return (gb.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    y = _node(out, (x4,), bw, "max_pool2d")
    return reshape(y, y.shape[1:]) if single else y


# backward pass ---------------------------------------------------------------

@dataclass
class Graph:
    """Topologically ordered view of the nodes feeding a tensor."""

    nodes: list[Tensor]
    parents: list[tuple[int, ...]] = field(default_factory=list)

    @classmethod
    def build(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
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
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        index = {id(t): i for i, t in enumerate(order)}
        parents = [tuple(index[id(p)] for p in t.parents if id(p) in index) for t in order]
        return cls(order, parents)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = Graph.build(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if node.backward_fn is None:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. ``params`` (zeros where unreachable)."""
    for p in params:
        p.grad = None
    backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


# initialisation and optimiser ------------------------------------------------

def glorot_uniform(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Glorot uniform init; conv kernels count receptive field size in both fans."""
    if len(shape) == 2:
        fan_out, fan_in = shape
    else:
        receptive = int(np.prod(shape[2:]))
        fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass(frozen=True)
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: tuple[np.ndarray, ...] = ()
    second_moment: tuple[np.ndarray, ...] = ()

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kwargs) -> "AdamState":
        zeros = tuple(np.zeros_like(p) for p in params)
        return cls(first_moment=zeros, second_moment=tuple(z.copy() for z in zeros), **kwargs)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Returns new arrays and a new state."""
    if not state.first_moment:
        state = AdamState.for_params(params, learning_rate=state.learning_rate,
                                     beta1=state.beta1, beta2=state.beta2,
                                     epsilon=state.epsilon, step_count=state.step_count)
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise DimensionError("adam_step", expected=len(state.first_moment), got=len(grads))
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError("adam_step", expected=p.shape, got=g.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        step = state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(state.learning_rate, b1, b2, state.epsilon, t,
                          tuple(new_m), tuple(new_v))
    return new_p, new_state
