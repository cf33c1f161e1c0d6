"""Dense tensors with reverse-mode automatic differentiation on numpy arrays.

Training runs at float32; verification (gradient checks) selects float64 via
`using_dtype`. Gradients accumulate additively across uses and across backward
calls; they are cleared by the optimizer step.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Parameter",
    "Registry",
    "ShapeMismatchError",
    "ContractError",
    "backward",
    "concat",
    "depthwise_conv1d",
    "derive_seed",
    "dropout",
    "gelu",
    "get_default_dtype",
    "glu",
    "layer_norm",
    "batch_norm",
    "log_softmax",
    "matmul",
    "ops_created",
    "set_default_dtype",
    "sigmoid",
    "sigmoid_cross_entropy",
    "softmax",
    "using_dtype",
]


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """An operation was called outside its contract (misuse, not bad data)."""


_DEFAULT_DTYPE = np.float32

# Monotone counter of graph-producing ops; lets tests assert that a merged
# model's forward path is structurally identical to the base model's.
_OPS_CREATED = 0


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = dtype


@contextmanager
def using_dtype(dtype):
    """Temporarily switch the default dtype (e.g. float64 for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def ops_created() -> int:
    return _OPS_CREATED


def derive_seed(seed: int, name: str) -> int:
    """Stable per-name sub-seed, so creation order cannot perturb initialization."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class Tensor:
    """A numpy array plus an optional backpointer into the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """Same values, severed from the graph; never receives gradient."""
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_lift(other, self.dtype)))

    def __rsub__(self, other):
        return add(_lift(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        return mul(self, power(_lift(other, self.dtype), -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create an op result; the graph edge exists only when a parent needs grad."""
    global _OPS_CREATED
    _OPS_CREATED += 1
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape of the operand it belongs to."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar; gradients accumulate into .grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# -- elementwise and structural ops --------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def _bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g))


def power(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** exponent

    def _bw(g):
        _accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return _make(out_data, (a,), _bw)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: _accumulate(a, g * out_data))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(s, (a,), lambda g: _accumulate(a, g * s * (1.0 - s)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions disagree for shapes {a.shape} @ {b.shape}"
        )

    def _bw(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), _bw)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _make(out_data, (a,), _bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _make(out_data, (a,), _bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def _bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), _bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    def _bw(g):
        inverse = np.argsort(axes) if axes is not None else None
        _accumulate(a, g.transpose(inverse))

    return _make(a.data.transpose(axes), (a,), _bw)


def getitem(a: Tensor, index) -> Tensor:
    def _bw(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    return _make(a.data[index], (a,), _bw)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), _bw)


# -- neural-net kernels ----------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - dot))

    return _make(y, (a,), _bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - logsum
    y = np.exp(out_data)

    def _bw(g):
        _accumulate(a, g - y * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), _bw)


def gelu(a: Tensor) -> Tensor:
    """Exact erf-based GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    inv_sqrt2 = 0.7071067811865476
    inv_sqrt2pi = 0.3989422804014327
    phi = 0.5 * (1.0 + erf(a.data * inv_sqrt2))
    out_data = a.data * phi

    def _bw(g):
        pdf = inv_sqrt2pi * np.exp(-0.5 * a.data * a.data)
        _accumulate(a, g * (phi + a.data * pdf))

    return _make(out_data.astype(a.dtype, copy=False), (a,), _bw)


def glu(a: Tensor, axis: int = -1) -> Tensor:
    """Gated linear unit: split in half along `axis`, first half * sigmoid(second)."""
    width = a.shape[axis]
    if width % 2 != 0:
        raise ShapeMismatchError(f"glu requires an even dimension, got {width} on axis {axis}")
    half = width // 2
    sl = [slice(None)] * a.ndim
    sl_a, sl_b = list(sl), list(sl)
    sl_a[axis] = slice(0, half)
    sl_b[axis] = slice(half, width)
    return mul(getitem(a, tuple(sl_a)), sigmoid(getitem(a, tuple(sl_b))))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then affine gamma/beta."""
    mu = mean(x, axis=-1, keepdims=True)
    centered = add(x, neg(mu))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    inv_std = power(add(var, _lift(eps, x.dtype)), -0.5)
    return add(mul(mul(centered, inv_std), gamma), beta)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all leading axes, then affine gamma/beta.

    Stateless (no running statistics): normalizes each channel over the frames
    of the current input, which keeps training deterministic.
    """
    axes = tuple(range(x.ndim - 1))
    mu = mean(x, axis=axes[0], keepdims=True) if len(axes) == 1 else _batch_mean(x, axes)
    centered = add(x, neg(mu))
    var = (
        mean(mul(centered, centered), axis=axes[0], keepdims=True)
        if len(axes) == 1
        else _batch_mean(mul(centered, centered), axes)
    )
    inv_std = power(add(var, _lift(eps, x.dtype)), -0.5)
    return add(mul(mul(centered, inv_std), gamma), beta)


def _batch_mean(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = x
    for axis in axes:
        out = mean(out, axis=axis, keepdims=True)
    return out


def depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 1-D convolution with "same" zero padding.

    x: [T, d], kernel: [k, d] (k odd), bias: [d].
    """
    k, d = kernel.shape
    if k % 2 != 1:
        raise ShapeMismatchError(f"depthwise_conv1d kernel length must be odd, got {k}")
    if x.shape[-1] != d:
        raise ShapeMismatchError(
            f"depthwise_conv1d channel mismatch: input {x.shape} vs kernel {kernel.shape}"
        )
    t = x.shape[0]
    pad = k // 2
    xpad = np.zeros((t + k - 1, d), dtype=x.dtype)
    xpad[pad : pad + t] = x.data
    out_data = np.zeros_like(x.data)
    for j in range(k):
        out_data += xpad[j : j + t] * kernel.data[j]
    out_data = out_data + bias.data

    def _bw(g):
        if x.requires_grad:
            gxpad = np.zeros_like(xpad)
            for j in range(k):
                gxpad[j : j + t] += g * kernel.data[j]
            _accumulate(x, gxpad[pad : pad + t])
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for j in range(k):
                gk[j] = (g * xpad[j : j + t]).sum(axis=0)
            _accumulate(kernel, gk)
        _accumulate(bias, g.sum(axis=0))

    return _make(out_data, (x, kernel, bias), _bw)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity (the same tensor) at eval time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode requires an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    scale = 1.0 / (1.0 - p)

    def _bw(g):
        _accumulate(x, g * keep * scale)

    return _make(x.data * keep * scale, (x,), _bw)


def sigmoid_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable elementwise binary cross-entropy from logits."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    out_data = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def _bw(g):
        s = 1.0 / (1.0 + np.exp(-z))
        _accumulate(logits, g * (s - y))

    return _make(out_data, (logits,), _bw)


# -- parameters ------------------------------------------------------------


class Parameter:
    """A named tensor with a trainable flag; names are stable registry keys."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, tensor: Tensor, trainable: bool = True):
        self.name = name
        self.tensor = tensor
        self.tensor.requires_grad = trainable

    @property
    def trainable(self) -> bool:
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.tensor.requires_grad = flag

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        """Accumulated gradient; zeros when the parameter was not reached."""
        if self.tensor.grad is None:
            return np.zeros_like(self.tensor.data)
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


class Registry:
    """Name -> Parameter map with unique names and lexicographic iteration."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise ContractError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def remove(self, name: str) -> None:
        del self._params[name]

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in sorted(self._params):
            yield name, self._params[name]

    def values(self):
        for name in sorted(self._params):
            yield self._params[name]

    def total_size(self) -> int:
        return sum(p.tensor.size for p in self._params.values())

    def trainable_size(self) -> int:
        return sum(p.tensor.size for p in self._params.values() if p.trainable)
