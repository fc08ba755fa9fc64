"""Dense float64 tensors with a reverse-mode gradient tape.

Values are stored as C-contiguous (row-major) numpy float64 arrays. Every
operation that produces a tensor records its inputs and a local gradient
rule, so calling :func:`backward` on a scalar result fills ``.grad`` on all
reachable tensors with ``requires_grad=True``. Repeated backward calls
accumulate into ``.grad``; use :func:`reset_grads` to clear between steps.

No GPU, no mixed precision, and broadcasting is supported only to the
extent the gradient rules below define it (elementwise ops and leading
batch dimensions of matmul).
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "TilingError",
    "LabelError",
    "GradientError",
    "tensor",
    "zeros",
    "matmul",
    "conv1d",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "mse",
    "gelu",
    "dropout",
    "concat",
    "stack",
    "backward",
    "reset_grads",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TilingError(ValueError):
    """Convolution windows do not tile the signal exactly."""


class LabelError(ValueError):
    """A class label lies outside the valid index range."""


class GradientError(RuntimeError):
    """Invalid use of the gradient tape (non-scalar root, missing grad)."""


class Tensor:
    """N-dimensional float64 value, optionally attached to the tape.

    ``data`` is the row-major numpy array, ``grad`` (same shape) is
    populated by :func:`backward` when ``requires_grad`` is set. Tensors
    created by operations carry the tape linkage in private fields.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """The underlying array (not a copy; treat as read-only)."""
        return self.data

    def detach(self) -> "Tensor":
        """A tape-free tensor sharing no graph history (data is copied)."""
        return Tensor(self.data.copy())

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Create a tensor from array-like data."""
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result, attaching tape linkage only if a parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh form: 0.5x(1 + tanh(c(x + 0.044715x^3)))."""
    x = a.data
    x_sq = x * x  # x**3 via pow is an order of magnitude slower than chained products
    inner = _GELU_C * (x + 0.044715 * x_sq * x)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def bwd(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x_sq)
        dx = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * dx,)

    return _make(out_data, (a,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or p == 0."""
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


# -- shape manipulation --------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _has_advanced_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in parts)


def getitem(a: Tensor, key) -> Tensor:
    advanced = _has_advanced_index(key)

    def bwd(g):
        buf = np.zeros_like(a.data)
        if advanced:
            np.add.at(buf, key, g)
        else:
            buf[key] += g
        return (buf,)

    return _make(a.data[key], (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- reductions ----------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(a % len(shape) for a in axes)
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bwd(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def bwd(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading dims broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # stacked rows x shared weight matrix: one flat GEMM beats numpy's
        # batched path, and the weight gradient avoids a per-batch outer sum
        k, n = b.shape
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, k)

        def bwd_flat(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _make((a2 @ b.data).reshape(*lead, n), (a, b), bwd_flat)

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), bwd)


def conv1d(signal: Tensor, kernels: Tensor, stride: int, bias: Tensor) -> Tensor:
    """Strided 1-D cross-correlation of a flat signal with a kernel bank.

    Output row w holds the dot products of window w (``signal[w*stride :
    w*stride + kernel_width]``) with every kernel, plus bias. The windows
    must tile the signal exactly: (len - kernel_width) divisible by stride.
    With stride == kernel_width this is non-overlapping block embedding.
    """
    if signal.ndim != 1 or kernels.ndim != 2:
        raise ShapeError(
            f"conv1d expects signal[length] and kernels[out, width], got {signal.shape} and {kernels.shape}"
        )
    length = signal.shape[0]
    out_channels, width = kernels.shape
    if bias.shape != (out_channels,):
        raise ShapeError(f"bias shape {bias.shape} does not match {out_channels} kernels")
    if length < width:
        raise TilingError(f"signal length {length} shorter than kernel width {width}")
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    remainder = (length - width) % stride
    if remainder != 0:
        raise TilingError(
            f"windows of width {width}, stride {stride} do not tile signal of length {length} "
            f"(remainder {remainder})"
        )
    num_windows = (length - width) // stride + 1
    idx = stride * np.arange(num_windows)[:, None] + np.arange(width)[None, :]
    windows = signal.data[idx]  # [num_windows, width]
    out_data = windows @ kernels.data.T + bias.data

    def bwd(g):
        g_signal = np.zeros_like(signal.data)
        np.add.at(g_signal, idx, g @ kernels.data)
        g_kernels = g.T @ windows
        g_bias = g.sum(axis=0)
        return g_signal, g_kernels, g_bias

    return _make(out_data, (signal, kernels, bias), bwd)


# -- fused neural-net ops ------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax along ``axis``, computed with max subtraction."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    h = x.shape[-1]
    if h < 2:
        raise ShapeError(f"layer_norm needs a feature axis of size >= 2, got {h}")
    if gain.shape != (h,) or shift.shape != (h,):
        raise ShapeError(f"gain/shift must have shape ({h},), got {gain.shape} and {shift.shape}")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + shift.data

    def bwd(g):
        g_gain = (g * xhat).reshape(-1, h).sum(axis=0)
        g_shift = g.reshape(-1, h).sum(axis=0)
        gx_hat = g * gain.data
        g_x = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return g_x, g_gain, g_shift

    return _make(out_data, (x, gain, shift), bwd)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log softmax probability of the true class.

    ``logits`` is [batch, classes]; ``labels`` a sequence of class indices.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ShapeError(f"need {batch} labels, got shape {labels.shape}")
    bad = np.nonzero((labels < 0) | (labels >= classes))[0]
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"label {int(labels[i])} at index {i} outside [0, {classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    loss = -log_probs[np.arange(batch), labels].mean()

    def bwd(g):
        grad = np.exp(log_probs)
        grad[np.arange(batch), labels] -= 1.0
        return (g * grad / batch,)

    return _make(np.asarray(loss), (logits,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of elementwise squared differences. Shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"mse operands must have identical shapes, got {a.shape} and {b.shape}")
    diff = a.data - b.data
    n = max(a.size, 1)

    def bwd(g):
        base = g * 2.0 * diff / n
        return base, -base

    return _make(np.asarray((diff * diff).mean() if a.size else 0.0), (a, b), bwd)


# -- tape engine ---------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar root.

    Adds one unit of gradient per call into ``.grad`` of every reachable
    tensor with ``requires_grad``; call :func:`reset_grads` between steps.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = local.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = local.get(id(parent))
            local[id(parent)] = pg if acc is None else acc + pg


def reset_grads(params: Iterable[Tensor]) -> None:
    """Clear accumulated gradients on the given tensors."""
    for p in params:
        p.grad = None
