"""Dense tensors with reverse-mode gradient accumulation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation is a
:class:`Function` subclass; applying it stores the function on the output so
that :func:`backward` can walk the graph in reverse. An explicit
:class:`Tape` may additionally record execution order, in which case backward
replays that order instead of sorting the graph.

Precision defaults to float32. ``with precision(np.float64):`` switches the
dtype of newly created tensors, which is what gradient checks use.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, UsageError

_local = threading.local()
_default_dtype = np.float32


def default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def _active_tapes() -> list:
    tapes = getattr(_local, "tapes", None)
    if tapes is None:
        tapes = _local.tapes = []
    return tapes


class Tensor:
    """N-dimensional float array that can take part in differentiation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx: Optional[Function] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, tape: Optional["Tape"] = None) -> None:
        backward(self, tape)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise UsageError("only scalar exponents are supported")
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)


class Function:
    """One differentiable operation.

    ``forward`` receives the raw arrays of the inputs plus keyword options and
    returns the output array. ``backward`` receives dL/d(output) and returns a
    tuple with one entry per input (``None`` where no gradient is needed).
    """

    inputs: tuple = ()
    needs_input_grad: tuple = ()

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        like = next((x for x in inputs if isinstance(x, Tensor)), None)
        tensors = tuple(as_tensor(x, like) for x in inputs)
        fn = cls()
        fn.needs_input_grad = tuple(t.requires_grad for t in tensors)
        out_data = fn.forward(*(t.data for t in tensors), **kwargs)
        track = grad_enabled() and any(fn.needs_input_grad)
        out = Tensor(out_data, requires_grad=track, dtype=out_data.dtype)
        if track:
            fn.inputs = tensors
            out._ctx = fn
            for tape in _active_tapes():
                tape._record(fn, out)
        return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Add(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        ga = _unbroadcast(grad * self.b, self.a.shape) if self.needs_input_grad[0] else None
        gb = _unbroadcast(grad * self.a, self.b.shape) if self.needs_input_grad[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = _unbroadcast(grad / self.b, self.a.shape) if self.needs_input_grad[0] else None
        gb = None
        if self.needs_input_grad[1]:
            gb = _unbroadcast(-grad * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class PowScalar(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1),)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        ga = gb = None
        if self.needs_input_grad[0]:
            if b.ndim == 1:
                ga = np.multiply.outer(grad, b)
            else:
                ga = np.matmul(grad if a.ndim > 1 else grad[..., None, :], np.swapaxes(b, -1, -2))
                if a.ndim == 1:
                    ga = ga[..., 0, :]
            ga = _unbroadcast(ga, a.shape)
        if self.needs_input_grad[1]:
            if a.ndim == 1:
                gb = np.multiply.outer(a, grad) if b.ndim > 1 else a * grad
            else:
                g = grad if b.ndim > 1 else grad[..., None]
                gb = np.matmul(np.swapaxes(a, -1, -2), g)
                if b.ndim == 1:
                    gb = gb[..., 0]
            gb = _unbroadcast(gb, b.shape)
        return ga, gb


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = [ax % len(self.shape) for ax in np.atleast_1d(self.axis)]
            grad = np.expand_dims(grad, tuple(sorted(axes)))
        return (np.broadcast_to(grad, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return np.array(a[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class ReLU(Function):
    # subgradient 0 at the kink
    def forward(self, a):
        self.mask = a > 0
        return np.maximum(a, 0)

    def backward(self, grad):
        return (np.where(self.mask, grad, 0).astype(grad.dtype, copy=False),)


class Sigmoid(Function):
    def forward(self, a):
        # tanh form never overflows
        self.out = (0.5 * (1.0 + np.tanh(0.5 * a))).astype(a.dtype)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1 - self.out),)


class Softmax(Function):
    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class Einsum(Function):
    """Two-operand einsum; every input index must appear in the output or the other operand."""

    def forward(self, a, b, subscripts):
        ins, out = subscripts.replace(" ", "").split("->")
        self.sa, self.sb = ins.split(",")
        self.so = out
        self.a, self.b = a, b
        return np.einsum(subscripts, a, b, optimize=True)

    def backward(self, grad):
        ga = gb = None
        if self.needs_input_grad[0]:
            ga = np.einsum(f"{self.so},{self.sb}->{self.sa}", grad, self.b, optimize=True)
        if self.needs_input_grad[1]:
            gb = np.einsum(f"{self.so},{self.sa}->{self.sb}", grad, self.a, optimize=True)
        return ga, gb


class Conv2d(Function):
    """Valid (unpadded) 2-D cross-correlation over a batch.

    Two equivalent lowerings, picked by which intermediate is smaller:
    im2col (patches [B*Ho*Wo, C*k*k]) when there are few input channels, and
    a kernel-tap expansion (taps [B, O*k*k, H*W]) when there are few output
    channels, as in the PrimaryCaps layer.
    """

    def forward(self, x, kernels, bias=None, stride=1):
        b, c, h, w = x.shape
        o, _, k, _ = kernels.shape
        ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
        self.x, self.kernels, self.stride = x, kernels, stride
        self.geometry = (b, c, h, w, o, k, ho, wo)
        self.use_taps = h * w * o < ho * wo * c
        if self.use_taps:
            taps = np.matmul(self._kq(), x.reshape(b, c, h * w)).reshape(b, o, k, k, h, w)
            out = np.zeros((b, o, ho, wo), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    out += taps[:, :, i, j, self._rows(i), self._cols(j)]
        else:
            windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
            self.cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
            out = (self.cols @ kernels.reshape(o, -1).T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias[None, :, None, None]
        return np.ascontiguousarray(out)

    def _kq(self):
        o, c, k, _ = self.kernels.shape
        return self.kernels.transpose(0, 2, 3, 1).reshape(o * k * k, c)

    def _rows(self, i):
        ho, s = self.geometry[6], self.stride
        return slice(i, i + s * (ho - 1) + 1, s)

    def _cols(self, j):
        wo, s = self.geometry[7], self.stride
        return slice(j, j + s * (wo - 1) + 1, s)

    def backward(self, grad):
        b, c, h, w, o, k, ho, wo = self.geometry
        need = self.needs_input_grad
        gx = gk = gbias = None
        if len(need) > 2 and need[2]:
            gbias = grad.sum(axis=(0, 2, 3))
        if self.use_taps:
            spread = np.zeros((b, o, k, k, h, w), dtype=grad.dtype)
            for i in range(k):
                for j in range(k):
                    spread[:, :, i, j, self._rows(i), self._cols(j)] = grad
            spread = spread.reshape(b, o * k * k, h * w)
            if need[1]:
                flat = spread.transpose(1, 0, 2).reshape(o * k * k, -1)
                xs = self.x.transpose(1, 0, 2, 3).reshape(c, -1)
                gk = (flat @ xs.T).reshape(o, k, k, c).transpose(0, 3, 1, 2)
            if need[0]:
                gx = np.matmul(self._kq().T, spread).reshape(b, c, h, w)
        else:
            g2 = grad.transpose(0, 2, 3, 1).reshape(-1, o)
            if need[1]:
                gk = (g2.T @ self.cols).reshape(self.kernels.shape)
            if need[0]:
                gcols = (g2 @ self.kernels.reshape(o, -1)).reshape(b, ho, wo, c, k, k)
                gx = np.zeros((b, c, h, w), dtype=grad.dtype)
                for i in range(k):
                    for j in range(k):
                        gx[:, :, self._rows(i), self._cols(j)] += gcols[..., i, j].transpose(0, 3, 1, 2)
        return (gx, gk, gbias)[: len(need)]


# -- functional surface ---------------------------------------------------

def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Sqrt.apply(x)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    return Einsum.apply(a, b, subscripts=subscripts)


def softmax_lastdim(logits) -> Tensor:
    """Softmax over the last axis with max-subtraction for stability."""
    return Softmax.apply(as_tensor(logits))


SQUASH_EPS = 1e-12


def squash(s) -> Tensor:
    """Rescale each vector on the last axis to norm |s|^2 / (1 + |s|^2).

    The norm is computed as sqrt(|s|^2 + 1e-12), so the zero vector maps to
    zero with a finite gradient.
    """
    s = as_tensor(s)
    sq = (s * s).sum(axis=-1, keepdims=True)
    scale = sq / ((1.0 + sq) * sqrt(sq + SQUASH_EPS))
    return s * scale


def vector_norm(x: Tensor, eps: float = SQUASH_EPS) -> Tensor:
    """Euclidean norm over the last axis, guarded the same way as squash."""
    return sqrt((x * x).sum(axis=-1) + eps)


def conv2d(x, kernels, bias=None, stride: int = 1) -> Tensor:
    """Valid convolution of ``x`` ([C,H,W] or [B,C,H,W]) with ``kernels`` [O,C,k,k]."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ConfigError(f"conv2d stride must be >= 1, got {stride}")
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"kernels must be [C_out, C_in, k, k], got {kernels.shape}")
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    _, c, h, w = x.shape
    k = kernels.shape[2]
    if kernels.shape[1] != c:
        raise ShapeError(f"input has C_in={c} channels but kernels expect C_in={kernels.shape[1]}")
    if k > h or k > w:
        raise ConfigError(f"kernel size k={k} exceeds input H={h} x W={w}")
    args = (x, kernels) if bias is None else (x, kernels, as_tensor(bias, x))
    out = Conv2d.apply(*args, stride=stride)
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out


# -- tape & backward --------------------------------------------------------

class Tape:
    """Records operations in execution order while active.

    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list = []
        self._outputs: dict = {}
        self.leaves: dict = {}

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes().remove(self)

    def _record(self, fn: Function, out: Tensor) -> None:
        self._outputs[id(out)] = len(self.nodes)
        self.nodes.append((fn, out))
        for inp in fn.inputs:
            if inp.requires_grad and inp.is_leaf:
                self.leaves.setdefault(id(inp), inp)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _topological(loss: Tensor) -> list:
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if node._ctx is None:
            continue
        if expanded:
            order.append((node._ctx, node))
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._ctx.inputs:
            if inp._ctx is not None and id(inp) not in seen:
                stack.append((inp, False))
    return order


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    With a tape, the recorded execution order is replayed in reverse and
    recorded leaves the loss does not depend on receive zero gradients.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is not None:
        if id(loss) not in tape._outputs:
            raise UsageError("loss was not produced by an operation recorded on this tape")
        nodes = tape.nodes[: tape._outputs[id(loss)] + 1]
    else:
        if not loss.requires_grad:
            raise UsageError("loss does not depend on any tensor that requires grad")
        nodes = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    reached = set()
    for fn, out in reversed(nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(fn.inputs, fn.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = gi.astype(inp.dtype, copy=True) if inp.grad is None else inp.grad + gi
                reached.add(id(inp))
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + gi
            else:
                grads[id(inp)] = gi
    if tape is not None:
        for key, leaf in tape.leaves.items():
            if key not in reached and leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]


def numerical_grad(fn, arrays: Sequence[np.ndarray], index: int, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    target = arrays[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn(*arrays))
        flat[i] = orig - h
        down = float(fn(*arrays))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad
