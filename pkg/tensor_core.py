"""Dense arrays with reverse-mode autodiff, Adam, and parameter blobs.

Every Tensor wraps an ``np.ndarray``. Operations on tensors that require
gradients record a closure that maps the output gradient to one gradient per
parent; ``backward`` replays those closures in reverse topological order.

Conventions the rest of the package relies on:
  * gradients accumulate across ``backward`` calls until ``zero_grad``;
  * relu / max-with-constant subgradient at the kink is 0;
  * ``power(u, p)`` has zero gradient w.r.t. ``u`` where ``u == 0`` and p > 0;
  * clamp passes gradient 1 on the closed interval, 0 outside.
"""
from __future__ import annotations

import contextlib
import math
import threading
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_DTYPE: type[np.floating] = np.float64
_GRAD_STATE = threading.local()

BLOB_VERSION = "pgan-blob-1"


class ShapeError(ValueError):
    """Operand shapes incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class NumericalError(FloatingPointError):
    """NaN or Inf where finite values are required."""


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dtype


def get_default_dtype() -> type[np.floating]:
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    previous = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (sampling passes, previews, metrics).

    The switch is per thread: pool workers that should not record enter their own.
    """
    previous = grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


def grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Backward | None = None

    # ---- introspection ----
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def validate(self, what: str = "") -> Tensor:
        """Raise NumericalError if any entry is NaN or Inf."""
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            label = what or self.name or self.op
            raise NumericalError(f"{label}: {bad} non-finite value(s) in tensor of shape {self.shape}")
        return self

    # ---- autodiff ----
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` of every requires_grad leaf reachable from this scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", self.shape, detail="loss must be a scalar")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # ---- operators ----
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return slice_(self, index)

    # method aliases used throughout the package
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward: Backward) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ───────────────────────── elementwise binary ─────────────────────────

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _result(a.data + b.data, (a, b), "add",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), "sub",
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), "mul",
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _result(out, (a, b), "div",
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), "neg", lambda g: (-g,))


def power(base, exponent) -> Tensor:
    """``base ** exponent``; the exponent may be a constant or a tensor."""
    u = as_tensor(base)
    if not isinstance(exponent, Tensor):
        p = float(exponent)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.power(u.data, p)

        def backward(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                d = p * np.power(u.data, p - 1.0)
            if p > 0:
                d = np.where(u.data == 0, 0.0, d)
            return (g * d,)

        return _result(out, (u,), "power", backward)

    e = exponent
    _broadcast_shape("power", u, e)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(u.data, e.data)

    def backward_t(g):
        zero = u.data == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            du = np.where(zero & (e.data > 0), 0.0, e.data * np.power(u.data, e.data - 1.0))
            de = np.where(zero, 0.0, out * np.log(np.where(zero, 1.0, u.data)))
        return _unbroadcast(g * du, u.shape), _unbroadcast(g * de, e.shape)

    return _result(out, (u, e), "power", backward_t)


# ───────────────────────── unary ─────────────────────────

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"log: {int(np.sum(a.data < 0))} negative input(s)")
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _result(out, (a,), "log", lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError(f"sqrt: {int(np.sum(a.data < 0))} negative input(s)")
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g * 0.5 / out, 0.0),)

    return _result(out, (a,), "sqrt", backward)


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sin(a.data), (a,), "sin", lambda g: (g * np.cos(a.data),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def _logistic(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _logistic(a.data)
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + e^x), overflow-free for large |x|."""
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), (a,), "softplus", lambda g: (g * _logistic(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.data.dtype)
    return _result(a.data * scale, (a,), "leaky_relu", lambda g: (g * scale,))


def maximum(a, c: float) -> Tensor:
    """max{c, a} against a constant."""
    a = as_tensor(a)
    mask = a.data > c
    return _result(np.where(mask, a.data, c), (a,), "maximum", lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), "clamp", lambda g: (g * inside,))


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """L2 norm along one axis; gradient at the zero vector is 0."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def backward(g):
        g = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(n > 0, a.data / n, 0.0)
        return (g * unit,)

    return _result(n if keepdims else np.squeeze(n, axis=axis), (a,), "norm", backward)


# ───────────────────────── reductions / shape ─────────────────────────

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), "sum", backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    return _result(out, (a,), "broadcast", lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _result(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(p.shape for p in parts)) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _result(out, parts, "concat", lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    expanded = []
    for p in parts:
        ax = axis if axis >= 0 else p.ndim + 1 + axis
        expanded.append(reshape(p, p.shape[:ax] + (1,) + p.shape[ax:]))
    return concat(expanded, axis=axis)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), "slice", backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with broadcasting over leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), b.shape[:-2] + b.shape[-1:])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), "matmul", backward)


# ───────────────────────── convolution patches ─────────────────────────
# Channels-last images (B, H, W, C). unfold gathers k×k windows into rows;
# fold is its adjoint (scatter-add). Each one's backward is the other, so a
# gradient built from them is itself differentiable.

def _conv_geometry(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("unfold", (h, w), (k, k), detail=f"stride={stride} pad={pad}")
    return ho, wo


def _unfold_np(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    b, h, w, c = x.shape
    ho, wo = _conv_geometry(h, w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((b, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(b, ho, wo, k * k * c)


def _fold_np(cols: np.ndarray, size: tuple[int, int], k: int, stride: int, pad: int) -> np.ndarray:
    b, ho, wo, kkc = cols.shape
    h, w = size
    c = kkc // (k * k)
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    cols = cols.reshape(b, ho, wo, k, k, c)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
    return out[:, pad:pad + h, pad:pad + w, :] if pad else out


def unfold(x, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("unfold", x.shape, detail="expected (B, H, W, C)")
    size = (x.shape[1], x.shape[2])
    return _result(_unfold_np(x.data, k, stride, pad), (x,), "unfold",
                   lambda g: (_fold_np(g, size, k, stride, pad),))


def fold(cols, size: tuple[int, int], k: int, stride: int = 1, pad: int = 0) -> Tensor:
    cols = as_tensor(cols)
    return _result(_fold_np(cols.data, size, k, stride, pad), (cols,), "fold",
                   lambda g: (_unfold_np(g, k, stride, pad),))


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Channels-last convolution; ``weight`` is (k*k*C_in, C_out)."""
    x, weight = as_tensor(x), as_tensor(weight)
    c_in = x.shape[-1]
    k = int(round(math.sqrt(weight.shape[0] // c_in)))
    if k * k * c_in != weight.shape[0]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    out = unfold(x, k, stride, pad) @ weight
    return out + bias if bias is not None else out


# ───────────────────────── parameters ─────────────────────────

def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=_DTYPE), requires_grad=True, name=name)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class AdamState:
    """Adam moments for one parameter group (keyed by parameter name)."""

    lr: float
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> None:
        self.t = 0
        self.m.clear()
        self.v.clear()


def adam_step(state: AdamState, params: Mapping[str, Tensor]) -> None:
    """One bias-corrected Adam update of ``params`` from their ``.grad``."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for parameter(s) {', '.join(missing)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        assert g is not None
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, detail=name)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ───────────────────────── serialization ─────────────────────────

def save_arrays(arrays: Mapping[str, np.ndarray], blob_path: Path) -> None:
    """Write arrays as one little-endian float blob plus ``<blob>.manifest``.

    Manifest lines: ``name dtype offset shape`` with shape as ``3x4`` (or
    ``scalar``). Arrays are written in sorted-name order.
    """
    blob_path = Path(blob_path)
    lines = [BLOB_VERSION]
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = "f8" if arr.dtype == np.float64 else "f4"
        raw = np.ascontiguousarray(arr, dtype="<" + code).tobytes()
        shape = "x".join(str(n) for n in arr.shape) or "scalar"
        lines.append(f"{name} {code} {offset} {shape}")
        chunks.append(raw)
        offset += len(raw)
    lines.append(f"total {offset}")
    blob_path.write_bytes(b"".join(chunks))
    blob_path.with_name(blob_path.name + ".manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_arrays(blob_path: Path) -> dict[str, np.ndarray]:
    """Inverse of ``save_arrays``; raises ValueError on a malformed or short blob."""
    blob_path = Path(blob_path)
    manifest = blob_path.with_name(blob_path.name + ".manifest").read_text(encoding="utf-8").splitlines()
    if not manifest or manifest[0] != BLOB_VERSION:
        raise ValueError(f"{blob_path}: unknown blob version {manifest[:1]}")
    raw = blob_path.read_bytes()
    total = manifest[-1].split()
    if len(total) != 2 or total[0] != "total" or int(total[1]) != len(raw):
        raise ValueError(f"{blob_path}: blob has {len(raw)} bytes, manifest says {manifest[-1]!r}")
    out: dict[str, np.ndarray] = {}
    for line in manifest[1:-1]:
        name, code, offset, shape_text = line.split()
        shape = () if shape_text == "scalar" else tuple(int(n) for n in shape_text.split("x"))
        count = int(np.prod(shape)) if shape else 1
        start = int(offset)
        arr = np.frombuffer(raw, dtype="<" + code, count=count, offset=start)
        out[name] = arr.reshape(shape).astype(code).copy()
    return out


def save_parameters(params: Mapping[str, Tensor], blob_path: Path) -> None:
    save_arrays({name: p.data for name, p in params.items()}, blob_path)


def load_parameters(params: Mapping[str, Tensor], blob_path: Path) -> None:
    """Load into existing tensors; names and shapes must match exactly."""
    arrays = load_arrays(blob_path)
    if set(arrays) != set(params):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise ValueError(f"{blob_path}: parameter mismatch (missing={missing}, unexpected={extra})")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ShapeError("load_parameters", p.shape, arrays[name].shape, detail=name)
    for name, p in params.items():
        p.data = arrays[name].astype(_DTYPE)


# ───────────────────────── gradient checking ─────────────────────────

def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-6,
              max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` rebuilds the scalar loss from the current values of ``inputs``.
    With ``max_entries`` only that many randomly chosen entries per input are
    checked. Relative error uses ``|a - n| / max(1, |a|, |n|)``.
    """
    for t in inputs:
        t.grad = None
    fn().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                keep = flat[i]
                flat[i] = keep + h
                up = float(fn().data)
                flat[i] = keep - h
                down = float(fn().data)
                flat[i] = keep
                numeric = (up - down) / (2.0 * h)
                exact = float(a.reshape(-1)[i])
                worst = max(worst, abs(exact - numeric) / max(1.0, abs(exact), abs(numeric)))
    return worst
