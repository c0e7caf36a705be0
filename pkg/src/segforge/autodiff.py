"""Small dense tensor engine with reverse-mode differentiation.

Only the operations the segmentation networks need are provided: N-D
convolution and transposed convolution, instance/batch normalization,
relu/leaky-relu/softmax, channel concatenation, and the handful of
elementwise and reduction ops used by the Dice loss.

Every op records a backward closure on its output; :meth:`Tensor.backward`
walks the graph in reverse topological order and accumulates gradients into
tensors created with ``requires_grad=True``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Raised when tensor shapes do not match what an op expects."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value shows up where a finite one is required."""


class Tensor:
    """An n-dimensional array that can take part in a recorded graph.

    ``data`` is a C-contiguous numpy array, so the flat row-major view with
    the last axis fastest is ``data.ravel()``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE if dtype is None else dtype)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar used by the loss code
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
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)


def _needs_graph(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in tensors)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.requires_grad = False
    out.grad = None
    out.name = ""
    live = tuple(p for p in parents if _needs_graph(p))
    if live:
        out._parents = live
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every ``requires_grad`` leaf.

    Raises:
        ValueError: if ``loss`` holds more than one element.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node._accumulate(g)
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


# --------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    raise DimensionError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def _check_binary(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"operand shapes differ: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if _tracks(a) else None,
                _unbroadcast(g, b.shape) if _tracks(b) else None)

    return _result(a.data + b.data, (a, b), _pick(bw, a, b))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if _tracks(a) else None,
                _unbroadcast(-g, b.shape) if _tracks(b) else None)

    return _result(a.data - b.data, (a, b), _pick(bw, a, b))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if _tracks(a) else None,
                _unbroadcast(g * a.data, b.shape) if _tracks(b) else None)

    return _result(a.data * b.data, (a, b), _pick(bw, a, b))


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if _tracks(a) else None,
                _unbroadcast(-g * out / b.data, b.shape) if _tracks(b) else None)

    return _result(out, (a, b), _pick(bw, a, b))


def _pick(bw, *operands):
    """Drop gradient slots for operands that ``_result`` will not keep as parents."""
    keep = [_needs_graph(t) for t in operands]

    def wrapped(g):
        grads = bw(g)
        return tuple(gr for gr, k in zip(grads, keep) if k)

    return wrapped


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis), 1.0 / n)


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, copy=True), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax, (p, q) in enumerate(zip(ref, t.shape)):
            if ax != axis and p != q:
                raise DimensionError(f"concat: axis {ax} differs ({p} vs {q})")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    live = [_needs_graph(t) for t in tensors]

    def bw(g):
        parts = np.split(g, bounds[1:-1], axis=axis)
        return tuple(p for p, k in zip(parts, live) if k)

    return _result(out, tensors, bw)


# --------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _result(x.data * scale, (x,), lambda g: (g * scale,))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Softmax over ``axis`` (the channel axis by default)."""
    if x.shape[axis] < 1:
        raise DimensionError("softmax needs at least one channel")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _result(p, (x,), bw)


def activation(x: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "softmax":
        return softmax(x, axis=1)
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a convolution or transposed convolution.

    Weight layout is ``[C_out, C_in, *kernel]`` for a plain convolution and
    ``[C_in, C_out, *kernel]`` for a transposed one.
    """

    dims: int
    in_channels: int
    out_channels: int
    kernel: tuple
    stride: tuple = 1
    padding: tuple = 0
    transposed: bool = False

    def __post_init__(self):
        for field_name in ("kernel", "stride", "padding"):
            val = getattr(self, field_name)
            if isinstance(val, int):
                val = (val,) * self.dims
            object.__setattr__(self, field_name, tuple(int(v) for v in val))
            if len(getattr(self, field_name)) != self.dims:
                raise DimensionError(f"{field_name} needs {self.dims} entries, got {val}")
        if self.dims not in (1, 2, 3):
            raise DimensionError(f"dims must be 1, 2 or 3, got {self.dims}")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise DimensionError("kernel and stride entries must be >= 1")
        if any(p < 0 for p in self.padding):
            raise DimensionError("padding entries must be >= 0")

    @property
    def weight_shape(self) -> tuple:
        if self.transposed:
            return (self.in_channels, self.out_channels, *self.kernel)
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_shape(self, spatial: Sequence[int]) -> tuple:
        if self.transposed:
            return tuple((s - 1) * st + k - 2 * p
                         for s, st, k, p in zip(spatial, self.stride, self.kernel, self.padding))
        return tuple((s + 2 * p - k) // st + 1
                     for s, st, k, p in zip(spatial, self.stride, self.kernel, self.padding))

    def to_dict(self) -> dict:
        return {
            "dims": self.dims,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": list(self.kernel),
            "stride": list(self.stride),
            "padding": list(self.padding),
            "transposed": self.transposed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConvSpec":
        return cls(d["dims"], d["in_channels"], d["out_channels"], tuple(d["kernel"]),
                   tuple(d["stride"]), tuple(d["padding"]), bool(d["transposed"]))


def _check_conv_operands(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor]) -> None:
    if x.ndim != spec.dims + 2:
        raise DimensionError(f"input must be [N, C, {spec.dims} spatial], got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"axis 1 (channels): expected {spec.in_channels}, got {x.shape[1]}")
    for ax, (got, want) in enumerate(zip(weight.shape, spec.weight_shape)):
        if got != want:
            raise DimensionError(f"weight axis {ax}: expected {want}, got {got} (shape {weight.shape})")
    if len(weight.shape) != len(spec.weight_shape):
        raise DimensionError(f"weight rank {weight.ndim} != {len(spec.weight_shape)}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias axis 0: expected {spec.out_channels}, got {bias.shape}")


def _offset_slices(offset: Sequence[int], stride: Sequence[int], count: Sequence[int]) -> tuple:
    return (slice(None), slice(None)) + tuple(
        slice(o, o + st * (n - 1) + 1, st) for o, st, n in zip(offset, stride, count))


def _kernel_offsets(kernel: Sequence[int]):
    return itertools.product(*(range(k) for k in kernel))


def _conv_forward(xp: np.ndarray, w: np.ndarray, stride, out_sp) -> np.ndarray:
    """Cross-correlate padded input [N, Ci, ...] with w [Co, Ci, k...] -> [N, Co, out...]."""
    n = xp.shape[0]
    co = w.shape[0]
    acc = np.zeros((co, n) + tuple(out_sp), dtype=xp.dtype)
    for off in _kernel_offsets(w.shape[2:]):
        xs = xp[_offset_slices(off, stride, out_sp)]
        acc += np.tensordot(w[(slice(None), slice(None)) + off], xs, axes=([1], [1]))
    return np.ascontiguousarray(np.moveaxis(acc, 0, 1))


def _conv_grad_weight(xp: np.ndarray, g: np.ndarray, kernel, stride) -> np.ndarray:
    out_sp = g.shape[2:]
    sum_axes = [0] + list(range(2, g.ndim))
    gw = np.empty((g.shape[1], xp.shape[1]) + tuple(kernel), dtype=xp.dtype)
    for off in _kernel_offsets(kernel):
        xs = xp[_offset_slices(off, stride, out_sp)]
        gw[(slice(None), slice(None)) + off] = np.tensordot(g, xs, axes=(sum_axes, sum_axes))
    return gw


def _scatter_input(g: np.ndarray, w: np.ndarray, padded_shape, stride) -> np.ndarray:
    """Adjoint of ``_conv_forward`` w.r.t. its padded input."""
    out_sp = g.shape[2:]
    gx = np.zeros(padded_shape, dtype=g.dtype)
    for off in _kernel_offsets(w.shape[2:]):
        contrib = np.tensordot(w[(slice(None), slice(None)) + off], g, axes=([0], [1]))
        gx[_offset_slices(off, stride, out_sp)] += np.moveaxis(contrib, 0, 1)
    return gx


def _pad(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return np.pad(x, [(0, 0), (0, 0)] + [(p, p) for p in padding])


def _crop(x: np.ndarray, padding) -> np.ndarray:
    if not any(padding):
        return x
    return x[(slice(None), slice(None)) + tuple(slice(p, x.shape[2 + i] - p) for i, p in enumerate(padding))]


def conv_nd(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """N-D cross-correlation with explicit zero padding.

    Output extent per axis is ``floor((s + 2p - k) / stride) + 1``.

    Raises:
        DimensionError: naming the offending axis when shapes disagree with ``spec``.
    """
    if spec.transposed:
        raise DimensionError("conv_nd got a transposed spec; use conv_transpose_nd")
    _check_conv_operands(x, spec, weight, bias)
    out_sp = spec.output_shape(x.shape[2:])
    for ax, o in enumerate(out_sp):
        if o < 1:
            raise DimensionError(f"spatial axis {ax + 2}: extent {x.shape[ax + 2]} too small for kernel")
    xp = _pad(x.data, spec.padding)
    out = _conv_forward(xp, weight.data, spec.stride, out_sp)
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * spec.dims)

    def bw(g):
        grads = []
        if _needs_graph(x):
            grads.append(_crop(_scatter_input(g, weight.data, xp.shape, spec.stride), spec.padding))
        if _needs_graph(weight):
            grads.append(_conv_grad_weight(xp, g, spec.kernel, spec.stride))
        if bias is not None and _needs_graph(bias):
            grads.append(g.sum(axis=(0,) + tuple(range(2, g.ndim))))
        return tuple(grads)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _result(out, parents, bw)


def conv_transpose_nd(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Transposed convolution: the input-adjoint of :func:`conv_nd` for the same weight.

    Output extent per axis is ``(s - 1) * stride + k - 2p``.
    """
    if not spec.transposed:
        raise DimensionError("conv_transpose_nd needs a spec with transposed=True")
    _check_conv_operands(x, spec, weight, bias)
    out_sp = spec.output_shape(x.shape[2:])
    for ax, o in enumerate(out_sp):
        if o < 1:
            raise DimensionError(f"spatial axis {ax + 2}: padding leaves no output")
    full = tuple((s - 1) * st + k for s, st, k in zip(x.shape[2:], spec.stride, spec.kernel))
    n = x.shape[0]
    yfull = _scatter_input(x.data, weight.data, (n, spec.out_channels) + full, spec.stride)
    out = np.ascontiguousarray(_crop(yfull, spec.padding))
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * spec.dims)

    def bw(g):
        grads = []
        gfull = _pad(g, spec.padding)
        if _needs_graph(x):
            grads.append(_conv_forward(gfull, weight.data, spec.stride, x.shape[2:]))
        if _needs_graph(weight):
            grads.append(_transpose_grad_weight(x.data, gfull, spec.kernel, spec.stride))
        if bias is not None and _needs_graph(bias):
            grads.append(g.sum(axis=(0,) + tuple(range(2, g.ndim))))
        return tuple(grads)

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _result(out, parents, bw)


def _transpose_grad_weight(x: np.ndarray, gfull: np.ndarray, kernel, stride) -> np.ndarray:
    in_sp = x.shape[2:]
    sum_axes = [0] + list(range(2, x.ndim))
    gw = np.empty((x.shape[1], gfull.shape[1]) + tuple(kernel), dtype=x.dtype)
    for off in _kernel_offsets(kernel):
        gs = gfull[_offset_slices(off, stride, in_sp)]
        gw[(slice(None), slice(None)) + off] = np.tensordot(x, gs, axes=(sum_axes, sum_axes))
    return gw


# --------------------------------------------------------------------------
# normalization


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardization followed by a channel affine."""
    if x.ndim < 3 or int(np.prod(x.shape[2:])) == 0:
        raise DimensionError(f"instance_norm needs >= 1 spatial element per channel, got {x.shape}")
    axes = tuple(range(2, x.ndim))
    return _normalize(x, gamma, beta, eps, axes)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               running: Optional[tuple] = None, training: bool = True, momentum: float = 0.1) -> Tensor:
    """Batch normalization. ``running`` is a ``(mean, var)`` pair updated in place when training."""
    axes = (0,) + tuple(range(2, x.ndim))
    if training or running is None:
        out = _normalize(x, gamma, beta, eps, axes)
        if running is not None and training:
            rm, rv = running
            n = int(np.prod([x.shape[a] for a in axes]))
            m = x.data.mean(axis=axes)
            v = x.data.var(axis=axes) * (n / max(n - 1, 1))
            rm *= 1 - momentum
            rm += momentum * m
            rv *= 1 - momentum
            rv += momentum * v
        return out
    rm, rv = running
    return _affine_eval(x, gamma, beta, rm, rv, eps)


def _affine_eval(x, gamma, beta, rm, rv, eps):
    shape = (1, -1) + (1,) * (x.ndim - 2)
    xhat = (x.data - rm.reshape(shape)) / np.sqrt(rv.reshape(shape) + eps)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)
    red = (0,) + tuple(range(2, x.ndim))
    inv = 1.0 / np.sqrt(rv.reshape(shape) + eps)

    def bw(g):
        grads = []
        if _needs_graph(x):
            grads.append(g * gamma.data.reshape(shape) * inv)
        if _needs_graph(gamma):
            grads.append((g * xhat).sum(axis=red))
        if _needs_graph(beta):
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


def _normalize(x: Tensor, gamma: Tensor, beta: Tensor, eps: float, axes: tuple) -> Tensor:
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"axis 1 (channels): gamma/beta need shape ({c},), got {gamma.shape}/{beta.shape}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gamma.data.reshape(shape)
    out = xhat * g_ + beta.data.reshape(shape)
    red = tuple(a for a in range(x.ndim) if a != 1)

    def bw(g):
        grads = []
        if _needs_graph(x):
            gx_hat = g * g_
            gx = inv * (gx_hat - gx_hat.mean(axis=axes, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=axes, keepdims=True))
            grads.append(gx)
        if _needs_graph(gamma):
            grads.append((g * xhat).sum(axis=red))
        if _needs_graph(beta):
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _result(out, (x, gamma, beta), bw)


# --------------------------------------------------------------------------
# gradient checking


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
               eps: float = 1e-8, max_entries: Optional[int] = None,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar graph from the current parameter values each
    call. The relative error of one entry is
    ``|analytic - numeric| / (|numeric| + eps)``; entries where both
    gradients are below ``eps`` count as exact.  ``max_entries`` checks a
    random subset per parameter to keep large tensors cheap.

    Raises:
        NumericError: if the function produces a non-finite value.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"grad_check: non-finite value perturbing {p.name or 'param'}[{i}]")
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            if abs(a) < eps and abs(numeric) < eps:
                continue
            worst = max(worst, abs(a - numeric) / (abs(numeric) + eps))
    return worst
