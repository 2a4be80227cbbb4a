"""Minimal reverse-mode autodiff on dense numpy arrays.

Just enough machinery to express the texture decoders and their training:
conv2d, bilinear resize, a handful of pointwise maps, concat/slice/tile,
reductions, and Adam. Gradients are recorded on an explicit :class:`Tape`;
nothing is tracked outside an active tape, so inference runs at plain
numpy speed.

Training arithmetic is float32 by default; every op also works in float64
so finite-difference oracles can run the identical graph at high precision.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops for one forward pass.

    Execution order is a topological order of the graph, so replaying the
    entries in reverse visits every node exactly once with its output
    gradient fully accumulated.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, out: "Tensor", backward: Callable[[np.ndarray], None]) -> None:
        self.entries.append((out, backward))

    def backward(self, root: "Tensor") -> None:
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for out, fn in reversed(self.entries):
            if out.grad is not None:
                fn(out.grad)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense multi-axis array with an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise RuntimeError("tensor was not recorded on a tape; wrap the forward pass in `with Tape():`")
        self._tape.backward(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}, name={self.name!r})"

    # operator sugar used by the losses
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make_out(data: np.ndarray, inputs: Sequence[Tensor],
              backward: Callable[[np.ndarray], None]) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = active_tape()
    if requires and tape is not None:
        out._tape = tape
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g, b.shape))
    return _make_out(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(-_reduce_to(g, b.shape))
    return _make_out(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to(g * a.data, b.shape))
    return _make_out(a.data * b.data, (a, b), backward)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def scale(x: Tensor, c: float) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * c)
    return _make_out(x.data * c, (x,), backward)


def add_const(x: Tensor, c: float) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)
    return _make_out(x.data + c, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)
    return _make_out(np.where(mask, x.data, 0), (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * np.where(mask, 1.0, slope).astype(x.data.dtype))
    return _make_out(np.where(mask, x.data, x.data * slope), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # numerically stable split form (no exp overflow for large |x|)
    d = x.data
    pos = d >= 0
    e = np.exp(np.where(pos, -d, d))
    s = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * s * (1 - s))
    return _make_out(s, (x,), backward)


def scale_add(x: Tensor, lam_s: float, lam_b: float) -> Tensor:
    """relu(lam_s * x) + lam_b, the nonnegative texture head."""
    pre = x.data * lam_s
    mask = pre > 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * (mask * lam_s))
    return _make_out(np.where(mask, pre, 0) + lam_b, (x,), backward)


def max_zero_neg(x: Tensor) -> Tensor:
    """max(-x, 0); picks out the negative part with subgradient 0 at 0."""
    mask = x.data < 0

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.where(mask, -g, 0))
    return _make_out(np.where(mask, -x.data, 0), (x,), backward)


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g * sign)
    return _make_out(np.abs(x.data), (x,), backward)


_POINTWISE = {
    "relu": lambda x, **kw: relu(x),
    "sigmoid": lambda x, **kw: sigmoid(x),
    "scale_add": lambda x, lam_s=25.0, lam_b=100.0: scale_add(x, lam_s, lam_b),
    "max_zero_neg": lambda x, **kw: max_zero_neg(x),
    "leaky_relu": lambda x, slope=0.2: leaky_relu(x, slope),
    "abs": lambda x, **kw: abs_(x),
}


def pointwise(x: Tensor, kind: str, **params) -> Tensor:
    """Dispatch an elementwise map by name."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}; have {sorted(_POINTWISE)}") from None
    return fn(x, **params)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])
    return _make_out(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[start:stop] = g
            x.accumulate_grad(full)
    return _make_out(x.data[start:stop].copy(), (x,), backward)


def tile_spatial(vec: Tensor, h: int, w: int) -> Tensor:
    """Broadcast a length-P vector to a (P, h, w) map."""
    if vec.data.ndim != 1:
        raise ValueError(f"tile_spatial expects a 1-D vector, got shape {vec.shape}")

    def backward(g):
        if vec.requires_grad:
            vec.accumulate_grad(g.sum(axis=(1, 2)))
    return _make_out(np.broadcast_to(vec.data[:, None, None], (vec.shape[0], h, w)).copy(), (vec,), backward)


def spatial_diff(x: Tensor, axis: int) -> Tensor:
    """Forward difference along a spatial axis of a (C, H, W) map."""
    if axis not in (1, 2):
        raise ValueError("axis must be 1 (rows) or 2 (cols)")
    d = np.diff(x.data, axis=axis)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(0, -1)
            hi[axis] = slice(1, None)
            full[tuple(hi)] += g
            full[tuple(lo)] -= g
            x.accumulate_grad(full)
    return _make_out(d, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, g.reshape(-1)[0]))
    return _make_out(np.asarray(x.data.sum(dtype=np.float64), dtype=x.data.dtype).reshape(()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


def record_custom(out_data: np.ndarray, inputs: Sequence[Tensor],
                  backward: Callable[[np.ndarray], None]) -> Tensor:
    """Hook for ops implemented outside this module (e.g. the ray marcher)."""
    return _make_out(out_data, inputs, backward)


# ---------------------------------------------------------------------------
# conv2d / resize


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> tuple[np.ndarray, int, int]:
    c, h, w = x.shape
    if padding > 0:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[1], x.shape[2]
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    cols = np.empty((c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, i:i + oh * stride:stride, j:j + ow * stride:stride]
    return cols.reshape(c * k * k, oh * ow), oh, ow


def _col2im(cols: np.ndarray, in_shape: tuple[int, int, int], k: int,
            stride: int, padding: int, oh: int, ow: int) -> np.ndarray:
    c, h, w = in_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, oh, ow)
    for i in range(k):
        for j in range(k):
            out[:, i:i + oh * stride:stride, j:j + ow * stride:stride] += cols[:, i, j]
    if padding > 0:
        out = out[:, padding:hp - padding, padding:wp - padding]
    return out


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C_in, H, W) map with a (C_out, C_in, k, k) kernel."""
    co, ci, k, k2 = kernel.shape
    if k != k2 or k % 2 != 1:
        raise ValueError(f"kernel must be square with odd size, got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if x.data.ndim != 3 or x.shape[0] != ci:
        raise ValueError(
            f"input channel mismatch: input shape {x.shape} vs kernel shape {kernel.shape}")
    cols, oh, ow = _im2col(x.data, k, stride, padding)
    kmat = kernel.data.reshape(co, ci * k * k)
    out = (kmat @ cols).reshape(co, oh, ow)

    def backward(g):
        gmat = np.ascontiguousarray(g.reshape(co, oh * ow))
        if kernel.requires_grad:
            kernel.accumulate_grad((gmat @ cols.T).reshape(kernel.shape))
        if x.requires_grad:
            dcols = kmat.T @ gmat
            x.accumulate_grad(_col2im(dcols, x.shape, k, stride, padding, oh, ow))
    return _make_out(out, (x, kernel), backward)


_RESIZE_MATS: dict[tuple[int, int, str], np.ndarray] = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """(n_out, n_in) interpolation matrix with endpoint-aligned positions:
    corner pixels map to corners, so a 2x up/down round trip reproduces
    linear ramps exactly."""
    key = (n_in, n_out, np.dtype(dtype).str)
    mat = _RESIZE_MATS.get(key)
    if mat is not None:
        return mat
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    i0 = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = pos - i0
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.arange(n_out), i0), 1.0 - w1)
    np.add.at(mat, (np.arange(n_out), i1), w1)
    mat = mat.astype(dtype)
    _RESIZE_MATS[key] = mat
    return mat


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resample of a (C, H, W) map with edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be >= 1")
    c, h, w = x.shape
    wr = _resize_matrix(h, out_h, x.data.dtype)
    wc = _resize_matrix(w, out_w, x.data.dtype)
    out = wr @ x.data @ wc.T  # (C,H,W): batched over the leading axis

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(wr.T @ g @ wc)
    return _make_out(np.ascontiguousarray(out), (x,), backward)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float = 0.001, betas: tuple[float, float] = (0.9, 0.999),
              eps: float = 1e-8, name: str = "?") -> None:
    """One in-place Adam update with bias correction. `t` is 1-based."""
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a named parameter dict; state starts at zero."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.001,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("lr must be > 0")
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, self.m[name], self.v[name], self.t,
                      self.lr, self.betas, self.eps, name=name)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for k in self.params:
            self.m[k] = arrays[f"m.{k}"].astype(self.m[k].dtype).reshape(self.m[k].shape).copy()
            self.v[k] = arrays[f"v.{k}"].astype(self.v[k].dtype).reshape(self.v[k].shape).copy()


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                    fan_in: int, slope: float = 0.2) -> np.ndarray:
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoint container: header (magic PLT1, version, count), then per-tensor
# records (name, shape, little-endian float32)

CHECKPOINT_MAGIC = b"PLT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a parameter checkpoint (magic {magic!r})")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            out[name] = arr.astype(np.float32)
        return out
