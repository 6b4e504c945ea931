"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, which is how inference runs::

    with Tape() as tape:
        loss = mean(hadamard(x, x))
    tape.backward(loss)       # or loss.backward()
"""
from __future__ import annotations

import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NumericalHealthError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Ops are appended in execution order, so inputs always precede the ops that
    consume them and a reverse sweep visits each op exactly once.
    """

    def __init__(self) -> None:
        self.ops: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record onto a tape that has already been backpropagated")
        out._tape = self
        self.ops.append((out, inputs, backward_fn))

    def reset(self) -> None:
        self.ops.clear()
        self.consumed = False

    def backward(self, loss: "Tensor") -> None:
        if self.consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.ops:
            raise TapeError("tape is empty")
        self.consumed = True

        produced = {id(out) for out, _, _ in self.ops}
        flow: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, backward_fn in reversed(self.ops):
            g = flow.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            in_grads = backward_fn(g)
            for inp, ig in zip(inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in flow:
                    flow[key] = flow[key] + ig
                else:
                    flow[key] = ig
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = flow.pop(key)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
        # outputs point back at the tape; dropping the ops breaks that cycle so
        # the activations are freed without waiting for the cyclic collector
        self.ops.clear()


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._tape is None:
            raise TapeError("tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return hadamard(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalHealthError(f"{name} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(out, tuple(inputs), backward_fn)
    return out


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, bias: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D ``bias`` along ``axis`` of ``x`` (broadcast over the rest)."""
    axis = axis % x.ndim
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    reduce_axes = tuple(i for i in range(x.ndim) if i != axis)
    return _emit(
        x.data + bias.data.reshape(view),
        (x, bias),
        lambda g: (g, g.sum(axis=reduce_axes)),
        "add_bias",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _emit(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def dropout(
    x: Tensor,
    p: float,
    training: bool,
    rng: np.random.Generator | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Inverted dropout. Identity when not training or when ``p == 0``.

    ``mask`` (a keep-mask of 0/1 values) overrides sampling; used for
    reproducible gradient checks.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or (p == 0.0 and mask is None):
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in training mode needs an rng or an explicit mask")
        mask = (rng.random(x.shape) >= p).astype(np.float64)
    elif mask.shape != x.shape:
        raise ShapeError(f"dropout mask {mask.shape} does not match input {x.shape}")
    factor = mask / (1.0 - p)
    return _emit(x.data * factor, (x,), lambda g: (g * factor,), "dropout")


# ----------------------------------------------------------------------------
# shape and reductions
# ----------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from exc
    src = x.shape
    return _emit(out, (x,), lambda g: (g.reshape(src),), "reshape")


def flatten(x: Tensor, start_dim: int = 0) -> Tensor:
    """Row-major flatten of all axes from ``start_dim`` on."""
    lead = x.shape[:start_dim]
    return reshape(x, lead + (int(np.prod(x.shape[start_dim:], dtype=np.int64)),))


def getitem(x: Tensor, idx) -> Tensor:
    src_shape = x.shape

    def backward(g):
        full = np.zeros(src_shape)
        np.add.at(full, idx, g)
        return (full,)

    return _emit(np.array(x.data[idx]), (x,), backward, "getitem")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    for t in tensors[1:]:
        _same_shape(tensors[0], t, "stack")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _emit(out, tuple(tensors), backward, "stack")


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [in] or [N, in], weight [out, in]."""
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if xd.ndim == 1:
            gw = np.outer(g, xd)
            gb = g
        else:
            gw = g.T @ xd
            gb = g.sum(axis=0)
        return (g @ wd, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit(out, inputs, backward, "linear")


# ----------------------------------------------------------------------------
# convolution, pooling, normalization
# ----------------------------------------------------------------------------

def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """2-D cross-correlation (no kernel flip), stride 1.

    ``x`` is [C_in, H, W] or [N, C_in, H, W]; ``kernels`` is [C_out, C_in, k, k]
    with odd ``k``; ``bias`` is [C_out].
    """
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise ShapeError(f"conv2d: kernels must be [C_out, C_in, k, k], got {kernels.shape}")
    c_out, c_in, k, _ = kernels.shape
    if k % 2 != 1:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel input channels {c_in}")
    if padding == "same":
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    n, _, h, w = xd.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d: kernel {k}x{k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    # im2col as [C_in*k*k, N*Ho*Wo], filled with one slice copy per kernel offset
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c_in, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + ho, j:j + wo]
    cols = cols.reshape(c_in * k * k, n * ho * wo)
    kmat = kernels.data.reshape(c_out, c_in * k * k)
    out = (kmat @ cols).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]
    if unbatched:
        out = out[0]

    def backward(g):
        g4 = g[None] if unbatched else g
        g2 = g4.transpose(1, 0, 2, 3).reshape(c_out, n * ho * wo)
        gk = (g2 @ cols.T).reshape(kernels.shape)
        gb = g2.sum(axis=1)
        if not x.requires_grad:
            return (None, gk, gb)
        gcols = (kmat.T @ g2).reshape(c_in, k, k, n, ho, wo)
        gxt = np.zeros((c_in, n) + xp.shape[2:])
        for i in range(k):
            for j in range(k):
                gxt[:, :, i:i + ho, j:j + wo] += gcols[:, i, j]
        gxp = gxt.transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if unbatched:
            gx = gx[0]
        return (np.ascontiguousarray(gx), gk, gb)

    return _emit(out, (x, kernels, bias), backward, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pool with stride 2 over the last two axes.

    Odd trailing rows/columns are dropped. Gradient goes to the first maximal
    element of each window (row-major order).
    """
    if x.ndim < 2:
        raise ShapeError(f"max_pool2d needs at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if h < 2 or w < 2:
        raise ShapeError(f"max_pool2d: input {h}x{w} smaller than the 2x2 window")
    ho, wo = h // 2, w // 2
    xd = x.data
    # window elements in row-major order: (0,0), (0,1), (1,0), (1,1)
    parts = [xd[..., di:2 * ho:2, dj:2 * wo:2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(parts[0], parts[1]), np.maximum(parts[2], parts[3]))

    def backward(g):
        # index of the first maximal element in each window
        first = np.where(parts[0] == out, 0, np.where(parts[1] == out, 1, np.where(parts[2] == out, 2, 3)))
        lead = out.shape[:-2]
        blocks = np.empty(lead + (ho, 2, wo, 2))
        for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            blocks[..., :, di, :, dj] = np.where(first == k, g, 0.0)
        blocks = blocks.reshape(lead + (2 * ho, 2 * wo))
        if (2 * ho, 2 * wo) == (h, w):
            return (blocks,)
        gx = np.zeros(x.shape)
        gx[..., : 2 * ho, : 2 * wo] = blocks
        return (gx,)

    return _emit(out, (x,), backward, "max_pool2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.99,
) -> Tensor:
    """Per-channel batch normalization over axis 1 of an [N, C, ...] input.

    In training mode the running statistics are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batch_norm: input {x.shape} vs gamma {gamma.shape}, beta {beta.shape}")
    c = x.shape[1]
    axes = (0,) + tuple(range(2, x.ndim))
    view = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    gd = gamma.data.reshape(view)
    if training:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2")
        m = xd.size // c
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (m / (m - 1))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu.reshape(view)) * inv_std.reshape(view)

        def backward(g):
            dxhat = g * gd
            s1 = dxhat.sum(axis=axes).reshape(view)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(view)
            gx = inv_std.reshape(view) / m * (m * dxhat - s1 - xhat * s2)
            return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (xd - running_mean.reshape(view)) * inv_std.reshape(view)

        def backward(g):
            gx = g * gd * inv_std.reshape(view)
            return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    out = xhat * gd + beta.data.reshape(view)
    return _emit(out, (x, gamma, beta), backward, "batch_norm")


# ----------------------------------------------------------------------------
# serialization
# ----------------------------------------------------------------------------

def write_tensor(fp: BinaryIO, array: np.ndarray) -> None:
    """Rank and extents as little-endian u64, then little-endian float64 data."""
    array = np.asarray(array, dtype=np.float64)
    fp.write(struct.pack("<Q", array.ndim))
    fp.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fp.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def _read_exact(fp: BinaryIO, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise EOFError(f"truncated tensor data: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fp: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<Q", _read_exact(fp, 8))
    if rank > 16:
        raise ValueError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fp, 8 * rank))
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(fp, 8 * count), dtype="<f8")
    return data.astype(np.float64).reshape(shape)
