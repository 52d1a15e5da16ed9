"""Dense tensors with taped reverse-mode gradients.

Everything downstream (codec, denoiser, trainer) is built from the ops in
this module. Forward ops are pure functions over immutable inputs and are
safe to call concurrently. Gradients are accumulated through a `Tape`:
a single-writer, per-training-step log of executed ops that is replayed
backward exactly once per op.

Precision: tensors are float64 or float32. Gradient checking and the tight
numeric tests assume float64; float32 is intended for faster training runs
(forward/backward agree with float64 to ~1e-4 relative there).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

# ---------------------------------------------------------------------------
# Deterministic RNG
# ---------------------------------------------------------------------------

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer; full-period bijection on uint64."""
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


class Rng:
    """Counter-based deterministic generator.

    Word stream: ``word_i = mix64(key + i * golden)`` with the splitmix64
    finalizer; normals via Box-Muller on 53-bit uniforms. Output therefore
    depends only on (seed, spawn path, draw index) — never on wall clock,
    thread count or platform — which is what makes training steps and
    sampling runs bit-reproducible.
    """

    def __init__(self, seed: int, _key: int | None = None):
        if _key is not None:
            self._key = np.uint64(_key)
        else:
            with np.errstate(over="ignore"):
                self._key = _mix64(np.array([seed & _MASK64], dtype=np.uint64) + _GAMMA)[0]
        self._counter = 0

    def spawn(self, tag: int) -> "Rng":
        """Derive an independent child stream for a numeric tag (step index, sample index, ...)."""
        with np.errstate(over="ignore"):
            tagged = _mix64(np.array([(tag & _MASK64)], dtype=np.uint64) * _GAMMA + np.uint64(1))[0]
            key = _mix64(np.array([self._key ^ tagged], dtype=np.uint64))[0]
        return Rng(0, _key=int(key))

    def _words(self, n: int) -> np.ndarray:
        idx = np.arange(self._counter, self._counter + n, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(self._key + idx * _GAMMA)

    def uniform(self, shape: Sequence[int] | int = (), dtype=np.float64) -> np.ndarray:
        """Uniform on [0, 1)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self._words(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape).astype(dtype, copy=False)

    def normal(self, shape: Sequence[int] | int = (), dtype=np.float64) -> np.ndarray:
        """Standard normals via Box-Muller (u1 drawn on (0, 1] so log is finite)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = ((self._words(m) >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0**-53
        u2 = (self._words(m) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return z.reshape(shape).astype(dtype, copy=False)

    def integers(self, low: int, high: int, size: int | None = None) -> np.ndarray | int:
        """Integers in [low, high). Modulo reduction; bias is negligible for high-low << 2^64."""
        if high <= low:
            raise ContractError(f"empty integer range [{low}, {high})")
        n = 1 if size is None else int(size)
        vals = (self._words(n) % np.uint64(high - low)).astype(np.int64) + low
        return int(vals[0]) if size is None else vals

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self._words(n), kind="stable")


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Row-major dense array plus gradient slot.

    `requires_grad=True` marks a leaf parameter. Intermediate results get
    tracked automatically while a Tape is active. Data is treated as
    immutable once wrapped; all ops allocate fresh outputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tracked")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tracked = False

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Light operator sugar; everything routes through the taped ops below.
    def __add__(self, other):
        return add(self, as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Ordered log of executed ops for one backward pass.

    Single-writer by contract: one tape per training step, never shared
    across threads. Replaying the log in reverse visits each recorded op
    exactly once; consumers always appear after producers, so every
    output gradient is complete before its producer's backward runs.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        global _TAPE
        if _TAPE is not None:
            raise ContractError("a Tape is already active; tapes do not nest")
        _TAPE = self
        return self

    def __exit__(self, *exc):
        global _TAPE
        _TAPE = None
        return False

    def __len__(self) -> int:
        return len(self._entries)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's .grad."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._entries):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not (t.requires_grad or t._tracked):
                    continue
                if t.grad is None:
                    t.grad = g
                else:
                    t.grad = t.grad + g


_TAPE: Tape | None = None


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _TAPE
    if tape is not None and any(t.requires_grad or t._tracked for t in inputs):
        out._tracked = True
        tape._entries.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data / b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    return _record(out, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _record(out, (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    out = Tensor(y)
    return _record(out, (x,), lambda g: (g / (2.0 * y),))


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(x.data * s)
    return _record(out, (x,), lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).copy(),)

    return _record(out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def stop_gradient(x: Tensor) -> Tensor:
    """Constant view of x: gradient does not flow past this point."""
    return Tensor(x.data)


def random_normal(shape: Sequence[int], rng: Rng, dtype=np.float64) -> Tensor:
    """Seeded standard-normal leaf tensor (not differentiable)."""
    return Tensor(rng.normal(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    return _record(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def concat_channels(parts: Iterable[Tensor]) -> Tensor:
    """Concatenate along axis 1 (channels) of NCHW (or any >=2-D) tensors."""
    parts = list(parts)
    base = parts[0].shape
    for p in parts[1:]:
        if p.shape[:1] + p.shape[2:] != base[:1] + base[2:]:
            raise ShapeError(f"concat_channels mismatch: {base} vs {p.shape}")
    sizes = [p.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))

    def backward(g):
        grads, off = [], 0
        for n in sizes:
            grads.append(np.ascontiguousarray(g[:, off : off + n]))
            off += n
        return tuple(grads)

    return _record(out, tuple(parts), backward)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Inverse of concat_channels; returns len(sizes) tensors."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {tuple(sizes)} do not cover {x.shape[1]} channels")
    outs, off = [], 0
    for n in sizes:
        lo = off
        piece = Tensor(np.ascontiguousarray(x.data[:, lo : lo + n]))

        def backward(g, lo=lo, n=n):
            full = np.zeros_like(x.data)
            full[:, lo : lo + n] = g
            return (full,)

        outs.append(_record(piece, (x,), backward))
        off += n
    return outs


# ---------------------------------------------------------------------------
# Linear algebra and attention primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the trailing two axes; leading axes follow numpy broadcasting."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _record(out, (a, b), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_lastdim: non-finite input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# Normalizations
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis (axis 1) per remaining position.

    x: (B, C, ...); gamma, beta: (C,).
    """
    if x.shape[1] != gamma.shape[0] or x.shape[1] != beta.shape[0]:
        raise ShapeError(f"layer_norm params {gamma.shape} do not match channels of {x.shape}")
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape))

    def backward(g):
        reduce_axes = tuple(i for i in range(x.ndim) if i != 1)
        dxhat = g * gamma.data.reshape(bshape)
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return (dx, dgamma, dbeta)

    return _record(out, (x, gamma, beta), backward)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """GroupNorm for NCHW tensors: stats over (channels-in-group, H, W) per sample."""
    B, C = x.shape[0], x.shape[1]
    if C % groups:
        raise ShapeError(f"{C} channels not divisible by {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm params {gamma.shape}/{beta.shape} do not match channels {C}")
    spatial = x.shape[2:]
    gshape = (B, groups, C // groups) + spatial
    xg = x.data.reshape(gshape)
    axes = tuple(range(2, xg.ndim))
    mu = xg.mean(axis=axes, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = (1, C) + (1,) * len(spatial)
    out = Tensor(gamma.data.reshape(bshape) * xhat.reshape(x.shape) + beta.data.reshape(bshape))

    def backward(g):
        xhat_flat = xhat.reshape(x.shape)
        dxhat = (g * gamma.data.reshape(bshape)).reshape(gshape)
        m1 = dxhat.mean(axis=axes, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
        dx = (inv * (dxhat - m1 - xhat * m2)).reshape(x.shape)
        reduce_axes = (0,) + tuple(range(2, x.ndim))
        dgamma = (g * xhat_flat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return (dx, dgamma, dbeta)

    return _record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# Convolution and resampling
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D cross-correlation (no kernel flip) over NCHW input.

    x: (B, C, H, W); w: (O, C, kh, kw); output (B, O, H', W') with
    H' = (H + 2*pad - kh)//stride + 1 and analogously W'. Default pad
    keeps odd kernels size-preserving at stride 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if pad is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"even kernel {(kh, kw)} requires an explicit pad")
        pad = kh // 2
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {(kh, kw)}, pad {pad}, stride {stride}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(O, C * kh * kw)
    y = cols @ wmat.T
    if bias is not None:
        y += bias.data
    out = Tensor(y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(B * Ho * Wo, O)
        dw = (gm.T @ cols).reshape(w.shape)
        dcols = (gm @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, :, :, i, j]
        dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
        db = gm.sum(axis=0) if bias is not None else None
        return (dx, dw, db)

    inputs = (x, w, bias) if bias is not None else (x, w)
    if bias is None:
        return _record(out, inputs, lambda g: backward(g)[:2])
    return _record(out, inputs, backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of NCHW input."""
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def backward(g):
        B, C, H2, W2 = g.shape
        return (g.reshape(B, C, H2 // 2, 2, W2 // 2, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), backward)


def avg_pool2x2(x: Tensor) -> Tensor:
    """2x2 average pooling; requires even spatial extents."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2x2 needs even H, W; got {x.shape}")
    out = Tensor(x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5)))

    def backward(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def gradient_check(
    op_graph: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Compare taped gradients of a scalar graph against central differences.

    `op_graph` rebuilds the scalar output from the (closed-over) params on
    every call. Returns max over checked coordinates of
    |analytic - central| / max(1, |central|). With `max_coords_per_param`
    set, a seeded subset of coordinates per parameter is checked.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractError(f"eps={eps} outside [1e-6, 1e-3]")
    with Tape() as tape:
        loss = op_graph()
        if loss.size != 1:
            raise ContractError(f"gradient_check needs a scalar output, got shape {loss.shape}")
        tape.backward(loss)
    analytic = [None if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    max_rel = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            r = rng if rng is not None else Rng(0)
            coords = np.unique(r.integers(0, n, size=max_coords_per_param))
        else:
            coords = range(n)
        aflat = np.zeros(n) if a is None else a.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = op_graph().item()
            flat[i] = orig - eps
            f_minus = op_graph().item()
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(aflat[i] - central) / max(1.0, abs(central))
            if rel > max_rel:
                max_rel = rel
    return max_rel


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")
