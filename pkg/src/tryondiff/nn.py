"""Small layer library on top of the taped tensor ops.

Modules register parameters and submodules automatically on attribute
assignment (torch-style) and expose them as a flat name -> Tensor map for
the optimizer and the checkpoint writer. Initialization consumes an
explicit Rng so parameter values depend only on the seed and construction
order.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, ModuleList):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (prefix + name, p)
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy arrays into parameters by name; missing or mismatched names raise."""
        own = dict(self.named_parameters(prefix))
        for name, p in own.items():
            if name not in state:
                raise KeyError(f"missing parameter {name!r} in state")
            arr = state[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.shape}")
            p.data = np.ascontiguousarray(arr.astype(p.dtype, copy=False))


class ModuleList(Module):
    def __init__(self, mods=()):
        super().__init__()
        self._list = []
        for m in mods:
            self.append(m)

    def append(self, mod: Module):
        self._children[str(len(self._list))] = mod
        self._list.append(mod)

    def __iter__(self):
        return iter(self._list)

    def __getitem__(self, i):
        return self._list[i]

    def __len__(self):
        return len(self._list)


def _param(arr: np.ndarray, dtype) -> Tensor:
    return Tensor(arr.astype(dtype), requires_grad=True)


class Conv2d(Module):
    """3x3/1x1 convolution with He-normal weights; `zero_init` for output layers."""

    def __init__(self, cin: int, cout: int, k: int, rng: Rng, stride: int = 1,
                 pad: int | None = None, bias: bool = True, zero_init: bool = False,
                 dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.pad = pad
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.normal((cout, cin, k, k)) * math.sqrt(2.0 / (cin * k * k))
        self.weight = _param(w, dtype)
        self.bias = _param(np.zeros(cout), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, nin: int, nout: int, rng: Rng, zero_init: bool = False, dtype=np.float64):
        super().__init__()
        w = np.zeros((nin, nout)) if zero_init else rng.normal((nin, nout)) * math.sqrt(2.0 / nin)
        self.weight = _param(w, dtype)
        self.bias = _param(np.zeros(nout), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, dtype=np.float64):
        super().__init__()
        self.groups = math.gcd(groups, channels)
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.group_norm(x, self.gamma, self.beta, self.groups)


class ChannelLayerNorm(Module):
    """LayerNorm over the channel axis of NCHW feature maps."""

    def __init__(self, channels: int, dtype=np.float64):
        super().__init__()
        self.gamma = _param(np.ones(channels), dtype)
        self.beta = _param(np.zeros(channels), dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class ResBlock(Module):
    """GroupNorm -> SiLU -> conv3x3 twice with residual; optional timestep injection.

    The second conv is zero-initialized so a fresh block starts as identity,
    which keeps early training stable.
    """

    def __init__(self, cin: int, cout: int, rng: Rng, time_dim: int | None = None, dtype=np.float64):
        super().__init__()
        self.norm1 = GroupNorm(cin, dtype=dtype)
        self.conv1 = Conv2d(cin, cout, 3, rng, dtype=dtype)
        self.norm2 = GroupNorm(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, zero_init=True, dtype=dtype)
        self.time_proj = Linear(time_dim, cout, rng, dtype=dtype) if time_dim else None
        self.skip = Conv2d(cin, cout, 1, rng, dtype=dtype) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor | None = None) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        if self.time_proj is not None and temb is not None:
            t = self.time_proj(T.silu(temb))  # (B, cout)
            h = T.add(h, T.reshape(t, (t.shape[0], t.shape[1], 1, 1)))
        h = self.conv2(T.silu(self.norm2(h)))
        s = self.skip(x) if self.skip is not None else x
        return T.add(h, s)


class Downsample(Module):
    """Stride-2 3x3 convolution."""

    def __init__(self, channels: int, rng: Rng, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, rng, stride=2, pad=1, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    """Nearest 2x upsample followed by a 3x3 convolution."""

    def __init__(self, cin: int, cout: int, rng: Rng, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest2x(x))
