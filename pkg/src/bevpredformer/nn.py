"""Parameter containers and layers built from the tensor primitives."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Parameter(Tensor):
    """A leaf tensor owned by a :class:`Module`."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=requires_grad)


class Module:
    """Minimal module tree: attributes that are Parameters or Modules are discovered
    in assignment order, lists of modules are indexed."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for name, arr in state.items():
            if name not in own:
                continue
            arr = np.asarray(arr, dtype=np.float32)
            if arr.shape != own[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {own[name].shape}")
            own[name].data = arr.copy()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Linear(Module):
    """Affine map over the last axis of an arbitrary-rank input."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: Optional[float] = None):
        std = 1.0 / np.sqrt(d_in) if std is None else std
        self.weight = Parameter(_normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = T.matmul(x.reshape(-1, x.shape[-1]), self.weight)
        if self.bias is not None:
            y = y + T.expand(self.bias.reshape(1, -1), y.shape)
        return y.reshape(lead + (y.shape[-1],))


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: Optional[int] = None, bias: bool = True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = Parameter(_normal(rng, (c_out, c_in, k, k), std))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 2,
                 padding: int = 0):
        self.stride, self.padding = stride, padding
        std = np.sqrt(2.0 / (c_in * k * k / (stride * stride)))
        self.weight = Parameter(_normal(rng, (c_in, c_out, k, k), std))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class ChannelNorm(LayerNorm):
    """Layer norm across the channel axis of an NCHW map (per pixel)."""

    def forward(self, x: Tensor) -> Tensor:
        y = T.layer_norm(x.permute(0, 2, 3, 1), self.weight, self.bias, self.eps)
        return y.permute(0, 3, 1, 2)


class ConvNormAct(Module):
    """conv -> channel norm -> gelu."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1):
        self.conv = Conv2d(c_in, c_out, k, rng, stride=stride)
        self.norm = ChannelNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.gelu(self.norm(self.conv(x)))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    y = T.expand(x.reshape(n, c, h, 1, w, 1), (n, c, h, factor, w, factor))
    return y.reshape(n, c, h * factor, w * factor)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, L, D] -> [B*heads, L, D/heads]."""
    b, l, d = x.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    return x.reshape(b, l, heads, d // heads).permute(0, 2, 1, 3).reshape(b * heads, l, d // heads)


def merge_heads(x: Tensor, heads: int) -> Tensor:
    bh, l, dh = x.shape
    b = bh // heads
    return x.reshape(b, heads, l, dh).permute(0, 2, 1, 3).reshape(b, l, heads * dh)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, bias: Optional[np.ndarray] = None):
    """Batched attention on [B, Lq, d] / [B, Lk, d]; returns (output, probabilities)."""
    d = q.shape[-1]
    scores = T.matmul(T.scalar_mul(q, 1.0 / np.sqrt(d)), k.permute(0, 2, 1))
    if bias is not None:
        scores = scores + Tensor(np.broadcast_to(bias, scores.shape))
    probs = T.softmax(scores)
    return T.matmul(probs, v), probs


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention on [B, L, D] token batches."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.o = Linear(d, d, rng)
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, x: Tensor, context: Optional[Tensor] = None) -> Tensor:
        context = x if context is None else context
        h = self.heads
        q = split_heads(self.q(x), h)
        k = split_heads(self.k(context), h)
        v = split_heads(self.v(context), h)
        out, probs = scaled_dot_attention(q, k, v)
        self.last_attention = probs.data.reshape(x.shape[0], h, x.shape[1], context.shape[1])
        return self.o(merge_heads(out, h))
