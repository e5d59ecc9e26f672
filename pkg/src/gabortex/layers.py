"""Parameter containers and the small learnable layers shared by the model."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Collects leaf tensors and sub-modules assigned as attributes, in assignment order."""

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.parameters(f"{key}.{i}."))
            elif hasattr(val, "parameters") and callable(val.parameters) and not isinstance(val, type):
                for sub, t in val.parameters().items():
                    out[f"{key}.{sub}"] = t
        return out


def _leaf(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    """Affine map on the last axis: ``x @ weight + bias``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        std = 1.0 / math.sqrt(n_in) if std is None else std
        self.weight = _leaf(rng.normal(0.0, std, size=(n_in, n_out)))
        self.bias = _leaf(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        flat = ad.reshape(x, (int(np.prod(lead)) if lead else 1, x.shape[-1]))
        y = ad.matmul(flat, self.weight)
        if self.bias is not None:
            y = ad.add(y, ad.broadcast_to(self.bias, y.shape))
        return ad.reshape(y, lead + (self.weight.shape[1],))


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over the token axis (second to last).

    Bias-free query/key/value/output projections, no masking, no residual or
    normalisation. The last attention weights are kept on ``last_attention``.
    """

    def __init__(self, channels: int, heads: int, rng: np.random.Generator):
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.channels = channels
        self.heads = heads
        std = 1.0 / math.sqrt(channels)
        self.w_q = _leaf(rng.normal(0.0, std, size=(channels, channels)))
        self.w_k = _leaf(rng.normal(0.0, std, size=(channels, channels)))
        self.w_v = _leaf(rng.normal(0.0, std, size=(channels, channels)))
        self.w_out = _leaf(rng.normal(0.0, std, size=(channels, channels)))
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, K, C = x.shape
        d = C // self.heads
        x = ad.reshape(x, tuple(lead) + (K, self.heads, d))
        n = len(lead)
        return ad.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.ndim < 2 or tokens.shape[-1] != self.channels:
            raise ValueError(f"tokens of shape {tokens.shape} do not have {self.channels} channels")
        *lead, K, C = tokens.shape
        q = self._split(ad.matmul(tokens, self.w_q))
        k = self._split(ad.matmul(tokens, self.w_k))
        v = self._split(ad.matmul(tokens, self.w_v))
        d = C // self.heads
        n = len(lead)
        kt = ad.transpose(k, tuple(range(n + 1)) + (n + 2, n + 1))
        att = ad.softmax(ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(d)), axis=-1)
        self.last_attention = att.data
        mixed = ad.matmul(att, v)
        mixed = ad.transpose(mixed, tuple(range(n)) + (n + 1, n, n + 2))
        mixed = ad.reshape(mixed, tuple(lead) + (K, C))
        return ad.matmul(mixed, self.w_out)
