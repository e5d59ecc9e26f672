"""Region proposals, their scores, and the hard keep/skip decision per region.

Scores come from a fused multi-level feature map pooled over each proposal
box. In training a standard-normal perturbation is added and the decision is
the sign of the perturbed score; the forward pass uses the binary decision
while gradients flow through a saturating sigmoid of the same perturbed
score. At inference the decision is the sign of the raw score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Module

# ln(11): 1.2*sigmoid(x) - 0.1 reaches 1 here (and 0 at -ln(11))
SATURATION = math.log(11.0)


@dataclass(frozen=True)
class RegionProposal:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


def make_proposals(scales: Sequence[float] = (0.5, 0.25)) -> list[RegionProposal]:
    """Sliding square windows per scale, stride half a window, scale-major then row-major."""
    out = []
    for s in scales:
        step = s / 2.0
        n = int(round((1.0 - s) / step)) + 1
        for r in range(n):
            for c in range(n):
                x0, y0 = c * step, r * step
                out.append(RegionProposal(x0, y0, min(x0 + s, 1.0), min(y0 + s, 1.0)))
    return out


def pooling_matrix(proposals: Sequence[RegionProposal], height: int, width: int) -> np.ndarray:
    """``(K, height*width)`` averaging weights over the cells whose centres fall in each box.

    A box that contains no cell centre falls back to the cell nearest its centre.
    """
    cy = (np.arange(height) + 0.5) / height
    cx = (np.arange(width) + 0.5) / width
    P = np.zeros((len(proposals), height * width))
    for k, r in enumerate(proposals):
        rows = (cy >= r.y0) & (cy <= r.y1)
        cols = (cx >= r.x0) & (cx <= r.x1)
        mask = np.outer(rows, cols).reshape(-1)
        if not mask.any():
            i = int(np.argmin(np.abs(cy - (r.y0 + r.y1) / 2)))
            j = int(np.argmin(np.abs(cx - (r.x0 + r.x1) / 2)))
            mask = np.zeros(height * width, dtype=bool)
            mask[i * width + j] = True
        P[k] = mask / mask.sum()
    return P


def roi_pool(F, proposals: Sequence[RegionProposal] | RegionProposal) -> Tensor:
    """Mean feature vector per box: ``(C, H, W)`` -> ``(K, C)``; ``(B, C, H, W)`` -> ``(B, K, C)``.

    A single proposal on an unbatched map returns ``(C,)``.
    """
    F = F if isinstance(F, Tensor) else Tensor(F)
    single = isinstance(proposals, RegionProposal)
    props = [proposals] if single else list(proposals)
    unbatched = F.ndim == 3
    if unbatched:
        F = ad.reshape(F, (1,) + F.shape)
    B, C, H, W = F.shape
    pool = pooling_matrix(props, H, W)
    pooled = ad.matmul(ad.reshape(F, (B, C, H * W)), Tensor(pool.T))   # (B, C, K)
    pooled = ad.transpose(pooled, (0, 2, 1))
    if unbatched:
        pooled = ad.reshape(pooled, pooled.shape[1:])
        if single:
            pooled = ad.reshape(pooled, (C,))
    return pooled


class FPN(Module):
    """Per-level 1x1 projections to a common width, upsampled to the finest level and summed."""

    def __init__(self, in_channels: Sequence[int], out_channels: int, rng: np.random.Generator,
                 bias: bool = True):
        self.out_channels = out_channels
        self.proj = [Tensor(rng.normal(0.0, 1.0 / math.sqrt(c), size=(out_channels, c, 1, 1)),
                            requires_grad=True) for c in in_channels]
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True) if bias else None

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}proj.{i}": w for i, w in enumerate(self.proj)}
        if self.bias is not None:
            out[f"{prefix}bias"] = self.bias
        return out

    def __call__(self, levels: Sequence[Tensor]) -> Tensor:
        return fpn_fuse(levels, self.proj, self.bias)


def fpn_fuse(levels: Sequence[Tensor], projections: Sequence[Tensor], bias: Tensor | None = None) -> Tensor:
    """Fuse ``(B, C_i, H_i, W_i)`` (or unbatched) features into one map at the finest size."""
    if len(levels) < 2:
        raise ValueError("fpn_fuse needs at least two levels")
    if len(projections) != len(levels):
        raise ValueError(f"{len(projections)} projections for {len(levels)} levels")
    sizes = [t.shape[-2:] for t in levels]
    top = max(sizes)
    fused = None
    for t, w in zip(levels, projections):
        h, wd = t.shape[-2:]
        if top[0] % h or top[1] % wd or top[0] // h != top[1] // wd:
            raise ValueError(f"level size {h}x{wd} does not divide {top[0]}x{top[1]}")
        f = top[0] // h
        if f & (f - 1):
            raise ValueError(f"level size {h}x{wd} is not a power-of-two step from {top}")
        y = ad.upsample_nearest(ad.conv2d(t, w), f)
        fused = y if fused is None else ad.add(fused, y)
    if bias is not None:
        C = fused.shape[-3]
        bshape = (C, 1, 1) if fused.ndim == 3 else (1, C, 1, 1)
        fused = ad.add(fused, ad.broadcast_to(ad.reshape(bias, bshape), fused.shape))
    return fused


def saturating_sigmoid(x) -> Tensor:
    """``max(0, min(1, 1.2*sigmoid(x) - 0.1))``."""
    return ad.clamp(ad.sub(ad.scale(ad.sigmoid(x), 1.2), 0.1), 0.0, 1.0)


@dataclass
class GateDecision:
    """Per-proposal gate state; arrays share the scores' shape."""
    s: np.ndarray
    s_hat: np.ndarray
    c: np.ndarray
    d: np.ndarray
    gate: Tensor          # forward value d, gradient routed through c

    @property
    def selected(self) -> np.ndarray:
        return self.d > 0.5


def gate_train(scores: Tensor, rng: np.random.Generator | None = None,
               noise: np.ndarray | None = None, anchor: tuple[np.ndarray, np.ndarray] | None = None
               ) -> GateDecision:
    """Noisy hard gate with straight-through gradients.

    Noise is drawn from ``rng`` unless given explicitly. ``anchor=(d0, c0)``
    replaces the detached surrogate with the fixed value ``c0`` and the hard
    decision with ``d0``, so the gate value becomes ``d0 + c - c0``: the
    function whose true derivative is the straight-through gradient. That is
    only for finite-difference checks.
    """
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    if noise is None:
        if rng is None:
            raise ValueError("gate_train needs an rng or explicit noise")
        noise = rng.standard_normal(scores.shape)
    s_hat = ad.add(scores, np.asarray(noise, dtype=np.float64).reshape(scores.shape))
    c = saturating_sigmoid(s_hat)
    d = (s_hat.data > 0).astype(np.float64)
    if anchor is None:
        gate = ad.straight_through(d, c)
    else:
        d0, c0 = anchor
        d = np.asarray(d0, dtype=np.float64)
        gate = ad.add(ad.sub(c, np.asarray(c0, dtype=np.float64)), d)
    return GateDecision(scores.data.copy(), s_hat.data.copy(), c.data.copy(), d, gate)


def gate_infer(scores) -> np.ndarray:
    """Deterministic decisions ``1(s > 0)``."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    return (s > 0).astype(np.float64)


def format_selection(image_id: str, proposals: Sequence[RegionProposal], decisions: np.ndarray) -> list[str]:
    """Lines ``image_id k x0 y0 x1 y1`` for every selected proposal."""
    lines = []
    for k in np.flatnonzero(np.asarray(decisions) > 0.5):
        r = proposals[k]
        lines.append(f"{image_id} {k} {r.x0:.6f} {r.y0:.6f} {r.x1:.6f} {r.y1:.6f}")
    return lines
