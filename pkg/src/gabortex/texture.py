"""Histogram statistics of intensity maps and their correlation across filters.

Per map: ``M`` evenly spaced levels between the map's extremes, a
triangular ("spire") soft assignment of every pixel to its nearest level,
normalised level counts, a position summary of the pixels at each level,
and attention across levels. Across filters: attention over the per-filter
statistics plus an embedding of each filter's parameters.

The batched forms work on ``(..., S, S)`` stacks; the single-map helpers
(:func:`compute_levels`, :func:`quantize`, :func:`count`, ...) expose the
individual stages on plain arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, Module, MultiHeadAttention

DEGENERATE_RANGE = 1e-9


class DegenerateMapError(ValueError):
    """The map is (numerically) constant, so no levels can be placed."""


@dataclass
class QuantizationLevels:
    levels: np.ndarray
    spacing: float
    m_count: int


def compute_levels(intensity, m_count: int = 8) -> QuantizationLevels:
    if m_count < 2:
        raise ValueError(f"need at least 2 levels, got {m_count}")
    arr = np.asarray(intensity.data if isinstance(intensity, Tensor) else intensity, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < DEGENERATE_RANGE:
        raise DegenerateMapError(f"map range {hi - lo:.3e} below {DEGENERATE_RANGE}")
    spacing = (hi - lo) / m_count
    return QuantizationLevels(lo + spacing * np.arange(1, m_count + 1), spacing, m_count)


def quantize(intensity, levels: QuantizationLevels, centered: bool = False) -> np.ndarray:
    """Soft assignment volume ``(H, W, M)`` for one map."""
    arr = np.asarray(intensity.data if isinstance(intensity, Tensor) else intensity, dtype=np.float64)
    H, W = arr.shape
    half = levels.spacing / 2.0
    lv = levels.levels - half if centered else levels.levels
    V = ad.spire(arr.reshape(1, -1), lv.reshape(1, -1), np.array([[half]]), normalized=centered)
    return V.data.reshape(H, W, -1)


def count(V) -> np.ndarray:
    V = np.asarray(V, dtype=np.float64)
    total = V.sum()
    if total <= 0:
        raise DegenerateMapError("quantized volume has zero mass")
    return V.reshape(-1, V.shape[-1]).sum(axis=0) / total


def position_table(size: int, channels: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding, ``(size, size, channels)``.

    Half the channels encode the row index and half the column index, each
    as sin/cos pairs whose wavelengths run geometrically from 2 to ``2*size``.
    """
    if channels % 4:
        raise ValueError(f"channels must be divisible by 4, got {channels}")
    n_freq = channels // 4
    if n_freq == 1:
        wavelengths = np.array([2.0])
    else:
        wavelengths = 2.0 * float(size) ** (np.arange(n_freq) / (n_freq - 1))
    pos = np.arange(size, dtype=np.float64)[:, None] * (2.0 * np.pi / wavelengths)[None, :]
    axis_code = np.concatenate([np.sin(pos), np.cos(pos)], axis=1)  # (size, channels/2)
    half = channels // 2
    table = np.zeros((size, size, channels))
    table[:, :, :half] = axis_code[:, None, :]
    table[:, :, half:] = axis_code[None, :, :]
    return table


def position_feature(V, pe_table) -> np.ndarray:
    """``(M, C)`` sum of position codes weighted by each pixel's level membership."""
    V = np.asarray(V, dtype=np.float64)
    pe = np.asarray(pe_table, dtype=np.float64)
    M = V.shape[-1]
    return V.reshape(-1, M).T @ pe.reshape(-1, pe.shape[-1])


def level_features(C, levels, P, phi: Linear, count_scale: float = 1.0, level_scale: float = 1.0) -> Tensor:
    """``phi([count_scale*C^m, level_scale*L^m]) + P^m`` for every level, ``(M, C_feat)``.

    ``count_scale = M`` puts a uniform histogram at 1 per level instead of 1/M.
    """
    C = C if isinstance(C, Tensor) else Tensor(C)
    L = levels if isinstance(levels, Tensor) else Tensor(levels)
    P = P if isinstance(P, Tensor) else Tensor(P)
    M = C.shape[-1]
    Cs = ad.scale(C, count_scale) if count_scale != 1.0 else C
    Ls = ad.scale(L, level_scale) if level_scale != 1.0 else L
    pair = ad.concat([ad.reshape(Cs, C.shape + (1,)), ad.reshape(Ls, L.shape + (1,))], axis=-1)
    feat = phi(pair)
    if P.shape != feat.shape:
        raise ValueError(f"position feature shape {P.shape} != {feat.shape} for {M} levels")
    return ad.add(feat, P)


@dataclass
class HistogramStats:
    """Differentiable per-map stages for a batch of flattened maps ``(..., P)``."""
    levels: Tensor        # (..., M)
    volume: Tensor        # (..., P, M)
    counts: Tensor        # (..., M)
    position: Tensor      # (..., M, C)
    degenerate: np.ndarray
    piece: dict


def histogram_stats(maps: Tensor, m_count: int, pe_flat: np.ndarray, centered: bool = False,
                    detach_extremes: bool = False, position_norm: str = "mass",
                    piece: dict | None = None) -> HistogramStats:
    """Levels, soft volume, counts and position summaries for ``maps`` of shape ``(..., P)``.

    ``position_norm="mass"`` divides the position sums by the total assigned
    mass (the same denominator as the counts); ``"sum"`` leaves them raw.
    ``piece`` optionally pins the extreme pixels and the spire sign pattern
    (see :attr:`LearnableHistogram.freeze`).
    """
    lead = maps.shape[:-1]
    if piece is None:
        lo_idx = np.argmin(maps.data, axis=-1)[..., None]
        hi_idx = np.argmax(maps.data, axis=-1)[..., None]
    else:
        lo_idx, hi_idx = piece["lo_idx"], piece["hi_idx"]
    lo = ad.take_along_axis(maps, lo_idx, axis=-1)
    hi = ad.take_along_axis(maps, hi_idx, axis=-1)
    if detach_extremes:
        lo, hi = ad.detach(lo), ad.detach(hi)
    span = ad.sub(hi, lo)
    degenerate = span.data[..., 0] < DEGENERATE_RANGE
    steps = np.broadcast_to(np.arange(1, m_count + 1) / m_count, lead + (m_count,))
    levels = ad.add(ad.broadcast_to(lo, lead + (m_count,)),
                    ad.mul(ad.broadcast_to(span, lead + (m_count,)), steps))
    half = ad.scale(span, 0.5 / m_count)
    assign_levels = ad.sub(levels, ad.broadcast_to(half, levels.shape)) if centered else levels
    V, windows = ad.spire_uniform(maps, assign_levels, half, normalized=centered,
                                  piece=None if piece is None else piece["windows"])
    if degenerate.any():
        keep = np.broadcast_to((~degenerate)[..., None, None], V.shape).astype(np.float64)
        V = ad.mul(V, keep)
    mass = ad.sum(V, axis=-2)                                  # (..., M)
    total = ad.add(ad.sum(mass, axis=-1, keepdims=True), degenerate[..., None].astype(np.float64))
    total_b = ad.broadcast_to(total, mass.shape)
    counts = ad.div(mass, total_b)
    if degenerate.any():
        counts = ad.add(counts, np.broadcast_to(degenerate[..., None] / m_count, mass.shape))
    nd = V.ndim
    Vt = ad.transpose(V, tuple(range(nd - 2)) + (nd - 1, nd - 2))  # (..., M, P)
    position = ad.matmul(Vt, Tensor(pe_flat))
    if position_norm == "mass":
        position = ad.div(position, ad.broadcast_to(ad.reshape(total, lead + (1, 1)), position.shape))
    elif position_norm != "sum":
        raise ValueError(f"unknown position_norm {position_norm!r}")
    piece = {"lo_idx": lo_idx, "hi_idx": hi_idx, "windows": windows}
    return HistogramStats(levels, V, counts, position, degenerate, piece)


class LearnableHistogram(Module):
    """Statistical feature ``(..., C)`` from intensity maps ``(..., S, S)``.

    Setting ``freeze = True`` makes the next call record which pixels hold
    the extremes and which side of which level every pixel sits on; later
    calls reuse that record until ``freeze`` is reset. This pins a
    finite-difference probe to the smooth piece the analytic gradient sees.
    """

    def __init__(self, size: int, channels: int, m_count: int, heads: int,
                 rng: np.random.Generator, centered: bool = False, detach_extremes: bool = False,
                 position_norm: str = "mass", count_scale: float | None = None,
                 level_scale: float = 1.0):
        if m_count < 2:
            raise ValueError(f"need at least 2 levels, got {m_count}")
        self.size = size
        self.channels = channels
        self.m_count = m_count
        self.centered = centered
        self.detach_extremes = detach_extremes
        self.position_norm = position_norm
        self.count_scale = float(m_count if count_scale is None else count_scale)
        self.level_scale = float(level_scale)
        self.pe_flat = position_table(size, channels).reshape(size * size, channels)
        self.phi = Linear(2, channels, rng)
        self.attention = MultiHeadAttention(channels, heads, rng)
        self.last: HistogramStats | None = None
        self._freeze = False
        self._piece: dict | None = None

    @property
    def freeze(self) -> bool:
        return self._freeze

    @freeze.setter
    def freeze(self, on: bool) -> None:
        self._freeze = bool(on)
        self._piece = None

    def __call__(self, maps: Tensor) -> Tensor:
        *lead, H, W = maps.shape
        if (H, W) != (self.size, self.size):
            raise ValueError(f"maps are {H}x{W}, extractor expects {self.size}x{self.size}")
        flat = ad.reshape(maps, tuple(lead) + (H * W,))
        st = histogram_stats(flat, self.m_count, self.pe_flat, self.centered,
                             self.detach_extremes, self.position_norm,
                             piece=self._piece if self._freeze else None)
        if self._freeze and self._piece is None:
            self._piece = st.piece
        self.last = st
        tokens = level_features(st.counts, st.levels, st.position, self.phi, count_scale=self.count_scale,
                                level_scale=self.level_scale)
        mixed = self.attention(tokens)
        return ad.mean(mixed, axis=-2)


class FilterCorrelation(Module):
    """Texture feature ``(R, C)`` from per-filter statistics ``(R, N, C)`` and filter parameters."""

    PARAMS = ("sigma_x", "sigma_y", "theta", "w")

    def __init__(self, channels: int, heads: int, rng: np.random.Generator,
                 param_scale: dict[str, float] | None = None):
        self.phi = Linear(4, channels, rng)
        self.attention = MultiHeadAttention(channels, heads, rng)
        # divides each parameter before the embedding so all four enter at unit scale
        self.param_scale = {k: 1.0 for k in self.PARAMS} if param_scale is None else dict(param_scale)

    def __call__(self, stats: Tensor, params: dict[str, Tensor]) -> Tensor:
        cols = [ad.scale(params[k], 1.0 / self.param_scale[k]) for k in self.PARAMS]
        n = cols[0].shape[0]
        if stats.shape[-2] != n:
            raise ValueError(f"{stats.shape[-2]} statistics for {n} filters")
        table = ad.stack(cols, axis=-1)                        # (N, 4)
        embed = ad.broadcast_to(self.phi(table), stats.shape)
        mixed = self.attention(ad.add(stats, embed))
        return ad.mean(mixed, axis=-2)
