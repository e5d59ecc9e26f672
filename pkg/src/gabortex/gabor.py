"""Learnable Gabor filters with bounded parameters.

Every filter is described by ``(sigma_x, sigma_y, theta, w)``. Each value is
obtained from an unbounded raw parameter through a scaled sigmoid so it stays
inside the range where the filter's spatial and spectral support fits a
``S x S`` region sampled at one pixel. The frequency ``w`` of the first half
of a bank is confined to the lower half of its range and the second half to
the upper half, so half the bank always looks at high frequencies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# Gaussian support multiplier: +-2.5 sigma of the envelope must fit the
# region in space and the Nyquist band in frequency.
ALPHA = 2.5
INTENSITY_EPS = 1e-12


class Band(str, Enum):
    LOW = "low"
    HIGH = "high"


def gaussian_energy(alpha: float = ALPHA) -> float:
    """Fraction of a 1-D Gaussian's mass within +-alpha standard deviations."""
    return math.erf(alpha / math.sqrt(2.0))


@dataclass(frozen=True)
class ValidRanges:
    region_size: int
    theta: tuple[float, float]
    sigma_y: tuple[float, float]
    sigma_x_upper: float
    w_full: tuple[float, float]
    w_low: tuple[float, float]
    w_high: tuple[float, float]

    def sigma_x(self, w: float) -> tuple[float, float]:
        """sigma_x range for a given frequency (its lower bound grows with ``w``)."""
        return sigma_x_lower(w), self.sigma_x_upper

    def w_band(self, band: Band) -> tuple[float, float]:
        return self.w_low if Band(band) is Band.LOW else self.w_high


def sigma_x_lower(w):
    return 5.0 / (2.0 * math.pi * (1.0 - 2.0 * w))


def valid_ranges(region_size: int) -> ValidRanges:
    """Parameter ranges for filters applied to ``region_size``-pixel square regions."""
    S = int(region_size)
    if S < 16:
        raise ValueError(f"region size {S} < 16 gives degenerate parameter ranges")
    w_max = (2.0 * math.pi * S - 25.0) / (4.0 * math.pi * S)
    w_mid = (2.0 * math.pi * S - 25.0) / (8.0 * math.pi * S)
    sy = (5.0 / (2.0 * math.pi), S / 5.0)
    if not sy[0] < sy[1]:
        raise ValueError(f"sigma_y range inverted for region size {S}")
    return ValidRanges(region_size=S, theta=(0.0, math.pi), sigma_y=sy, sigma_x_upper=S / 5.0,
                       w_full=(0.0, w_max), w_low=(0.0, w_mid), w_high=(w_mid, w_max))


def default_kernel_size(region_size: int) -> int:
    k = region_size // 2 + 1
    if k % 2 == 0:
        k += 1
    return min(k, 33)


def constrain(raw, lower, upper) -> Tensor:
    """Map an unbounded ``raw`` into ``(lower, upper)`` via ``lower + (upper-lower)*sigmoid(raw)``.

    Bounds may be floats, arrays, or tensors (a tensor bound carries gradient).
    """
    lo_val = lower.data if isinstance(lower, Tensor) else np.asarray(lower, dtype=np.float64)
    up_val = upper.data if isinstance(upper, Tensor) else np.asarray(upper, dtype=np.float64)
    if np.any(lo_val >= up_val):
        raise ValueError("constrain: lower bound must be below upper bound")
    s = ad.sigmoid(raw)
    lo = _like(lower, s.shape)
    up = _like(upper, s.shape)
    out = ad.add(lo, ad.mul(ad.sub(up, lo), s))
    # sigmoid rounds to exactly 0 or 1 once |raw| > ~37; keep the value an ulp inside
    out.data = np.clip(out.data, np.nextafter(lo.data, up.data), np.nextafter(up.data, lo.data))
    return out


def _like(b, shape) -> Tensor:
    if isinstance(b, Tensor):
        return b if b.shape == shape else ad.broadcast_to(b, shape)
    return Tensor(np.broadcast_to(np.asarray(b, dtype=np.float64), shape))


@dataclass
class ConstrainedParam:
    raw: float
    lower: float
    upper: float

    @property
    def value(self) -> float:
        return constrain(Tensor(self.raw), self.lower, self.upper).item()


@dataclass
class GaborFilterSpec:
    sigma_x: float
    sigma_y: float
    theta: float
    w: float
    band: Band = Band.LOW
    kernel_size: int = 17


def _grid(kernel_size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (kernel_size - 1) / 2.0
    ys, xs = np.mgrid[0:kernel_size, 0:kernel_size].astype(np.float64)
    return xs - c, ys - c


def gabor_planes(sigma_x: Tensor, sigma_y: Tensor, theta: Tensor, w: Tensor,
                 kernel_size: int) -> tuple[Tensor, Tensor]:
    """Real and imaginary kernel planes, each ``(N, k, k)``, for ``(N,)`` parameters."""
    n = sigma_x.shape[0]
    k = kernel_size
    xs, ys = _grid(k)
    shape = (n, k, k)

    def per_filter(t):
        return ad.broadcast_to(ad.reshape(t, (n, 1, 1)), shape)

    X = Tensor(np.broadcast_to(xs, shape))
    Y = Tensor(np.broadcast_to(ys, shape))
    ct, st = per_filter(ad.cos(theta)), per_filter(ad.sin(theta))
    xr = ad.add(ad.mul(X, ct), ad.mul(Y, st))
    yr = ad.sub(ad.mul(Y, ct), ad.mul(X, st))
    sx, sy = per_filter(sigma_x), per_filter(sigma_y)
    quad = ad.add(ad.div(ad.square(xr), ad.square(sx)), ad.div(ad.square(yr), ad.square(sy)))
    norm = ad.div(1.0 / (2.0 * math.pi), ad.mul(sx, sy))
    env = ad.mul(norm, ad.exp(ad.scale(quad, -0.5)))
    phase = ad.mul(ad.scale(per_filter(w), 2.0 * math.pi), xr)
    return ad.mul(env, ad.cos(phase)), ad.mul(env, ad.sin(phase))


def synthesize(spec: GaborFilterSpec) -> np.ndarray:
    """Complex kernel of one filter as a ``(2, k, k)`` array: real plane, imaginary plane."""
    real, imag = gabor_planes(Tensor([spec.sigma_x]), Tensor([spec.sigma_y]), Tensor([spec.theta]),
                              Tensor([spec.w]), spec.kernel_size)
    return np.stack([real.data[0], imag.data[0]])


def frequency_response(spec: GaborFilterSpec, u, v):
    """Spectral Gaussian of the filter at frequency ``(u, v)`` in cycles/pixel."""
    ct, st = math.cos(spec.theta), math.sin(spec.theta)
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    ur = u * ct + v * st
    vr = -u * st + v * ct
    two_pi2 = 4.0 * math.pi ** 2
    return np.exp(-0.5 * (two_pi2 * spec.sigma_x ** 2 * (ur - spec.w) ** 2
                          + two_pi2 * spec.sigma_y ** 2 * vr ** 2))


class FilterBank:
    """``n_filters`` learnable Gabor filters, half per frequency band.

    Raw parameters live in four ``(N,)`` leaf tensors. With
    ``constrained=False`` the raw tensors are used as the filter values
    directly (initialised to the same values the constrained bank starts
    from); this exists only for the stability ablation.
    """

    PARAM_NAMES = ("sigma_x", "sigma_y", "theta", "w")

    def __init__(self, n_filters: int, region_size: int, rng: np.random.Generator,
                 kernel_size: int | None = None, constrained: bool = True):
        if n_filters < 2 or n_filters % 2:
            raise ValueError(f"filter count must be even and >= 2, got {n_filters}")
        self.n_filters = n_filters
        self.region_size = region_size
        self.ranges = valid_ranges(region_size)
        self.kernel_size = kernel_size or default_kernel_size(region_size)
        self.constrained = constrained
        half = n_filters // 2
        self.bands = [Band.LOW] * half + [Band.HIGH] * half
        self.w_lower = np.array([self.ranges.w_band(b)[0] for b in self.bands])
        self.w_upper = np.array([self.ranges.w_band(b)[1] for b in self.bands])
        raw = {name: rng.uniform(-1.0, 1.0, size=n_filters) for name in self.PARAM_NAMES}
        self.raw = {name: Tensor(v, requires_grad=True, name=f"{name}_raw") for name, v in raw.items()}
        if not constrained:
            vals = self.values()
            self.raw = {name: Tensor(vals[name].data.copy(), requires_grad=True, name=name)
                        for name in self.PARAM_NAMES}

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.raw)

    def values(self) -> dict[str, Tensor]:
        """Current filter parameters as differentiable ``(N,)`` tensors."""
        if not self.constrained:
            return dict(self.raw)
        r = self.ranges
        w = constrain(self.raw["w"], self.w_lower, self.w_upper)
        # sigma_x's floor follows the live frequency
        sx_lo = ad.div(5.0 / (2.0 * math.pi), ad.sub(1.0, ad.scale(w, 2.0)))
        sx = constrain(self.raw["sigma_x"], sx_lo, r.sigma_x_upper)
        sy = constrain(self.raw["sigma_y"], *r.sigma_y)
        theta = constrain(self.raw["theta"], *r.theta)
        return {"sigma_x": sx, "sigma_y": sy, "theta": theta, "w": w}

    def specs(self) -> list[GaborFilterSpec]:
        with ad.no_tape():
            v = {k: t.data for k, t in self.values().items()}
        return [GaborFilterSpec(float(v["sigma_x"][i]), float(v["sigma_y"][i]), float(v["theta"][i]),
                                float(v["w"][i]), self.bands[i], self.kernel_size)
                for i in range(self.n_filters)]

    def kernels(self, values: dict[str, Tensor] | None = None) -> Tensor:
        """Stacked ``(2N, 1, k, k)`` kernels: N real planes then N imaginary planes."""
        v = values if values is not None else self.values()
        real, imag = gabor_planes(v["sigma_x"], v["sigma_y"], v["theta"], v["w"], self.kernel_size)
        k = self.kernel_size
        return ad.reshape(ad.concat([real, imag], axis=0), (2 * self.n_filters, 1, k, k))


def apply_bank(bank: FilterBank, regions, values: dict[str, Tensor] | None = None) -> Tensor:
    """Intensity maps ``(R, N, S, S)`` for regions ``(R, S, S)`` (or one ``(S, S)`` region).

    Each map is the modulus of the complex response, smoothed by a tiny
    epsilon so the square root stays differentiable at zero.
    """
    regions = regions if isinstance(regions, Tensor) else Tensor(regions)
    single = regions.ndim == 2
    if single:
        regions = ad.reshape(regions, (1,) + regions.shape)
    R, H, W = regions.shape
    S = bank.region_size
    if (H, W) != (S, S):
        raise ValueError(f"region is {H}x{W}, bank expects {S}x{S}")
    n = bank.n_filters
    resp = ad.conv2d(ad.reshape(regions, (R, 1, S, S)), bank.kernels(values),
                     pad=bank.kernel_size // 2)
    re = ad.index(resp, (slice(None), slice(0, n)))
    im = ad.index(resp, (slice(None), slice(n, 2 * n)))
    energy = ad.add(ad.add(ad.square(re), ad.square(im)), INTENSITY_EPS)
    maps = ad.sqrt(energy)
    return ad.reshape(maps, (n, S, S)) if single else maps
