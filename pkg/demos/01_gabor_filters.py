"""
Gabor filters inside their valid ranges
=======================================

A walk through the filter bank: where the parameter bounds come from, what
one synthesized kernel looks like in frequency, and how the bank splits its
filters between a low and a high frequency band.

Run with ``python demos/01_gabor_filters.py``.
"""
import math

import numpy as np

from gabortex.gabor import (Band, FilterBank, GaborFilterSpec, apply_bank, gaussian_energy,
                            sigma_x_lower, synthesize, valid_ranges)
from gabortex.oracle import dft2

# %%
# Keeping 2.5 standard deviations of the Gaussian envelope inside the region
# (and inside the Nyquist band in frequency) sets every bound below.
print(f"energy within +-2.5 sigma: {100 * gaussian_energy(2.5):.2f}%")

for S in (32, 112):
    vr = valid_ranges(S)
    print(f"S={S:3d}  theta {vr.theta[0]:.3f}..{vr.theta[1]:.3f}  "
          f"sigma_y {vr.sigma_y[0]:.4f}..{vr.sigma_y[1]:.2f}  "
          f"W {vr.w_full[0]:.1f}..{vr.w_full[1]:.6f}  (bands split at {vr.w_low[1]:.6f})")

# the sigma_x lower bound rises with W and meets the upper bound at the top frequency
vr = valid_ranges(32)
for w in (0.05, 0.2, 0.4, vr.w_full[1]):
    print(f"W={w:.3f}: sigma_x in [{sigma_x_lower(w):.3f}, {vr.sigma_x_upper:.1f}]")

# %%
# One kernel, viewed through the brute-force DFT. The complex kernel
# (real + 1j*imag) has a single spectral lobe at (W cos theta, W sin theta).
spec = GaborFilterSpec(sigma_x=5.0, sigma_y=4.0, theta=math.pi / 4, w=0.25, kernel_size=65)
k = synthesize(spec)[:, :64, :64]
_, (fx, fy) = dft2(k[0] + 1j * k[1])
print(f"\nDFT peak ({fx:+.4f}, {fy:+.4f}) vs carrier "
      f"({spec.w * math.cos(spec.theta):+.4f}, {spec.w * math.sin(spec.theta):+.4f}); bin = {1 / 64:.4f}")

# %%
# A bank of eight filters: four per band, every parameter squashed into its
# interval by a scaled sigmoid, so no optimizer step can leave the range.
bank = FilterBank(8, 32, np.random.default_rng(0))
for s in bank.specs():
    print(f"{s.band.value:>4}  W={s.w:.3f}  theta={s.theta:.2f}  sigma_x={s.sigma_x:5.2f}  sigma_y={s.sigma_y:5.2f}")

for t in bank.raw.values():            # a violent update to the raw parameters
    t.data += 50.0 * np.random.default_rng(1).normal(size=t.shape)
lo_band = [s.w for s in bank.specs() if s.band is Band.LOW]
hi_band = [s.w for s in bank.specs() if s.band is Band.HIGH]
split = bank.ranges.w_low[1]
print(f"after a huge update: low band W max {max(lo_band):.9f} < split {split:.9f} < high band W min "
      f"{min(hi_band):.9f}: {max(lo_band) < split < min(hi_band)}")

# %%
# Intensity maps: magnitude of the complex response of each filter.
xs = np.arange(32)
grating = 0.5 + 0.5 * np.cos(2 * math.pi * 0.3 * xs)[None, :].repeat(32, 0)
maps = apply_bank(FilterBank(8, 32, np.random.default_rng(0)), grating - grating.mean()).data
print("\nmean response per filter to a 0.3 c/px grating:", np.round(maps.mean(axis=(1, 2)), 4))
