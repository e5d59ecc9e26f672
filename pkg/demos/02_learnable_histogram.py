"""
The learnable histogram operator
================================

Quantizes an intensity map into M soft levels, counts them, and turns the
counts, level values and positions into one statistical feature.

Run with ``python demos/02_learnable_histogram.py``.
"""
import numpy as np

from gabortex.autodiff import Tape, Tensor
from gabortex import autodiff as ad
from gabortex.texture import LearnableHistogram, compute_levels, count, quantize

rng = np.random.default_rng(0)

# %%
# Levels are evenly spaced from just above the minimum up to the maximum.
m = np.array([[0.0, 0.2, 0.4], [0.6, 0.8, 1.0], [0.1, 0.5, 0.9]])
q = compute_levels(m, 4)
print("levels:", q.levels, " spacing:", q.spacing)

# the spire kernel gives each pixel a weight for the level just above it
V = quantize(m.reshape(1, -1), q)
print("soft assignment (pixel x level):\n", np.round(V[0], 3))
# the minimum pixel sits a full spacing below the first level and gets no weight
c = count(V)
print("normalized counts:", np.round(c, 4), " sum", c.sum())

# %%
# The full operator on a batch of random maps, with the gradient flowing back
# to every pixel.
lho = LearnableHistogram(size=16, channels=8, m_count=8, heads=2, rng=rng)
maps = Tensor(rng.uniform(size=(3, 16, 16)), requires_grad=True)
with Tape() as tape:
    feat = lho(maps)
    total = ad.sum(feat)
tape.backward(total)
print("\nfeature shape:", feat.shape)
print("count rows sum to one:", np.allclose(lho.last.counts.data.sum(-1), 1.0))
print("pixels with nonzero gradient:", int(np.count_nonzero(maps.grad)), "of", maps.grad.size)
