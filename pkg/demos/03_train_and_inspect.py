"""
Training the two-branch model on synthetic textures
===================================================

Generates the four-class texture set, trains the default model for 200
steps (about a minute and a half on one core), then looks at which regions
the gate opens.

Run with ``python demos/03_train_and_inspect.py [steps]``.
"""
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from gabortex.data import default_classes, gen_dataset
from gabortex.gate import format_selection
from gabortex.network import ModelConfig, evaluate, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
root = Path(tempfile.mkdtemp(prefix="gabortex-demo-"))

# %%
# 75 images per class, a quarter held out.
manifest = gen_dataset(default_classes(), 75, 0.75, root / "data", seed=0)
for c in manifest.classes:
    print("class:", c)

# %%
cfg = ModelConfig(steps=steps)
t0 = time.perf_counter()
model, history = train(cfg, manifest, out_dir=root / "run")
print(f"\ntrained {steps} steps in {time.perf_counter() - t0:.0f} s")
for row in history[:: max(1, steps // 8)]:
    print(f"step {row['step']:4d}  loss {row['loss']:.3f}  batch acc {row['acc']:.2f}  "
          f"regions {row['mean_regions']:.1f}")

# %%
# Texture-free baseline with the same seed, for comparison.
base, _ = train(ModelConfig(steps=steps, texture=False), manifest)
test = manifest.load("test")
print("\nfull model :", evaluate(model, *test))
print("semantic only:", evaluate(base, *test))

# %%
# Which boxes does the gate open on a few test images?
images, labels = test
for i in range(4):
    pred = model.forward(images[i])
    lines = format_selection(f"test{i}", model.proposals, pred.decisions[0])
    print(f"\nimage {i} (label {labels[i]}, predicted {int(np.argmax(pred.logits.data))}): {len(lines)} regions")
    for line in lines[:4]:
        print("  ", line)
print(f"\noutputs under {root}")
