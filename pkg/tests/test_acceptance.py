"""Acceptance criteria 1-8, one test each, each printing a single PASS/FAIL line.

The full run takes several minutes (criteria 5-7 train real models). Select
with ``pytest tests/test_acceptance.py -v``; the report lines appear in the
terminal output even without ``-s``.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from gabortex import autodiff as ad
from gabortex.autodiff import Tensor
from gabortex.checks import run_suites
from gabortex.data import default_classes, gen_dataset
from gabortex.gabor import (GaborFilterSpec, gaussian_energy, sigma_x_lower, synthesize, valid_ranges)
from gabortex.layers import MultiHeadAttention
from gabortex.network import ModelConfig, evaluate, train
from gabortex.oracle import dft2, naive_conv2d, naive_histogram
from gabortex.texture import LearnableHistogram, compute_levels, count, histogram_stats, quantize

REPORT_DIR = Path(__file__).resolve().parent.parent / "reports"

# reduced model for the multi-run criteria (6 and 7); see README
REDUCED = dict(n_filters=4, m_levels=4, channels=16, heads=2, fpn_channels=16)


@pytest.fixture
def report(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(n: int, ok: bool, detail: str, soft: bool = False) -> None:
        tag = "PASS" if ok else ("FAIL (soft, non-gating)" if soft else "FAIL")
        with capman.global_and_fixture_disabled():
            print(f"\n[criterion {n}] {tag}: {detail}", flush=True)
    return emit


@pytest.fixture(scope="module")
def single_thread():
    with threadpool_limits(limits=1):
        yield


# 1 ----------------------------------------------------------------------------

def test_criterion_1_analytic_constants(report):
    t0 = time.perf_counter()
    energy = 100 * gaussian_energy(2.5)
    S = 112
    vr = valid_ranges(S)
    expect = {
        "theta": (0.0, math.pi),
        "sigma_y": (5 / (2 * math.pi), S / 5),
        "sigma_x_upper": S / 5,
        "w_upper": (2 * math.pi * S - 25) / (4 * math.pi * S),
        "w_mid": (2 * math.pi * S - 25) / (8 * math.pi * S),
    }
    got = {"theta": vr.theta, "sigma_y": vr.sigma_y, "sigma_x_upper": vr.sigma_x_upper,
           "w_upper": vr.w_full[1], "w_mid": vr.w_low[1]}
    formula_ok = all(np.allclose(got[k], expect[k], rtol=0, atol=1e-9) for k in expect)
    quoted_ok = (abs(vr.sigma_y[0] - 0.795775) < 5e-7 and vr.sigma_y[1] == 22.4
                 and vr.theta == (0.0, math.pi) and vr.w_full[0] == 0.0)
    # the sigma_x lower bound at the top frequency meets the upper bound
    closure_ok = abs(sigma_x_lower(vr.w_full[1]) - vr.sigma_x_upper) < 1e-9
    elapsed = time.perf_counter() - t0
    ok = abs(energy - 98.76) <= 0.01 and formula_ok and quoted_ok and closure_ok and elapsed < 1.0
    report(1, ok, f"energy {energy:.4f}%, W upper {vr.w_full[1]:.9f} (formula; the quoted 0.482267 "
                  f"differs by {abs(vr.w_full[1] - 0.482267):.1e}), sigma_y [{vr.sigma_y[0]:.6f}, "
                  f"{vr.sigma_y[1]}], {elapsed * 1e3:.1f} ms")
    assert ok


# 2 ----------------------------------------------------------------------------

def test_criterion_2_gradient_suite(report):
    t0 = time.perf_counter()
    reports = run_suites(tol=1e-4)
    elapsed = time.perf_counter() - t0
    failed = [str(r) for r in reports if not r.passed]
    suites = sorted({r.name.split("/")[0] for r in reports})
    worst = max(reports, key=lambda r: r.max_rel_error)
    ok = not failed and elapsed < 60.0
    report(2, ok, f"{len(reports) - len(failed)}/{len(reports)} leaves pass across {', '.join(suites)}; "
                  f"worst {worst.name} {worst.max_rel_error:.2e}; {elapsed:.1f} s")
    assert ok, failed


# 3 ----------------------------------------------------------------------------

def test_criterion_3_oracle_equivalence(report):
    conv_err = 0.0
    for case in range(10):
        rng = np.random.default_rng(case)
        cin, cout = rng.integers(1, 4, size=2)
        k = int(rng.choice([1, 3, 5]))
        H, W = rng.integers(k, 14, size=2)
        pad, stride = int(rng.integers(0, k // 2 + 1)), int(rng.integers(1, 3))
        x, kern = rng.normal(size=(cin, H, W)), rng.normal(size=(cout, cin, k, k))
        ref = naive_conv2d(x, kern, pad=pad, stride=stride)
        for method in ("direct", "fft"):
            out = ad.conv2d(Tensor(x), Tensor(kern), pad=pad, stride=stride, method=method).data
            conv_err = max(conv_err, float(np.abs(out - ref).max()))

    hist_err = 0.0
    for case in range(10):
        rng = np.random.default_rng(100 + case)
        m = int(rng.integers(2, 9))
        lo, span = rng.normal(), rng.uniform(0.5, 3.0)
        levels = lo + span * np.arange(1, m + 1) / m
        img = rng.choice(levels, size=(12, 12))
        img[0, 0] = lo                      # the minimum pins the grid and is not a level itself
        img[0, 1] = levels[-1]
        q = compute_levels(img, m)
        on = img[img > lo]
        hist_err = max(hist_err, float(np.abs(count(quantize(on.reshape(1, -1), q)) -
                                              naive_histogram(on, q.levels)).max()))
        st = histogram_stats(Tensor(img.reshape(1, -1)), m, np.zeros((img.size, 2)))
        hist_err = max(hist_err, float(np.abs(st.counts.data[0] - naive_histogram(img, q.levels)).max()))

    # the complex kernel has one spectral lobe, centred on (W cos theta, W sin theta)
    vr = valid_ranges(64)
    rng = np.random.default_rng(0)
    peak_off = []
    for _ in range(5):
        w, th = rng.uniform(*vr.w_full), rng.uniform(*vr.theta)
        sx, sy = rng.uniform(sigma_x_lower(w), vr.sigma_x_upper), rng.uniform(*vr.sigma_y)
        k = synthesize(GaborFilterSpec(sx, sy, th, w, kernel_size=65))[:, :64, :64]
        _, (fx, fy) = dft2(k[0] + 1j * k[1])
        peak_off.append(float(max(abs(fx - w * math.cos(th)), abs(fy - w * math.sin(th)))) * 64)

    ok = conv_err <= 1e-10 and hist_err <= 1e-12 and max(peak_off) <= 1.0
    report(3, ok, f"conv max err {conv_err:.1e} (10 cases x direct/fft); histogram max err {hist_err:.1e}; "
                  f"DFT peak offsets {[round(p, 2) for p in peak_off]} bins")
    assert ok


# 4 and 5 share one default training run ----------------------------------------

@pytest.fixture(scope="module")
def default_run(tmp_path_factory, single_thread):
    """Default config, 200 steps, with every histogram and attention call monitored."""
    root = tmp_path_factory.mktemp("default")
    manifest = gen_dataset(default_classes(), 75, 0.75, root / "data", seed=0)
    dev = {"counts": 0.0, "attention": 0.0, "maps": 0}
    lho_call, mha_call = LearnableHistogram.__call__, MultiHeadAttention.__call__

    def lho_watch(self, maps):
        out = lho_call(self, maps)
        dev["counts"] = max(dev["counts"], float(np.abs(self.last.counts.data.sum(-1) - 1).max()))
        dev["maps"] += int(np.prod(self.last.counts.shape[:-1]))
        return out

    def mha_watch(self, tokens):
        out = mha_call(self, tokens)
        dev["attention"] = max(dev["attention"], float(np.abs(self.last_attention.sum(-1) - 1).max()))
        return out

    mp = pytest.MonkeyPatch()
    mp.setattr(LearnableHistogram, "__call__", lho_watch)
    mp.setattr(MultiHeadAttention, "__call__", mha_watch)
    try:
        cfg = ModelConfig()
        t0 = time.perf_counter()
        model, history = train(cfg, manifest)
        elapsed = time.perf_counter() - t0
    finally:
        mp.undo()
    return dict(manifest=manifest, model=model, history=history, elapsed=elapsed, dev=dev, cfg=cfg)


def test_criterion_4_structural_invariants(default_run, report):
    model = default_run["model"]
    bank = model.bank
    vr = bank.ranges
    inside = True
    for s in bank.specs():
        lo, hi = vr.w_band(s.band)
        inside &= (lo < s.w < hi and vr.theta[0] < s.theta < vr.theta[1]
                   and vr.sigma_y[0] < s.sigma_y < vr.sigma_y[1]
                   and sigma_x_lower(s.w) < s.sigma_x < vr.sigma_x_upper)
    w = np.array([s.w for s in bank.specs()])
    mid = vr.w_low[1]
    n_low, n_high = int(np.sum(w < mid)), int(np.sum(w > mid))
    dev = default_run["dev"]
    ok = (bool(inside) and n_low == n_high == bank.n_filters // 2 and dev["maps"] > 0
          and dev["counts"] <= 1e-9 and dev["attention"] <= 1e-12)
    report(4, ok, f"params inside ranges: {bool(inside)}; W bands {n_low}/{n_high} of {bank.n_filters}; "
                  f"max |sum C - 1| {dev['counts']:.1e} over {dev['maps']} maps; "
                  f"max |attention row - 1| {dev['attention']:.1e}")
    assert ok


def test_criterion_5_end_to_end_learning(default_run, single_thread, report):
    manifest, model = default_run["manifest"], default_run["model"]
    tr = evaluate(model, *manifest.load("train"))
    te = evaluate(model, *manifest.load("test"))
    base_cfg = ModelConfig(texture=False)
    base, _ = train(base_cfg, manifest)
    base_te = evaluate(base, *manifest.load("test"))
    ok = (tr["acc"] >= 0.90 and te["acc"] >= 0.85 and default_run["elapsed"] < 300.0
          and len(default_run["history"]) == 200 and base_te["acc"] < te["acc"])
    report(5, ok, f"train {tr['acc']:.1%}, test {te['acc']:.1%}, {te['mean_regions']:.1f} regions/image, "
                  f"{default_run['elapsed']:.0f} s single-threaded; semantic-only test {base_te['acc']:.1%}")
    assert ok


# 6 ----------------------------------------------------------------------------

def test_criterion_6_sparsity_regularizer(tmp_path, single_thread, report):
    manifest = gen_dataset(default_classes(), 20, 0.75, tmp_path / "data", seed=3)
    images, labels = manifest.load("train")
    lams = (0.01, 0.2, 1.0)
    table = np.zeros((5, len(lams)))
    for seed in range(5):
        for j, lam in enumerate(lams):
            cfg = ModelConfig(seed=seed, lam=lam, steps=100, lam_warmup=30, lr_decay_steps=(60,), **REDUCED)
            model, _ = train(cfg, (images, labels), n_classes=4)
            table[seed, j] = evaluate(model, images, labels)["mean_regions"]
    means = table.mean(axis=0)
    ok = bool(np.all(np.diff(means) <= 0))
    per_seed = sum(bool(np.all(np.diff(row) <= 0)) for row in table)
    report(6, ok, f"mean regions/image at lambda {lams}: {np.round(means, 2).tolist()} "
                  f"(5-seed mean; monotone in {per_seed}/5 individual seeds)")
    assert ok


# 7 ----------------------------------------------------------------------------

def test_criterion_7_stability_report(tmp_path, single_thread, report):
    manifest = gen_dataset(default_classes(), 20, 0.75, tmp_path / "data", seed=3)
    data = manifest.load("train")
    rows = []
    for seed in range(3):
        stds = {}
        for constrained in (True, False):
            cfg = ModelConfig(seed=seed, constrained=constrained, steps=200, **REDUCED)
            _, history = train(cfg, data, n_classes=4)
            losses = np.array([r["loss"] for r in history[50:200]])
            stds[constrained] = float(np.std(losses)) if np.all(np.isfinite(losses)) else math.inf
        rows.append((seed, stds[True], stds[False]))
    wins = sum(c < u for _, c, u in rows)
    ok = wins == len(rows)
    REPORT_DIR.mkdir(exist_ok=True)
    path = REPORT_DIR / "stability_report.md"
    lines = ["# Loss stability: constrained vs raw Gabor parameters", "",
             "Standard deviation of the per-step training loss over steps 50-200, reduced model "
             f"({', '.join(f'{k}={v}' for k, v in REDUCED.items())}), 60 training images.", "",
             "| seed | constrained | unconstrained |", "|---|---|---|"]
    lines += [f"| {s} | {c:.4f} | {u:.4f} |" for s, c, u in rows]
    lines += ["", f"Constrained run steadier in {wins}/{len(rows)} seeds. This check is report-only."]
    path.write_text("\n".join(lines) + "\n")
    report(7, ok, f"constrained loss std lower in {wins}/{len(rows)} seeds; report at {path}", soft=True)
    # soft criterion: the report is the deliverable, so only its presence is asserted
    assert path.exists()


# 8 ----------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path, single_thread, report):
    manifest = gen_dataset(default_classes(), 8, 0.75, tmp_path / "data", seed=5)
    cfg = ModelConfig(seed=11, steps=25, **REDUCED)
    for name in ("a", "b"):
        train(cfg, manifest, out_dir=tmp_path / name)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    has_csv = Path("metrics.csv") in files
    has_ckpt = any(f.suffix == ".tnsr" for f in files) and Path("checkpoint/checkpoint.json") in files
    ok = all(same) and has_csv and has_ckpt
    report(8, ok, f"{sum(same)}/{len(files)} output files bitwise identical across two runs "
                  f"(metrics.csv and {len(files) - 2} checkpoint tensors + header)")
    assert ok
