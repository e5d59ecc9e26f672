"""Named gradient checks: each builds a small instance, freezes any piecewise
choices at the base point, and compares tape gradients with central
differences."""
from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gabor import FilterBank, apply_bank, constrain
from .gate import gate_train, saturating_sigmoid
from .network import ModelConfig, TextureNet, loss
from .oracle import GradReport, gradcheck
from .texture import FilterCorrelation, LearnableHistogram

DEFAULT_TOL = 1e-4
DEFAULT_H = 1e-4


def _weights(rng, shape) -> np.ndarray:
    # a fixed random projection turns any output into a scalar loss
    return rng.normal(size=shape)


def _tag(reports: list[GradReport], suite: str) -> list[GradReport]:
    for r in reports:
        r.name = f"{suite}/{r.name}"
    return reports


def check_constrain(rng, h=DEFAULT_H, tol=DEFAULT_TOL) -> list[GradReport]:
    raw = Tensor(rng.uniform(-3.0, 3.0, 6), requires_grad=True)
    lower = Tensor(rng.uniform(0.1, 0.5, 6), requires_grad=True)
    upper = Tensor(rng.uniform(1.0, 2.0, 6), requires_grad=True)
    W = _weights(rng, 6)
    f = lambda: ad.sum(ad.mul(constrain(raw, lower, upper), W))
    return _tag(gradcheck(f, {"raw": raw, "lower": lower, "upper": upper}, h, tol), "constrain")


def check_gabor(rng, h=DEFAULT_H, tol=DEFAULT_TOL) -> list[GradReport]:
    bank = FilterBank(4, 16, rng)
    regions = Tensor(rng.uniform(0.0, 1.0, (2, 16, 16)), requires_grad=True)
    W = _weights(rng, (2, 4, 16, 16))
    f = lambda: ad.sum(ad.mul(apply_bank(bank, regions), W))
    params = {**bank.parameters(), "regions": regions}
    return _tag(gradcheck(f, params, h, tol, max_entries=12, rng=rng), "gabor")


def check_lho(rng, h=DEFAULT_H, tol=DEFAULT_TOL) -> list[GradReport]:
    lho = LearnableHistogram(16, 8, 4, 2, rng)
    maps = Tensor(rng.uniform(0.0, 1.0, (2, 3, 16, 16)), requires_grad=True)
    W = _weights(rng, (2, 3, 8))
    f = lambda: ad.sum(ad.mul(lho(maps), W))
    lho.freeze = True
    try:
        reports = gradcheck(f, {"maps": maps, **lho.parameters()}, h, tol, max_entries=12, rng=rng)
    finally:
        lho.freeze = False
    return _tag(reports, "lho")


def check_fcm(rng, h=DEFAULT_H, tol=DEFAULT_TOL) -> list[GradReport]:
    fcm = FilterCorrelation(8, 2, rng)
    stats = Tensor(rng.normal(size=(2, 4, 8)), requires_grad=True)
    params = {k: Tensor(rng.uniform(0.2, 3.0, 4), requires_grad=True) for k in FilterCorrelation.PARAMS}
    W = _weights(rng, (2, 8))
    f = lambda: ad.sum(ad.mul(fcm(stats, params), W))
    return _tag(gradcheck(f, {"stats": stats, **params, **fcm.parameters()}, h, tol,
                          max_entries=12, rng=rng), "fcm")


def check_saturating_sigmoid(rng, h=DEFAULT_H, tol=DEFAULT_TOL) -> list[GradReport]:
    # points sit well clear of the clamp kinks at +-ln(11)
    x = Tensor(np.array([-4.0, -1.7, -0.4, 0.0, 0.6, 1.9, 4.5]), requires_grad=True)
    W = _weights(rng, 7)
    f = lambda: ad.sum(ad.mul(saturating_sigmoid(x), W))
    return _tag(gradcheck(f, {"x": x}, h, tol), "saturating_sigmoid")


def _gate_noise(rng, scores: np.ndarray, open_frac: float = 0.3) -> np.ndarray:
    """Noise that puts every perturbed score at 0.3..2.0 from zero, with about ``open_frac`` open."""
    mag = rng.uniform(0.3, 2.0, scores.shape)
    sign = np.where(rng.random(scores.shape) < open_frac, 1.0, -1.0)
    return sign * mag - scores


def check_gate(rng, h=DEFAULT_H, tol=DEFAULT_TOL) -> list[GradReport]:
    scores = Tensor(rng.normal(size=(3, 7)), requires_grad=True)
    noise = _gate_noise(rng, scores.data)
    base = gate_train(scores, noise=noise)
    anchor = (base.d, base.c)
    W = _weights(rng, (3, 7))
    f = lambda: ad.sum(ad.mul(gate_train(scores, noise=noise, anchor=anchor).gate, W))
    return _tag(gradcheck(f, {"scores": scores}, h, tol), "gate")


def check_scores(rng, h=DEFAULT_H, tol=DEFAULT_TOL) -> list[GradReport]:
    cfg = ModelConfig(fpn_channels=8, widths=(4, 6, 8, 8), seed=int(rng.integers(1 << 16)))
    model = TextureNet(cfg, n_classes=3, image_size=32)
    model.scorer.weight.data[:] = rng.normal(0.0, 0.5, model.scorer.weight.shape)
    feats = [Tensor(rng.normal(size=(2, c, n, n)), requires_grad=True)
             for c, n in zip(cfg.widths[1:], (8, 4, 2))]
    W = _weights(rng, (2, len(model.proposals)))
    f = lambda: ad.sum(ad.mul(model.scores(feats), W))
    params = {**model.fpn.parameters("fpn."), **model.scorer.parameters("scorer."),
              "proposal_bias": model.proposal_bias, **{f"feat{i}": t for i, t in enumerate(feats)}}
    return _tag(gradcheck(f, params, h, tol, max_entries=12, rng=rng), "scores")


def end_to_end_model(seed: int = 0) -> tuple[TextureNet, np.ndarray, np.ndarray]:
    """16x16 images, two filters, four levels; every other width shrunk to match.

    At 16x16 the coarsest feature level is a single cell, which score
    centring cancels exactly; centring is left off here so that every weight
    has a gradient to measure (the ``scores`` suite covers the centred path),
    and levels enter unscaled so the attention softmax is not saturated.
    """
    cfg = ModelConfig(region_size=16, n_filters=2, m_levels=4, channels=8, heads=2, fpn_channels=8,
                      widths=(4, 8, 8, 8), seed=seed, center_scores=False, level_scale=1.0)
    model = TextureNet(cfg, n_classes=3, image_size=16)
    rng = np.random.default_rng(seed + 1)
    # zero-initialised weights would block whole branches; probe a generic point instead
    model.fcm.attention.w_out.data[:] = rng.normal(0.0, 0.3, model.fcm.attention.w_out.shape)
    model.scorer.weight.data[:] = rng.normal(0.0, 0.3, model.scorer.weight.shape)
    images = rng.uniform(0.0, 1.0, (2, 16, 16))
    labels = np.array([0, 2])
    return model, images, labels


def check_end_to_end(rng, h=DEFAULT_H, tol=DEFAULT_TOL, max_entries: int = 6) -> list[GradReport]:
    model, images, labels = end_to_end_model(int(rng.integers(1 << 16)))
    with ad.no_tape():
        feats = model.semantic(Tensor(images))[1]
        scores = model.scores(feats).data
    noise = _gate_noise(rng, scores, open_frac=0.1)
    noise[0, 0] = 1.0 - scores[0, 0]     # at least one region per image
    noise[1, 3] = 1.0 - scores[1, 3]
    lam = model.cfg.lam
    with model.frozen_pieces():
        base = model.forward(images, train=True, noise=noise)
        anchor = (base.decisions, base.surrogate)

        def f():
            pred = model.forward(images, train=True, noise=noise, anchor=anchor)
            return loss(pred, labels, lam)[0]

        reports = gradcheck(f, model.parameters(), h, tol, max_entries=max_entries, rng=rng)
    return _tag(reports, "end_to_end")


SUITES: dict[str, Callable[..., list[GradReport]]] = {
    "constrain": check_constrain,
    "gabor": check_gabor,
    "lho": check_lho,
    "fcm": check_fcm,
    "saturating_sigmoid": check_saturating_sigmoid,
    "gate": check_gate,
    "scores": check_scores,
    "end_to_end": check_end_to_end,
}


def run_suites(names=None, seed: int = 0, h: float = DEFAULT_H, tol: float = DEFAULT_TOL) -> list[GradReport]:
    names = list(SUITES) if names is None else list(names)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise KeyError(f"unknown gradcheck suite(s): {', '.join(unknown)}")
    reports = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        reports.extend(SUITES[name](rng, h=h, tol=tol))
    return reports
