"""Two-branch classifier: a small CNN for global semantics plus Gabor texture
features from gated, zoomed regions; loss, optimiser, and training loop."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import DatasetManifest, read_tensor, write_tensor
from .gabor import FilterBank, apply_bank, valid_ranges
from .gate import FPN, RegionProposal, gate_infer, gate_train, make_proposals, roi_pool
from .layers import Linear, Module
from .texture import FilterCorrelation, LearnableHistogram

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "loss", "ce", "reg", "acc", "mean_regions")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    region_size: int = 32
    n_filters: int = 16
    m_levels: int = 8
    channels: int = 32
    heads: int = 4
    fpn_channels: int = 32
    widths: tuple = (8, 16, 32, 32)
    proposal_scales: tuple = (0.5, 0.25)
    lam: float = 0.2
    lr: float = 1e-2
    momentum: float = 0.9
    steps: int = 200
    epochs: int | None = None
    batch: int = 8
    lr_decay_steps: tuple = (120,)
    lr_decay: float = 0.1
    gate_bias_init: float = -2.5
    gate_bias_std: float = 2.5
    score_scale: float = 4.0
    lam_warmup: int = 60
    level_scale: float = 30.0
    clip_norm: float | None = 1.0
    seed: int = 0
    constrained: bool = True
    texture: bool = True
    hflip: bool = False
    centered_bins: bool = False
    position_norm: str = "mass"
    standardize_regions: bool = True
    center_scores: bool = True

    def __post_init__(self):
        if self.n_filters % 2:
            raise ValueError(f"n_filters must be even, got {self.n_filters}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        self.widths = tuple(self.widths)
        self.proposal_scales = tuple(self.proposal_scales)
        self.lr_decay_steps = tuple(self.lr_decay_steps)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        base = dict(region_size=112, n_filters=128, m_levels=8, lam=0.2, lr=1e-4, batch=16,
                    fpn_channels=128, momentum=0.9)
        base.update(overrides)
        return cls(**base)


class SemanticBranch(Module):
    """Four conv(3x3)+bias+ReLU+avgpool(2) blocks, then global average pool and an affine head."""

    def __init__(self, widths: Sequence[int], out_channels: int, rng: np.random.Generator):
        self.convs = []
        self.biases = []
        c_in = 1
        for w in widths:
            std = math.sqrt(2.0 / (9 * c_in))
            self.convs.append(Tensor(rng.normal(0.0, std, size=(w, c_in, 3, 3)), requires_grad=True))
            self.biases.append(Tensor(np.zeros(w), requires_grad=True))
            c_in = w
        self.head = Linear(c_in, out_channels, rng)
        self.freeze_masks = False
        self._masks: list[np.ndarray] | None = None

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.convs, self.biases)):
            out[f"{prefix}conv{i}.weight"] = w
            out[f"{prefix}conv{i}.bias"] = b
        out.update(self.head.parameters(prefix + "head."))
        return out

    def __call__(self, images: Tensor) -> tuple[Tensor, list[Tensor]]:
        """``(B, H, W)`` images -> ``(B, C)`` feature and the block 2..4 outputs."""
        B, H, W = images.shape
        x = ad.reshape(images, (B, 1, H, W))
        feats = []
        replay = self._masks if self.freeze_masks else None
        masks = []
        for i, (w, b) in enumerate(zip(self.convs, self.biases)):
            x = ad.conv2d(x, w, pad=1)
            x = ad.add(x, ad.broadcast_to(ad.reshape(b, (1, -1, 1, 1)), x.shape))
            x = ad.relu(x, mask=None if replay is None else replay[i])
            masks.append(x.data > 0 if replay is None else replay[i])
            x = ad.avg_pool2d(x, 2)
            feats.append(x)
        if self.freeze_masks and self._masks is None:
            self._masks = masks
        pooled = ad.mean(ad.reshape(x, x.shape[:2] + (-1,)), axis=-1)
        return self.head(pooled), feats[1:]


def interp_matrix(lo: float, hi: float, n_in: int, n_out: int) -> np.ndarray:
    """``(n_out, n_in)`` linear-interpolation weights sampling ``[lo, hi]`` (fractions of the axis)."""
    pos = (lo + (np.arange(n_out) + 0.5) * (hi - lo) / n_out) * n_in - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    M = np.zeros((n_out, n_in))
    M[np.arange(n_out), i0] += 1.0 - frac
    M[np.arange(n_out), i1] += frac
    return M


def zoom_region(image, r: RegionProposal, size: int) -> Tensor:
    """Bilinear resample of box ``r`` of an ``(H, W)`` image to ``size x size``."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    H, W = image.shape
    ry = interp_matrix(r.y0, r.y1, H, size)
    rx = interp_matrix(r.x0, r.x1, W, size)
    return ad.matmul(ad.matmul(Tensor(ry), image), Tensor(rx.T))


def zoom_regions(images: Tensor, picks: Sequence[tuple[int, RegionProposal]], size: int) -> Tensor:
    """Zoom several ``(image index, box)`` picks from a ``(B, H, W)`` stack into ``(R, size, size)``."""
    B, H, W = images.shape
    idx = np.array([b for b, _ in picks])
    ry = np.stack([interp_matrix(r.y0, r.y1, H, size) for _, r in picks])
    rxt = np.stack([interp_matrix(r.x0, r.x1, W, size).T for _, r in picks])
    crops = ad.index(images, idx)
    return ad.matmul(ad.matmul(Tensor(ry), crops), Tensor(rxt))


REGION_STD_FLOOR = 1e-2


def standardize(regions: Tensor, floor: float = REGION_STD_FLOOR) -> Tensor:
    """Per-region zero mean and unit variance over the last two axes (std floored at ``floor``)."""
    *lead, H, W = regions.shape
    flat = ad.reshape(regions, tuple(lead) + (H * W,))
    mu = ad.broadcast_to(ad.mean(flat, axis=-1, keepdims=True), flat.shape)
    centred = ad.sub(flat, mu)
    var = ad.mean(ad.square(centred), axis=-1, keepdims=True)
    std = ad.sqrt(ad.add(var, floor * floor))
    return ad.reshape(ad.div(centred, ad.broadcast_to(std, flat.shape)), regions.shape)


@dataclass
class Prediction:
    logits: Tensor
    decisions: np.ndarray                 # (B, K) hard decisions
    gate: Tensor | None                   # (B, K) gate values carrying straight-through grads
    selected: list[list[int]]
    scores: np.ndarray | None = None
    noise: np.ndarray | None = None
    surrogate: np.ndarray | None = None


class TextureNet(Module):
    def __init__(self, cfg: ModelConfig, n_classes: int, image_size: int = 32):
        self.cfg = cfg
        self.n_classes = n_classes
        self.image_size = image_size
        rng = np.random.default_rng(cfg.seed)
        C = cfg.channels
        self.semantic = SemanticBranch(cfg.widths, C, rng)
        self.classifier = Linear(C, n_classes, rng)
        if cfg.texture:
            # centring across proposals cancels any constant offset, so a bias would be dead weight
            self.fpn = FPN(cfg.widths[1:], cfg.fpn_channels, rng, bias=not cfg.center_scores)
            self.proposals = make_proposals(cfg.proposal_scales)
            # score = pooled feature . w + per-proposal bias; w starts at zero and the
            # spread of the biases decides which proposals open first
            self.scorer = Linear(cfg.fpn_channels, 1, rng, bias=False)
            self.scorer.weight.data[:] = 0.0
            k = cfg.score_scale
            self.proposal_bias = Tensor(rng.normal(cfg.gate_bias_init / k, cfg.gate_bias_std / k,
                                                   len(self.proposals)), requires_grad=True)
            self.bank = FilterBank(cfg.n_filters, cfg.region_size, rng, constrained=cfg.constrained)
            self.lho = LearnableHistogram(cfg.region_size, C, cfg.m_levels, cfg.heads, rng,
                                          centered=cfg.centered_bins, position_norm=cfg.position_norm,
                                          level_scale=cfg.level_scale)
            vr = valid_ranges(cfg.region_size)
            self.fcm = FilterCorrelation(C, cfg.heads, rng, param_scale={
                "sigma_x": vr.sigma_x_upper, "sigma_y": vr.sigma_y[1], "theta": vr.theta[1], "w": vr.w_full[1]})
            # texture features start at zero so an untrained branch cannot swamp the semantic one
            self.fcm.attention.w_out.data[:] = 0.0
        else:
            self.proposals = []

    def scores(self, feats: list[Tensor]) -> Tensor:
        fused = self.fpn(feats)
        pooled = roi_pool(fused, self.proposals)                  # (B, K, C_fpn)
        if self.cfg.center_scores:
            # keep only what distinguishes proposals within an image; the shared part
            # would otherwise let the linear weight act as one bias for every proposal
            pooled = ad.sub(pooled, ad.broadcast_to(ad.mean(pooled, axis=1, keepdims=True), pooled.shape))
        s = self.scorer(pooled)
        s = ad.reshape(s, s.shape[:2])
        s = ad.add(s, ad.broadcast_to(ad.reshape(self.proposal_bias, (1, -1)), s.shape))
        return ad.scale(s, self.cfg.score_scale) if self.cfg.score_scale != 1.0 else s

    def texture_features(self, images: Tensor, picks: list[tuple[int, int]]) -> Tensor:
        regions = zoom_regions(images, [(b, self.proposals[k]) for b, k in picks], self.cfg.region_size)
        if self.cfg.standardize_regions:
            regions = standardize(regions)
        values = self.bank.values()
        maps = apply_bank(self.bank, regions, values)
        stats = self.lho(maps)
        return self.fcm(stats, values)

    def forward(self, images, train: bool = False, rng: np.random.Generator | None = None,
                noise: np.ndarray | None = None, anchor=None) -> Prediction:
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim == 2:
            images = ad.reshape(images, (1,) + images.shape)
        B = images.shape[0]
        semantic, feats = self.semantic(images)
        if not self.cfg.texture:
            return Prediction(self.classifier(semantic), np.zeros((B, 0)), None, [[] for _ in range(B)])
        s = self.scores(feats)
        if train:
            dec = gate_train(s, rng=rng, noise=noise, anchor=anchor)
            d, gate, surrogate = dec.d, dec.gate, dec.c
            used_noise = dec.s_hat - dec.s
        else:
            d = gate_infer(s)
            gate, surrogate, used_noise = Tensor(d), None, None
        picks = [(b, k) for b in range(B) for k in np.flatnonzero(d[b] > 0.5)]
        fused = semantic
        if picks:
            T = self.texture_features(images, picks)
            R, C = T.shape
            bi = np.array([b for b, _ in picks])
            ki = np.array([k for _, k in picks])
            weights = ad.broadcast_to(ad.reshape(ad.index(gate, (bi, ki)), (R, 1)), (R, C))
            assign = np.zeros((B, R))
            assign[bi, np.arange(R)] = 1.0
            fused = ad.add(semantic, ad.matmul(Tensor(assign), ad.mul(T, weights)))
        selected = [[k for b2, k in picks if b2 == b] for b in range(B)]
        return Prediction(self.classifier(fused), d, gate, selected, s.data.copy(), used_noise, surrogate)

    __call__ = forward

    @contextlib.contextmanager
    def frozen_pieces(self):
        """Pin ReLU masks and histogram windows at the next forward pass, for finite-difference probes."""
        sem = self.semantic
        sem.freeze_masks, sem._masks = True, None
        if self.cfg.texture:
            self.lho.freeze = True
        try:
            yield
        finally:
            sem.freeze_masks, sem._masks = False, None
            if self.cfg.texture:
                self.lho.freeze = False


def loss(pred: Prediction, labels, lam: float) -> tuple[Tensor, Tensor, Tensor]:
    """Cross-entropy plus ``lam`` times the number of selected regions, both averaged over the batch."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    B, n_cls = pred.logits.shape
    if labels.shape != (B,) or labels.min() < 0 or labels.max() >= n_cls:
        raise ValueError(f"labels {labels} invalid for {n_cls} classes and batch {B}")
    logp = ad.log_softmax(pred.logits, axis=-1)
    ce = ad.scale(ad.sum(ad.index(logp, (np.arange(B), labels))), -1.0 / B)
    if pred.gate is None or pred.gate.shape[1] == 0:
        reg = Tensor(0.0)
    else:
        reg = ad.scale(ad.sum(pred.gate), 1.0 / B)
    total = ad.add(ce, ad.scale(reg, lam)) if lam else ad.add(ce, ad.scale(reg, 0.0))
    return total, ce, reg


class SGD:
    """Heavy-ball SGD: ``v <- momentum*v + g``; ``p <- p - lr*v``."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            v = self.velocity[k]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], velocity: dict[str, np.ndarray],
             lr: float, momentum: float) -> None:
    """Functional form of one momentum step, updating ``params`` and ``velocity`` in place."""
    for k in params:
        velocity[k] *= momentum
        velocity[k] += grads[k]
        params[k] -= lr * velocity[k]


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values() if p.grad is not None))
    if norm > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def evaluate(model: TextureNet, images: np.ndarray, labels: np.ndarray, batch: int = 32) -> dict:
    """Inference-mode accuracy and mean number of selected regions per image."""
    correct, regions = 0, 0
    for i in range(0, len(images), batch):
        pred = model.forward(images[i:i + batch], train=False)
        correct += int(np.sum(np.argmax(pred.logits.data, axis=-1) == labels[i:i + batch]))
        regions += sum(len(s) for s in pred.selected)
    return {"acc": correct / len(images), "mean_regions": regions / len(images)}


def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for row in history:
            w.writerow([row["step"]] + [_fmt(row[k]) for k in METRICS_HEADER[1:]])


def _module_of(name: str) -> str:
    return name.split(".", 1)[0]


def save_checkpoint(model: TextureNet, out_dir) -> Path:
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    modules: dict[str, list[str]] = {}
    for name, p in model.parameters().items():
        modules.setdefault(_module_of(name), []).append(name)
        write_tensor(out / "tensors" / f"{name}.tnsr", p.data)
    cfg = asdict(model.cfg)
    header = {"version": CHECKPOINT_VERSION, "n_classes": model.n_classes,
              "image_size": model.image_size, "config": cfg, "modules": modules}
    (out / "checkpoint.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return out


def load_checkpoint(path) -> TextureNet:
    path = Path(path)
    root = path if path.is_dir() else path.parent
    header = json.loads((root / "checkpoint.json").read_text())
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{root}: unsupported checkpoint version {header.get('version')!r}")
    cfg = ModelConfig(**header["config"])
    model = TextureNet(cfg, header["n_classes"], header["image_size"])
    params = model.parameters()
    names = [n for group in header["modules"].values() for n in group]
    if set(names) != set(params):
        raise ValueError(f"{root}: checkpoint tensors do not match the model layout")
    for n in names:
        arr = read_tensor(root / "tensors" / f"{n}.tnsr")
        if arr.shape != params[n].shape:
            raise ValueError(f"{root}: tensor {n} has shape {arr.shape}, expected {params[n].shape}")
        params[n].data[...] = arr
    return model


def _lr_at(cfg: ModelConfig, step: int) -> float:
    return cfg.lr * cfg.lr_decay ** sum(step >= s for s in cfg.lr_decay_steps)


def _lam_at(cfg: ModelConfig, step: int) -> float:
    if cfg.lam_warmup <= 0:
        return cfg.lam
    return cfg.lam * min(1.0, step / cfg.lam_warmup)


def train(cfg: ModelConfig, dataset: DatasetManifest | tuple[np.ndarray, np.ndarray],
          out_dir=None, n_classes: int | None = None, model: TextureNet | None = None
          ) -> tuple[TextureNet, list[dict]]:
    """Train from scratch (or continue ``model``); returns the model and per-step metrics.

    With ``out_dir`` set, writes ``metrics.csv`` and a checkpoint there.
    """
    if isinstance(dataset, DatasetManifest):
        images, labels = dataset.load("train")
        n_classes = n_classes or len(dataset.classes)
    else:
        images, labels = dataset
        n_classes = n_classes or int(labels.max()) + 1
    n = len(images)
    model = model or TextureNet(cfg, n_classes, images.shape[-1])
    params = model.parameters()
    opt = SGD(params, cfg.lr, cfg.momentum)
    data_rng = np.random.default_rng([cfg.seed, 1])
    gate_rng = np.random.default_rng([cfg.seed, 2])
    steps = cfg.steps if cfg.epochs is None else cfg.epochs * math.ceil(n / cfg.batch)
    history: list[dict] = []
    order = np.empty(0, dtype=np.int64)
    for step in range(steps):
        if len(order) < cfg.batch:
            order = np.concatenate([order, data_rng.permutation(n)])
        idx, order = order[:cfg.batch], order[cfg.batch:]
        batch = images[idx]
        if cfg.hflip:
            flip = data_rng.random(len(idx)) < 0.5
            batch = np.where(flip[:, None, None], batch[:, :, ::-1], batch)
        opt.lr = _lr_at(cfg, step)
        opt.zero_grad()
        with Tape() as tape:
            pred = model.forward(batch, train=True, rng=gate_rng)
            total, ce, reg = loss(pred, labels[idx], _lam_at(cfg, step))
        tape.backward(total)
        if cfg.clip_norm is not None:
            clip_grad_norm(params, cfg.clip_norm)
        with ad.no_tape():
            opt.step()
        row = {"step": step, "loss": total.item(), "ce": ce.item(), "reg": reg.item(),
               "acc": accuracy(pred.logits.data, labels[idx]),
               "mean_regions": float(np.mean([len(s) for s in pred.selected]))}
        if not np.isfinite(row["loss"]):
            log.warning("non-finite loss at step %d", step)
        history.append(row)
        log.debug("step %d loss %.4f acc %.3f regions %.2f", step, row["loss"], row["acc"], row["mean_regions"])
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            write_metrics(history, out / "metrics.csv")
            save_checkpoint(model, out / "checkpoint")
        except OSError as exc:
            raise OSError(f"cannot write training outputs under {out}: {exc}") from exc
    return model, history


def config_fields() -> dict[str, object]:
    return {f.name: f.default for f in fields(ModelConfig)}
