"""Synthetic texture classes, dataset generation, and the on-disk formats.

Tensor files (``.tnsr``) are ``b"TNSR"``, little-endian ``u32`` version (1),
``u32`` ndim, ``ndim`` x ``u32`` extents, then row-major little-endian
``float32`` values. A dataset directory holds one file per sample plus a
``manifest.json``::

    {"version": 1, "classes": [...], "samples": [{"path", "label", "split"}, ...]}

with paths relative to the manifest.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"TNSR"
FORMAT_VERSION = 1
MAX_NDIM = 16
MANIFEST_VERSION = 1
NYQUIST = 0.5

KINDS = ("grating", "speckle", "smooth-gradient", "spotted")


class TensorFormatError(ValueError):
    pass


def write_tensor(path, array) -> None:
    arr = np.asarray(getattr(array, "data", array), dtype="<f4")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(path) -> np.ndarray:
    """Load a ``.tnsr`` file as a float64 array."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12:
        raise TensorFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if ndim == 0 or ndim > MAX_NDIM:
        raise TensorFormatError(f"{path}: ndim {ndim} out of range")
    off = 12 + 4 * ndim
    if len(raw) < off:
        raise TensorFormatError(f"{path}: truncated extents")
    shape = struct.unpack_from(f"<{ndim}I", raw, 12)
    count = 1
    for n in shape:
        if n == 0:
            raise TensorFormatError(f"{path}: zero extent in {shape}")
        count *= n
        if count * 4 > len(raw):
            raise TensorFormatError(f"{path}: extents {shape} exceed file size")
    if len(raw) != off + 4 * count:
        raise TensorFormatError(f"{path}: expected {off + 4 * count} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=off, count=count).astype(np.float64).reshape(shape)


@dataclass(frozen=True)
class TextureClassSpec:
    class_id: int
    name: str
    kind: str
    freq_band: tuple[float, float]
    orientation: tuple[float, float] = (0.0, np.pi)
    noise: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown pattern kind {self.kind!r}")
        lo, hi = self.freq_band
        if not 0.0 <= lo <= hi < NYQUIST:
            raise ValueError(f"frequency band {self.freq_band} must lie in [0, 0.5)")


def default_classes() -> list[TextureClassSpec]:
    return [
        TextureClassSpec(0, "low-grating", "grating", (0.05, 0.10), noise=0.08),
        TextureClassSpec(1, "high-grating", "grating", (0.30, 0.45), noise=0.08),
        TextureClassSpec(2, "speckle", "speckle", (0.15, 0.30), noise=0.08),
        TextureClassSpec(3, "gradient", "smooth-gradient", (0.0, 0.10), noise=0.08),
    ]


def _band_noise(rng, size, band):
    f = np.fft.fftfreq(size)
    radius = np.hypot(f[:, None], f[None, :])
    white = rng.standard_normal((size, size))
    keep = (radius >= band[0]) & (radius <= band[1])
    field_ = np.real(np.fft.ifft2(np.fft.fft2(white) * keep))
    return field_ / (field_.std() + 1e-12)


def gen_sample(spec: TextureClassSpec, seed, size: int = 32) -> np.ndarray:
    """One ``size x size`` image in [0, 1]; the same seed gives the same image."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = rng.uniform(*spec.orientation)
    freq = rng.uniform(*spec.freq_band)
    along = xs * np.cos(theta) + ys * np.sin(theta)
    if spec.kind == "grating":
        phase = rng.uniform(0.0, 2.0 * np.pi)
        img = 0.5 + 0.4 * np.cos(2.0 * np.pi * freq * along + phase)
    elif spec.kind == "speckle":
        img = 0.5 + 0.2 * _band_noise(rng, size, spec.freq_band)
    elif spec.kind == "smooth-gradient":
        t = (along - along.min()) / (along.max() - along.min())
        a, b = sorted(rng.uniform(0.1, 0.9, size=2))
        img = a + (b - a) * t
    else:  # spotted
        period = 1.0 / max(freq, 1.0 / size)
        img = np.full((size, size), 0.2)
        n = int(np.ceil(size / period)) + 1
        radius = period / 4.0
        for i in range(n):
            for j in range(n):
                cy = i * period + rng.uniform(-0.15, 0.15) * period
                cx = j * period + rng.uniform(-0.15, 0.15) * period
                img += 0.7 * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * radius ** 2))
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_seed(master_seed: int, class_id: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, class_id, index])


@dataclass
class SampleEntry:
    path: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    classes: list[str]
    samples: list[SampleEntry]
    version: int = MANIFEST_VERSION
    root: Path = field(default=Path("."), compare=False, repr=False)

    def to_json(self) -> dict:
        return {"version": self.version, "classes": list(self.classes),
                "samples": [asdict(s) for s in self.samples]}

    def split(self, name: str) -> list[SampleEntry]:
        return [s for s in self.samples if s.split == name]

    def load(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        """Images ``(n, S, S)`` and labels for one split, in manifest order."""
        entries = self.split(split)
        if not entries:
            raise ValueError(f"manifest has no {split!r} samples")
        images = np.stack([read_tensor(self.root / e.path) for e in entries])
        return images, np.array([e.label for e in entries], dtype=np.int64)


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    samples = []
    for s in doc["samples"]:
        if s["split"] not in ("train", "test"):
            raise ValueError(f"{path}: bad split {s['split']!r}")
        if not 0 <= int(s["label"]) < len(doc["classes"]):
            raise ValueError(f"{path}: label {s['label']} out of range")
        if not (path.parent / s["path"]).is_file():
            raise FileNotFoundError(f"{path}: missing sample file {s['path']}")
        samples.append(SampleEntry(s["path"], int(s["label"]), s["split"]))
    return DatasetManifest(list(doc["classes"]), samples, root=path.parent)


def gen_dataset(specs: Sequence[TextureClassSpec], per_class: int, split_ratio: float, out_dir,
                seed: int, size: int = 32) -> DatasetManifest:
    """Write ``per_class`` samples of every class plus ``manifest.json`` into ``out_dir``.

    Samples are interleaved across classes and the first
    ``round(total * split_ratio)`` go to the training split.
    """
    if not 0.0 < split_ratio <= 1.0:
        raise ValueError(f"split ratio {split_ratio} not in (0, 1]")
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    total = per_class * len(specs)
    n_train = int(round(total * split_ratio))
    entries = []
    k = 0
    for i in range(per_class):
        for spec in specs:
            img = gen_sample(spec, sample_seed(seed, spec.class_id, i), size)
            rel = f"samples/c{spec.class_id}_{i:04d}.tnsr"
            write_tensor(out / rel, img)
            entries.append(SampleEntry(rel, spec.class_id, "train" if k < n_train else "test"))
            k += 1
    manifest = DatasetManifest([s.name for s in specs], entries, root=out)
    write_manifest(manifest, out / "manifest.json")
    return manifest
