"""Brute-force references for checking the fast paths.

Nothing here calls into the modules it validates except :func:`gradcheck`,
which needs the tape for the analytic side of the comparison; its numeric
side is plain central differencing on raw arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np


def finite_diff(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, n) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int
    tol: float = 1e-4
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.3e} at {self.worst_index} "
                f"(analytic {self.analytic:.6e}, numeric {self.numeric:.6e}, {self.checked} entries)")


def gradcheck(loss_fn: Callable[[], "object"], params: Mapping[str, "object"], h: float = 1e-4,
              tol: float = 1e-4, max_entries: int | None = None,
              rng: np.random.Generator | None = None) -> list[GradReport]:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``params`` maps names to leaf tensors that ``loss_fn`` reads. Each leaf is
    perturbed in place. With ``max_entries`` set, a random subset of that many
    coordinates per leaf is probed.
    """
    from .autodiff import Tape, backward

    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)

    rng = rng if rng is not None else np.random.default_rng(0)
    reports = []
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            coords = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        errs, nums = [], []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            nums.append(num)
            errs.append(float(rel_error(analytic.reshape(-1)[i], num)))
        k = int(np.argmax(errs))
        worst = int(coords[k])
        reports.append(GradReport(
            name=name, max_rel_error=errs[k],
            worst_index=tuple(int(v) for v in np.unravel_index(worst, p.shape)),
            analytic=float(analytic.reshape(-1)[worst]), numeric=float(nums[k]),
            checked=len(coords), tol=tol))
    return reports


def naive_conv2d(x: np.ndarray, k: np.ndarray, pad: int = 0, stride: int = 1) -> np.ndarray:
    """Loop-nest cross-correlation; ``x`` is (C_in, H, W), ``k`` is (C_out, C_in, kh, kw)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    cin, H, W = x.shape
    cout, _, kh, kw = k.shape
    xp = np.zeros((cin, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for r in range(ho):
            for c in range(wo):
                acc = 0.0
                for ci in range(cin):
                    for i in range(kh):
                        for j in range(kw):
                            acc += xp[ci, r * stride + i, c * stride + j] * k[o, ci, i, j]
                out[o, r, c] = acc
    return out


def naive_histogram(values: np.ndarray, levels: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    """Normalised hard count of values lying exactly on each level."""
    counts = np.zeros(len(levels))
    for v in np.asarray(values, dtype=np.float64).reshape(-1):
        for m, lv in enumerate(levels):
            if abs(v - lv) <= atol:
                counts[m] += 1
                break
    total = counts.sum()
    return counts / total if total else counts


def dft2(image: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    """Textbook 2-D DFT magnitude and its peak frequency.

    Returns ``(magnitude, (fx, fy))`` where ``magnitude[v, u]`` is the modulus
    at horizontal bin ``u`` and vertical bin ``v`` and the peak is reported in
    signed cycles/pixel. For a real image the spectrum is point-symmetric, so
    the peak is canonicalised to ``fx >= 0``. A complex image (a quadrature
    filter pair as ``real + 1j*imag``) keeps its one-sided peak as found.
    """
    img = np.asarray(image)
    is_complex = np.iscomplexobj(img)
    img = img.astype(np.complex128 if is_complex else np.float64)
    n, n2 = img.shape
    if n != n2:
        raise ValueError(f"dft2 expects a square image, got {img.shape}")
    ys, xs = np.mgrid[0:n, 0:n]
    mag = np.zeros((n, n))
    for v in range(n):
        for u in range(n):
            phase = -2.0 * np.pi * (u * xs + v * ys) / n
            acc = complex(np.sum(img * (np.cos(phase) + 1j * np.sin(phase))))
            mag[v, u] = abs(acc)
    v, u = np.unravel_index(int(np.argmax(mag)), mag.shape)
    fx = (u if u <= n // 2 else u - n) / n
    fy = (v if v <= n // 2 else v - n) / n
    if not is_complex and (fx < 0 or (fx == 0 and fy < 0)):
        fx, fy = -fx, -fy
    return mag, (fx, fy)


def naive_bilinear(image: np.ndarray, box: tuple[float, float, float, float], size: int) -> np.ndarray:
    """Per-pixel bilinear sample of a fractional box, pixel-centre convention, edge clamp."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape
    x0, y0, x1, y1 = box
    out = np.zeros((size, size))
    for r in range(size):
        for c in range(size):
            sy = (y0 + (r + 0.5) * (y1 - y0) / size) * H - 0.5
            sx = (x0 + (c + 0.5) * (x1 - x0) / size) * W - 0.5
            sy = min(max(sy, 0.0), H - 1.0)
            sx = min(max(sx, 0.0), W - 1.0)
            r0, c0 = int(math.floor(sy)), int(math.floor(sx))
            r1, c1 = min(r0 + 1, H - 1), min(c0 + 1, W - 1)
            fy, fx = sy - r0, sx - c0
            out[r, c] = ((1 - fy) * (1 - fx) * img[r0, c0] + (1 - fy) * fx * img[r0, c1]
                         + fy * (1 - fx) * img[r1, c0] + fy * fx * img[r1, c1])
    return out
