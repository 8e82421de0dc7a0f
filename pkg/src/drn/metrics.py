"""PSNR / SSIM, dataset evaluation and x8 self-ensemble inference."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.ndimage import correlate1d

from . import imaging
from .tensor import dihedral, dihedral_inverse

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DYNAMIC_RANGE = 255.0

Upscaler = Callable[[np.ndarray], np.ndarray]


class DatasetError(Exception):
    pass


def _check_planes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"plane dimensions differ: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_planes(a, b)
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return PSNR_CAP
    return float(10.0 * np.log10(DYNAMIC_RANGE ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable correlation; slicing keeps only windows fully inside the plane
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_planes(a, b)
    if a.ndim != 2 or min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs a 2-D plane of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}")
    c1 = (SSIM_K1 * DYNAMIC_RANGE) ** 2
    c2 = (SSIM_K2 * DYNAMIC_RANGE) ** 2
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over every fully-interior 11x11 Gaussian window (sigma 1.5)."""
    return float(ssim_map(a, b).mean())


# ---------------------------------------------------------------- evaluation


@dataclass
class ImageScore:
    name: str
    psnr: float
    ssim: float


@dataclass
class EvalResult:
    images: list[ImageScore] = field(default_factory=list)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([s.psnr for s in self.images])) if self.images else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([s.ssim for s in self.images])) if self.images else float("nan")

    def report(self) -> str:
        lines = [f"{s.name} {s.psnr:.4f} {s.ssim:.6f}" for s in self.images]
        lines.append(f"MEAN {self.mean_psnr:.4f} {self.mean_ssim:.6f}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps({
            "images": [{"name": s.name, "psnr": s.psnr, "ssim": s.ssim} for s in self.images],
            "mean": {"psnr": self.mean_psnr, "ssim": self.mean_ssim},
            "failures": self.failures,
        }, indent=2)


def score_pair(sr: np.ndarray, hr: np.ndarray, scale: int, plane: str = "y") -> tuple[float, float]:
    """PSNR/SSIM of two float RGB images after the plane conversion and a
    ``scale``-pixel border shave."""
    sr = np.clip(sr, 0.0, 1.0)
    if plane == "y":
        a = imaging.shave(imaging.rgb_to_y601(sr), scale)
        b = imaging.shave(imaging.rgb_to_y601(hr), scale)
        return psnr(a, b), ssim(a, b)
    if plane == "rgb":
        a = imaging.shave(np.asarray(sr, np.float64) * 255.0, scale)
        b = imaging.shave(np.asarray(hr, np.float64) * 255.0, scale)
        return psnr(a, b), float(np.mean([ssim(a[..., c], b[..., c]) for c in range(3)]))
    raise ValueError(f"unknown plane {plane!r}")


def bicubic_upscaler(scale: int) -> Upscaler:
    def upscale(lr):
        h, w = lr.shape[:2]
        return imaging.bicubic_resize(lr, w * scale, h * scale)
    return upscale


def model_upscaler(model, use_self_ensemble: bool = False) -> Upscaler:
    def upscale(lr):
        x = imaging.image_to_tensor(lr, model.dtype)
        y = self_ensemble(model, x) if use_self_ensemble else model(x)
        return imaging.tensor_to_image(y)
    return upscale


def evaluate(upscale: Upscaler, hr_dir, scale: int, lr_dir=None, plane: str = "y",
             antialias: bool = False) -> EvalResult:
    """Score ``upscale`` on every PNG in ``hr_dir``, in filename order.

    Each HR image is cropped to a multiple of ``scale``. Its LR partner is
    read from ``lr_dir`` under the same name, or generated by bicubic
    degradation. Images that fail are recorded in ``failures`` and left out
    of the means.
    """
    paths = imaging.list_pngs(hr_dir)
    if not paths:
        raise DatasetError(f"no PNG images in {hr_dir}")
    result = EvalResult()
    for path in paths:
        try:
            hr = imaging.crop_to_multiple(imaging.to_float(imaging.load_png(path)), scale)
            if lr_dir is not None:
                lr = imaging.to_float(imaging.load_png(Path(lr_dir) / path.name))
            else:
                lr = imaging.degrade(hr, scale, antialias=antialias)
            sr = upscale(lr)
            if sr.shape != hr.shape:
                raise ValueError(f"upscaled shape {sr.shape} != HR shape {hr.shape}")
            p, s = score_pair(sr, hr, scale, plane)
        except Exception as exc:  # reported per image, excluded from the means
            log.warning("evaluation of %s failed: %s", path.name, exc)
            result.failures[path.name] = str(exc)
            continue
        result.images.append(ImageScore(path.stem, p, s))
    return result


# ---------------------------------------------------------------- self-ensemble


def self_ensemble(model, x: np.ndarray) -> np.ndarray:
    """Average of ``model`` over the 8 dihedral transforms of ``x``, each
    output mapped back before averaging.

    The average is taken in float32 with a balanced pairwise tree, so eight
    identical outputs average back to exactly that output.
    """
    outs = [dihedral_inverse(model(dihedral(x, k)), k).astype(np.float32) for k in range(8)]
    while len(outs) > 1:
        outs = [outs[i] + outs[i + 1] for i in range(0, len(outs), 2)]
    return outs[0] / np.float32(8)
