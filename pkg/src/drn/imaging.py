"""Image files, float conversion, bicubic resampling and evaluation planes.

Images are ``(height, width, 3)`` arrays: ``uint8`` on the file side and
``float32`` in [0, 1] once decoded. :func:`image_to_tensor` and
:func:`tensor_to_image` cross over to the NCHW layout the network uses.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageIOError(OSError):
    pass


class UnsupportedBitDepthError(ImageIOError):
    pass


# ---------------------------------------------------------------- PNG I/O


def _png_bit_depth(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(29)
    if len(head) < 29 or head[:8] != PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageIOError(f"{path}: not a PNG file")
    return head[24]


def load_png(path) -> np.ndarray:
    """Decode an 8-bit PNG to ``uint8`` RGB. Grayscale is replicated to three
    channels, palettes are expanded and alpha is dropped."""
    try:
        depth = _png_bit_depth(path)
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    if depth == 16:
        raise UnsupportedBitDepthError(f"{path}: 16-bit PNG is not supported")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I", "I;16", "I;16B", "F"):
                raise UnsupportedBitDepthError(f"{path}: unsupported sample format {im.mode}")
            rgb = im.convert("RGB")
    except UnsupportedBitDepthError:
        raise
    except Exception as exc:
        raise ImageIOError(f"cannot decode {path}: {exc}") from exc
    return np.asarray(rgb, dtype=np.uint8).copy()


def save_png(image: np.ndarray, path) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"save_png expects an (h, w, 3) uint8 array, got {image.dtype} {image.shape}")
    try:
        Image.fromarray(image, "RGB").save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def list_pngs(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageIOError(f"{directory} is not a directory")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")


# ---------------------------------------------------------------- conversion


def to_float(image: np.ndarray) -> np.ndarray:
    return image.astype(np.float32) / np.float32(255.0)


def from_float(image: np.ndarray) -> np.ndarray:
    # values are non-negative after the clamp, so floor(v + 0.5) rounds half away from zero
    scaled = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round-trip a float image through 8 bits, as if saved and reloaded."""
    return to_float(from_float(image))


def image_to_tensor(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    return np.ascontiguousarray(image.transpose(2, 0, 1)[None], dtype=dtype)


def tensor_to_image(t: np.ndarray) -> np.ndarray:
    if t.ndim != 4 or t.shape[0] != 1:
        raise ValueError(f"expected a (1, c, h, w) tensor, got {t.shape}")
    return np.ascontiguousarray(t[0].transpose(1, 2, 0), dtype=np.float32)


# ---------------------------------------------------------------- resampling


def keys_cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int, a: float = -0.5, antialias: bool = False) -> np.ndarray:
    """Dense ``(n_out, n_in)`` matrix of Keys-kernel taps for one axis.

    Output sample ``j`` sits at source coordinate ``(j + 0.5) * n_in / n_out - 0.5``;
    taps falling outside the source are folded onto the nearest edge sample.
    With ``antialias`` and ``n_out < n_in`` the kernel is widened by the
    shrink factor (the MATLAB ``imresize`` convention).
    """
    ratio = n_in / n_out
    stretch = ratio if antialias and ratio > 1 else 1.0
    centers = (np.arange(n_out) + 0.5) * ratio - 0.5
    support = 2.0 * stretch
    first = np.floor(centers - support).astype(int) + 1
    taps = int(np.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    wts = keys_cubic((centers[:, None] - idx) / stretch, a) / stretch
    wts /= wts.sum(axis=1, keepdims=True)
    out = np.zeros((n_out, n_in))
    np.add.at(out, (np.repeat(np.arange(n_out), taps), np.clip(idx, 0, n_in - 1).ravel()), wts.ravel())
    return out


def bicubic_resize(image: np.ndarray, out_w: int, out_h: int, antialias: bool = False) -> np.ndarray:
    """Separable Keys (a = -0.5) resampling of an ``(h, w, c)`` float image,
    clamped to [0, 1]."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be >= 1, got {out_w}x{out_h}")
    h, w = image.shape[:2]
    wy = resize_weights(h, out_h, antialias=antialias)
    wx = resize_weights(w, out_w, antialias=antialias)
    src = np.asarray(image, dtype=np.float64)
    out = np.einsum("yh,hwc->ywc", wy, src)
    out = np.einsum("xw,ywc->yxc", wx, out)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def crop_to_multiple(image: np.ndarray, m: int) -> np.ndarray:
    h, w = image.shape[:2]
    return image[: h - h % m, : w - w % m]


def degrade(hr: np.ndarray, scale: int, antialias: bool = False) -> np.ndarray:
    """Bicubic LR counterpart of an HR image whose sides are divisible by
    ``scale``, quantised to 8 bits so on-the-fly and on-disk LR agree."""
    h, w = hr.shape[:2]
    if h % scale or w % scale:
        raise ValueError(f"HR size {w}x{h} is not divisible by {scale}")
    return quantize(bicubic_resize(hr, w // scale, h // scale, antialias=antialias))


# ---------------------------------------------------------------- evaluation planes


def rgb_to_y601(image: np.ndarray) -> np.ndarray:
    """BT.601 luma on the [16, 235] studio scale from RGB in [0, 1]."""
    rgb = np.asarray(image, dtype=np.float64)
    return 65.481 * rgb[..., 0] + 128.553 * rgb[..., 1] + 24.966 * rgb[..., 2] + 16.0


def shave(plane: np.ndarray, border: int) -> np.ndarray:
    h, w = plane.shape[:2]
    if border < 0 or 2 * border >= min(h, w):
        raise ValueError(f"cannot shave {border} px from a {w}x{h} plane")
    if border == 0:
        return plane
    return plane[border:h - border, border:w - border]
