"""Synthetic blur -> downsample -> noise -> JPEG degradation of HQ images.

Images are float HxWxC arrays in [0, 1].  Every stage maps [0, 1] to [0, 1] and
all randomness comes from the recipe seed, so ``degrade`` is a pure function of
``(img, recipe)``.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, asdict

import numpy as np
from PIL import Image
from scipy.ndimage import correlate1d

# sigma values below this are clamped; the kernel is then a delta to ~1e-22
MIN_BLUR_SIGMA = 0.1
KERNEL_TRUNCATE = 4.0


@dataclass(frozen=True)
class DegradationRecipe:
    blur_sigma: float
    down_factor: float
    noise_sigma: float
    jpeg_quality: int
    seed: int = 0

    def __post_init__(self):
        if not self.blur_sigma > 0:
            raise ValueError(f"blur_sigma must be > 0, got {self.blur_sigma}")
        if not self.down_factor >= 1:
            raise ValueError(f"down_factor must be >= 1, got {self.down_factor}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 1 <= int(self.jpeg_quality) <= 100:
            raise ValueError(f"jpeg_quality must be in [1, 100], got {self.jpeg_quality}")

    @classmethod
    def identity(cls, seed: int = 0) -> "DegradationRecipe":
        return cls(blur_sigma=MIN_BLUR_SIGMA, down_factor=1.0, noise_sigma=0.0, jpeg_quality=100, seed=seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RecipeRanges:
    """Uniform sampling ranges for per-example recipes (both ends inclusive)."""

    blur_sigma: tuple[float, float] = (0.2, 10.0)
    down_factor: tuple[float, float] = (1.0, 8.0)
    noise_sigma: tuple[float, float] = (0.0, 0.08)
    jpeg_quality: tuple[int, int] = (30, 90)
    double_pass: bool = False

    def sample(self, rng: np.random.Generator) -> DegradationRecipe:
        return DegradationRecipe(
            blur_sigma=float(rng.uniform(*self.blur_sigma)),
            down_factor=float(rng.uniform(*self.down_factor)),
            noise_sigma=float(rng.uniform(*self.noise_sigma)),
            jpeg_quality=int(rng.integers(self.jpeg_quality[0], self.jpeg_quality[1] + 1)),
            seed=int(rng.integers(0, 2**63 - 1)),
        )


def example_rng(seed: int, index: int, *extra: int) -> np.random.Generator:
    """Independent stream per (seed, example index), so worker order never matters."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index), *map(int, extra)])


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[..., None], True
    if img.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC image, got shape {img.shape}")
    return img, False


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    sigma = max(float(sigma), MIN_BLUR_SIGMA)
    radius = max(1, int(math.ceil(KERNEL_TRUNCATE * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflective (half-sample symmetric) borders."""
    if not sigma > 0:
        raise ValueError(f"blur sigma must be > 0, got {sigma}")
    arr, squeeze = _as_hwc(img)
    k = gaussian_kernel1d(sigma)
    out = correlate1d(arr, k, axis=0, mode="reflect")
    out = correlate1d(out, k, axis=1, mode="reflect")
    out = np.clip(out, 0.0, 1.0)
    return out[..., 0] if squeeze else out


def _bilinear(arr: np.ndarray, out_h: int, out_w: int, scale_y: float, scale_x: float) -> np.ndarray:
    h, w = arr.shape[:2]

    def coords(n_out, n_in, scale):
        src = (np.arange(n_out) + 0.5) * scale - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = coords(out_h, h, scale_y)
    x0, x1, fx = coords(out_w, w, scale_x)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def downsample(img, factor: float) -> np.ndarray:
    """Bilinear reduction to ``floor(dims / factor)`` sampling at pixel centres."""
    if not factor >= 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    arr, squeeze = _as_hwc(img)
    h, w = arr.shape[:2]
    oh, ow = int(math.floor(h / factor)), int(math.floor(w / factor))
    if oh < 1 or ow < 1:
        raise ValueError(f"factor {factor} reduces {h}x{w} below 1 pixel")
    out = _bilinear(arr, oh, ow, factor, factor)
    return out[..., 0] if squeeze else out


def resize(img, height: int, width: int) -> np.ndarray:
    """Bilinear resize to an explicit size (used to upsample back after degradation)."""
    arr, squeeze = _as_hwc(img)
    h, w = arr.shape[:2]
    if (h, w) == (height, width):
        out = arr.copy()
    else:
        out = _bilinear(arr, height, width, h / height, w / width)
    return out[..., 0] if squeeze else out


def add_gaussian_noise(img, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if not sigma >= 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    arr = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return arr.copy()
    return np.clip(arr + rng.normal(0.0, sigma, size=arr.shape), 0.0, 1.0)


def jpeg_compress(img, quality: int) -> np.ndarray:
    """Round-trip through a baseline JPEG codec (Pillow, 4:4:4 chroma)."""
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise ValueError(f"jpeg quality must be in [1, 100], got {quality}")
    arr, squeeze = _as_hwc(img)
    u8 = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    if u8.shape[2] == 1:
        pil = Image.fromarray(u8[..., 0], mode="L")
    elif u8.shape[2] == 3:
        pil = Image.fromarray(u8, mode="RGB")
    else:
        raise ValueError(f"jpeg supports 1 or 3 channels, got {u8.shape[2]}")
    buf = io.BytesIO()
    pil.save(buf, format="JPEG", quality=quality, subsampling=0)
    buf.seek(0)
    with Image.open(buf) as dec:
        out = np.asarray(dec, dtype=np.float64) / 255.0
    if out.ndim == 2:
        out = out[..., None]
    return out[..., 0] if squeeze else out


def _single_pass(arr, recipe: DegradationRecipe, rng) -> np.ndarray:
    out = gaussian_blur(arr, recipe.blur_sigma)
    out = downsample(out, recipe.down_factor)
    out = add_gaussian_noise(out, recipe.noise_sigma, rng)
    out = jpeg_compress(out, recipe.jpeg_quality)
    return resize(out, arr.shape[0], arr.shape[1])


def degrade(img, recipe: DegradationRecipe, double_pass: bool = False) -> np.ndarray:
    """Blur, downsample, add noise, JPEG, then upsample back to the input size.

    ``double_pass`` applies the whole chain twice with the same recipe (second-order
    degradation); off by default.
    """
    arr, squeeze = _as_hwc(img)
    rng = np.random.default_rng(recipe.seed & 0xFFFFFFFFFFFFFFFF)
    out = _single_pass(arr, recipe, rng)
    if double_pass:
        out = _single_pass(out, recipe, rng)
    return out[..., 0] if squeeze else out
