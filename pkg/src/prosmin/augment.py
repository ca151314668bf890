"""Stochastic view generation for vectors and square grayscale images.

Every transform takes an explicit ``numpy.random.Generator`` and returns a
new array of the same shape.  ``make_views`` composes them into two global
views and ``n_local`` local views.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .scoring import ConfigError

MODALITIES = ("vector", "image")


@dataclass(frozen=True)
class AugmentConfig:
    modality: str = "vector"
    n_local: int = 2
    # vector pipeline
    noise_std: float = 0.1
    noise_prob: float = 1.0
    mask_fraction: float = 0.0
    scale_range: tuple[float, float] = (0.8, 1.0)
    local_scale_range: tuple[float, float] = (0.5, 0.8)
    local_noise_std: float = 0.2
    # image pipeline
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    # grayscale: only the brightness and contrast entries of the jitter tuple apply
    brightness: float = 0.8
    contrast: float = 0.8
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    crop_scale: tuple[float, float] = (0.8, 1.0)
    local_crop_scale: tuple[float, float] = (0.05, 0.4)
    aspect_range: tuple[float, float] = (3 / 4, 4 / 3)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        if self.n_local < 0:
            raise ConfigError("n_local must be >= 0")
        for name in ("noise_prob", "mask_fraction", "flip_prob", "jitter_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        for name in ("scale_range", "local_scale_range", "blur_sigma", "crop_scale",
                     "local_crop_scale", "aspect_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} must be an increasing pair")

    @classmethod
    def identity(cls, modality: str = "vector", n_local: int = 0) -> AugmentConfig:
        return cls(modality=modality, n_local=n_local, noise_std=0.0, noise_prob=0.0,
                   mask_fraction=0.0, scale_range=(1.0, 1.0), local_scale_range=(1.0, 1.0),
                   local_noise_std=0.0, flip_prob=0.0, jitter_prob=0.0, blur_prob=0.0,
                   crop_scale=(1.0, 1.0), local_crop_scale=(1.0, 1.0), aspect_range=(1.0, 1.0))


@dataclass
class ViewSet:
    global_views: list[np.ndarray]
    local_views: list[np.ndarray]

    def __post_init__(self):
        if len(self.global_views) != 2:
            raise ConfigError("a view set has exactly two global views")

    def all_views(self) -> list[np.ndarray]:
        return [*self.global_views, *self.local_views]


# ---------------------------------------------------------------------------
# vector transforms


def add_noise(x, std: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if std == 0:
        return x.copy()
    return x + std * rng.standard_normal(x.shape)


def random_mask(x, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each coordinate independently with probability ``fraction``."""
    x = np.asarray(x, dtype=np.float64)
    if fraction == 0:
        return x.copy()
    keep = rng.random(x.shape) >= fraction
    return np.where(keep, x, 0.0)


def random_scale(x, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if lo == hi:
        return x * lo
    return x * rng.uniform(lo, hi)


# ---------------------------------------------------------------------------
# image transforms (2-D arrays)


def hflip(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float64)[:, ::-1].copy()


def jitter(img, brightness: float, contrast: float, rng: np.random.Generator) -> np.ndarray:
    """Random brightness then contrast factor, each in [1 − s, 1 + s]."""
    img = np.asarray(img, dtype=np.float64)
    b = rng.uniform(max(0.0, 1 - brightness), 1 + brightness)
    c = rng.uniform(max(0.0, 1 - contrast), 1 + contrast)
    out = img * b
    m = out.mean()
    return (out - m) * c + m


def blur(img, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), sigma=sigma, mode="reflect")


def crop_resize(img, scale: tuple[float, float], aspect: tuple[float, float],
                rng: np.random.Generator) -> np.ndarray:
    """Random crop covering a fraction of the area, bilinearly resized back."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if scale == (1.0, 1.0) and aspect == (1.0, 1.0):
        return img.copy()
    area = h * w * rng.uniform(*scale)
    log_ratio = rng.uniform(np.log(aspect[0]), np.log(aspect[1]))
    ratio = np.exp(log_ratio)
    ch = int(np.clip(round(np.sqrt(area / ratio)), 1, h))
    cw = int(np.clip(round(np.sqrt(area * ratio)), 1, w))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    rows = top + (np.arange(h) + 0.5) * ch / h - 0.5
    cols = left + (np.arange(w) + 0.5) * cw / w - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(img, [rr, cc], order=1, mode="nearest")


# ---------------------------------------------------------------------------


def _vector_view(x, cfg: AugmentConfig, rng, local: bool) -> np.ndarray:
    lo, hi = cfg.local_scale_range if local else cfg.scale_range
    v = random_scale(x, lo, hi, rng)
    v = random_mask(v, cfg.mask_fraction, rng)
    std = cfg.local_noise_std if local else cfg.noise_std
    if cfg.noise_prob > 0 and rng.random() < cfg.noise_prob:
        v = add_noise(v, std, rng)
    return v


def _image_view(img, cfg: AugmentConfig, rng, local: bool) -> np.ndarray:
    v = crop_resize(img, cfg.local_crop_scale if local else cfg.crop_scale,
                    cfg.aspect_range, rng)
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        v = hflip(v)
    if cfg.jitter_prob > 0 and rng.random() < cfg.jitter_prob:
        v = jitter(v, cfg.brightness, cfg.contrast, rng)
    if not local and cfg.blur_prob > 0 and rng.random() < cfg.blur_prob:
        v = blur(v, rng.uniform(*cfg.blur_sigma))
    if cfg.noise_prob > 0 and cfg.noise_std > 0 and rng.random() < cfg.noise_prob:
        v = add_noise(v, cfg.noise_std, rng)
    return v


def make_views(x, cfg: AugmentConfig, rng: np.random.Generator) -> ViewSet:
    """Two global and ``cfg.n_local`` local views of a single input.

    Image inputs may be given as (H, H) arrays or flattened; the views
    keep the input's shape.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.modality == "vector":
        if x.ndim != 1:
            raise ConfigError("vector modality expects a 1-D input")
        fn, shape = _vector_view, x.shape
        base = x
    else:
        side = int(round(np.sqrt(x.size)))
        if side * side != x.size:
            raise ConfigError("image modality expects a square image")
        fn, shape = _image_view, x.shape
        base = x.reshape(side, side)
    glob = [fn(base, cfg, rng, local=False).reshape(shape) for _ in range(2)]
    loc = [fn(base, cfg, rng, local=True).reshape(shape) for _ in range(cfg.n_local)]
    return ViewSet(glob, loc)


def make_batch_views(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Views for every row of ``batch`` (B, D) as one array (B, 2 + L, D).

    Vector inputs are transformed in one vectorised pass; each transform
    matches :func:`make_views` in distribution.  Images are handled item
    by item.
    """
    batch = np.asarray(batch, dtype=np.float64)
    n_views = 2 + cfg.n_local
    if cfg.modality == "image":
        return np.stack([np.stack(make_views(x, cfg, rng).all_views()) for x in batch])
    b, d = batch.shape
    local = np.arange(n_views) >= 2
    lo = np.where(local, cfg.local_scale_range[0], cfg.scale_range[0])
    hi = np.where(local, cfg.local_scale_range[1], cfg.scale_range[1])
    out = batch[:, None, :] * (lo + (hi - lo) * rng.random((b, n_views)))[:, :, None]
    if cfg.mask_fraction > 0:
        out = np.where(rng.random(out.shape) >= cfg.mask_fraction, out, 0.0)
    if cfg.noise_prob > 0:
        std = np.where(local, cfg.local_noise_std, cfg.noise_std)
        on = rng.random((b, n_views)) < cfg.noise_prob
        out = out + (on * std)[:, :, None] * rng.standard_normal(out.shape)
    return out
