"""Raster I/O, field-image preprocessing, synthetic scenes and field-to-aerial degradation.

Images are float32 arrays of shape (H, W, 3) with values in [0, 1]; label
masks are uint8 arrays of shape (H, W) with 0 = soil, 1 = crop, 2 = weed.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SOIL, CROP, WEED = 0, 1, 2
CLASS_NAMES = ("soil", "crop", "weed")
PALETTE = np.array([[120, 85, 55], [60, 200, 60], [230, 40, 40]], dtype=np.uint8)


class ImageFormatError(ValueError):
    """File is unreadable, truncated or not a supported raster format."""


# ---------------------------------------------------------------------------
# I/O


def _atomic_save(img: Image.Image, path, fmt: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    img.save(tmp, format=fmt)
    os.replace(tmp, path)


def _format_for(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return "PNG"
    if suffix in (".ppm", ".pnm"):
        return "PPM"
    raise ImageFormatError(f"unsupported image format {suffix!r} (use .png or .ppm)")


def _open(path) -> Image.Image:
    try:
        img = Image.open(path)
        if img.format not in ("PNG", "PPM"):
            raise ImageFormatError(f"{path}: unsupported format {img.format}")
        img.load()
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return img


def load_image(path) -> np.ndarray:
    img = _open(path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.float32) / np.float32(255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    _atomic_save(Image.fromarray(to_uint8(image), "RGB"), path, _format_for(path))


def load_mask(path) -> np.ndarray:
    img = _open(path)
    if img.mode not in ("L", "P"):
        raise ImageFormatError(f"{path}: masks must be single-channel, got mode {img.mode}")
    return np.asarray(img, dtype=np.uint8).copy()


def save_mask(mask: np.ndarray, path) -> None:
    _atomic_save(Image.fromarray(np.asarray(mask, dtype=np.uint8), "L"), path, "PNG")


def save_gray(raster: np.ndarray, path) -> None:
    """Save a [0, 1] single-channel raster as an 8-bit grayscale PNG."""
    _atomic_save(Image.fromarray(to_uint8(raster), "L"), path, "PNG")


def colorize(mask: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(mask)]


# ---------------------------------------------------------------------------
# resampling and filtering


def _align_corners_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def resize_bilinear(image: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Align-corners bilinear resampling; works on (H, W) or (H, W, C) arrays."""
    if new_w < 1 or new_h < 1:
        raise ValueError("target dims must be >= 1")
    h, w = image.shape[:2]
    if (w, h) == (new_w, new_h):
        return image.copy()
    src = image.astype(np.float64)
    ys = _align_corners_coords(h, new_h)
    xs = _align_corners_coords(w, new_w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if src.ndim == 3:
        fy, fx = fy[..., None], fx[..., None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(image.dtype)


def resize_nearest(mask: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    h, w = mask.shape[:2]
    ys = np.clip(np.round(_align_corners_coords(h, new_h)).astype(int), 0, h - 1)
    xs = np.clip(np.round(_align_corners_coords(w, new_w)).astype(int), 0, w - 1)
    return mask[ys][:, xs]


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, radius ceil(3 sigma), edge-clamped; sigma 0 is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return image.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(image.astype(np.float64), k, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, k, axis=1, mode="nearest")
    return out.astype(image.dtype)


def gamma_correct(image: np.ndarray, gamma: float) -> np.ndarray:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if gamma == 1:
        return image.copy()
    return np.power(image.astype(np.float64), gamma).astype(image.dtype)


def laplacian_energy(image: np.ndarray) -> float:
    """Mean absolute Laplacian of the luminance; a crude high-frequency measure."""
    lum = image.astype(np.float64)
    if lum.ndim == 3:
        lum = lum.mean(axis=2)
    return float(np.abs(ndimage.laplace(lum, mode="nearest")).mean())


# ---------------------------------------------------------------------------
# field preprocessing


@dataclass(frozen=True)
class PreprocessParams:
    work_width: int = 96
    work_height: int = 96
    tile_size: int = 64
    crops_per_image: int = 2
    sigma: float | None = None      # None: downsample ratio / 2
    gamma: float = 1.0

    @classmethod
    def paper_scale(cls) -> "PreprocessParams":
        return cls(work_width=1200, work_height=800, tile_size=512)

    def to_dict(self) -> dict:
        return asdict(self)


def preprocess_plan(width: int, height: int, params: PreprocessParams) -> tuple[int, int, float]:
    """Working dims and smoothing sigma for an input of ``width`` x ``height``."""
    if params.tile_size > params.work_width or params.tile_size > params.work_height:
        raise ValueError(f"tile {params.tile_size} larger than resized image "
                         f"{params.work_width}x{params.work_height}")
    sigma = params.sigma
    if sigma is None:
        ratio = max(width / params.work_width, height / params.work_height)
        sigma = ratio / 2.0 if ratio > 1 else 0.0
    return params.work_width, params.work_height, sigma


def random_crop_origins(width: int, height: int, tile: int, count: int, rng) -> list[tuple[int, int]]:
    if tile > width or tile > height:
        raise ValueError(f"tile {tile} does not fit in {width}x{height}")
    xs = rng.integers(0, width - tile + 1, size=count)
    ys = rng.integers(0, height - tile + 1, size=count)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def preprocess_field(image: np.ndarray, mask: np.ndarray, rng, params: PreprocessParams = PreprocessParams()):
    """Resize -> Gaussian smoothing -> gamma -> random tiles; the mask follows nearest-neighbour."""
    h, w = image.shape[:2]
    if mask.shape != (h, w):
        raise ValueError("image and mask dims differ")
    ww, wh, sigma = preprocess_plan(w, h, params)
    img = gaussian_blur(resize_bilinear(image, ww, wh), sigma)
    img = gamma_correct(img, params.gamma)
    msk = resize_nearest(mask, ww, wh)
    t = params.tile_size
    return [(np.ascontiguousarray(img[y:y + t, x:x + t]), np.ascontiguousarray(msk[y:y + t, x:x + t]))
            for x, y in random_crop_origins(ww, wh, t, params.crops_per_image, rng)]


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 128
    crop_rows: int = 3
    plant_spacing: float = 26.0
    plant_radius: tuple = (7.0, 11.0)
    weed_density: float = 0.35
    weed_radius: tuple = (2.5, 5.5)
    weed_site_spacing: int = 16
    soil_contrast: float = 0.07
    seed: int = 0

    def __post_init__(self):
        if self.width % 32 or self.height % 32 or self.width <= 0 or self.height <= 0:
            raise ValueError("scene dims must be positive multiples of 32")
        if not 0.0 <= self.weed_density <= 1.0:
            raise ValueError("weed_density must lie in [0, 1]")
        object.__setattr__(self, "plant_radius", tuple(self.plant_radius))
        object.__setattr__(self, "weed_radius", tuple(self.weed_radius))

    def with_seed(self, seed: int) -> "SceneSpec":
        return SceneSpec(**{**asdict(self), "seed": seed})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _value_noise(rng, h: int, w: int, cell: int) -> np.ndarray:
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.standard_normal((gh, gw))
    return resize_bilinear(grid, (gw - 1) * cell + 1, (gh - 1) * cell + 1)[:h, :w]


def _soil(rng, h: int, w: int, contrast: float) -> np.ndarray:
    base = np.array([0.46, 0.34, 0.23]) * rng.uniform(0.9, 1.1)
    low = _value_noise(rng, h, w, 32) * 0.6 + _value_noise(rng, h, w, 8) * 0.4
    grain = rng.standard_normal((h, w)) * 0.3
    shade = (low + grain) * contrast
    img = base[None, None, :] * (1.0 + shade[..., None] * 2.0)
    pebbles = rng.random((h, w)) < 0.01
    img[pebbles] *= 1.25
    return img


def synth_scene(spec: SceneSpec):
    """Procedural field scene and its label mask.

    Brown textured soil, rows of rosette-shaped crop plants in a light
    yellow-green, and irregular darker blue-green weed blobs scattered at
    random. Overlaps are labelled weed > crop > soil.
    """
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    image = _soil(rng, h, w, spec.soil_contrast)
    mask = np.zeros((h, w), dtype=np.uint8)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # crop rows run horizontally, evenly spaced with jitter
    row_gap = h / max(spec.crop_rows, 1)
    for r in range(spec.crop_rows):
        cy_row = (r + 0.5) * row_gap + rng.uniform(-0.1, 0.1) * row_gap
        x = rng.uniform(0, spec.plant_spacing)
        while x < w + spec.plant_radius[1]:
            cx = x + rng.uniform(-0.15, 0.15) * spec.plant_spacing
            cy = cy_row + rng.uniform(-2.0, 2.0)
            radius = rng.uniform(*spec.plant_radius)
            leaves = int(rng.integers(4, 7))
            phase = rng.uniform(0, 2 * np.pi)
            dy, dx = yy - cy, xx - cx
            rho = np.hypot(dy, dx)
            phi = np.arctan2(dy, dx)
            petal = np.abs(np.cos(leaves / 2.0 * (phi - phase))) ** 0.6
            inside = rho <= radius * (0.35 + 0.65 * petal)
            colour = np.array([0.42, 0.66, 0.22]) * rng.uniform(0.9, 1.1)
            shade = 1.0 - 0.25 * (rho / radius)
            image[inside] = colour[None, :] * shade[inside][:, None]
            mask[inside] = CROP
            x += spec.plant_spacing

    s = spec.weed_site_spacing
    for sy in range(0, h, s):
        for sx in range(0, w, s):
            if rng.random() >= spec.weed_density:
                continue
            cx, cy = sx + rng.uniform(0, s), sy + rng.uniform(0, s)
            radius = rng.uniform(*spec.weed_radius)
            inside = np.zeros((h, w), dtype=bool)
            for _ in range(int(rng.integers(2, 5))):
                ox, oy = rng.normal(0, radius * 0.6, size=2)
                r = radius * rng.uniform(0.5, 1.0)
                inside |= (yy - cy - oy) ** 2 + (xx - cx - ox) ** 2 <= r * r
            colour = np.array([0.13, 0.40, 0.30]) * rng.uniform(0.85, 1.15)
            texture = 1.0 + 0.1 * rng.standard_normal((h, w))
            image[inside] = colour[None, :] * texture[inside][:, None]
            mask[inside] = WEED

    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


# ---------------------------------------------------------------------------
# field -> aerial degradation


@dataclass(frozen=True)
class DomainShiftParams:
    factor: float = 2.5
    sigma: float = 0.8
    gamma: float = 1.1
    shift: tuple = (0.02, 0.0, -0.02)

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("downsample factor must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        object.__setattr__(self, "shift", tuple(self.shift))

    @classmethod
    def identity(cls) -> "DomainShiftParams":
        return cls(1.0, 0.0, 1.0, (0.0, 0.0, 0.0))


def domain_shift(image: np.ndarray, params: DomainShiftParams = DomainShiftParams()) -> np.ndarray:
    """Emulate a low-resolution, blurry aerial view of a field image at the same pixel dims."""
    h, w = image.shape[:2]
    out = image
    if params.factor > 1:
        sw = max(1, int(round(w / params.factor)))
        sh = max(1, int(round(h / params.factor)))
        out = resize_bilinear(resize_bilinear(out, sw, sh), w, h)
    out = gaussian_blur(out, params.sigma)
    out = gamma_correct(out, params.gamma)
    out = out + np.asarray(params.shift, dtype=out.dtype)[None, None, :]
    return np.clip(out, 0.0, 1.0).astype(image.dtype)
