"""ROI tiling and stitched prediction, weed heatmaps, prescription grids and spray statistics."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from . import crf as crf_mod
from . import network as net
from .imaging import WEED, gaussian_blur
from .tensor import DTYPE


@dataclass(frozen=True)
class TilePlan:
    tile_size: int
    overlap: int
    width: int
    height: int
    origins: tuple          # (x, y) pairs

    def __len__(self) -> int:
        return len(self.origins)


def _axis_origins(extent: int, tile: int, stride: int) -> list[int]:
    origins = list(range(0, extent - tile + 1, stride))
    if origins[-1] + tile < extent:
        origins.append(extent - tile)   # last tile shifted inward to abut the edge
    return origins


def plan_tiles(width: int, height: int, tile_size: int, overlap: int = 0) -> TilePlan:
    if tile_size <= 0 or tile_size % 32:
        raise ValueError(f"tile size {tile_size} must be a positive multiple of 32")
    if not 0 <= overlap < tile_size:
        raise ValueError("overlap must satisfy 0 <= overlap < tile_size")
    if width < tile_size or height < tile_size:
        raise ValueError(f"ROI {width}x{height} is smaller than tile {tile_size}")
    stride = tile_size - overlap
    xs = _axis_origins(width, tile_size, stride)
    ys = _axis_origins(height, tile_size, stride)
    return TilePlan(tile_size, overlap, width, height, tuple((x, y) for y in ys for x in xs))


def predict_roi(model: net.Model, image: np.ndarray, plan: TilePlan,
                crf_params: crf_mod.CrfParams | None = None, crf_radius: int | None = None,
                batch_size: int = 8):
    """Tile, predict and stitch an ROI; returns ``(mask, probabilities HxWxC)``.

    Overlapping predictions are averaged. Tiles are always evaluated and
    summed in sorted-origin order, so the result does not depend on the
    order of ``plan.origins``.
    """
    h, w = image.shape[:2]
    if (w, h) != (plan.width, plan.height):
        raise ValueError("tile plan was made for different ROI dims")
    if plan.tile_size % 32:
        raise ValueError("tile dims must be divisible by 32")
    c = model.config.num_classes
    t = plan.tile_size
    acc = np.zeros((c, h, w), dtype=np.float64)
    hits = np.zeros((h, w), dtype=np.int64)
    origins = sorted({(int(x), int(y)) for x, y in plan.origins}, key=lambda o: (o[1], o[0]))
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        tiles = np.stack([image[y:y + t, x:x + t] for x, y in chunk]).transpose(0, 3, 1, 2)
        probs = net.forward(model, np.ascontiguousarray(tiles, dtype=DTYPE), "infer").probabilities
        for (x, y), p in zip(chunk, probs):
            acc[:, y:y + t, x:x + t] += p
            hits[y:y + t, x:x + t] += 1
    if np.any(hits == 0):
        raise ValueError("tile plan leaves pixels uncovered")
    probabilities = (acc / hits).transpose(1, 2, 0).astype(DTYPE)
    if crf_params is not None:
        mask = crf_mod.refine(probabilities, image, crf_params, crf_radius)
    else:
        mask = probabilities.argmax(axis=-1).astype(np.uint8)
    return mask, probabilities


def weed_heatmap(mask: np.ndarray, kernel_sigma: float) -> np.ndarray:
    """Weed indicator smoothed by a normalised Gaussian, values in [0, 1]."""
    indicator = (np.asarray(mask) == WEED).astype(np.float64)
    return np.clip(gaussian_blur(indicator, kernel_sigma), 0.0, 1.0)


@dataclass(frozen=True)
class PrescriptionMap:
    grid_px: int
    cells: np.ndarray       # bool (rows, cols), True = spray

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def total(self) -> int:
        return int(self.cells.size)


def prescription(mask: np.ndarray, grid_px: int, min_weed_pixels: int = 1) -> PrescriptionMap:
    """Spray grid over the floored extent; partial edge strips are dropped."""
    if grid_px < 1:
        raise ValueError("grid_px must be >= 1")
    h, w = np.asarray(mask).shape
    rows, cols = h // grid_px, w // grid_px
    if rows == 0 or cols == 0:
        raise ValueError(f"grid {grid_px} px is larger than the {w}x{h} mask")
    weed = (np.asarray(mask)[:rows * grid_px, :cols * grid_px] == WEED)
    counts = weed.reshape(rows, grid_px, cols, grid_px).sum(axis=(1, 3))
    return PrescriptionMap(grid_px, counts >= min_weed_pixels)


@dataclass(frozen=True)
class SprayStats:
    free_weed_grids: int
    weed_grids: int
    spraying_rate: float     # percent, 2 decimals
    saving_rate: float       # percent, 100 - spraying_rate

    @property
    def total(self) -> int:
        return self.free_weed_grids + self.weed_grids


def _percent(part: int, whole: int) -> Decimal:
    return (Decimal(part) * 100 / Decimal(whole)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def spray_stats_from_counts(weed_grids: int, total: int) -> SprayStats:
    if total <= 0:
        raise ValueError("grid is empty")
    if not 0 <= weed_grids <= total:
        raise ValueError("weed grid count out of range")
    spraying = _percent(weed_grids, total)
    return SprayStats(total - weed_grids, weed_grids, float(spraying), float(Decimal(100) - spraying))


def spray_stats(pmap: PrescriptionMap) -> SprayStats:
    return spray_stats_from_counts(int(pmap.cells.sum()), pmap.total)


@dataclass(frozen=True)
class GroundArea:
    side_cm: float
    area_cm2: float

    def __str__(self) -> str:
        return f"{self.side_cm:g}x{self.side_cm:g} cm^2"


def ground_area(grid_px: int, gsd_mm_per_px: float) -> GroundArea:
    """Ground footprint of a square grid cell; computed in decimal so 100 px at 1.78 mm is 17.8 cm."""
    if grid_px <= 0 or gsd_mm_per_px <= 0:
        raise ValueError("grid size and GSD must be positive")
    side = Decimal(int(grid_px)) * Decimal(repr(float(gsd_mm_per_px))) / 10
    return GroundArea(float(side), float(side * side))


@dataclass(frozen=True)
class LinearFit:
    slope: float
    intercept: float
    r_squared: float

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r_squared": self.r_squared}


def fit_line(points) -> LinearFit:
    """Ordinary least squares ``y = slope * x + intercept`` with R^2.

    A constant ``y`` fitted with zero residual gets R^2 = 1.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
        raise ValueError("need at least two (x, y) points")
    x, y = pts[:, 0], pts[:, 1]
    dx = x - x.mean()
    sxx = float((dx * dx).sum())
    if sxx == 0:
        raise ValueError("all x values are equal; slope undefined")
    slope = float((dx * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    ss_res = float((resid * resid).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        r2 = 1.0 if ss_res <= 1e-24 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
        if ss_res <= 1e-12 * ss_tot:
            r2 = 1.0
    return LinearFit(slope, intercept, r2)


def spray_curve(mask: np.ndarray, grids, gsd_mm_per_px: float, min_weed_pixels: int = 1):
    """Saving rate per grid size; returns ``(rows, fit)`` with rows ``(grid_px, side_cm, stats)``."""
    grids = list(grids)
    if len(grids) < 2:
        raise ValueError("need at least two grid sizes")
    rows = []
    for g in grids:
        stats = spray_stats(prescription(mask, g, min_weed_pixels))
        rows.append((g, ground_area(g, gsd_mm_per_px).side_cm, stats))
    fit = fit_line([(side, stats.saving_rate) for _, side, stats in rows])
    return rows, fit
