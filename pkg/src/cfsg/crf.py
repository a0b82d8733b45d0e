"""Fully connected CRF with Gaussian edge potentials and Potts compatibility.

Energy of a labelling ``x``::

    E(x) = sum_i U_i(x_i) + sum_{i<j} [x_i != x_j] k(i, j)
    k(i, j) = w1 exp(-|p_i-p_j|^2 / 2 sa^2 - |q_i-q_j|^2 / 2 sb^2)
            + w2 exp(-|p_i-p_j|^2 / 2 sr^2)

with ``U = -ln P`` from the network, ``p`` pixel positions (x, y) and ``q``
RGB colours in [0, 1]. Inference is naive mean field over all pixel pairs;
a truncated-window variant only sums over neighbours within a radius.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

PROB_FLOOR = 1e-8
_EXACT_CACHE_LIMIT = 4096   # pixels; above this the kernel matrix is rebuilt in row blocks


@dataclass(frozen=True)
class CrfParams:
    w1: float = 10.0
    w2: float = 3.0
    sigma_alpha: float = 40.0
    sigma_beta: float = 0.13
    sigma_rho: float = 3.0
    iterations: int = 5

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("kernel weights must be non-negative")
        if min(self.sigma_alpha, self.sigma_beta, self.sigma_rho) <= 0:
            raise ValueError("kernel scales must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def unary_from_probabilities(probabilities: np.ndarray) -> np.ndarray:
    """(H, W, L) probabilities -> (H, W, L) potentials ``-ln max(p, 1e-8)``."""
    return -np.log(np.maximum(np.asarray(probabilities, dtype=np.float64), PROB_FLOOR))


def _features(image: np.ndarray):
    h, w = image.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    col = np.asarray(image, dtype=np.float64).reshape(h * w, -1)
    return pos, col


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def _kernel_block(pos, col, rows: slice, params: CrfParams) -> np.ndarray:
    dp = _sqdist(pos[rows], pos)
    k = np.zeros_like(dp)
    if params.w1:
        dq = _sqdist(col[rows], col)
        k += params.w1 * np.exp(-dp / (2 * params.sigma_alpha ** 2) - dq / (2 * params.sigma_beta ** 2))
    if params.w2:
        k += params.w2 * np.exp(-dp / (2 * params.sigma_rho ** 2))
    idx = np.arange(rows.start, rows.stop)
    k[idx - rows.start, idx] = 0.0
    return k


def pairwise_kernel(image: np.ndarray, params: CrfParams) -> np.ndarray:
    """Dense N x N kernel matrix (zero diagonal) for small images."""
    pos, col = _features(image)
    return _kernel_block(pos, col, slice(0, pos.shape[0]), params)


def _check(unary: np.ndarray, image: np.ndarray) -> None:
    if unary.ndim != 3 or image.shape[:2] != unary.shape[:2]:
        raise ValueError(f"unary {unary.shape} and image {image.shape} dims disagree")
    if not np.all(np.isfinite(unary)):
        raise ValueError("unary potentials must be finite")


def energy(labeling: np.ndarray, unary: np.ndarray, image: np.ndarray, params: CrfParams) -> float:
    _check(unary, image)
    labeling = np.asarray(labeling)
    if labeling.shape != unary.shape[:2]:
        raise ValueError("labeling dims disagree with unary")
    flat = labeling.ravel().astype(np.intp)
    u = unary.reshape(-1, unary.shape[2])
    total = float(u[np.arange(flat.size), flat].sum())
    if params.w1 == 0 and params.w2 == 0:
        return total
    pos, col = _features(image)
    n = flat.size
    block = max(1, min(n, 2 ** 22 // max(n, 1)))
    pair = 0.0
    for start in range(0, n, block):
        rows = slice(start, min(n, start + block))
        k = _kernel_block(pos, col, rows, params)
        differ = flat[rows][:, None] != flat[None, :]
        pair += float((k * differ).sum())
    return total + 0.5 * pair   # each unordered pair counted twice above


def _normalise(logq: np.ndarray) -> np.ndarray:
    logq = logq - logq.max(axis=-1, keepdims=True)
    q = np.exp(logq)
    return q / q.sum(axis=-1, keepdims=True)


def _messages_exact(q, pos, col, params, cached):
    # Potts: sum_{l'} mu(l, l') Q_j(l') = 1 - Q_j(l)
    n = q.shape[0]
    if cached is not None:
        return cached.sum(1)[:, None] - cached @ q
    out = np.empty_like(q)
    block = max(1, 2 ** 22 // n)
    for start in range(0, n, block):
        rows = slice(start, min(n, start + block))
        k = _kernel_block(pos, col, rows, params)
        out[rows] = k.sum(1)[:, None] - k @ q
    return out


def _messages_window(q, image, params, radius):
    h, w = image.shape[:2]
    img = np.asarray(image, dtype=np.float64)
    qmap = q.reshape(h, w, -1)
    out = np.zeros_like(qmap)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            d2 = dy * dy + dx * dx
            if d2 > radius * radius:
                continue
            ys = slice(max(0, -dy), min(h, h - dy))
            xs = slice(max(0, -dx), min(w, w - dx))
            yt = slice(max(0, dy), min(h, h + dy))
            xt = slice(max(0, dx), min(w, w + dx))
            k = 0.0
            if params.w1:
                dq = ((img[ys, xs] - img[yt, xt]) ** 2).sum(-1)
                k = params.w1 * np.exp(-d2 / (2 * params.sigma_alpha ** 2) - dq / (2 * params.sigma_beta ** 2))
            if params.w2:
                k = k + params.w2 * math.exp(-d2 / (2 * params.sigma_rho ** 2))
            k = np.broadcast_to(k, (ys.stop - ys.start, xs.stop - xs.start))
            out[ys, xs] += k[..., None] * (1.0 - qmap[yt, xt])
    return out.reshape(q.shape)


def mean_field_infer(unary: np.ndarray, image: np.ndarray, params: CrfParams = CrfParams(),
                     radius: int | None = None, on_iteration=None):
    """Mean-field marginals and the argmax labelling.

    ``unary`` is (H, W, L), ``image`` (H, W, 3). With ``radius=None`` every
    pixel pair interacts (O(N^2 L)); an integer radius restricts messages to
    a disc of that many pixels. ``on_iteration(k, Q)`` is called after each
    update, mainly for tests.
    """
    _check(unary, image)
    h, w, labels = unary.shape
    u = unary.reshape(-1, labels).astype(np.float64)
    q = _normalise(-u)
    if params.iterations and (params.w1 or params.w2):
        pos, col = _features(image)
        cached = None
        if radius is None and pos.shape[0] <= _EXACT_CACHE_LIMIT:
            cached = _kernel_block(pos, col, slice(0, pos.shape[0]), params)
        for it in range(params.iterations):
            if radius is None:
                msg = _messages_exact(q, pos, col, params, cached)
            else:
                msg = _messages_window(q, image, params, radius)
            q = _normalise(-u - msg)
            if on_iteration is not None:
                on_iteration(it, q.reshape(h, w, labels))
    q = q.reshape(h, w, labels)
    return q, q.argmax(axis=-1).astype(np.uint8)


def default_radius(params: CrfParams) -> int:
    """Truncation radius 3 sigma of the widest spatial kernel in use."""
    scales = []
    if params.w1:
        scales.append(params.sigma_alpha)
    if params.w2:
        scales.append(params.sigma_rho)
    return int(math.ceil(3 * max(scales, default=0.0)))


def refine(probabilities: np.ndarray, image: np.ndarray, params: CrfParams = CrfParams(),
           radius: int | None = None) -> np.ndarray:
    """CRF-refined labelling of an (H, W, L) probability raster."""
    probabilities = np.asarray(probabilities)
    if probabilities.shape[:2] != image.shape[:2]:
        raise ValueError("probability raster and image dims disagree")
    _, labels = mean_field_infer(unary_from_probabilities(probabilities), image, params, radius)
    return labels
