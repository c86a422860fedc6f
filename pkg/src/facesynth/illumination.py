"""Illumination normalization: difference of Gaussians, single-scale retinex and a
large/small-scale decomposition, plus a plain uniform-LBP descriptor for baselines.

All filters take grayscale or RGB arrays (RGB is reduced to luminance) and
return a single-channel ``(H, W, 1)`` image in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

LUMA = np.array([0.299, 0.587, 0.114])
_FLAT = 1e-12


class Method(str, Enum):
    DOG = "dog"
    SSR = "ssr"
    LSSF = "lssf"


@dataclass(frozen=True)
class FilterConfig:
    method: Method = Method.LSSF
    dog_sigmas: tuple = (1.0, 2.0)
    ssr_sigma: float = 15.0
    lssf_smoothing: float = 1.0
    epsilon: float = 0.01

    def __post_init__(self):
        s1, s2 = self.dog_sigmas
        if not (0 < s1 < s2):
            raise ValueError(f"need 0 < sigma1 < sigma2, got {self.dog_sigmas}")
        if self.ssr_sigma <= 0 or self.lssf_smoothing <= 0 or self.epsilon <= 0:
            raise ValueError("sigma, smoothing and epsilon must be positive")


def to_gray(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[:, :, 0] if img.shape[2] == 1 else img[:, :, :3] @ LUMA
    return img


def gaussian(image: np.ndarray, sigma: float) -> np.ndarray:
    # reflect padding keeps the filter symmetric under flips
    return ndimage.gaussian_filter(image, sigma, mode="reflect", truncate=4.0)


def dog_response(image, sigmas=(1.0, 2.0)) -> np.ndarray:
    g = to_gray(image)
    return gaussian(g, sigmas[0]) - gaussian(g, sigmas[1])


def _symmetric_unit(z: np.ndarray) -> np.ndarray:
    """Map a zero-centered field affinely into [0, 1] with zero landing on 0.5."""
    peak = np.max(np.abs(z))
    if peak < _FLAT:
        return np.full(z.shape, 0.5)
    return 0.5 + z / (2 * peak)


def _percentile_unit(r: np.ndarray, lo=1.0, hi=99.0) -> np.ndarray:
    a, b = np.percentile(r, [lo, hi])
    if b - a < _FLAT:
        return np.full(r.shape, 0.5)
    return np.clip((r - a) / (b - a), 0.0, 1.0)


def dog_normalize(image, config: FilterConfig = FilterConfig(Method.DOG)) -> np.ndarray:
    r = dog_response(image, config.dog_sigmas)
    sd = r.std()
    z = (r - r.mean()) / sd if sd > _FLAT * max(1.0, np.abs(r).max()) else np.zeros_like(r)
    return _symmetric_unit(z)[:, :, None]


def ssr_response(image, sigma=15.0, epsilon=0.01) -> np.ndarray:
    g = to_gray(image)
    return np.log(g + epsilon) - np.log(gaussian(g, sigma) + epsilon)


def ssr_normalize(image, config: FilterConfig = FilterConfig(Method.SSR)) -> np.ndarray:
    return _percentile_unit(ssr_response(image, config.ssr_sigma, config.epsilon))[:, :, None]


def wls_smooth(log_image: np.ndarray, strength: float, alpha: float = 1.2, floor: float = 1e-4) -> np.ndarray:
    """Edge-preserving weighted-least-squares smoothing.

    Minimizes ``|u - g|^2 + strength * sum w |grad u|^2`` with weights that
    shrink across strong edges of ``g``.
    """
    h, w = log_image.shape
    n = h * w
    idx = np.arange(n).reshape(h, w)
    wx = strength / (np.abs(np.diff(log_image, axis=1)) ** alpha + floor)
    wy = strength / (np.abs(np.diff(log_image, axis=0)) ** alpha + floor)
    a = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    b = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    wts = np.concatenate([wx.ravel(), wy.ravel()])
    adj = sp.coo_matrix((wts, (a, b)), shape=(n, n))
    adj = adj + adj.T
    deg = np.asarray(adj.sum(axis=1)).ravel()
    system = sp.diags(1.0 + deg) - adj
    return spla.spsolve(system.tocsc(), log_image.ravel()).reshape(h, w)


def lssf_layers(image, config: FilterConfig = FilterConfig()):
    """Split the log image into a large-scale layer and a small-scale residual."""
    logi = np.log(to_gray(image) + config.epsilon)
    large = wls_smooth(logi, config.lssf_smoothing)
    return logi, large, logi - large


def lssf_normalize(image, config: FilterConfig = FilterConfig()) -> np.ndarray:
    """Normalize the large-scale layer by a retinex step and recombine it with the small-scale layer.

    In the log domain the small-scale layer is ``log(I / L)``; the retinex step
    removes the slowly varying part of ``L`` that carries the illumination.
    """
    _, large, small = lssf_layers(image, config)
    large_norm = large - gaussian(large, config.ssr_sigma)
    return _percentile_unit(large_norm + small)[:, :, None]


def normalize(image, config: FilterConfig) -> np.ndarray:
    fn = {Method.DOG: dog_normalize, Method.SSR: ssr_normalize, Method.LSSF: lssf_normalize}
    return fn[Method(config.method)](image, config)


def explained_variance(image, config: FilterConfig) -> float:
    """Share of the log-image variance captured by the large-scale layer."""
    logi, large, small = lssf_layers(image, config)
    total = logi.var()
    return 1.0 if total < _FLAT else 1.0 - small.var() / total


def calibrate_lssf_smoothing(images, config: FilterConfig = FilterConfig(), target: float = 0.9,
                             grid=(0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)) -> float:
    """Largest smoothing strength in ``grid`` whose large-scale layer still explains ``target`` of the variance."""
    best = None
    for lam in sorted(grid):
        cfg = replace(config, lssf_smoothing=lam)
        if min(explained_variance(im, cfg) for im in images) >= target:
            best = lam
    if best is None:
        raise ValueError(f"no smoothing strength in {grid} reaches {target:.0%} explained variance")
    return best


def lbp_histogram(image, grid: int = 4, radius: int = 1, points: int = 8) -> np.ndarray:
    """Concatenated uniform-LBP histograms over a ``grid x grid`` tiling."""
    from skimage.feature import local_binary_pattern

    g = to_gray(image)
    codes = local_binary_pattern(np.rint(g * 255).astype(np.uint8), points, radius, method="uniform")
    n_bins = points + 2
    h, w = g.shape
    feats = []
    for rows in np.array_split(np.arange(h), grid):
        for cols in np.array_split(np.arange(w), grid):
            cell = codes[np.ix_(rows, cols)]
            hist = np.bincount(cell.astype(int).ravel(), minlength=n_bins)[:n_bins]
            feats.append(hist / max(cell.size, 1))
    return np.concatenate(feats)
