"""Seam treatment for pasted rectangles: hard paste and Poisson image editing."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .dataset import Rect

DEFAULT_TOLERANCE = 1e-6


class PoissonConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class CGResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual: float
    restart_residuals: list = field(default_factory=list)


@dataclass
class PoissonResult:
    image: np.ndarray
    converged: bool
    iterations: int
    residual: float
    restart_residuals: list = field(default_factory=list)


def hard_paste(base: np.ndarray, patch: np.ndarray, rect: Rect) -> np.ndarray:
    """Replace the pixels of ``rect`` by ``patch``; everything else is left alone."""
    out = np.array(base, copy=True)
    patch = np.asarray(patch)
    if patch.ndim == 2 and out.ndim == 3:
        patch = patch[:, :, None]
    out[rect.slices] = patch
    return out


def conjugate_gradient(A, b, x0=None, tol=DEFAULT_TOLERANCE, max_iterations=None, restart=25) -> CGResult:
    """Restarted CG for a symmetric positive-definite ``A``.

    Stops once ``||b - A x|| / ||b|| <= tol``.  The iterates are passed
    through minimal-residual smoothing and every cycle restarts from the
    smoothed iterate, so the true residuals recorded in ``restart_residuals``
    do not increase (plain CG only decreases the energy norm of the error).
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    max_iterations = 10 * n if max_iterations is None else max_iterations
    y = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return CGResult(np.zeros(n), True, 0, 0.0, [0.0])

    it = 0
    history = []
    while True:
        s = b - A @ y
        rel = np.linalg.norm(s) / bnorm
        history.append(rel)
        if rel <= tol:
            return CGResult(y, True, it, rel, history)
        if it >= max_iterations:
            return CGResult(y, False, it, rel, history)
        x, r = y.copy(), s.copy()
        p = r.copy()
        rs = r @ r
        for _ in range(min(restart, max_iterations - it)):
            Ap = A @ p
            alpha = rs / (p @ Ap)
            x += alpha * p
            r -= alpha * Ap
            it += 1
            d = r - s
            dd = d @ d
            if dd > 0:
                eta = -(s @ d) / dd
                y += eta * (x - y)
                s += eta * d
            if np.linalg.norm(s) / bnorm <= tol:
                break
            rs_new = r @ r
            p = r + (rs_new / rs) * p
            rs = rs_new


def laplacian_system(height: int, width: int):
    """Dirichlet 5-point Laplacian on an ``height x width`` grid (row-major unknowns).

    Returns the SPD matrix ``4I - adjacency``.
    """
    n = height * width
    idx = np.arange(n).reshape(height, width)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [np.full(n, 4.0)]
    for a, b in ((idx[:, :-1], idx[:, 1:]), (idx[:-1, :], idx[1:, :])):
        a, b = a.ravel(), b.ravel()
        rows += [a, b]
        cols += [b, a]
        vals += [np.full(a.size, -1.0), np.full(a.size, -1.0)]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def poisson_rhs(boundary: np.ndarray, guide: np.ndarray) -> np.ndarray:
    """Right-hand side for one channel.

    ``boundary`` and ``guide`` are the full rectangle (ring included).  The
    unknowns are the interior pixels; the ring supplies Dirichlet values and
    the guide supplies the target Laplacian.
    """
    g = guide
    lap_guide = 4 * g[1:-1, 1:-1] - g[:-2, 1:-1] - g[2:, 1:-1] - g[1:-1, :-2] - g[1:-1, 2:]
    rhs = lap_guide.copy()
    f = boundary
    rhs[0, :] += f[0, 1:-1]
    rhs[-1, :] += f[-1, 1:-1]
    rhs[:, 0] += f[1:-1, 0]
    rhs[:, -1] += f[1:-1, -1]
    return rhs.ravel()


def poisson_blend(base: np.ndarray, patch: np.ndarray, rect: Rect,
                  tolerance: float = DEFAULT_TOLERANCE, max_iterations: int | None = None) -> PoissonResult:
    """Blend ``patch`` into ``rect`` of ``base`` by solving a Poisson equation per channel.

    The outermost ring of ``rect`` keeps the base values and acts as the
    Dirichlet boundary; interior pixels follow the patch gradients.
    """
    if rect.width < 3 or rect.height < 3:
        raise ValueError(f"rectangle {rect} has an empty interior")
    out = np.array(base, dtype=np.float64, copy=True)
    squeeze = out.ndim == 2
    if squeeze:
        out = out[:, :, None]
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim == 2:
        patch = patch[:, :, None]

    h, w = rect.height - 2, rect.width - 2
    A = laplacian_system(h, w)
    max_iterations = 10 * h * w if max_iterations is None else max_iterations
    region = out[rect.slices]
    converged, total_it, worst, history = True, 0, 0.0, []
    for ch in range(out.shape[2]):
        b = poisson_rhs(region[:, :, ch], patch[:, :, ch])
        x0 = patch[1:-1, 1:-1, ch].ravel()
        res = conjugate_gradient(A, b, x0=x0, tol=tolerance, max_iterations=max_iterations)
        region[1:-1, 1:-1, ch] = res.x.reshape(h, w)
        converged &= res.converged
        total_it += res.iterations
        worst = max(worst, res.residual)
        history.append(res.restart_residuals)
    if not converged:
        warnings.warn(f"Poisson solve did not reach tolerance {tolerance} "
                      f"(residual {worst:.3e})", PoissonConvergenceWarning, stacklevel=2)
    out[rect.slices] = region
    if squeeze:
        out = out[:, :, 0]
    return PoissonResult(out, converged, total_it, worst, history)
