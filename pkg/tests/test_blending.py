import time
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facesynth.blending import (
    PoissonConvergenceWarning, conjugate_gradient, hard_paste, laplacian_system, poisson_blend,
)
from facesynth.dataset import Rect


def dense_oracle(base, patch, rect):
    """Assemble the 5-point system pixel by pixel and solve it by Gaussian elimination."""
    f = base[rect.slices].astype(float)
    g = patch.astype(float)
    H, W = f.shape
    inner = [(r, c) for r in range(1, H - 1) for c in range(1, W - 1)]
    index = {p: k for k, p in enumerate(inner)}
    A = np.zeros((len(inner), len(inner)))
    b = np.zeros(len(inner))
    for (r, c), k in index.items():
        A[k, k] = 4.0
        b[k] = 4 * g[r, c]
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            b[k] -= g[rr, cc]
            if (rr, cc) in index:
                A[k, index[(rr, cc)]] = -1.0
            else:
                b[k] += f[rr, cc]
    u = f.copy()
    u[1:-1, 1:-1] = np.linalg.solve(A, b).reshape(H - 2, W - 2)
    out = base.astype(float).copy()
    out[rect.slices] = u
    return out


def test_hard_paste_examples():
    base = np.random.default_rng(0).random((20, 20))
    rect = Rect(3, 4, 9, 12)
    assert np.array_equal(hard_paste(base, base[rect.slices], rect), base)
    black = np.zeros((20, 20))
    out = hard_paste(black, np.ones((rect.height, rect.width)), rect)
    assert out[rect.y0, rect.x0] - out[rect.y0, rect.x0 - 1] == 1.0
    assert np.array_equal(out[rect.slices], np.ones((rect.height, rect.width)))
    mask = np.ones_like(out, bool)
    mask[rect.slices] = False
    assert np.all(out[mask] == 0)


def test_random_problems_match_dense_oracle():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    for _ in range(50):
        base, patch = rng.random((14, 14)), rng.random((8, 8))
        y0, x0 = rng.integers(0, 7, 2)
        rect = Rect(int(x0), int(y0), int(x0) + 8, int(y0) + 8)
        got = poisson_blend(base, patch, rect)
        assert got.converged
        assert np.max(np.abs(got.image - dense_oracle(base, patch, rect))) <= 1e-5
    assert time.perf_counter() - t0 < 10


@given(st.floats(0, 1), st.integers(3, 12), st.integers(3, 12))
def test_constant_boundary_zero_guidance(k, h, w):
    base = np.full((16, 16), k)
    rect = Rect(1, 2, 1 + w, 2 + h)
    out = poisson_blend(base, np.full((h, w), 0.3), rect).image
    assert np.max(np.abs(out - k)) <= 1e-6


def test_patch_identical_to_base():
    base = np.random.default_rng(2).random((30, 30, 3))
    rect = Rect(5, 6, 20, 24)
    out = poisson_blend(base, base[rect.slices], rect).image
    assert np.max(np.abs(out - base)) <= 1e-6


def test_harmonic_patch_matching_ring_equals_hard_paste():
    # a bilinear function is discrete-harmonic; make the base ring agree with it
    yy, xx = np.mgrid[0:12, 0:15].astype(float)
    harmonic = 0.2 + 0.01 * xx + 0.02 * yy + 0.001 * xx * yy
    base = np.random.default_rng(3).random((20, 20))
    rect = Rect(2, 3, 17, 15)
    base[rect.slices] = harmonic
    base[rect.y0 + 1:rect.y1 - 1, rect.x0 + 1:rect.x1 - 1] = 0.9  # interior differs
    out = poisson_blend(base, harmonic, rect).image
    assert np.max(np.abs(out - hard_paste(base, harmonic, rect))) <= 1e-6


@settings(max_examples=25)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 10))
def test_linearity(seed, k):
    rng = np.random.default_rng(seed)
    base, patch = rng.random((12, 12)), rng.random((9, 7))
    rect = Rect(2, 1, 9, 10)
    a = poisson_blend(k * base, k * patch, rect, tolerance=1e-10).image
    b = k * poisson_blend(base, patch, rect, tolerance=1e-10).image
    assert np.max(np.abs(a - b)) <= 1e-6 * k


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(2, 25), st.integers(2, 25), st.integers(2, 30), st.floats(4, 12))
def test_restart_residuals_decrease(seed, h, w, restart, digits):
    rng = np.random.default_rng(seed)
    res = conjugate_gradient(laplacian_system(h, w), rng.normal(size=h * w) + rng.random(),
                             tol=10 ** -digits, restart=restart)
    hist = res.restart_residuals
    assert res.converged
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_non_convergence_is_flagged():
    rng = np.random.default_rng(5)
    base, patch = rng.random((30, 30)), rng.random((25, 25))
    with pytest.warns(PoissonConvergenceWarning):
        res = poisson_blend(base, patch, Rect(2, 2, 27, 27), max_iterations=3)
    assert not res.converged and res.iterations == 3 and np.all(np.isfinite(res.image))


def test_empty_interior_rejected():
    with pytest.raises(ValueError):
        poisson_blend(np.zeros((5, 5)), np.zeros((2, 5)), Rect(0, 0, 5, 2))


def test_laplacian_is_spd():
    A = laplacian_system(4, 5).toarray()
    assert np.array_equal(A, A.T)
    assert np.linalg.eigvalsh(A).min() > 0


def test_multichannel_blend_is_per_channel():
    rng = np.random.default_rng(6)
    base, patch = rng.random((10, 10, 3)), rng.random((6, 6, 3))
    rect = Rect(2, 2, 8, 8)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        whole = poisson_blend(base, patch, rect).image
    for c in range(3):
        assert np.allclose(whole[:, :, c], poisson_blend(base[:, :, c], patch[:, :, c], rect).image, atol=1e-6)
