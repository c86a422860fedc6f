"""Metric learning for verification and identification.

Mahalanobis and bilinear forms, Fisher LDA, Joint Bayesian (identity plus
within-person Gaussian model fitted by EM) and PCA.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.linalg

MODEL_MAGIC = b"FSMM"
MODEL_VERSION = 1


class MetricKind(str, Enum):
    MAHALANOBIS = "mahalanobis"
    BILINEAR = "bilinear"
    LDA = "lda"
    JOINT_BAYESIAN = "jb"


class DegenerateDataError(ValueError):
    pass


@dataclass
class MetricModel:
    kind: MetricKind
    matrices: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return next(iter(self.matrices.values())).shape[0]


def _check_pair(x, y, m):
    x, y = np.asarray(x, float), np.asarray(y, float)
    if x.shape != y.shape or x.shape[-1] != m.shape[0]:
        raise ValueError(f"dimension mismatch: {x.shape}, {y.shape}, matrix {m.shape}")
    return x, y


def mahalanobis_distance(x, y, A) -> float:
    A = np.asarray(A, float)
    x, y = _check_pair(x, y, A)
    d = x - y
    return float(max(d @ A @ d, 0.0))


def bilinear_score(x, y, B) -> float:
    B = np.asarray(B, float)
    x, y = _check_pair(x, y, B)
    return float(x @ B @ y)


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def psd_project(m: np.ndarray, floor: float = 0.0) -> np.ndarray:
    vals, vecs = np.linalg.eigh(symmetrize(m))
    out = (vecs * np.maximum(vals, floor)) @ vecs.T
    return symmetrize(out)


# ------------------------------------------------------------------------ LDA


def scatter_matrices(features, labels):
    X = np.asarray(features, float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    mean = X.mean(axis=0)
    d = X.shape[1]
    sw = np.zeros((d, d))
    sb = np.zeros((d, d))
    for c in classes:
        Xc = X[labels == c]
        mc = Xc.mean(axis=0)
        diff = Xc - mc
        sw += diff.T @ diff
        sb += len(Xc) * np.outer(mc - mean, mc - mean)
    return sw, sb, classes


def fit_lda(features, labels, out_dim: int, reg: float = 1e-4) -> MetricModel:
    """Solve ``S_b w = lambda (S_w + gamma I) w`` and keep the leading ``out_dim`` directions.

    ``gamma = reg * trace(S_w) / d``.
    """
    sw, sb, classes = scatter_matrices(features, labels)
    if classes.size < 2:
        raise DegenerateDataError("LDA needs at least 2 classes")
    if out_dim > classes.size - 1:
        raise ValueError(f"out_dim {out_dim} exceeds classes - 1 = {classes.size - 1}")
    d = sw.shape[0]
    if out_dim > d:
        raise ValueError(f"out_dim {out_dim} exceeds feature dim {d}")
    gamma = reg * np.trace(sw) / d
    if gamma <= 0:
        gamma = reg
    if np.linalg.matrix_rank(sw) < d:
        warnings.warn("within-class scatter is singular; relying on regularization", RuntimeWarning, stacklevel=2)
    vals, vecs = scipy.linalg.eigh(sb, sw + gamma * np.eye(d))
    order = np.argsort(vals)[::-1][:out_dim]
    W = vecs[:, order]
    mean = np.asarray(features, float).mean(axis=0)
    return MetricModel(MetricKind.LDA, {"projection": W, "eigenvalues": vals[order], "mean": mean})


def lda_transform(model: MetricModel, features) -> np.ndarray:
    X = preproject(model, features)
    return (X - model.matrices["mean"]) @ model.matrices["projection"]


def lda_mahalanobis_matrix(model: MetricModel) -> np.ndarray:
    W = model.matrices["projection"]
    return W @ W.T


# --------------------------------------------------------------- Joint Bayesian


def _groups(X, labels):
    labels = np.asarray(labels)
    _, inverse = np.unique(labels, return_inverse=True)
    return [X[inverse == g] for g in range(inverse.max() + 1)]


class _SizeBuckets:
    """Subjects bucketed by image count: per-bucket means and pooled deviation scatter."""

    def __init__(self, groups):
        self.n_subjects = len(groups)
        self.n_images = sum(G.shape[0] for G in groups)
        by_size = {}
        for G in groups:
            by_size.setdefault(G.shape[0], []).append(G)
        self.buckets = []
        for m, gs in sorted(by_size.items()):
            means = np.stack([G.mean(axis=0) for G in gs])
            dev = np.concatenate([G - G.mean(axis=0) for G in gs])
            self.buckets.append((m, means, dev.T @ dev))
        self.dev_scatter = sum(b[2] for b in self.buckets)


def jb_log_likelihood(groups, s_mu, s_eps) -> float:
    """Exact marginal log-likelihood of centered data grouped by identity.

    For a subject with m images the stacked covariance is
    ``I (x) S_eps + 11^T (x) S_mu``: the image mean has covariance
    ``S_eps + m S_mu`` (scaled by 1/m) and the deviations live in the
    (m-1)-dimensional orthogonal complement with covariance ``S_eps``.  The
    change of basis is orthonormal, so there is no Jacobian term.
    """
    data = groups if isinstance(groups, _SizeBuckets) else _SizeBuckets(groups)
    d = s_mu.shape[0]
    c_eps = scipy.linalg.cho_factor(s_eps)
    logdet_eps = 2 * np.log(np.diag(c_eps[0])).sum()
    total = -0.5 * np.trace(scipy.linalg.cho_solve(c_eps, data.dev_scatter))
    for m, means, _ in data.buckets:
        k = means.shape[0]
        c_m = scipy.linalg.cho_factor(s_eps + m * s_mu)
        logdet_m = 2 * np.log(np.diag(c_m[0])).sum()
        between = m * np.einsum("ij,ji->", means, scipy.linalg.cho_solve(c_m, means.T))
        total += -0.5 * (k * (m * d * np.log(2 * np.pi) + (m - 1) * logdet_eps + logdet_m) + between)
    return float(total)


@dataclass
class JBFit:
    model: MetricModel
    log_likelihood: list
    iterations: int
    converged: bool


def fit_joint_bayesian(features, labels, max_em_iterations: int = 100, tolerance: float = 1e-6,
                       return_trace: bool = False):
    """EM for ``x = mu + eps`` with ``mu ~ N(0, S_mu)`` per identity and ``eps ~ N(0, S_eps)`` per image.

    Starts from the between/within-class scatter and stops when the relative
    parameter change drops below ``tolerance``.
    """
    X = np.asarray(features, float)
    mean = X.mean(axis=0)
    Xc = X - mean
    groups = _groups(Xc, labels)
    d = X.shape[1]
    if not any(G.shape[0] >= 2 for G in groups):
        raise DegenerateDataError("within-person covariance needs a subject with at least 2 images")
    if np.any(Xc.var(axis=0) == 0):
        raise DegenerateDataError("zero-variance feature dimension")
    data = _SizeBuckets(groups)

    all_means = np.concatenate([b[1] for b in data.buckets])
    s_mu = psd_project(all_means.T @ all_means / data.n_subjects)
    dof = data.n_images - data.n_subjects
    s_eps = _full_rank(psd_project(data.dev_scatter / max(dof, 1)))

    trace = [jb_log_likelihood(data, s_mu, s_eps)]
    converged = False
    it = 0
    for it in range(1, max_em_iterations + 1):
        new_mu = np.zeros((d, d))
        new_eps = data.dev_scatter.copy()
        for m, means, _ in data.buckets:
            k = means.shape[0]
            # posterior of the identity variable (Woodbury form, valid for singular S_mu)
            gain = np.linalg.solve(s_mu + s_eps / m, s_mu).T
            post_cov = symmetrize(s_mu - gain @ s_mu)
            post_means = means @ gain.T
            new_mu += post_means.T @ post_means + k * post_cov
            # sum_k (x_k - mu)(x_k - mu)^T = deviations + m (mean - mu)(mean - mu)^T
            r = means - post_means
            new_eps += m * (r.T @ r) + k * m * post_cov
        new_mu = psd_project(new_mu / data.n_subjects)
        new_eps = _full_rank(psd_project(new_eps / data.n_images))
        change = max(np.linalg.norm(new_mu - s_mu) / max(np.linalg.norm(s_mu), 1e-300),
                     np.linalg.norm(new_eps - s_eps) / max(np.linalg.norm(s_eps), 1e-300))
        s_mu, s_eps = new_mu, new_eps
        trace.append(jb_log_likelihood(data, s_mu, s_eps))
        if change < tolerance:
            converged = True
            break
    model = MetricModel(MetricKind.JOINT_BAYESIAN, {"s_mu": s_mu, "s_eps": s_eps, "mean": mean})
    model.matrices.update(jb_score_matrices(s_mu, s_eps))
    if return_trace:
        return JBFit(model, trace, it, converged)
    return model


def _full_rank(s: np.ndarray) -> np.ndarray:
    vals = np.linalg.eigvalsh(s)
    floor = 1e-10 * max(vals.max(), 1e-300)
    if vals.min() < floor:
        s = s + (floor - min(vals.min(), 0.0)) * np.eye(s.shape[0])
    return symmetrize(s)


def jb_score_matrices(s_mu, s_eps) -> dict:
    """Closed-form ``G, H, const`` with ``score = x'Gx + y'Gy + 2x'Hy + const``.

    Uses the block inverse of the same-identity covariance
    ``[[S_mu + S_eps, S_mu], [S_mu, S_mu + S_eps]]``:
    ``F = S_eps^-1`` and ``Q = -(2 S_mu + S_eps)^-1 S_mu S_eps^-1`` give the
    diagonal block ``F + Q`` and the off-diagonal block ``Q``.
    """
    F_ = np.linalg.inv(s_eps)
    Q = -np.linalg.solve(2 * s_mu + s_eps, s_mu) @ F_
    T = np.linalg.inv(s_mu + s_eps)
    G = -0.5 * ((F_ + Q) - T)
    H = -0.5 * Q
    _, logdet_same = np.linalg.slogdet(np.block([[s_mu + s_eps, s_mu], [s_mu, s_mu + s_eps]]))
    _, logdet_diff = np.linalg.slogdet(s_mu + s_eps)
    const = -0.5 * (logdet_same - 2 * logdet_diff)
    return {"G": symmetrize(G), "H": symmetrize(H), "const": np.array([[const]])}


def jb_verification_score(x, y, model: MetricModel) -> float:
    """log P(x, y | same identity) - log P(x, y | different identities)."""
    m = model.matrices
    x = preproject(model, x) - m["mean"]
    y = preproject(model, y) - m["mean"]
    return float(x @ m["G"] @ x + y @ m["G"] @ y + 2 * x @ m["H"] @ y + m["const"][0, 0])


def jb_scores(X, Y, model: MetricModel) -> np.ndarray:
    m = model.matrices
    X = preproject(model, X) - m["mean"]
    Y = preproject(model, Y) - m["mean"]
    G, H = m["G"], m["H"]
    return (np.einsum("ij,jk,ik->i", X, G, X) + np.einsum("ij,jk,ik->i", Y, G, Y)
            + 2 * np.einsum("ij,jk,ik->i", X, H, Y) + m["const"][0, 0])


def jb_log_ratio_direct(x, y, s_mu, s_eps) -> float:
    """The same log-ratio evaluated from the two joint Gaussian densities."""
    from scipy.stats import multivariate_normal

    z = np.concatenate([x, y])
    same = np.block([[s_mu + s_eps, s_mu], [s_mu, s_mu + s_eps]])
    zero = np.zeros_like(s_mu)
    diff = np.block([[s_mu + s_eps, zero], [zero, s_mu + s_eps]])
    return float(multivariate_normal(np.zeros(z.size), same).logpdf(z)
                 - multivariate_normal(np.zeros(z.size), diff).logpdf(z))


# ------------------------------------------------------------------------ PCA


def pca_project(features, out_dim: int):
    """Project centered data onto its top ``out_dim`` principal directions.

    Returns ``(projected, basis, mean, variances)``; ``basis`` has orthonormal columns.
    """
    X = np.asarray(features, float)
    n, d = X.shape
    if out_dim > d:
        raise ValueError(f"out_dim {out_dim} exceeds feature dim {d}")
    if n < out_dim:
        raise ValueError(f"need at least {out_dim} samples, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    basis = vt[:out_dim].T
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(out_dim)])
    basis = basis * np.where(signs == 0, 1, signs)
    variances = s[:out_dim] ** 2 / max(n - 1, 1)
    return Xc @ basis, basis, mean, variances


def _unit_rows(X: np.ndarray) -> np.ndarray:
    return X / np.maximum(np.linalg.norm(X, axis=-1, keepdims=True), 1e-12)


def preproject(model: MetricModel, features) -> np.ndarray:
    """Apply the model's preprocessing (L2 normalization, then PCA) where present."""
    X = np.asarray(features, float)
    m = model.matrices
    if "l2norm" in m:
        X = _unit_rows(X)
    if "pca_basis" in m:
        X = (X - m["pca_mean"]) @ m["pca_basis"]
    return X


def fit_metric(features, labels, kind, pca_dim: int | None = None, out_dim: int | None = None,
               l2norm: bool = True) -> MetricModel:
    """Fit an LDA or JB model on L2-normalized features, optionally after PCA to ``pca_dim``.

    Dimensions with zero variance are dropped by the PCA stage, which keeps JB
    well posed on rectified network features.  The preprocessing is stored in
    the model and reapplied at scoring time.
    """
    kind = MetricKind(kind)
    X = np.asarray(features, float)
    if l2norm:
        X = _unit_rows(X)
    pca = None
    if pca_dim is not None:
        rank = int(np.linalg.matrix_rank(X - X.mean(axis=0)))
        X, basis, mean, _ = pca_project(X, min(pca_dim, rank))
        pca = {"pca_basis": basis, "pca_mean": mean}
    if kind == MetricKind.JOINT_BAYESIAN:
        model = fit_joint_bayesian(X, labels)
    elif kind == MetricKind.LDA:
        n_classes = len(set(labels))
        model = fit_lda(X, labels, out_dim or min(n_classes - 1, X.shape[1]))
    else:
        raise ValueError(f"cannot fit {kind.value} from labels; use lda or jb")
    if pca:
        model.matrices.update(pca)
    if l2norm:
        model.matrices["l2norm"] = np.ones((1, 1))
    return model


# ---------------------------------------------------------------- model files


def save_model(model: MetricModel, path) -> None:
    """Magic, version, kind tag, then named little-endian float64 matrices."""
    kind = model.kind.value.encode()
    out = [MODEL_MAGIC, struct.pack("<IB", MODEL_VERSION, len(kind)), kind,
           struct.pack("<I", len(model.matrices))]
    for name in sorted(model.matrices):
        arr = np.atleast_2d(np.asarray(model.matrices[name], dtype="<f8"))
        if np.asarray(model.matrices[name]).ndim == 1:
            arr = arr.reshape(1, -1)
        nb = name.encode()
        out.append(struct.pack("<B", len(nb)) + nb)
        out.append(struct.pack("<BII", np.asarray(model.matrices[name]).ndim, *arr.shape))
        out.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(out))


def load_model(path) -> MetricModel:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a metric model file")
    version, klen = struct.unpack_from("<IB", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    pos = 9
    kind = MetricKind(data[pos:pos + klen].decode())
    pos += klen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    matrices = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<B", data, pos)
        pos += 1
        name = data[pos:pos + nlen].decode()
        pos += nlen
        ndim, r, c = struct.unpack_from("<BII", data, pos)
        pos += 9
        arr = np.frombuffer(data, dtype="<f8", count=r * c, offset=pos).reshape(r, c).astype(float)
        pos += 8 * r * c
        matrices[name] = arr[0] if ndim == 1 else arr
    return MetricModel(kind, matrices)
