"""Verification (10-fold accuracy) and identification (rank-1) protocols, feature fusion
and report files."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metric import MetricKind, MetricModel, jb_scores, lda_transform
from .network import l2_normalize

REPORT_VERSION = 1
NUM_FOLDS = 10


@dataclass(frozen=True)
class Pair:
    fold: int
    a: str
    b: str
    same: bool


@dataclass(frozen=True)
class IdentEntry:
    fold: int
    role: str  # gallery | probe
    image_id: str
    subject_id: str


@dataclass
class EvalReport:
    metric: str  # "accuracy" or "rank1"
    per_fold: list
    thresholds: list = field(default_factory=list)
    runtime: float = 0.0

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_fold))

    @property
    def std(self) -> float:
        # population std over folds
        return float(np.std(self.per_fold))


# -------------------------------------------------------------- fold files


def load_pairs(path) -> list:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t")
        if len(f) != 4 or f[3] not in ("same", "diff"):
            raise ValueError(f"{path}:{lineno}: expected fold, image_a, image_b, same|diff")
        pairs.append(Pair(int(f[0]), f[1], f[2], f[3] == "same"))
    return pairs


def save_pairs(pairs, path) -> None:
    Path(path).write_text("".join(f"{p.fold}\t{p.a}\t{p.b}\t{'same' if p.same else 'diff'}\n" for p in pairs),
                          encoding="utf-8")


def load_ident_folds(path) -> list:
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        f = line.split("\t")
        if len(f) != 4 or f[1] not in ("gallery", "probe"):
            raise ValueError(f"{path}:{lineno}: expected fold, gallery|probe, image_id, subject_id")
        entries.append(IdentEntry(int(f[0]), f[1], f[2], f[3]))
    return entries


def save_ident_folds(entries, path) -> None:
    Path(path).write_text("".join(f"{e.fold}\t{e.role}\t{e.image_id}\t{e.subject_id}\n" for e in entries),
                          encoding="utf-8")


def make_pairs(manifest, n_folds: int = NUM_FOLDS, pairs_per_fold: int = 60, seed: int = 0) -> list:
    """Balanced same/different pairs with identities disjoint across folds."""
    rng = np.random.Generator(np.random.Philox(seed))
    subjects = [s for s in manifest.subjects]
    order = rng.permutation(len(subjects))
    fold_subjects = np.array_split(np.array(subjects, dtype=object)[order], n_folds)
    pairs = []
    for fold, subs in enumerate(fold_subjects):
        subs = list(subs)
        multi = [s for s in subs if len(manifest.index[s]) >= 2]
        n_same = pairs_per_fold // 2
        seen = set()
        tries = 0
        fold_pairs = []
        while len(fold_pairs) < pairs_per_fold and tries < 100 * pairs_per_fold:
            tries += 1
            want_same = len([p for p in fold_pairs if p.same]) < n_same and multi
            if want_same:
                s = multi[rng.integers(len(multi))]
                a, b = rng.choice(len(manifest.index[s]), size=2, replace=False)
                ra, rb = manifest.images_of(s)[a], manifest.images_of(s)[b]
            else:
                if len(subs) < 2:
                    break
                s1, s2 = rng.choice(len(subs), size=2, replace=False)
                ia = manifest.images_of(subs[s1])
                ib = manifest.images_of(subs[s2])
                ra, rb = ia[rng.integers(len(ia))], ib[rng.integers(len(ib))]
            key = tuple(sorted((ra.image_id, rb.image_id)))
            if key in seen:
                continue
            seen.add(key)
            fold_pairs.append(Pair(fold, ra.image_id, rb.image_id, ra.subject_id == rb.subject_id))
        pairs.extend(fold_pairs)
    return pairs


# ---------------------------------------------------------------- scoring


def cosine_scores(A, B) -> np.ndarray:
    return np.sum(l2_normalize(np.asarray(A, float)) * l2_normalize(np.asarray(B, float)), axis=1)


def pair_scores(features: dict, pairs, metric: MetricModel | None = None) -> np.ndarray:
    missing = [x for p in pairs for x in (p.a, p.b) if x not in features]
    if missing:
        raise KeyError(f"no features for {missing[0]!r} (and {len(missing) - 1} more)")
    A = np.stack([features[p.a] for p in pairs])
    B = np.stack([features[p.b] for p in pairs])
    if metric is None:
        return cosine_scores(A, B)
    if metric.kind == MetricKind.JOINT_BAYESIAN:
        return jb_scores(A, B, metric)
    if metric.kind == MetricKind.LDA:
        return cosine_scores(lda_transform(metric, A), lda_transform(metric, B))
    raise ValueError(f"unsupported metric for verification: {metric.kind}")


def best_threshold(scores, labels) -> tuple:
    """Exact accuracy-maximizing threshold; predictions are ``score > threshold``.

    Candidates are the midpoints between adjacent distinct sorted scores plus
    one value below and one above all scores.  Ties go to the smallest
    threshold, so the result does not depend on the input order.
    """
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    uniq = np.unique(scores)
    if uniq.size == 0:
        return 0.0, 0.0
    candidates = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2, [uniq[-1] + 1.0]])
    order = np.argsort(scores, kind="stable")
    s_sorted, l_sorted = scores[order], labels[order]
    # number of positives / negatives with score <= candidate
    pos_le = np.concatenate([[0], np.cumsum(l_sorted)])
    neg_le = np.concatenate([[0], np.cumsum(~l_sorted)])
    k = np.searchsorted(s_sorted, candidates, side="right")
    correct = (neg_le[k]) + (pos_le[-1] - pos_le[k])
    best = int(np.argmax(correct))
    return float(candidates[best]), float(correct[best] / scores.size)


def verify_10fold(features: dict, pairs, metric: MetricModel | None = None) -> EvalReport:
    """Per fold: pick the threshold on the other folds, measure accuracy on the held-out fold."""
    t0 = time.perf_counter()
    scores = pair_scores(features, pairs, metric)
    labels = np.array([p.same for p in pairs])
    folds = np.array([p.fold for p in pairs])
    fold_ids = sorted(set(folds.tolist()))
    per_fold, thresholds = [], []
    for f in fold_ids:
        test = folds == f
        thr, _ = best_threshold(scores[~test], labels[~test])
        per_fold.append(float(np.mean((scores[test] > thr) == labels[test])))
        thresholds.append(thr)
    return EvalReport("accuracy", per_fold, thresholds, time.perf_counter() - t0)


def identify_rank1(gallery_features, gallery_ids, probe_features, probe_ids,
                   metric: MetricModel | None = None) -> EvalReport:
    """Nearest gallery entry by cosine similarity (after LDA projection when given).

    Ties resolve to the lowest gallery index.
    """
    t0 = time.perf_counter()
    G = np.asarray(gallery_features, float)
    P = np.asarray(probe_features, float)
    if G.shape[0] == 0:
        raise ValueError("empty gallery")
    if metric is not None:
        if metric.kind != MetricKind.LDA:
            raise ValueError("identification uses an LDA model")
        G, P = lda_transform(metric, G), lda_transform(metric, P)
    sims = l2_normalize(P) @ l2_normalize(G).T
    best = np.argmax(sims, axis=1)
    hits = np.asarray(gallery_ids, dtype=object)[best] == np.asarray(probe_ids, dtype=object)
    rate = float(np.mean(hits)) if hits.size else 0.0
    return EvalReport("rank1", [rate], [], time.perf_counter() - t0)


def identify_folds(features: dict, entries, metric=None) -> EvalReport:
    """Rank-1 rate per fold from an identification fold file."""
    t0 = time.perf_counter()
    per_fold = []
    for f in sorted({e.fold for e in entries}):
        gal = [e for e in entries if e.fold == f and e.role == "gallery"]
        prb = [e for e in entries if e.fold == f and e.role == "probe"]
        m = metric(f) if callable(metric) else metric
        rep = identify_rank1([features[e.image_id] for e in gal], [e.subject_id for e in gal],
                             [features[e.image_id] for e in prb], [e.subject_id for e in prb], m)
        per_fold.append(rep.per_fold[0])
    return EvalReport("rank1", per_fold, [], time.perf_counter() - t0)


def fuse_features(stream_a, stream_b, ids_a=None, ids_b=None) -> np.ndarray:
    """Average of the L2-normalized streams, re-normalized."""
    A = np.asarray(stream_a, float)
    B = np.asarray(stream_b, float)
    if A.shape != B.shape:
        raise ValueError(f"stream shapes differ: {A.shape} vs {B.shape}")
    if ids_a is not None and list(ids_a) != list(ids_b):
        raise ValueError("feature streams are not in the same image order")
    return l2_normalize((l2_normalize(A) + l2_normalize(B)) / 2)


# ---------------------------------------------------------------- reports


def _fmt(x: float) -> str:
    return f"{x:.12g}"


def report_csv(report: EvalReport) -> str:
    lines = [f"# facesynth-report v{REPORT_VERSION}", "fold,metric,value,threshold"]
    for k, v in enumerate(report.per_fold):
        thr = _fmt(report.thresholds[k]) if k < len(report.thresholds) else ""
        lines.append(f"{k},{report.metric},{_fmt(v)},{thr}")
    lines.append(f"summary,{report.metric},{_fmt(report.mean)},std={_fmt(report.std)}")
    return "\n".join(lines) + "\n"


def emit_report(report: EvalReport, path, curve=None) -> list:
    """Write the per-fold CSV and, when ``curve`` points are given, an x/y plot-data file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_csv(report), encoding="utf-8")
    written = [path]
    if curve is not None:
        pts = sorted((float(x), float(y)) for x, y in (curve.items() if isinstance(curve, dict) else curve))
        plot = path.with_suffix(".plot.tsv")
        plot.write_text("x\ty\n" + "".join(f"{_fmt(x)}\t{_fmt(y)}\n" for x, y in pts), encoding="utf-8")
        written.append(plot)
    return written
