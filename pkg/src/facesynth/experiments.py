"""In-memory toy-face experiments: synthesis benefit, 32-avg test-time averaging
and feature-stream fusion, at a scale that runs in minutes on one CPU."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import CanonicalImage, DatasetManifest, align_and_crop, derive_part_layout
from .evaluation import fuse_features, identify_rank1, make_pairs, verify_10fold
from .illumination import FilterConfig, normalize
from .network import (NetConfig, TrainConfig, build_network, deterministic_mode,
                      extract_features, train)
from .synthesis import PlanTargets, plan_dataset, render_recipe
from .toyfaces import ToyFaceSpec, generate_toy_faces


@dataclass
class ToyExperimentConfig:
    train_ids: int = 20
    images_per_id: int = 3
    test_ids: int = 100
    test_images_per_id: int = 6
    synthetic_factor: int = 30
    inter_to_intra: tuple = (2, 1)
    # virtual identities the inter recipes are drawn from; None = unconstrained
    inter_ids: int | None = 200
    input_size: int = 50
    width: float = 1.0
    iterations: int = 600
    base_lr: float = 0.01
    lr_step: int = 400
    batch_size: int = 64
    pairs_per_fold: int = 300
    # per-image part jitter keeps the held-out task away from its ceiling
    spec: ToyFaceSpec = field(default_factory=lambda: ToyFaceSpec(noise_sigma=0.05, part_jitter=0.05, ramp=0.4))


def canonicalize(toy) -> dict:
    """image_id -> aligned CanonicalImage."""
    return {r.image_id: align_and_crop(r, toy.images[r.image_id]) for r in toy.manifest.records}


def split_identities(toy, n_train: int, train_images: int | None = None):
    """First ``n_train`` subjects (their first ``train_images`` images) for training, the rest held out."""
    subjects = toy.manifest.subjects
    train_s = set(subjects[:n_train])
    train = [r for s in subjects[:n_train] for r in toy.manifest.images_of(s)[:train_images]]
    test = [r for r in toy.manifest.records if r.subject_id not in train_s]
    return DatasetManifest.from_records(train), DatasetManifest.from_records(test)


def render_plan(plan, manifest: DatasetManifest, canon: dict):
    """Composite every recipe in memory; returns pixels (N, H, W, C) and labels."""
    layouts = {k: derive_part_layout(im.landmarks) for k, im in canon.items()}
    out, labels = [], []
    for r in plan.recipes:
        a = manifest.images_of(r.subject_i)[r.image_s].image_id
        b = manifest.images_of(r.subject_j)[r.image_t].image_id
        out.append(render_recipe(r, canon[a], layouts[a], canon[b], layouts[b]).pixels)
        labels.append(r.label)
    return np.stack(out), labels


def training_set(manifest, canon, synthetic: int, cfg: ToyExperimentConfig, seed: int):
    images = np.stack([canon[r.image_id].pixels for r in manifest.records])
    names = [r.subject_id for r in manifest.records]
    if synthetic:
        inter_w, intra_w = cfg.inter_to_intra
        n_inter = synthetic * inter_w // (inter_w + intra_w)
        targets = PlanTargets(inter=n_inter, intra=synthetic - n_inter, inter_ids=cfg.inter_ids)
        syn, syn_names = render_plan(plan_dataset(manifest, targets, seed), manifest, canon)
        images = np.concatenate([images, syn])
        names = names + syn_names
    classes = {c: k for k, c in enumerate(dict.fromkeys(names))}
    return images, np.array([classes[c] for c in names]), len(classes)


def train_reduced_cnn(images, labels, num_classes, cfg: ToyExperimentConfig, seed: int):
    net = build_network(NetConfig("CNN_S", num_classes, images.shape[-1], input_size=cfg.input_size,
                                  width=cfg.width), seed)
    tc = TrainConfig(base_lr=cfg.base_lr, lr_step=cfg.lr_step, max_iterations=cfg.iterations,
                     batch_size=min(cfg.batch_size, len(labels)), seed=seed)
    return train(net, images, labels, tc).network


def verification_accuracy(net, manifest, canon, seed: int, pairs_per_fold: int, avg32: bool = False) -> float:
    recs = manifest.records
    ims = [canon[r.image_id] for r in recs]
    feats = extract_features(net, ims if avg32 else np.stack([im.pixels for im in ims]), use_self_syn_avg=avg32)
    features = dict(zip([r.image_id for r in recs], feats))
    pairs = make_pairs(manifest, pairs_per_fold=pairs_per_fold, seed=seed)
    return verify_10fold(features, pairs).mean


def synthesis_benefit(seed: int, cfg: ToyExperimentConfig = ToyExperimentConfig(), avg32: bool = False) -> dict:
    """Verification accuracy on held-out identities, trained without and with synthetic data."""
    t0 = time.perf_counter()
    spec = replace(cfg.spec, num_identities=cfg.train_ids + cfg.test_ids,
                   images_per_identity=max(cfg.images_per_id, cfg.test_images_per_id))
    toy = generate_toy_faces(spec, seed)
    canon = canonicalize(toy)
    train_m, test_m = split_identities(toy, cfg.train_ids, cfg.images_per_id)
    out = {}
    with deterministic_mode(1):
        for name, n_syn in (("original", 0), ("synthetic", cfg.synthetic_factor * len(train_m))):
            images, labels, n_cls = training_set(train_m, canon, n_syn, cfg, seed)
            net = train_reduced_cnn(images, labels, n_cls, cfg, seed)
            out[name] = verification_accuracy(net, test_m, canon, seed, cfg.pairs_per_fold)
            if avg32 and n_syn:
                t1 = time.perf_counter()
                out["synthetic_avg32"] = verification_accuracy(net, test_m, canon, seed,
                                                               cfg.pairs_per_fold, avg32=True)
                out["avg32_seconds"] = time.perf_counter() - t1
    out["seconds"] = time.perf_counter() - t0
    return out


@dataclass
class FusionConfig:
    train_ids: int = 30
    test_ids: int = 200
    images_per_id: int = 3
    input_size: int = 50
    iterations: int = 1000
    base_lr: float = 0.01
    lr_step: int = 700
    batch_size: int = 64
    filter: FilterConfig = field(default_factory=FilterConfig)
    spec: ToyFaceSpec = field(default_factory=lambda: ToyFaceSpec(modalities=("VIS", "NIR")))


def fusion_benefit(seed: int, cfg: FusionConfig = FusionConfig()) -> dict:
    """Rank-1 with VIS gallery and second-modality probes for raw, normalized and fused features."""
    spec = replace(cfg.spec, num_identities=cfg.train_ids + cfg.test_ids, images_per_identity=cfg.images_per_id)
    toy = generate_toy_faces(spec, seed)
    canon = canonicalize(toy)
    normed = {k: CanonicalImage(normalize(im.pixels, cfg.filter), k, im.landmarks) for k, im in canon.items()}
    train_m, test_m = split_identities(toy, cfg.train_ids)
    gallery = [r for r in test_m.records if r.modality.value == "VIS" and r.image_id.endswith("00")]
    probes = [r for r in test_m.records if r.modality.value != "VIS"]
    tcfg = ToyExperimentConfig(input_size=cfg.input_size, iterations=cfg.iterations, base_lr=cfg.base_lr,
                               lr_step=cfg.lr_step, batch_size=cfg.batch_size)
    streams = {}
    with deterministic_mode(1):
        for name, source in (("original", canon), ("normalized", normed)):
            images, labels, n_cls = training_set(train_m, source, 0, tcfg, seed)
            net = train_reduced_cnn(images, labels, n_cls, tcfg, seed)
            streams[name] = (extract_features(net, np.stack([source[r.image_id].pixels for r in gallery])),
                             extract_features(net, np.stack([source[r.image_id].pixels for r in probes])))

    streams["fused"] = tuple(fuse_features(streams["original"][k], streams["normalized"][k]) for k in (0, 1))
    gid = [r.subject_id for r in gallery]
    pid = [r.subject_id for r in probes]
    return {name: identify_rank1(g, gid, p, pid).mean for name, (g, p) in streams.items()}
