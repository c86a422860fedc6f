"""Command-line entry point: ``facesynth <subcommand> ...``."""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import pipeline as pl
from .dataset import DatasetManifest, load_manifest
from .evaluation import emit_report, identify_folds, load_ident_folds, load_pairs, verify_10fold
from .illumination import FilterConfig, Method
from .metric import fit_metric, load_model, save_model
from .network import (NetConfig, TrainConfig, build_network, deterministic_mode, load_checkpoint,
                      save_checkpoint, train)
from .synthesis import BlendMode, PlanTargets, execute_plan, plan_dataset, save_recipes, with_blend
from .toyfaces import ToyFaceSpec, generate_toy_faces

log = logging.getLogger("facesynth")


def _mode(args):
    if args.deterministic:
        return deterministic_mode(1)
    torch.set_num_threads(args.threads)
    return contextlib.nullcontext()


def cmd_toyfaces(args):
    spec = ToyFaceSpec(num_identities=args.identities, images_per_identity=args.images,
                       modalities=tuple(args.modalities.split(",")), part_jitter=args.part_jitter,
                       noise_sigma=args.noise)
    toy = generate_toy_faces(spec, args.seed, args.out)
    print(f"wrote {len(toy.manifest)} images of {len(toy.manifest.subjects)} identities to {args.out}")


def cmd_align(args):
    m = pl.align_dataset(args.manifest, args.out, args.base_dir)
    print(f"aligned {len(m)} images into {args.out}")


def cmd_synthesize(args):
    manifest = load_manifest(args.manifest)
    targets = PlanTargets(inter=args.inter, intra=args.intra, self=args.self_, cross_modality=args.cross,
                          inter_ids=args.inter_ids, intra_ids=args.intra_ids)
    plan = with_blend(plan_dataset(manifest, targets, args.seed), BlendMode(args.blend))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_recipes(plan, out / "recipes.tsv")
    report = execute_plan(plan, manifest, out, args.threads, args.base_dir or Path(args.manifest).parent)
    print(f"{report.succeeded}/{report.total} images in {report.wall_time:.1f}s -> {report.manifest_path}")
    return 1 if report.failures else 0


def cmd_normalize(args):
    cfg = FilterConfig(method=Method(args.method))
    m = pl.normalize_dataset(args.manifest, args.out, cfg, args.base_dir)
    print(f"normalized {len(m)} images with {args.method} into {args.out}")


def _manifest_with_dirs(paths):
    records = []
    for p in paths:
        base = Path(p).parent
        records += [replace(r, path=str(base / r.path)) for r in load_manifest(p).records]
    return DatasetManifest.from_records(records)


def cmd_train(args):
    manifest = _manifest_with_dirs(args.manifest)
    labels, n_cls = pl.class_labels(manifest)
    images = pl.load_images(manifest, None)
    overrides = {"seed": args.seed, "batch_size": min(args.batch_size, len(labels))}
    if args.iterations:
        overrides["max_iterations"] = args.iterations
    if args.base_lr:
        overrides["base_lr"] = args.base_lr
    if args.lr_step:
        overrides["lr_step"] = args.lr_step
    tc = TrainConfig.preset(args.preset, **overrides)
    ncfg = NetConfig(args.architecture, n_cls, images.shape[-1], input_size=args.input_size, width=args.width)
    with _mode(args):
        result = train(build_network(ncfg, args.seed), images, labels, tc, log_every=args.log_every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.network, out)
    out.with_suffix(".trace.csv").write_text(result.trace_csv(), encoding="utf-8")
    print(f"trained {args.architecture} on {len(labels)} images / {n_cls} classes; "
          f"final loss {result.trace[-1][2]:.4f}" if result.trace else "no iterations run")


def cmd_extract(args):
    net = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    with _mode(args):
        feats = pl._extract(net, manifest, Path(args.manifest).parent, args.avg32)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    pl.save_features(feats, manifest, args.out)
    print(f"{feats.shape[0]} x {feats.shape[1]} features -> {Path(args.out).with_suffix('.npy')}")


def cmd_learn_metric(args):
    feats, _, subjects = pl.load_features(args.features)
    model = fit_metric(feats, subjects, args.kind, pca_dim=args.pca_dim, out_dim=args.out_dim)
    save_model(model, args.out)
    print(f"{args.kind} model on {feats.shape[0]} features -> {args.out}")


def cmd_evaluate(args):
    feats, ids, _ = pl.load_features(args.features)
    features = dict(zip(ids, feats))
    model = load_model(args.metric) if args.metric else None
    if args.pairs:
        report = verify_10fold(features, load_pairs(args.pairs), model)
    else:
        report = identify_folds(features, load_ident_folds(args.ident), model)
    curve = json.loads(Path(args.curve).read_text()) if args.curve else None
    emit_report(report, args.out, curve)
    print(f"{report.metric}: {report.mean:.4f} +- {report.std:.4f} over {len(report.per_fold)} folds")


def cmd_run(args):
    cfg = pl.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = str(args.seed)
    if args.deterministic:
        cfg["deterministic"] = "true"
    runlog = pl.run_pipeline(cfg, threads=args.threads)
    print(f"ran: {', '.join(runlog.ran) or '-'}; skipped: {', '.join(runlog.skipped) or '-'}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facesynth", description=__doc__)
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0; config value for 'run')")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="bitwise-reproducible numerics (single-threaded math)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("toyfaces", help="render a procedural face dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--identities", type=int, default=10)
    s.add_argument("--images", type=int, default=4)
    s.add_argument("--modalities", default="VIS")
    s.add_argument("--part-jitter", type=float, default=0.0)
    s.add_argument("--noise", type=float, default=0.02)
    s.set_defaults(func=cmd_toyfaces)

    s = sub.add_parser("align", help="align and crop to the canonical frame")
    s.add_argument("--manifest", required=True)
    s.add_argument("--base-dir")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_align)

    s = sub.add_parser("synthesize", help="plan and render composite images")
    s.add_argument("--manifest", required=True, help="aligned manifest")
    s.add_argument("--base-dir")
    s.add_argument("--out", required=True)
    s.add_argument("--inter", type=int, default=0)
    s.add_argument("--intra", type=int, default=0)
    s.add_argument("--self", dest="self_", type=int, default=0)
    s.add_argument("--cross", type=int, default=0, help="cross-modality composites")
    s.add_argument("--inter-ids", type=int)
    s.add_argument("--intra-ids", type=int)
    s.add_argument("--blend", choices=[b.value for b in BlendMode], default=BlendMode.HARD.value)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("normalize", help="illumination-normalize aligned images")
    s.add_argument("--manifest", required=True)
    s.add_argument("--base-dir")
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=[m.value for m in Method], default=Method.LSSF.value)
    s.set_defaults(func=cmd_normalize)

    s = sub.add_parser("train", help="train a CNN with softmax loss")
    s.add_argument("--manifest", required=True, action="append", help="may be repeated")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--architecture", choices=["CNN_S", "CNN_L"], default="CNN_S")
    s.add_argument("--preset", choices=["cnn_s", "cnn_l_nirvis", "cnn_l_lfw"], default="cnn_s")
    s.add_argument("--input-size", type=int, default=100)
    s.add_argument("--width", type=float, default=1.0)
    s.add_argument("--iterations", type=int)
    s.add_argument("--base-lr", type=float)
    s.add_argument("--lr-step", type=int)
    s.add_argument("--batch-size", type=int, default=128)
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("extract", help="compute feature vectors")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output stem; writes .npy and .ids.tsv")
    s.add_argument("--avg32", action="store_true", help="average over the 32 self-composites")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("learn-metric", help="fit LDA or Joint Bayesian")
    s.add_argument("--features", required=True)
    s.add_argument("--kind", choices=["lda", "jb"], default="jb")
    s.add_argument("--pca-dim", type=int)
    s.add_argument("--out-dim", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_learn_metric)

    s = sub.add_parser("evaluate", help="10-fold verification or rank-1 identification")
    s.add_argument("--features", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--pairs", help="verification fold file")
    g.add_argument("--ident", help="identification fold file")
    s.add_argument("--metric", help="metric model file; cosine if omitted")
    s.add_argument("--curve", help="JSON list of [x, y] points for the plot-data file")
    s.add_argument("--out", required=True, help="report CSV path")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("run", help="run the full pipeline from a config file")
    s.add_argument("config")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "run" and args.seed is None:
        args.seed = 0
    try:
        return int(args.func(args) or 0)
    except pl.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
