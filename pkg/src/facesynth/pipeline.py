"""Stage runner: align -> synthesize -> normalize -> train -> extract -> learn-metric
-> evaluate -> emit, configured by a flat ``key = value`` file.

Keys are scoped by stage prefix (``train.iterations = 200``); unscoped keys
(``seed``, ``output_dir``, ``threads``, ``deterministic``) are global.  Each
stage writes into ``<output_dir>/<stage>/`` together with a stamp holding the
hash of its parameters and inputs; a rerun with an identical stamp is skipped.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dataset import (CanonicalImage, DatasetManifest, align_and_crop, canonical_record, load_image, load_manifest,
                      resolve_path, save_image, save_manifest)
from .evaluation import EvalReport, emit_report, load_pairs, make_pairs, save_pairs, verify_10fold
from .illumination import FilterConfig, Method, normalize
from .metric import fit_metric, load_model, save_model
from .network import (NetConfig, TrainConfig, build_network, deterministic_mode, extract_features,
                      load_checkpoint, save_checkpoint, train)
from .synthesis import BlendMode, PlanTargets, execute_plan, plan_dataset, save_recipes, with_blend

log = logging.getLogger(__name__)

STAGES = ("align", "synthesize", "normalize", "train", "extract", "learn_metric", "evaluate", "emit")

DEFAULTS = {
    "seed": "0",
    "threads": "1",
    "deterministic": "true",
    "output_dir": "run",
    "align.base_dir": "",
    "align.eval_manifest": "",
    "align.eval_base_dir": "",
    "synthesize.inter": "0",
    "synthesize.intra": "0",
    "synthesize.self": "0",
    "synthesize.cross_modality": "0",
    "synthesize.inter_ids": "",
    "synthesize.intra_ids": "",
    "synthesize.blend": "HardPaste",
    "normalize.method": "none",
    "train.architecture": "CNN_S",
    "train.input_size": "100",
    "train.width": "1.0",
    "train.preset": "",
    "train.iterations": "",
    "train.base_lr": "",
    "train.lr_step": "",
    "train.batch_size": "64",
    "extract.avg32": "false",
    "learn_metric.kind": "none",
    "learn_metric.pca_dim": "",
    "evaluate.pairs": "",
    "evaluate.pairs_per_fold": "60",
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def parse_config(text: str) -> dict:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        prefix = key.split(".", 1)[0] if "." in key else None
        if key not in DEFAULTS and key != "align.manifest":
            raise ConfigError(f"line {lineno}: unknown key {key!r}"
                              + (f" (stage {prefix!r})" if prefix else ""))
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        cfg[key] = value
    if "align.manifest" not in cfg:
        raise ConfigError("align.manifest is required")
    return {**DEFAULTS, **cfg}


def load_config(path) -> dict:
    cfg = parse_config(Path(path).read_text(encoding="utf-8"))
    # relative paths in the config are relative to the config file
    base = Path(path).resolve().parent
    for key in ("align.manifest", "align.eval_manifest", "align.base_dir", "align.eval_base_dir",
                "evaluate.pairs", "output_dir"):
        if cfg[key] and not Path(cfg[key]).is_absolute():
            cfg[key] = str(base / cfg[key])
    return cfg


def _bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _opt_int(v: str):
    return int(v) if v else None


# ------------------------------------------------------------------- hashing


def hash_bytes(*chunks) -> str:
    h = hashlib.sha256()
    for c in chunks:
        h.update(c if isinstance(c, bytes) else str(c).encode())
        h.update(b"\0")
    return h.hexdigest()


def hash_manifest_inputs(manifest_path, base_dir) -> str:
    m = load_manifest(manifest_path)
    base_dir = Path(manifest_path).parent if base_dir is None else base_dir
    chunks = [Path(manifest_path).read_bytes()]
    chunks += [resolve_path(r, base_dir).read_bytes() for r in m.records]
    return hash_bytes(*chunks)


# -------------------------------------------------------------- stage helpers

STAMP = ".stamp"


@dataclass
class RunLog:
    ran: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


# stage-level artifact functions, also used by the CLI subcommands


def align_dataset(manifest_path, out_dir, base_dir=None) -> DatasetManifest:
    """Align every record to the canonical frame; writes PNGs and ``manifest.tsv``."""
    manifest = load_manifest(manifest_path)
    if base_dir is None:
        base_dir = Path(manifest_path).parent
    out = Path(out_dir)
    records = []
    for rec in manifest.records:
        canon = align_and_crop(rec, load_image(resolve_path(rec, base_dir)))
        path = f"{rec.image_id}.png"
        save_image(canon.pixels, out / path)
        records.append(canonical_record(rec, path))
    aligned = DatasetManifest.from_records(records)
    save_manifest(aligned, out / "manifest.tsv")
    return aligned


def normalize_dataset(manifest_path, out_dir, config: FilterConfig, base_dir=None) -> DatasetManifest:
    manifest = load_manifest(manifest_path)
    base_dir = Path(manifest_path).parent if base_dir is None else base_dir
    out = Path(out_dir)
    for rec in manifest.records:
        target = out / rec.path
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(normalize(load_image(resolve_path(rec, base_dir)), config), target)
    save_manifest(manifest, out / "manifest.tsv")
    return manifest


def load_images(manifest: DatasetManifest, base_dir) -> np.ndarray:
    return np.stack([load_image(resolve_path(r, base_dir)) for r in manifest.records])


def class_labels(manifest: DatasetManifest):
    classes = {s: k for k, s in enumerate(manifest.subjects)}
    return np.array([classes[r.subject_id] for r in manifest.records]), len(classes)


def save_features(features: np.ndarray, manifest: DatasetManifest, path) -> None:
    """Features as ``<path>.npy`` plus an ``image_id<TAB>subject_id`` index file."""
    path = Path(path)
    np.save(path.with_suffix(".npy"), np.asarray(features, dtype="<f8"), allow_pickle=False)
    path.with_suffix(".ids.tsv").write_text(
        "".join(f"{r.image_id}\t{r.subject_id}\n" for r in manifest.records), encoding="utf-8")


def load_features(path):
    path = Path(path)
    feats = np.load(path.with_suffix(".npy"), allow_pickle=False)
    rows = [line.split("\t") for line in path.with_suffix(".ids.tsv").read_text(encoding="utf-8").splitlines()]
    if len(rows) != len(feats):
        raise ValueError(f"{path}: {len(feats)} feature rows but {len(rows)} ids")
    return feats, [r[0] for r in rows], [r[1] for r in rows]


# ------------------------------------------------------------------ pipeline


class Pipeline:
    def __init__(self, cfg: dict, threads: int | None = None):
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.threads = int(threads if threads is not None else cfg["threads"])
        self.deterministic = _bool(cfg["deterministic"])
        self.root = Path(cfg["output_dir"])
        self.keys = {}
        self.log = RunLog()

    def params(self, stage: str) -> dict:
        prefix = stage + "."
        p = {k: v for k, v in self.cfg.items() if k.startswith(prefix)}
        p["seed"] = self.seed
        p["deterministic"] = self.deterministic
        return p

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def run_stage(self, stage: str, upstream: tuple, input_hash: str, body) -> None:
        key = hash_bytes(stage, json.dumps(self.params(stage), sort_keys=True),
                         *[self.keys[u] for u in upstream], input_hash)
        out = self.dir(stage)
        stamp = out / STAMP
        if stamp.exists() and stamp.read_text() == key:
            log.info("skip %s (inputs unchanged)", stage)
            self.log.skipped.append(stage)
            self.keys[stage] = key
            return
        try:
            if out.exists():
                shutil.rmtree(out)
            out.mkdir(parents=True)
            body(out)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001  re-raised with the stage name
            raise StageError(stage, exc) from exc
        stamp.write_text(key)
        log.info("ran %s", stage)
        self.log.ran.append(stage)
        self.keys[stage] = key

    def _mode(self):
        return deterministic_mode(1) if self.deterministic else contextlib.nullcontext()

    def run(self) -> RunLog:
        c = self.cfg
        self.root.mkdir(parents=True, exist_ok=True)

        # align
        def align_inputs():
            try:
                h = hash_manifest_inputs(c["align.manifest"], c["align.base_dir"] or None)
                if c["align.eval_manifest"]:
                    h += hash_manifest_inputs(c["align.eval_manifest"], c["align.eval_base_dir"] or None)
                return h
            except Exception as exc:  # noqa: BLE001
                raise StageError("align", exc) from exc

        def align(out):
            align_dataset(c["align.manifest"], out / "train", c["align.base_dir"] or None)
            if c["align.eval_manifest"]:
                align_dataset(c["align.eval_manifest"], out / "eval", c["align.eval_base_dir"] or None)

        self.run_stage("align", (), align_inputs(), align)
        aligned = self.dir("align")
        eval_dir = aligned / ("eval" if c["align.eval_manifest"] else "train")

        # synthesize
        def synthesize(out):
            manifest = load_manifest(aligned / "train" / "manifest.tsv")
            targets = PlanTargets(
                inter=int(c["synthesize.inter"]), intra=int(c["synthesize.intra"]),
                self=int(c["synthesize.self"]), cross_modality=int(c["synthesize.cross_modality"]),
                inter_ids=_opt_int(c["synthesize.inter_ids"]), intra_ids=_opt_int(c["synthesize.intra_ids"]))
            plan = with_blend(plan_dataset(manifest, targets, self.seed), BlendMode(c["synthesize.blend"]))
            save_recipes(plan, out / "recipes.tsv")
            report = execute_plan(plan, manifest, out / "images", self.threads, aligned / "train")
            if report.failures:
                raise RuntimeError(f"{report.failed} of {report.total} recipes failed; first: {report.failures[0]}")

        self.run_stage("synthesize", ("align",), "", synthesize)

        # normalize
        method = c["normalize.method"].lower()

        def normalize_stage(out):
            if method == "none":
                return
            fcfg = FilterConfig(method=Method(method))
            normalize_dataset(aligned / "train" / "manifest.tsv", out / "align", fcfg)
            syn = self.dir("synthesize") / "images" / "manifest.tsv"
            normalize_dataset(syn, out / "images", fcfg)
            if c["align.eval_manifest"]:
                normalize_dataset(eval_dir / "manifest.tsv", out / "eval", fcfg)

        self.run_stage("normalize", ("synthesize",), "", normalize_stage)
        if method == "none":
            train_dirs = (aligned / "train", self.dir("synthesize") / "images")
            eval_images = eval_dir
        else:
            n = self.dir("normalize")
            train_dirs = (n / "align", n / "images")
            eval_images = n / "eval" if c["align.eval_manifest"] else n / "align"

        # train
        def train_stage(out):
            records = []
            for d in train_dirs:
                for r in load_manifest(d / "manifest.tsv").records:
                    records.append(replace(r, path=str(d / r.path)))
            manifest = DatasetManifest.from_records(records)
            labels, n_cls = class_labels(manifest)
            images = load_images(manifest, None)
            preset = c["train.preset"]
            overrides = {k: cast(c[f"train.{k}"]) for k, cast in
                         (("base_lr", float), ("lr_step", int)) if c[f"train.{k}"]}
            if c["train.iterations"]:
                overrides["max_iterations"] = int(c["train.iterations"])
            overrides["batch_size"] = min(int(c["train.batch_size"]), len(labels))
            overrides["seed"] = self.seed
            tc = TrainConfig.preset(preset, **overrides) if preset else TrainConfig(**overrides)
            ncfg = NetConfig(c["train.architecture"], n_cls, images.shape[-1],
                             input_size=int(c["train.input_size"]), width=float(c["train.width"]))
            with self._mode():
                result = train(build_network(ncfg, self.seed), images, labels, tc)
            save_checkpoint(result.network, out / "net.fsnt")
            (out / "trace.csv").write_text(result.trace_csv(), encoding="utf-8")

        self.run_stage("train", ("normalize",), "", train_stage)

        # extract
        avg32 = _bool(c["extract.avg32"])

        def extract(out):
            net = load_checkpoint(self.dir("train") / "net.fsnt")
            with self._mode():
                for name, d in (("train", train_dirs[0]), ("eval", eval_images)):
                    m = load_manifest(d / "manifest.tsv")
                    feats = _extract(net, m, d, avg32)
                    save_features(feats, m, out / name)

        self.run_stage("extract", ("train",), "", extract)

        # learn-metric
        kind = c["learn_metric.kind"].lower()

        def learn(out):
            if kind == "none":
                return
            feats, _, subjects = load_features(self.dir("extract") / "train")
            model = fit_metric(feats, subjects, kind, pca_dim=_opt_int(c["learn_metric.pca_dim"]))
            save_model(model, out / "model.fsmm")

        self.run_stage("learn_metric", ("extract",), "", learn)

        # evaluate
        pairs_path = c["evaluate.pairs"]

        def evaluate(out):
            feats, ids, _ = load_features(self.dir("extract") / "eval")
            if pairs_path:
                pairs = load_pairs(pairs_path)
            else:
                pairs = make_pairs(load_manifest(eval_images / "manifest.tsv"),
                                   pairs_per_fold=int(c["evaluate.pairs_per_fold"]), seed=self.seed)
            save_pairs(pairs, out / "pairs.tsv")
            model = load_model(self.dir("learn_metric") / "model.fsmm") if kind != "none" else None
            report = verify_10fold(dict(zip(ids, feats)), pairs, model)
            # wall time stays out of the artifacts so reruns are byte-identical
            (out / "report.json").write_text(json.dumps(
                {"metric": report.metric, "per_fold": report.per_fold, "thresholds": report.thresholds},
                sort_keys=True), encoding="utf-8")

        try:
            pairs_hash = hash_bytes(Path(pairs_path).read_bytes()) if pairs_path else ""
        except OSError as exc:
            raise StageError("evaluate", exc) from exc
        self.run_stage("evaluate", ("learn_metric",), pairs_hash, evaluate)

        # emit
        def emit(out):
            saved = json.loads((self.dir("evaluate") / "report.json").read_text(encoding="utf-8"))
            report = EvalReport(saved["metric"], saved["per_fold"], saved["thresholds"])
            trace = (self.dir("train") / "trace.csv").read_text(encoding="utf-8").splitlines()[1:]
            loss_curve = [(int(row.split(",")[0]), float(row.split(",")[2])) for row in trace]
            emit_report(report, out / "verification.csv", curve=loss_curve)

        self.run_stage("emit", ("evaluate",), "", emit)
        return self.log


def _extract(net, manifest, base_dir, avg32: bool):
    if not avg32:
        return extract_features(net, load_images(manifest, base_dir))
    ims = [CanonicalImage(load_image(resolve_path(r, base_dir)), r.image_id, r.landmark_array)
           for r in manifest.records]
    return extract_features(net, ims, use_self_syn_avg=True)


def run_pipeline(cfg: dict | str | Path, threads: int | None = None) -> RunLog:
    if not isinstance(cfg, dict):
        cfg = load_config(cfg)
    return Pipeline(cfg, threads).run()
