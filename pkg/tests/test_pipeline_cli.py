import numpy as np
import pytest

from facesynth import pipeline as pl
from facesynth.cli import main
from facesynth.evaluation import load_pairs
from facesynth.toyfaces import ToyFaceSpec, generate_toy_faces

CONFIG = """\
# tiny end-to-end run
align.manifest = train/manifest.tsv
align.eval_manifest = eval/manifest.tsv
output_dir = {out}
seed = 3
synthesize.inter = 20
synthesize.intra = 10
synthesize.self = 4
train.input_size = 32
train.width = 0.5
train.iterations = {iterations}
train.base_lr = 0.01
train.batch_size = 16
learn_metric.kind = jb
learn_metric.pca_dim = 8
evaluate.pairs_per_fold = 4
"""


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_toy_faces(ToyFaceSpec(num_identities=4, images_per_identity=3), 0, root / "train")
    generate_toy_faces(ToyFaceSpec(num_identities=20, images_per_identity=2), 1, root / "eval")
    return root


def write_config(root, name, out="out", iterations=10, extra=""):
    path = root / name
    path.write_text(CONFIG.format(out=out, iterations=iterations) + extra)
    return path


def tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_parse_config_errors():
    with pytest.raises(pl.ConfigError, match="unknown key 'train.speed'"):
        pl.parse_config("align.manifest = m\ntrain.speed = 3\n")
    with pytest.raises(pl.ConfigError, match="duplicate"):
        pl.parse_config("align.manifest = m\nseed = 1\nseed = 2\n")
    with pytest.raises(pl.ConfigError, match="required"):
        pl.parse_config("seed = 1\n")
    with pytest.raises(pl.ConfigError, match="line 2"):
        pl.parse_config("align.manifest = m\nnonsense\n")
    cfg = pl.parse_config("align.manifest = m  # trailing comment\n")
    assert cfg["align.manifest"] == "m" and cfg["seed"] == "0"


def test_run_then_cached_rerun(toy_root):
    cfg = write_config(toy_root, "run.cfg", out="cached")
    first = pl.run_pipeline(cfg)
    assert first.ran == list(pl.STAGES) and first.skipped == []
    out = toy_root / "cached"
    csv = (out / "emit" / "verification.csv").read_text().splitlines()
    assert len(csv[2:]) == 11 and csv[-1].startswith("summary,accuracy,")
    assert (out / "emit" / "verification.plot.tsv").exists()
    assert len(load_pairs(out / "evaluate" / "pairs.tsv")) == 40
    before = tree(out)

    again = pl.run_pipeline(cfg)
    assert again.ran == [] and again.skipped == list(pl.STAGES)
    assert tree(out) == before

    # a downstream change reruns only downstream stages
    changed = pl.run_pipeline(write_config(toy_root, "run2.cfg", out="cached", iterations=12))
    assert changed.skipped == ["align", "synthesize", "normalize"]
    assert changed.ran == ["train", "extract", "learn_metric", "evaluate", "emit"]


def test_missing_manifest_names_align(toy_root, capsys):
    cfg = toy_root / "missing.cfg"
    cfg.write_text("align.manifest = nowhere/manifest.tsv\noutput_dir = m\n")
    with pytest.raises(pl.StageError) as err:
        pl.run_pipeline(cfg)
    assert err.value.stage == "align" and "stage 'align'" in str(err.value)
    assert main(["run", str(cfg)]) == 2
    assert "stage 'align'" in capsys.readouterr().err


def test_thread_count_does_not_change_outputs(toy_root):
    a = pl.run_pipeline(write_config(toy_root, "t1.cfg", out="threads1"), threads=1)
    b = pl.run_pipeline(write_config(toy_root, "t8.cfg", out="threads8"), threads=8)
    assert a.ran == b.ran == list(pl.STAGES)
    ta, tb = tree(toy_root / "threads1"), tree(toy_root / "threads8")
    assert ta == tb


def test_normalized_variant_runs(toy_root):
    log = pl.run_pipeline(write_config(toy_root, "norm.cfg", out="norm", extra="normalize.method = dog\n"))
    assert log.ran == list(pl.STAGES)
    assert (toy_root / "norm" / "normalize" / "images" / "manifest.tsv").exists()


@pytest.mark.filterwarnings("ignore:within-class scatter is singular")
def test_cli_subcommands_end_to_end(tmp_path):
    t = str(tmp_path)
    assert main(["--seed", "2", "toyfaces", "--out", f"{t}/toy", "--identities", "6", "--images", "3"]) == 0
    assert main(["align", "--manifest", f"{t}/toy/manifest.tsv", "--out", f"{t}/aligned"]) == 0
    assert main(["--threads", "2", "synthesize", "--manifest", f"{t}/aligned/manifest.tsv", "--out", f"{t}/syn",
                 "--inter", "12", "--intra", "6", "--self", "3"]) == 0
    assert len((tmp_path / "syn" / "recipes.tsv").read_text().splitlines()) == 21
    assert main(["normalize", "--manifest", f"{t}/aligned/manifest.tsv", "--out", f"{t}/norm",
                 "--method", "ssr"]) == 0
    assert main(["--deterministic", "train", "--manifest", f"{t}/aligned/manifest.tsv",
                 "--manifest", f"{t}/syn/manifest.tsv", "--out", f"{t}/net/net.fsnt", "--input-size", "32",
                 "--width", "0.5", "--iterations", "5", "--base-lr", "0.01", "--batch-size", "8"]) == 0
    assert (tmp_path / "net" / "net.trace.csv").read_text().startswith("iteration,lr,loss")
    assert main(["extract", "--checkpoint", f"{t}/net/net.fsnt", "--manifest", f"{t}/aligned/manifest.tsv",
                 "--out", f"{t}/feat/train"]) == 0
    assert main(["extract", "--checkpoint", f"{t}/net/net.fsnt", "--manifest", f"{t}/aligned/manifest.tsv",
                 "--out", f"{t}/feat/avg", "--avg32"]) == 0
    feats = np.load(tmp_path / "feat" / "avg.npy")
    assert np.allclose(np.linalg.norm(feats, axis=1), 1.0)
    assert main(["learn-metric", "--features", f"{t}/feat/train", "--kind", "lda", "--out", f"{t}/lda.fsmm"]) == 0

    ids = [line.split("\t") for line in (tmp_path / "feat" / "train.ids.tsv").read_text().splitlines()]
    lines = []
    for fold in range(2):
        for k in range(3):
            subj = [i for i, s in ids if s == f"toy{fold * 3 + k:04d}"]
            lines.append(f"{fold}\tgallery\t{subj[0]}\ttoy{fold * 3 + k:04d}")
            lines.append(f"{fold}\tprobe\t{subj[1]}\ttoy{fold * 3 + k:04d}")
    (tmp_path / "ident.tsv").write_text("\n".join(lines) + "\n")
    assert main(["evaluate", "--features", f"{t}/feat/train", "--ident", f"{t}/ident.tsv",
                 "--metric", f"{t}/lda.fsmm", "--out", f"{t}/ident.csv"]) == 0
    rows = (tmp_path / "ident.csv").read_text().splitlines()
    assert rows[-1].startswith("summary,rank1,")


def test_cli_reports_errors(tmp_path, capsys):
    assert main(["align", "--manifest", str(tmp_path / "none.tsv"), "--out", str(tmp_path / "x")]) == 2
    assert "error:" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["evaluate", "--features", "f", "--out", "o"])  # needs --pairs or --ident


def test_missing_pairs_file_names_evaluate(toy_root):
    cfg = write_config(toy_root, "pairs.cfg", out="cached", extra="evaluate.pairs = nowhere.tsv\n")
    with pytest.raises(pl.StageError) as err:
        pl.run_pipeline(cfg)
    assert err.value.stage == "evaluate"
