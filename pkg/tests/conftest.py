import numpy as np
import pytest

from facesynth.dataset import CanonicalImage, DatasetManifest, FaceRecord, Modality, save_image, save_manifest

CANON_LMS = ((30.0, 40.0), (70.0, 40.0), (50.0, 58.0), (50.0, 75.0))


def make_manifest(sizes, modalities=None, lms=CANON_LMS):
    """One record per image; subject k has ``sizes[k]`` images."""
    records = []
    for k, n in enumerate(sizes):
        for s in range(n):
            mod = Modality(modalities[k][s]) if modalities else Modality.VIS
            records.append(FaceRecord(f"s{k}_{s}", f"s{k}", mod, f"s{k}/{s}.png", lms))
    return DatasetManifest.from_records(records)


def random_canonical(rng, channels=1, lms=CANON_LMS):
    return CanonicalImage(rng.random((100, 100, channels)), "x", np.array(lms, float))


@pytest.fixture
def image_tree(tmp_path):
    """Write a manifest of random canonical 8-bit images; returns (manifest, manifest_path, root)."""

    def build(sizes, seed=0, modalities=None):
        rng = np.random.default_rng(seed)
        manifest = make_manifest(sizes, modalities)
        for rec in manifest.records:
            save_image(np.rint(rng.random((100, 100, 1)) * 255) / 255, tmp_path / rec.path)
        save_manifest(manifest, tmp_path / "manifest.tsv")
        return manifest, tmp_path / "manifest.tsv", tmp_path

    return build
