import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facesynth.dataset import align_and_crop, load_image, load_manifest
from facesynth.toyfaces import PARAM_NAMES, ToyFaceSpec, generate_toy_faces, sample_identities

QUIET = dict(noise_sigma=0.0, ramp=0.0, gain=(1.0, 1.0))


def dark_centroid(pixels, center, radius=4):
    """Intensity-weighted centroid of darkness in a window, in continuous coordinates."""
    x0, y0 = int(center[0]) - radius, int(center[1]) - radius
    win = pixels[y0:y0 + 2 * radius + 1, x0:x0 + 2 * radius + 1, 0]
    w = np.clip(win.max() - win, 0, None)
    yy, xx = np.mgrid[0:win.shape[0], 0:win.shape[1]] + 0.5
    return np.array([x0 + (w * xx).sum() / w.sum(), y0 + (w * yy).sum() / w.sum()])


def test_deterministic_and_seeded():
    spec = ToyFaceSpec(num_identities=3, images_per_identity=2)
    a, b = generate_toy_faces(spec, 5), generate_toy_faces(spec, 5)
    assert a.manifest == b.manifest
    assert all(np.array_equal(a.images[k], b.images[k]) for k in a.images)
    c = generate_toy_faces(spec, 6)
    assert not np.array_equal(a.images["toy0000_vis00"], c.images["toy0000_vis00"])


@settings(deadline=None, max_examples=25)
@given(st.integers(0, 2 ** 31), st.integers(2, 30), st.integers(0, 4))
def test_identities_respect_margin(seed, n, k):
    n = min(n, 12) if k == 4 else n  # four separated parameters leave little room
    spec = ToyFaceSpec(num_identities=n, min_differing=k)
    units = sample_identities(spec, seed)
    assert units.shape == (n, len(PARAM_NAMES))
    assert np.all((units >= 0) & (units <= 1))
    for i in range(n):
        for j in range(i):
            assert np.sum(np.abs(units[i] - units[j]) >= spec.margin) >= k


def test_unsatisfiable_identity_rule():
    with pytest.raises(ValueError):
        sample_identities(ToyFaceSpec(num_identities=50, margin=0.9, min_differing=6), 0, max_tries=2000)


def test_spec_validation():
    with pytest.raises(ValueError):
        ToyFaceSpec(num_identities=0)
    with pytest.raises(ValueError):
        ToyFaceSpec(eye_size=(3.0, 1.0))
    with pytest.raises(ValueError):
        ToyFaceSpec(modalities=("XRAY",))


def test_landmarks_follow_the_rendered_eyes():
    spec = ToyFaceSpec(num_identities=4, images_per_identity=3, eye_size=(4.0, 5.0), **QUIET)
    toy = generate_toy_faces(spec, 1)
    for rec in toy.manifest.records:
        for lm in rec.landmarks[:2]:
            assert np.linalg.norm(dark_centroid(toy.images[rec.image_id], lm) - lm) <= 0.5


def test_alignment_removes_the_pose_jitter():
    spec = ToyFaceSpec(num_identities=1, images_per_identity=4, part_jitter=0.0, **QUIET)
    toy = generate_toy_faces(spec, 2)
    crops = [align_and_crop(r, toy.images[r.image_id]).pixels for r in toy.manifest.records]
    raw = [toy.images[r.image_id] for r in toy.manifest.records]
    spread = lambda ims: np.mean([np.abs(ims[0] - im).mean() for im in ims[1:]])
    assert spread(crops) < 0.25 * spread(raw)


def test_second_modality_is_darker():
    spec = ToyFaceSpec(num_identities=5, images_per_identity=3, modalities=("VIS", "NIR"))
    toy = generate_toy_faces(spec, 3)
    by_mod = {m: np.mean([toy.images[r.image_id].mean() for r in toy.manifest.records if r.modality.value == m])
              for m in ("VIS", "NIR")}
    assert by_mod["NIR"] < by_mod["VIS"]
    assert len(toy.manifest) == 30


def test_written_tree(tmp_path):
    spec = ToyFaceSpec(num_identities=2, images_per_identity=2)
    toy = generate_toy_faces(spec, 0, tmp_path)
    m = load_manifest(tmp_path / "manifest.tsv")
    assert m == toy.manifest
    for rec in m.records:
        img = load_image(tmp_path / rec.path)
        assert np.max(np.abs(img - toy.images[rec.image_id])) <= 0.5 / 255 + 1e-12


def test_part_jitter_varies_within_identity():
    base = dict(num_identities=1, images_per_identity=2, rotation_deg=0.0, scale_jitter=0.0, shift=0.0, **QUIET)
    still = generate_toy_faces(ToyFaceSpec(**base), 0)
    moving = generate_toy_faces(ToyFaceSpec(part_jitter=0.1, **base), 0)
    assert np.array_equal(still.images["toy0000_vis00"], still.images["toy0000_vis01"])
    assert not np.array_equal(moving.images["toy0000_vis00"], moving.images["toy0000_vis01"])


def test_spec_example_trees_are_byte_identical(tmp_path):
    spec = ToyFaceSpec(num_identities=10, images_per_identity=4)
    generate_toy_faces(spec, 1, tmp_path / "a")
    generate_toy_faces(spec, 1, tmp_path / "b")
    files = lambda root: {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    assert len(a) == 41 and a == b


def test_nearest_centroid_beats_chance():
    spec = ToyFaceSpec(num_identities=10, images_per_identity=4)
    toy = generate_toy_faces(spec, 1)
    crops = {r.image_id: align_and_crop(r, toy.images[r.image_id]).pixels.ravel() for r in toy.manifest.records}
    correct = 0
    for rec in toy.manifest.records:  # leave-one-out
        best, best_d = None, np.inf
        for s in toy.manifest.subjects:
            others = [crops[r.image_id] for r in toy.manifest.images_of(s) if r.image_id != rec.image_id]
            d = np.linalg.norm(crops[rec.image_id] - np.mean(others, axis=0))
            if d < best_d:
                best, best_d = s, d
        correct += best == rec.subject_id
    assert correct / len(toy.manifest) > 0.1 + 0.15
