from itertools import combinations, permutations

import numpy as np
import pytest
from conftest import CANON_LMS, make_manifest, random_canonical
from hypothesis import given, settings
from hypothesis import strategies as st

from facesynth.dataset import CanonicalImage, Modality, derive_part_layout, load_image, load_manifest, mirror
from facesynth.synthesis import (
    BitCode, BlendMode, PlanError, PlanTargets, SynthesisPlan, SynthesisRecipe, compose,
    count_intra_images, count_virtual_subjects, enumerate_bitcodes, execute_plan, label_dirname,
    load_recipes, plan_dataset, render_recipe, resample_bilinear, save_recipes, self_synthesis_images,
    self_synthesis_recipes, virtual_subject_id,
)

LAYOUT = derive_part_layout(CANON_LMS)


# ---------------------------------------------------------------- bitcodes and counting


def test_thirty_codes():
    codes = enumerate_bitcodes()
    assert len(codes) == 30
    assert [c.value for c in codes] == list(range(1, 31))
    assert "00000" not in {c.bits for c in codes} and "11111" not in {c.bits for c in codes}


def test_two_part_variant():
    assert enumerate_bitcodes(2) == ["01", "10"]


def test_bit_order():
    c = BitCode.parse("10001")
    assert c.value == 17
    assert c.bit("LE") == 1 and c.bit("R") == 1 and c.bit("N") == 0
    assert c.inverted().bits == "01110"


def _virtual_subjects_by_enumeration(k):
    # all ordered (i, j, c) with i != j, deduplicated through the label
    return len({virtual_subject_id(f"s{i}", f"s{j}", c) for i, j in permutations(range(k), 2)
                for c in enumerate_bitcodes()})


def _intra_by_enumeration(n):
    seen = set()
    for s, t in permutations(range(n), 2):
        for c in range(1, 31):
            seen.add(min((s, t, c), (t, s, 31 - c)))
    return len(seen)


@pytest.mark.parametrize("k", range(0, 7))
def test_count_virtual_subjects_matches_enumeration(k):
    assert count_virtual_subjects(k) == _virtual_subjects_by_enumeration(k)


@pytest.mark.parametrize("n", range(0, 5))
def test_count_intra_images_matches_enumeration(n):
    assert count_intra_images(n) == _intra_by_enumeration(n)


def test_count_examples():
    assert count_virtual_subjects(2) == 30
    assert count_virtual_subjects(5) == 300
    assert count_virtual_subjects(1) == count_virtual_subjects(0) == 0
    assert count_intra_images(2) == 30 and count_intra_images(5) == 300 and count_intra_images(1) == 0
    with pytest.raises(ValueError):
        count_virtual_subjects(-1)


# ---------------------------------------------------------------- labels and recipes


names = st.text(st.sampled_from("ab~%/ \t:"), min_size=1, max_size=4)


@given(names, names, st.integers(1, 30))
def test_virtual_subject_id_symmetry(a, b, c):
    if a == b:
        return
    code = BitCode(c)
    assert virtual_subject_id(a, b, code) == virtual_subject_id(b, a, code.inverted())


@given(names, names, st.integers(1, 30), names, names, st.integers(1, 30))
def test_virtual_subject_id_injective(a, b, c, a2, b2, c2):
    if a == b or a2 == b2:
        return
    same_assignment = {(a, b, c), (b, a, 31 - c)} & {(a2, b2, c2)}
    assert (virtual_subject_id(a, b, BitCode(c)) == virtual_subject_id(a2, b2, BitCode(c2))) == bool(same_assignment)


def test_label_dirname_is_filesystem_safe():
    vid = virtual_subject_id("a/b", "c", BitCode(2))
    assert "/" not in label_dirname(vid) and "/" not in label_dirname("x/y")


def test_recipe_file_round_trip(tmp_path):
    m = make_manifest([3, 2, 2])
    plan = plan_dataset(m, PlanTargets(inter=10, intra=5, self=4), seed=3)
    save_recipes(plan, tmp_path / "r.tsv")
    assert load_recipes(tmp_path / "r.tsv") == plan.recipes
    line = plan.recipes[0].to_line()
    assert len(line.split("\t")) == 8


def test_self_recipe_must_mirror_one_parent():
    with pytest.raises(ValueError):
        SynthesisRecipe("a", "a", BitCode(3), 0, 0)


# ---------------------------------------------------------------- compositing


def naive_bilinear(patch, height, width):
    """Per-pixel loop: map output pixel centers to input pixel centers, clamp, interpolate."""
    h, w, ch = patch.shape
    out = np.zeros((height, width, ch))
    for r in range(height):
        for c in range(width):
            y = min(max((r + 0.5) * h / height - 0.5, 0.0), h - 1.0)
            x = min(max((c + 0.5) * w / width - 0.5, 0.0), w - 1.0)
            r0, c0 = int(y), int(x)
            r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
            fy, fx = y - r0, x - c0
            out[r, c] = ((1 - fy) * ((1 - fx) * patch[r0, c0] + fx * patch[r0, c1])
                         + fy * ((1 - fx) * patch[r1, c0] + fx * patch[r1, c1]))
    return out


@settings(max_examples=50)
@given(st.integers(0, 2 ** 31), st.integers(1, 20), st.integers(1, 20))
def test_resample_matches_naive_oracle(seed, height, width):
    patch = np.random.default_rng(seed).random((8, 8, 2))
    assert np.allclose(resample_bilinear(patch, height, width), naive_bilinear(patch, height, width), atol=1e-12)


def test_resample_same_size_is_exact():
    patch = np.random.default_rng(0).random((5, 7, 1))
    assert np.array_equal(resample_bilinear(patch, 5, 7), patch)


def _two_parents(seed):
    rng = np.random.default_rng(seed)
    lms_j = np.array(CANON_LMS) + rng.uniform(-3, 3, (4, 2))
    lms_j[1, 1] = lms_j[0, 1]
    p0 = random_canonical(rng)
    p1 = CanonicalImage(rng.random((100, 100, 1)), "p1", lms_j)
    return p0, LAYOUT, p1, derive_part_layout(lms_j)


@given(st.integers(0, 2 ** 31), st.sampled_from([0, 1]))
def test_all_organs_from_base_is_identity(seed, rbit):
    p0, l0, p1, l1 = _two_parents(seed)
    code = BitCode(31 if rbit else 0)
    out = compose(p0, l0, p1, l1, code)
    assert np.array_equal(out.pixels, p0.pixels)


@given(st.integers(0, 2 ** 31), st.integers(0, 31))
def test_self_paste_identity(seed, c):
    p0, l0, _, _ = _two_parents(seed)
    out = compose(p0, l0, p0, l0, BitCode(c))
    assert np.array_equal(out.pixels, p0.pixels)


@settings(max_examples=100)
@given(st.integers(0, 2 ** 31), st.integers(1, 30), st.booleans(), st.booleans())
def test_recipe_symmetry(seed, c, mi, mj):
    p0, l0, p1, l1 = _two_parents(seed)
    r = SynthesisRecipe("a", "b", BitCode(c), 0, 1, mi, mj)
    a = render_recipe(r, p0, l0, p1, l1)
    s = r.swapped()
    b = render_recipe(s, p1, l1, p0, l0)
    assert np.array_equal(a.pixels, b.pixels)
    assert r.label == s.label


@given(st.integers(0, 2 ** 31), st.integers(1, 30))
def test_compose_idempotent_in_base(seed, c):
    p0, l0, p1, l1 = _two_parents(seed)
    code = BitCode(c & ~1)  # R from p0
    once = compose(p0, l0, p1, l1, code)
    twice = compose(once, l0, p1, l1, code)
    assert np.array_equal(once.pixels, twice.pixels)


def test_eyes_from_p1_pattern():
    p0, l0, p1, l1 = _two_parents(11)
    out = compose(p0, l0, p1, l1, BitCode.parse("11000")).pixels
    mask = np.zeros((100, 100), bool)
    for part in ("LE", "RE"):
        dst, src = l0.rect(part), l1.rect(part)
        mask[dst.slices] = True
        want = naive_bilinear(p1.pixels[src.slices], dst.height, dst.width)
        assert np.allclose(out[dst.slices], want, atol=1e-12)
    assert np.array_equal(out[~mask], p0.pixels[~mask])


def test_paste_order_mouth_wins_overlap():
    # nose box reaching into the mouth box: the later mouth paste owns the overlap
    lms = ((30.0, 40.0), (70.0, 40.0), (50.0, 62.0), (50.0, 75.0))
    lay = derive_part_layout(lms)
    assert lay.N.overlaps(lay.M)
    base = CanonicalImage(np.zeros((100, 100, 1)), "b", np.array(lms))
    inj = CanonicalImage(np.ones((100, 100, 1)), "i", np.array(lms))
    inj.pixels[lay.M.slices] = 0.5
    out = compose(base, lay, inj, lay, BitCode.parse("00110")).pixels
    assert np.all(out[lay.M.slices] == 0.5)


# ---------------------------------------------------------------- self-synthesis


def test_self_synthesis_has_32_variants_and_originals():
    rng = np.random.default_rng(4)
    img = random_canonical(rng)
    rec = make_manifest([1]).records[0]
    assert len(self_synthesis_recipes(rec)) == 32
    variants = self_synthesis_images(img)
    assert len(variants) == 32
    assert np.array_equal(variants[0].pixels, img.pixels)
    assert np.array_equal(variants[31].pixels, mirror(img).pixels)


@given(st.integers(0, 2 ** 31))
def test_symmetric_input_collapses(seed):
    half = np.random.default_rng(seed).random((100, 50, 1))
    sym = CanonicalImage(np.concatenate([half, half[:, ::-1]], axis=1), "s", np.array(CANON_LMS))
    variants = self_synthesis_images(sym)
    assert all(np.array_equal(v.pixels, sym.pixels) for v in variants)


# ---------------------------------------------------------------- planning


def test_plan_determinism():
    m = make_manifest([2, 2])
    a = plan_dataset(m, {"inter": 4, "intra": 2}, seed=7)
    b = plan_dataset(m, {"inter": 4, "intra": 2}, seed=7)
    assert a.recipes == b.recipes and len(a) == 6
    assert plan_dataset(m, {"inter": 4, "intra": 2}, seed=8).recipes != a.recipes


def test_inter_needs_two_subjects():
    with pytest.raises(PlanError):
        plan_dataset(make_manifest([3]), {"inter": 1}, seed=0)


def test_exhausting_the_space():
    m = make_manifest([2, 3, 1])
    n2 = 36 - (4 + 9 + 1)
    space = 30 * n2 // 2
    plan = plan_dataset(m, {"inter": space}, seed=0)
    keys = {(r.subject_i, r.image_s, r.subject_j, r.image_t, r.code.value) for r in plan.recipes}
    assert len(keys) == space
    with pytest.raises(PlanError):
        plan_dataset(m, {"inter": space + 1}, seed=0)
    intra_space = count_intra_images(2) + count_intra_images(3)
    assert len(plan_dataset(m, {"intra": intra_space}, seed=0)) == intra_space
    with pytest.raises(PlanError):
        plan_dataset(m, {"intra": intra_space + 1}, seed=0)


@settings(deadline=None, max_examples=60)
@given(st.lists(st.integers(1, 4), min_size=2, max_size=6), st.integers(0, 50), st.integers(0, 50),
       st.integers(0, 20), st.integers(0, 2 ** 32))
def test_plan_invariants(sizes, inter, intra, self_, seed):
    m = make_manifest(sizes)
    n = sum(sizes)
    inter = min(inter, 15 * (n * n - sum(k * k for k in sizes)) // 2)
    intra = min(intra, sum(count_intra_images(k) for k in sizes))
    self_ = min(self_, n)
    plan = plan_dataset(m, PlanTargets(inter=inter, intra=intra, self=self_), seed)
    assert len(plan) == inter + intra + self_
    assert plan.counts == {"inter": inter, "intra": intra, "self": self_, "cross_modality": 0}
    keys = set()
    for r, kind in zip(plan.recipes, plan.strategies):
        assert r.code.value not in (0, 31)
        if kind != "self":
            assert r.code.bit("R") == 0  # stored in canonical form
        assert 0 <= r.image_s < m.counts[r.subject_i] and 0 <= r.image_t < m.counts[r.subject_j]
        if kind == "inter":
            assert r.subject_i != r.subject_j
        elif kind == "intra":
            assert r.subject_i == r.subject_j and r.image_s != r.image_t
        else:
            assert r.subject_i == r.subject_j and r.image_s == r.image_t and r.mirror_j
        keys.add((kind, r.subject_i, r.image_s, r.subject_j, r.image_t, r.code.value))
    assert len(keys) == len(plan)


def test_cross_modality_parents_differ():
    m = make_manifest([2, 2, 2], modalities=[["VIS", "NIR"], ["VIS", "VIS"], ["NIR", "NIR"]])
    plan = plan_dataset(m, {"cross_modality": 100}, seed=1)
    mod = {(r.subject_id, k): r.modality for s in m.subjects for k, r in enumerate(m.images_of(s))}
    for r in plan.recipes:
        assert mod[(r.subject_i, r.image_s)] != mod[(r.subject_j, r.image_t)]
    with pytest.raises(PlanError):
        plan_dataset(make_manifest([2, 2]), {"cross_modality": 1}, seed=0)


def test_per_identity_quotas():
    m = make_manifest([15] * 10)
    plan = plan_dataset(m, PlanTargets(inter=1000, intra=500, inter_ids=5, intra_ids=5), seed=0)
    labels = plan.labels()
    assert len(labels) == 1500
    assert len(set(labels)) == 10
    counts = {lab: labels.count(lab) for lab in set(labels)}
    assert sum(counts.values()) / len(counts) == 150


# ---------------------------------------------------------------- execution


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_execute_plan_parallelism_invariant(image_tree, tmp_path):
    m, mpath, root = image_tree([3, 3, 2, 2])
    plan = plan_dataset(m, {"inter": 70, "intra": 20, "self": 10}, seed=5)
    for par in (1, 8):
        rep = execute_plan(plan, m, tmp_path / f"out{par}", parallelism=par, base_dir=root)
        assert rep.succeeded == 100 and rep.failed == 0
    assert _tree_bytes(tmp_path / "out1") == _tree_bytes(tmp_path / "out8")


def test_execute_plan_writes_labelled_tree(image_tree, tmp_path):
    m, mpath, root = image_tree([2, 2])
    plan = plan_dataset(m, {"inter": 5}, seed=2)
    rep = execute_plan(plan, m, tmp_path / "out", base_dir=root)
    out = load_manifest(rep.manifest_path)
    assert [r.subject_id for r in out.records] == plan.labels()
    for rec, recipe in zip(out.records, plan.recipes):
        assert rec.path.split("/")[0] == label_dirname(recipe.label)
        img = load_image(tmp_path / "out" / rec.path)
        assert img.shape == (100, 100, 1)
        base = m.images_of(recipe.subject_i)[recipe.image_s]
        assert rec.landmarks == base.landmarks


def test_execute_plan_reports_unreadable_image(image_tree, tmp_path):
    m, mpath, root = image_tree([2, 2, 2])
    (root / m.images_of("s2")[1].path).write_bytes(b"not a png")
    good = [r for r in plan_dataset(m, {"inter": 360}, seed=0).recipes
            if ("s2", 1) not in ((r.subject_i, r.image_s), (r.subject_j, r.image_t))][:99]
    bad = SynthesisRecipe("s0", "s2", BitCode(2), 0, 1)
    plan = SynthesisPlan(good[:50] + [bad] + good[50:], seed=0, counts={})
    rep = execute_plan(plan, m, tmp_path / "out", parallelism=4, base_dir=root)
    assert rep.succeeded == 99 and rep.failed == 1
    assert rep.failures[0][0] == 50


def test_poisson_blend_mode_renders(image_tree, tmp_path):
    p0, l0, p1, l1 = _two_parents(3)
    hard = compose(p0, l0, p1, l1, BitCode.parse("00010"))
    soft = compose(p0, l0, p1, l1, BitCode.parse("00010"), BlendMode.POISSON)
    outside = np.ones((100, 100), bool)
    outside[l0.M.slices] = False
    assert np.array_equal(hard.pixels[outside], soft.pixels[outside])
    assert not np.array_equal(hard.pixels, soft.pixels)
    assert soft.pixels.min() >= 0 and soft.pixels.max() <= 1
