"""Part-swap compositing: bitcodes, virtual subjects, dataset plans and rendering.

A bitcode assigns each of the five parts ``[LE, RE, N, M, R]`` to one of two
parents: bit 0 takes the part from parent ``i``, bit 1 from parent ``j``.  The
code is written as a 5-character string with LE first; its integer value reads
that string as binary, so the R bit is the least significant one.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import combinations
from pathlib import Path
from urllib.parse import quote

import numpy as np

from .blending import hard_paste, poisson_blend
from .dataset import (
    CanonicalImage,
    DatasetManifest,
    FaceRecord,
    Modality,
    PartLayout,
    derive_part_layout,
    encode_png,
    format_record,
    load_image,
    mirror,
    resolve_path,
)

log = logging.getLogger(__name__)

PARTS = ("LE", "RE", "N", "M", "R")
PASTE_ORDER = ("N", "LE", "RE", "M")
NUM_CODES = 2 ** len(PARTS)
FULL = NUM_CODES - 1
STRATEGIES = ("inter", "intra", "self", "cross_modality")


class PlanError(ValueError):
    pass


class BlendMode(str, Enum):
    HARD = "HardPaste"
    POISSON = "Poisson"


@dataclass(frozen=True, order=True)
class BitCode:
    value: int

    def __post_init__(self):
        if not 0 <= self.value < NUM_CODES:
            raise ValueError(f"bitcode {self.value} out of range")

    @classmethod
    def parse(cls, bits: str) -> "BitCode":
        if len(bits) != len(PARTS) or set(bits) - {"0", "1"}:
            raise ValueError(f"bad bitcode {bits!r}")
        return cls(int(bits, 2))

    @property
    def bits(self) -> str:
        return format(self.value, f"0{len(PARTS)}b")

    def bit(self, part: str) -> int:
        return int(self.bits[PARTS.index(part)])

    def inverted(self) -> "BitCode":
        return BitCode(FULL - self.value)

    @property
    def is_original(self) -> bool:
        return self.value in (0, FULL)

    def __str__(self):
        return self.bits


def enumerate_bitcodes(num_parts: int = len(PARTS)) -> list:
    """All codes that actually mix both parents, in ascending order."""
    if num_parts == len(PARTS):
        return [BitCode(v) for v in range(1, FULL)]
    return [format(v, f"0{num_parts}b") for v in range(1, 2 ** num_parts - 1)]


def count_virtual_subjects(num_subjects: int) -> int:
    if num_subjects < 0:
        raise ValueError("num_subjects must be >= 0")
    return 30 * num_subjects * (num_subjects - 1) // 2


def count_intra_images(n_images: int) -> int:
    if n_images < 0:
        raise ValueError("n_images must be >= 0")
    return 30 * n_images * (n_images - 1) // 2


def _q(s: str) -> str:
    return quote(s, safe="").replace("~", "%7E")


def virtual_subject_id(subject_i: str, subject_j: str, code: BitCode) -> str:
    """Canonical label for the mix of two real subjects.

    ``(i, j, c)`` and ``(j, i, ~c)`` describe the same part assignment and get
    the same label; the stored form is the one whose R part comes from the
    first subject.
    """
    if subject_i == subject_j:
        raise ValueError("a virtual subject needs two distinct subjects")
    if code.value & 1:
        subject_i, subject_j, code = subject_j, subject_i, code.inverted()
    return f"{_q(subject_i)}~{_q(subject_j)}~{code.bits}"


def label_dirname(label: str) -> str:
    # virtual labels contain '~', quoted real ids never do
    return label if "~" in label else _q(label)


@dataclass(frozen=True)
class SynthesisRecipe:
    subject_i: str
    subject_j: str
    code: BitCode
    image_s: int
    image_t: int
    mirror_i: bool = False
    mirror_j: bool = False
    blend: BlendMode = BlendMode.HARD

    def __post_init__(self):
        if (self.subject_i == self.subject_j and self.image_s == self.image_t
                and self.mirror_i == self.mirror_j):
            raise ValueError("recipe with both parents equal must mirror exactly one of them")

    def swapped(self) -> "SynthesisRecipe":
        """The equivalent recipe with the parents' roles exchanged."""
        return SynthesisRecipe(self.subject_j, self.subject_i, self.code.inverted(),
                               self.image_t, self.image_s, self.mirror_j, self.mirror_i, self.blend)

    def canonical(self) -> "SynthesisRecipe":
        return self.swapped() if self.code.value & 1 else self

    @property
    def label(self) -> str:
        if self.subject_i == self.subject_j:
            return self.subject_i
        return virtual_subject_id(self.subject_i, self.subject_j, self.code)

    def to_line(self) -> str:
        return "\t".join([
            self.subject_i, self.subject_j, self.code.bits, str(self.image_s), str(self.image_t),
            str(int(self.mirror_i)), str(int(self.mirror_j)), self.blend.value,
        ])

    @classmethod
    def from_line(cls, line: str) -> "SynthesisRecipe":
        f = line.rstrip("\r\n").split("\t")
        if len(f) != 8:
            raise ValueError(f"recipe line needs 8 fields, got {len(f)}")
        return cls(f[0], f[1], BitCode.parse(f[2]), int(f[3]), int(f[4]),
                   f[5] == "1", f[6] == "1", BlendMode(f[7]))


def self_synthesis_recipes(record: FaceRecord, manifest: DatasetManifest | None = None,
                           blend: BlendMode = BlendMode.HARD) -> list:
    """The 32 composites of an image with its own mirror, originals included.

    Code 00000 reproduces the image and 11111 its mirror.
    """
    index = 0
    if manifest is not None:
        ids = [r.image_id for r in manifest.images_of(record.subject_id)]
        index = ids.index(record.image_id)
    return [
        SynthesisRecipe(record.subject_id, record.subject_id, BitCode(v), index, index,
                        mirror_i=False, mirror_j=True, blend=blend)
        for v in range(NUM_CODES)
    ]


# -------------------------------------------------------------------- planning


@dataclass
class PlanTargets:
    inter: int = 0
    intra: int = 0
    self: int = 0
    cross_modality: int = 0
    # optional number of (virtual) identities the inter/intra recipes are drawn from
    inter_ids: int | None = None
    intra_ids: int | None = None

    @property
    def total(self) -> int:
        return self.inter + self.intra + self.self + self.cross_modality


@dataclass
class SynthesisPlan:
    recipes: list
    seed: int
    counts: dict
    strategies: list = field(default_factory=list)

    def __len__(self):
        return len(self.recipes)

    def labels(self) -> list:
        return [r.label for r in self.recipes]


class _Space:
    """Canonical recipe keys ``(a * N + b) * 32 + code`` over global image indices."""

    def __init__(self, n_images: int):
        self.n = n_images

    def encode(self, a, b, c):
        a, b, c = (np.asarray(v, dtype=np.int64) for v in (a, b, c))
        flip = (c & 1).astype(bool)
        a2 = np.where(flip, b, a)
        b2 = np.where(flip, a, b)
        c2 = np.where(flip, FULL - c, c)
        return (a2 * self.n + b2) * NUM_CODES + c2

    def decode(self, key: int):
        key = int(key)
        c = key % NUM_CODES
        ab = key // NUM_CODES
        return ab // self.n, ab % self.n, c


def _draw_codes(rng, k):
    return rng.integers(1, FULL, size=k)


def _sample_unique(rng, target, space_size, sample_batch, enumerate_all):
    if target == 0:
        return np.zeros(0, dtype=np.int64)
    if target > space_size:
        raise PlanError(f"target {target} exceeds the {space_size} distinct recipes available")
    if target * 2 > space_size:
        keys = enumerate_all()
        return keys[rng.permutation(keys.size)[:target]]
    chosen = np.zeros(0, dtype=np.int64)
    seen = set()
    while chosen.size < target:
        need = target - chosen.size
        batch = sample_batch(max(2 * need, 64))
        _, first = np.unique(batch, return_index=True)
        batch = batch[np.sort(first)]
        fresh = np.fromiter((k not in seen for k in batch.tolist()), bool, batch.size)
        batch = batch[fresh][:need]
        seen.update(batch.tolist())
        chosen = np.concatenate([chosen, batch])
    return chosen


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def plan_dataset(manifest: DatasetManifest, targets: PlanTargets | dict, seed: int) -> SynthesisPlan:
    """Draw distinct recipes for each strategy; a pure function of its arguments."""
    if isinstance(targets, dict):
        targets = PlanTargets(**targets)
    records = manifest.records
    n = len(records)
    space = _Space(max(n, 1))
    subjects = manifest.subjects
    subj_of = np.array([subjects.index(r.subject_id) for r in records], dtype=np.int64) if n else np.zeros(0, int)
    members = [np.array(manifest.index[s], dtype=np.int64) for s in subjects]
    sizes = np.array([m.size for m in members], dtype=np.int64)
    local = np.zeros(n, dtype=np.int64)
    for m in members:
        local[m] = np.arange(m.size)
    modality = np.array([r.modality.value for r in records])
    flat = np.concatenate(members) if members else np.zeros(0, np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)

    keys_by_strategy = {}

    # inter: different subjects
    rng = _rng(seed, 0)
    if targets.inter:
        if len(subjects) < 2:
            raise PlanError("inter-synthesis needs at least 2 subjects")
        if targets.inter_ids:
            keys_by_strategy["inter"] = _inter_with_ids(rng, targets, members, sizes, space)
        else:
            space_size = 30 * (n * n - int((sizes ** 2).sum())) // 2

            def batch(k):
                a = rng.integers(0, n, size=k)
                b = rng.integers(0, n, size=k)
                ok = subj_of[a] != subj_of[b]
                return space.encode(a[ok], b[ok], _draw_codes(rng, int(ok.sum())))

            def every():
                a, b = np.nonzero(subj_of[:, None] < subj_of[None, :])
                return _all_codes(space, a, b)

            keys_by_strategy["inter"] = _sample_unique(rng, targets.inter, space_size, batch, every)

    # intra: two different images of one subject
    rng = _rng(seed, 1)
    if targets.intra:
        eligible = np.nonzero(sizes >= 2)[0]
        if targets.intra_ids:
            if targets.intra_ids > eligible.size:
                raise PlanError(f"only {eligible.size} subjects have 2+ images")
            eligible = np.sort(rng.choice(eligible, size=targets.intra_ids, replace=False))
        pair_counts = sizes[eligible] * (sizes[eligible] - 1)
        space_size = int(30 * pair_counts.sum() // 2)
        if space_size == 0:
            raise PlanError("intra-synthesis needs a subject with at least 2 images")
        probs = pair_counts / pair_counts.sum()

        def batch(k):
            subj = eligible[rng.choice(eligible.size, size=k, p=probs)]
            m = sizes[subj]
            s = (rng.random(k) * m).astype(np.int64)
            t = (rng.random(k) * (m - 1)).astype(np.int64)
            t += t >= s
            a = flat[starts[subj] + s]
            b = flat[starts[subj] + t]
            return space.encode(a, b, _draw_codes(rng, k))

        def every():
            a, b = [], []
            for q in eligible:
                for x, y in combinations(members[q], 2):
                    a.append(x)
                    b.append(y)
            return _all_codes(space, np.array(a, np.int64), np.array(b, np.int64))

        keys_by_strategy["intra"] = _sample_unique(rng, targets.intra, space_size, batch, every)

    # self: an image with its own mirror
    rng = _rng(seed, 2)
    if targets.self:
        def batch(k):
            a = rng.integers(0, n, size=k)
            return (a * n + a) * NUM_CODES + _draw_codes(rng, k)

        def every():
            a = np.repeat(np.arange(n, dtype=np.int64), 30)
            c = np.tile(np.arange(1, FULL, dtype=np.int64), n)
            return (a * n + a) * NUM_CODES + c

        keys_by_strategy["self"] = _sample_unique(rng, targets.self, 30 * n, batch, every)

    # cross-modality: parents with different modality tags
    rng = _rng(seed, 3)
    if targets.cross_modality:
        counts_mod = {m: int((modality == m).sum()) for m in np.unique(modality)}
        if len(counts_mod) < 2:
            raise PlanError("cross-modality synthesis needs images of two modalities")
        space_size = 30 * (n * n - sum(v * v for v in counts_mod.values())) // 2

        def batch(k):
            a = rng.integers(0, n, size=k)
            b = rng.integers(0, n, size=k)
            ok = modality[a] != modality[b]
            return space.encode(a[ok], b[ok], _draw_codes(rng, int(ok.sum())))

        def every():
            a, b = np.nonzero((modality[:, None] != modality[None, :]) & np.triu(np.ones((n, n), bool), 1))
            return _all_codes(space, a, b)

        keys_by_strategy["cross_modality"] = _sample_unique(
            rng, targets.cross_modality, space_size, batch, every)

    recipes, strategies = [], []
    for name in STRATEGIES:
        for key in keys_by_strategy.get(name, ()):
            a, b, c = space.decode(key)
            ra, rb = records[a], records[b]
            recipes.append(SynthesisRecipe(
                ra.subject_id, rb.subject_id, BitCode(c), int(local[a]), int(local[b]),
                mirror_i=False, mirror_j=(name == "self"),
            ))
            strategies.append(name)
    counts = {name: int(len(keys_by_strategy.get(name, ()))) for name in STRATEGIES}
    return SynthesisPlan(recipes=recipes, seed=seed, counts=counts, strategies=strategies)


def _all_codes(space, a, b):
    codes = np.arange(1, FULL, dtype=np.int64)
    a = np.repeat(np.asarray(a, np.int64), codes.size)
    b = np.repeat(np.asarray(b, np.int64), codes.size)
    c = np.tile(codes, a.size // codes.size)
    return np.unique(space.encode(a, b, c))


def _inter_with_ids(rng, targets, members, sizes, space):
    """Pick ``inter_ids`` virtual subjects, then draw recipes only among them."""
    n_subj = sizes.size
    total_vs = count_virtual_subjects(n_subj)
    if targets.inter_ids > total_vs:
        raise PlanError(f"{targets.inter_ids} virtual subjects requested, {total_vs} exist")
    chosen = set()
    vs = []
    while len(vs) < targets.inter_ids:
        i, j = rng.choice(n_subj, size=2, replace=False)
        c = int(rng.integers(1, FULL))
        if c & 1:
            i, j, c = j, i, FULL - c
        if (i, j, c) not in chosen:
            chosen.add((i, j, c))
            vs.append((int(i), int(j), c))
    space_size = sum(int(sizes[i] * sizes[j]) for i, j, _ in vs)
    if targets.inter > space_size:
        raise PlanError(f"target {targets.inter} exceeds the {space_size} recipes of the chosen virtual subjects")

    def batch(k):
        pick = rng.integers(0, len(vs), size=k)
        out = np.empty(k, dtype=np.int64)
        for q, p in enumerate(pick):
            i, j, c = vs[p]
            a = members[i][rng.integers(0, sizes[i])]
            b = members[j][rng.integers(0, sizes[j])]
            out[q] = (a * space.n + b) * NUM_CODES + c
        return out

    def every():
        keys = [(a * space.n + b) * NUM_CODES + c
                for i, j, c in vs for a in members[i] for b in members[j]]
        return np.array(keys, dtype=np.int64)

    return _sample_unique(rng, targets.inter, space_size, batch, every)


def save_recipes(plan: SynthesisPlan, path) -> None:
    Path(path).write_text("".join(r.to_line() + "\n" for r in plan.recipes), encoding="utf-8")


def load_recipes(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [SynthesisRecipe.from_line(l) for l in lines if l.strip() and not l.startswith("#")]


# ------------------------------------------------------------------ composing


def resample_bilinear(patch: np.ndarray, height: int, width: int) -> np.ndarray:
    """Resize ``patch`` (h, w, C) to ``height x width`` with pixel-center-aligned bilinear sampling."""
    patch = np.asarray(patch, dtype=np.float64)
    h, w = patch.shape[:2]
    if (h, w) == (height, width):
        return patch.copy()
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = patch[y0][:, x0] * (1 - fx) + patch[y0][:, x1] * fx
    bottom = patch[y1][:, x0] * (1 - fx) + patch[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def compose(base: CanonicalImage, base_layout: PartLayout,
            injection: CanonicalImage, injection_layout: PartLayout,
            code: BitCode, blend: BlendMode = BlendMode.HARD) -> CanonicalImage:
    """Paste the injection's parts whose bit differs from the R bit onto the base."""
    out = np.array(base.pixels, dtype=np.float64, copy=True)
    base_side = code.bit("R")
    for part in PASTE_ORDER:
        if code.bit(part) == base_side:
            continue
        src, dst = injection_layout.rect(part), base_layout.rect(part)
        if src.area == 0 or dst.area == 0:
            raise ValueError(f"degenerate {part} rectangle")
        patch = resample_bilinear(injection.pixels[src.slices], dst.height, dst.width)
        if blend == BlendMode.POISSON:
            out = poisson_blend(out, patch, dst).image
        else:
            out = hard_paste(out, patch, dst)
    return CanonicalImage(np.clip(out, 0.0, 1.0), image_id=base.image_id, landmarks=base.landmarks)


def _parent(image: CanonicalImage, layout: PartLayout, mirrored: bool):
    if mirrored:
        return mirror(image), layout.mirrored(image.pixels.shape[1])
    return image, layout


def render_recipe(recipe: SynthesisRecipe, image_i: CanonicalImage, layout_i: PartLayout,
                  image_j: CanonicalImage, layout_j: PartLayout) -> CanonicalImage:
    pi, li = _parent(image_i, layout_i, recipe.mirror_i)
    pj, lj = _parent(image_j, layout_j, recipe.mirror_j)
    if recipe.code.bit("R") == 0:
        return compose(pi, li, pj, lj, recipe.code, recipe.blend)
    return compose(pj, lj, pi, li, recipe.code, recipe.blend)


def self_synthesis_images(image: CanonicalImage, layout: PartLayout | None = None,
                          blend: BlendMode = BlendMode.HARD) -> list:
    """Render all 32 Self-Synthesis variants of one canonical image."""
    if layout is None:
        layout = derive_part_layout(image.landmarks)
    dummy = FaceRecord(image.image_id or "img", "subject", Modality.VIS, "", ((0, 0),) * 4)
    return [render_recipe(r, image, layout, image, layout)
            for r in self_synthesis_recipes(dummy, blend=blend)]


# ------------------------------------------------------------------ execution


@dataclass
class SynthesisReport:
    total: int
    succeeded: int
    failures: list
    wall_time: float
    manifest_path: str | None = None

    @property
    def failed(self) -> int:
        return len(self.failures)


class ImageStore:
    """Loads canonical parents on demand; decode failures are remembered, not raised."""

    def __init__(self, manifest: DatasetManifest, base_dir=None):
        self.manifest = manifest
        self.base_dir = base_dir
        self._cache = {}

    def get(self, subject_id: str, index: int):
        key = (subject_id, index)
        if key not in self._cache:
            try:
                rec = self.manifest.images_of(subject_id)[index]
                pixels = load_image(resolve_path(rec, self.base_dir))
                lm = rec.landmark_array
                self._cache[key] = (rec, CanonicalImage(pixels, rec.image_id, lm), derive_part_layout(lm))
            except Exception as exc:  # noqa: BLE001  reported per recipe
                self._cache[key] = exc
        value = self._cache[key]
        if isinstance(value, Exception):
            raise value
        return value

    def preload(self, recipes):
        for r in recipes:
            for key in ((r.subject_i, r.image_s), (r.subject_j, r.image_t)):
                if key not in self._cache:
                    try:
                        self.get(*key)
                    except Exception:  # noqa: BLE001
                        pass


def synthetic_record(index: int, recipe: SynthesisRecipe, store: ImageStore) -> FaceRecord:
    base_is_i = recipe.code.bit("R") == 0
    subj, idx, mirrored = ((recipe.subject_i, recipe.image_s, recipe.mirror_i) if base_is_i
                           else (recipe.subject_j, recipe.image_t, recipe.mirror_j))
    rec, img, _ = store.get(subj, idx)
    lm = np.asarray(rec.landmark_array, float)
    if mirrored:
        lm = mirror(CanonicalImage(img.pixels, landmarks=lm)).landmarks
    label = recipe.label
    path = f"{label_dirname(label)}/{index:07d}.png"
    return FaceRecord(f"syn{index:07d}", label, rec.modality, path, tuple(map(tuple, lm.tolist())))


def execute_plan(plan: SynthesisPlan, manifest: DatasetManifest, out_dir, parallelism: int = 1,
                 base_dir=None) -> SynthesisReport:
    """Render every recipe to ``out_dir/<label>/<sequence>.png`` and write ``out_dir/manifest.tsv``."""
    t0 = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = ImageStore(manifest, base_dir)
    store.preload(plan.recipes)

    def work(k):
        recipe = plan.recipes[k]
        try:
            img_i, lay_i = store.get(recipe.subject_i, recipe.image_s)[1:]
            img_j, lay_j = store.get(recipe.subject_j, recipe.image_t)[1:]
            result = render_recipe(recipe, img_i, lay_i, img_j, lay_j)
            rec = synthetic_record(k, recipe, store)
            target = out_dir / rec.path
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(encode_png(result.pixels))
            return k, rec, None
        except Exception as exc:  # noqa: BLE001  per-recipe failure
            return k, None, f"{type(exc).__name__}: {exc}"

    indices = range(len(plan.recipes))
    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(work, indices))
    else:
        results = [work(k) for k in indices]

    records, failures = [], []
    for k, rec, err in sorted(results, key=lambda x: x[0]):
        if err is None:
            records.append(rec)
        else:
            failures.append((k, err))
            log.warning("recipe %d failed: %s", k, err)
    manifest_path = out_dir / "manifest.tsv"
    manifest_path.write_text("".join(format_record(r) + "\n" for r in records), encoding="utf-8")
    return SynthesisReport(len(plan.recipes), len(records), failures,
                           time.perf_counter() - t0, str(manifest_path))


def with_blend(plan: SynthesisPlan, blend: BlendMode) -> SynthesisPlan:
    return replace(plan, recipes=[replace(r, blend=blend) for r in plan.recipes])
