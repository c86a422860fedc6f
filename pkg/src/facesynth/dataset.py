"""Face records, manifests, alignment to the canonical frame and part layouts.

Coordinates are continuous: pixel ``(row, col)`` covers ``[col, col+1) x
[row, row+1)`` so its center sits at ``(col + 0.5, row + 0.5)``.  A horizontal
flip of a ``W``-wide image therefore maps ``x`` to ``W - x``.
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

CANONICAL_SIZE = 100
CANONICAL_LEFT_EYE = (30.0, 40.0)
CANONICAL_RIGHT_EYE = (70.0, 40.0)

# (width, height) as fractions of the interocular distance
EYE_BOX = (0.55, 0.4)
NOSE_BOX = (0.5, 0.55)
MOUTH_BOX = (0.8, 0.4)

MIN_EYE_DISTANCE = 2.0
ORGANS = ("LE", "RE", "N", "M")


class ManifestError(ValueError):
    """Raised for malformed manifest content; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class AlignmentError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class Modality(str, Enum):
    VIS = "VIS"
    NIR = "NIR"


@dataclass(frozen=True)
class FaceRecord:
    image_id: str
    subject_id: str
    modality: Modality
    path: str
    landmarks: tuple  # ((x, y),) * 4: left eye, right eye, nose tip, mouth center

    def __post_init__(self):
        if not self.subject_id:
            raise ManifestError("empty subject_id")
        if len(self.landmarks) != 4:
            raise ManifestError(f"expected 4 landmarks, got {len(self.landmarks)}")
        pts = np.asarray(self.landmarks, dtype=float)
        if pts.shape != (4, 2) or not np.all(np.isfinite(pts)):
            raise ManifestError("landmarks must be 4 finite (x, y) points")

    @property
    def landmark_array(self) -> np.ndarray:
        return np.asarray(self.landmarks, dtype=float)


@dataclass
class CanonicalImage:
    pixels: np.ndarray  # (100, 100, C) float, values in [0, 1]
    image_id: str = ""
    landmarks: np.ndarray | None = None  # canonical-frame landmarks, shape (4, 2)

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class Rect:
    """Half-open integer rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return max(self.width, 0) * max(self.height, 0)

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def reflect(self, width: int) -> "Rect":
        return Rect(width - self.x1, self.y0, width - self.x0, self.y1)

    def overlaps(self, other: "Rect") -> bool:
        return (
            self.x0 < other.x1 and other.x0 < self.x1
            and self.y0 < other.y1 and other.y0 < self.y1
        )


@dataclass(frozen=True)
class PartLayout:
    LE: Rect
    RE: Rect
    N: Rect
    M: Rect

    def rect(self, part: str) -> Rect:
        return getattr(self, part)

    def mirrored(self, width: int = CANONICAL_SIZE) -> "PartLayout":
        """Layout of the horizontally flipped image: rectangles reflect and the eyes swap roles."""
        return PartLayout(
            LE=self.RE.reflect(width),
            RE=self.LE.reflect(width),
            N=self.N.reflect(width),
            M=self.M.reflect(width),
        )


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    index: "OrderedDict[str, list[int]]" = field(default_factory=OrderedDict)

    @classmethod
    def from_records(cls, records) -> "DatasetManifest":
        records = list(records)
        seen = set()
        index: OrderedDict[str, list[int]] = OrderedDict()
        for k, rec in enumerate(records):
            if rec.image_id in seen:
                raise ManifestError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            index.setdefault(rec.subject_id, []).append(k)
        return cls(records=records, index=index)

    @property
    def subjects(self) -> list[str]:
        return list(self.index)

    @property
    def counts(self) -> dict[str, int]:
        return {s: len(ix) for s, ix in self.index.items()}

    def images_of(self, subject_id: str) -> list[FaceRecord]:
        return [self.records[k] for k in self.index[subject_id]]

    def by_id(self) -> dict[str, FaceRecord]:
        return {r.image_id: r for r in self.records}

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------- manifest I/O


def _format_number(v: float) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def parse_manifest_line(line: str, lineno: int | None = None) -> FaceRecord | None:
    stripped = line.strip()
    if not stripped or stripped.startswith("#"):
        return None
    fields = line.rstrip("\r\n").split("\t")
    fields = [f.strip() for f in fields]
    if len(fields) != 12:
        n_numbers = max(len(fields) - 4, 0)
        raise ManifestError(
            f"expected 12 tab-separated fields (4 landmarks), got {len(fields)}"
            f" ({n_numbers // 2} landmarks)",
            lineno,
        )
    image_id, subject_id, modality, path = fields[:4]
    try:
        mod = Modality(modality)
    except ValueError:
        raise ManifestError(f"unknown modality {modality!r}", lineno) from None
    try:
        numbers = [float(x) for x in fields[4:]]
    except ValueError as exc:
        raise ManifestError(f"bad landmark value: {exc}", lineno) from None
    landmarks = tuple((numbers[2 * k], numbers[2 * k + 1]) for k in range(4))
    try:
        return FaceRecord(image_id, subject_id, mod, path, landmarks)
    except ManifestError as exc:
        raise ManifestError(str(exc), lineno) from None


def parse_manifest(text: str) -> DatasetManifest:
    records = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        rec = parse_manifest_line(line, lineno)
        if rec is None:
            continue
        if rec.image_id in seen:
            raise ManifestError(f"duplicate image_id {rec.image_id!r}", lineno)
        seen.add(rec.image_id)
        records.append(rec)
    return DatasetManifest.from_records(records)


def load_manifest(path) -> DatasetManifest:
    """Read a tab-separated manifest.  Image files are not touched here."""
    text = Path(path).read_text(encoding="utf-8")
    return parse_manifest(text)


def format_record(rec: FaceRecord) -> str:
    nums = [_format_number(v) for pt in rec.landmarks for v in pt]
    return "\t".join([rec.image_id, rec.subject_id, rec.modality.value, rec.path, *nums])


def serialize_manifest(manifest: DatasetManifest) -> str:
    return "".join(format_record(r) + "\n" for r in manifest.records)


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(serialize_manifest(manifest), encoding="utf-8")


def resolve_path(record: FaceRecord, base_dir) -> Path:
    p = Path(record.path)
    return p if p.is_absolute() or base_dir is None else Path(base_dir) / p


# ------------------------------------------------------------------ image I/O

CACHE_MAGIC = b"FSCI"


def load_image(path) -> np.ndarray:
    """Decode a PNG (or raw cache file) into an (H, W, C) float64 array in [0, 1]."""
    path = Path(path)
    if path.suffix == ".f32":
        return read_canonical_cache(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB" if "A" in im.mode or im.mode == "P" else "L")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return arr


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(pixels)).save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def save_image(pixels: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(pixels))


def write_canonical_cache(pixels: np.ndarray, path) -> None:
    """Raw little-endian float32 with a 16-byte header: magic, H, W, C."""
    arr = np.asarray(pixels, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    Path(path).write_bytes(CACHE_MAGIC + struct.pack("<III", h, w, c) + arr.tobytes(order="C"))


def read_canonical_cache(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise ValueError(f"{path}: not a canonical image cache")
    h, w, c = struct.unpack("<III", data[4:16])
    arr = np.frombuffer(data, dtype="<f4", offset=16)
    if arr.size != h * w * c:
        raise ValueError(f"{path}: truncated cache ({arr.size} of {h * w * c} values)")
    return arr.reshape(h, w, c).astype(np.float64)


# ------------------------------------------------------------------ alignment


def similarity_from_eyes(left_eye, right_eye, target_left=CANONICAL_LEFT_EYE,
                         target_right=CANONICAL_RIGHT_EYE) -> np.ndarray:
    """2x3 matrix mapping source points to canonical points (rotation, uniform scale, shift)."""
    src = np.asarray(right_eye, float) - np.asarray(left_eye, float)
    dst = np.asarray(target_right, float) - np.asarray(target_left, float)
    if np.hypot(*src) < MIN_EYE_DISTANCE:
        raise AlignmentError(f"degenerate landmarks: eye distance {np.hypot(*src):.3f} px")
    # complex ratio gives scale * exp(i * angle)
    z = complex(*dst) / complex(*src)
    a, b = z.real, z.imag
    rot = np.array([[a, -b], [b, a]])
    shift = np.asarray(target_left, float) - rot @ np.asarray(left_eye, float)
    return np.hstack([rot, shift[:, None]])


def transform_points(matrix: np.ndarray, points) -> np.ndarray:
    pts = np.asarray(points, float)
    return pts @ matrix[:, :2].T + matrix[:, 2]


def warp_similarity(raw: np.ndarray, matrix: np.ndarray, size: int = CANONICAL_SIZE) -> np.ndarray:
    """Inverse-map the output grid through ``matrix`` and sample bilinearly with border replication."""
    if raw.ndim == 2:
        raw = raw[:, :, None]
    rot, shift = matrix[:, :2], matrix[:, 2]
    inv = np.linalg.inv(rot)
    cols, rows = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5)
    out_pts = np.stack([cols.ravel(), rows.ravel()], axis=1)
    src = (out_pts - shift) @ inv.T
    src_col = src[:, 0] - 0.5
    src_row = src[:, 1] - 0.5
    # exact integer sample positions keep the identity case pixel-exact
    src_col = np.where(np.abs(src_col - np.rint(src_col)) < 1e-9, np.rint(src_col), src_col)
    src_row = np.where(np.abs(src_row - np.rint(src_row)) < 1e-9, np.rint(src_row), src_row)
    out = np.empty((size, size, raw.shape[2]))
    for ch in range(raw.shape[2]):
        out[:, :, ch] = ndimage.map_coordinates(
            raw[:, :, ch], [src_row, src_col], order=1, mode="nearest"
        ).reshape(size, size)
    return np.clip(out, 0.0, 1.0)


def align_and_crop(record: FaceRecord, raw: np.ndarray) -> CanonicalImage:
    """Map the record's eye centers onto the canonical eye positions of a 100x100 frame."""
    pts = record.landmark_array
    h, w = raw.shape[:2]
    if np.any(pts < 0) or np.any(pts[:, 0] > w) or np.any(pts[:, 1] > h):
        raise AlignmentError(f"{record.image_id}: landmarks outside the {w}x{h} image")
    matrix = similarity_from_eyes(pts[0], pts[1])
    pixels = warp_similarity(raw, matrix)
    return CanonicalImage(pixels=pixels, image_id=record.image_id,
                          landmarks=transform_points(matrix, pts))


def canonical_record(record: FaceRecord, path: str) -> FaceRecord:
    """The record as it appears after alignment: new path, canonical-frame landmarks."""
    matrix = similarity_from_eyes(record.landmark_array[0], record.landmark_array[1])
    pts = transform_points(matrix, record.landmark_array)
    pts = np.round(pts, 6) + 0.0
    return replace(record, path=path, landmarks=tuple(map(tuple, pts.tolist())))


# -------------------------------------------------------------- part layout


def _edge(e: float, size: int, frame: int) -> int:
    """Round a box's low edge; exact ties go toward the frame midline so the rule commutes with flips."""
    lo = int(np.floor(e))
    if e - lo != 0.5:
        return int(np.floor(e + 0.5))
    # candidates lo and lo + 1: keep the one whose box center is nearer frame / 2
    return lo if abs(lo + size / 2 - frame / 2) <= abs(lo + 1 + size / 2 - frame / 2) else lo + 1


def _box(center, size_frac, d, frame) -> Rect:
    w = int(np.floor(size_frac[0] * d + 0.5))
    h = int(np.floor(size_frac[1] * d + 0.5))
    cx, cy = center
    x0 = _edge(cx - w / 2, w, frame)
    y0 = _edge(cy - h / 2, h, frame)
    x1, y1 = x0 + w, y0 + h
    x0, x1 = max(x0, 0), min(x1, frame)
    y0, y1 = max(y0, 0), min(y1, frame)
    return Rect(x0, y0, x1, y1)


def derive_part_layout(landmarks, frame: int = CANONICAL_SIZE) -> PartLayout:
    """Organ rectangles sized proportionally to the interocular distance."""
    pts = np.asarray(landmarks, float)
    if pts.shape != (4, 2):
        raise LayoutError("need 4 canonical landmarks")
    d = float(np.hypot(*(pts[1] - pts[0])))
    rects = {
        "LE": _box(pts[0], EYE_BOX, d, frame),
        "RE": _box(pts[1], EYE_BOX, d, frame),
        "N": _box(pts[2], NOSE_BOX, d, frame),
        "M": _box(pts[3], MOUTH_BOX, d, frame),
    }
    for name, r in rects.items():
        if r.width <= 0 or r.height <= 0:
            raise LayoutError(f"part {name} rectangle degenerates after clipping: {r}")
    if rects["LE"].overlaps(rects["RE"]):
        raise LayoutError("eye rectangles overlap")
    return PartLayout(**rects)


def mirror(image: CanonicalImage) -> CanonicalImage:
    """Horizontal flip; landmarks follow and the two eyes swap roles."""
    w = image.pixels.shape[1]
    lm = None
    if image.landmarks is not None:
        lm = np.asarray(image.landmarks, float).copy()
        lm[:, 0] = w - lm[:, 0]
        lm[[0, 1]] = lm[[1, 0]]
    return CanonicalImage(pixels=image.pixels[:, ::-1, :].copy(), image_id=image.image_id, landmarks=lm)
