"""Procedural face-like images with exact landmarks, for desk-scale experiments.

Each identity is a vector of part parameters (eye spacing and size, nose width
and length, mouth width and curvature).  Every image of an identity is the same
geometry seen through nuisance factors: a small similarity jitter, an
illumination gain and linear ramp, and pixel noise.  A second modality renders
the same identity under a stronger gain/ramp perturbation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest, FaceRecord, Modality, save_image, save_manifest

PARAM_NAMES = ("eye_spacing", "eye_size", "nose_width", "nose_length", "mouth_width", "mouth_curvature")


@dataclass(frozen=True)
class ToyFaceSpec:
    num_identities: int = 10
    images_per_identity: int = 4
    size: int = 100
    # identity parameter ranges, in canonical-frame pixels (curvature: pixels of sag)
    eye_spacing: tuple = (34.0, 46.0)
    eye_size: tuple = (2.5, 6.0)
    nose_width: tuple = (4.0, 14.0)
    nose_length: tuple = (12.0, 22.0)
    mouth_width: tuple = (14.0, 34.0)
    mouth_curvature: tuple = (-5.0, 5.0)
    # distinct identities differ by >= margin (fraction of range) in >= min_differing parameters
    margin: float = 0.15
    min_differing: int = 2
    # nuisance
    gain: tuple = (0.75, 1.15)
    ramp: float = 0.25  # max relative intensity change across the image
    rotation_deg: float = 4.0
    scale_jitter: float = 0.04
    shift: float = 2.0
    noise_sigma: float = 0.02
    part_jitter: float = 0.0  # per-image std of the part parameters, as a fraction of their range
    modalities: tuple = ("VIS",)
    # second modality: gain/ramp ranges replacing the ones above
    alt_gain: tuple = (0.45, 0.75)
    alt_ramp: float = 0.6

    def __post_init__(self):
        if self.num_identities < 1 or self.images_per_identity < 1:
            raise ValueError("need at least one identity and one image per identity")
        if not 0 <= self.min_differing <= len(PARAM_NAMES):
            raise ValueError(f"min_differing must be in [0, {len(PARAM_NAMES)}]")
        for name in PARAM_NAMES:
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"empty range for {name}")
        for m in self.modalities:
            Modality(m)

    @property
    def ranges(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)


@dataclass
class ToyFaces:
    manifest: DatasetManifest
    images: dict = field(default_factory=dict)  # image_id -> (H, W, 1) float
    params: dict = field(default_factory=dict)  # subject_id -> parameter vector


def _rng(seed: int, *stream) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def sample_identities(spec: ToyFaceSpec, seed: int, max_tries: int = 20_000) -> np.ndarray:
    """Unit-cube parameter vectors, pairwise separated per the margin rule."""
    rng = _rng(seed, 0)
    accepted = []
    for _ in range(max_tries):
        cand = rng.random(len(PARAM_NAMES))
        if all(np.sum(np.abs(cand - a) >= spec.margin) >= spec.min_differing for a in accepted):
            accepted.append(cand)
            if len(accepted) == spec.num_identities:
                return np.array(accepted)
    raise ValueError(f"could not place {spec.num_identities} identities with margin {spec.margin} "
                     f"in {spec.min_differing} parameters after {max_tries} draws")


def geometry(unit_params, spec: ToyFaceSpec) -> dict:
    lo, hi = spec.ranges.T
    p = dict(zip(PARAM_NAMES, lo + np.asarray(unit_params) * (hi - lo)))
    cx, eye_y = spec.size / 2, 0.4 * spec.size
    p["left_eye"] = (cx - p["eye_spacing"] / 2, eye_y)
    p["right_eye"] = (cx + p["eye_spacing"] / 2, eye_y)
    p["nose_tip"] = (cx, eye_y + p["nose_length"])
    p["mouth"] = (cx, eye_y + p["nose_length"] + 0.45 * p["eye_spacing"])
    return p


def _soft(d, width=0.7):
    """Smooth indicator of ``d < 0``."""
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def render_geometry(g: dict, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Reflectance at face-frame coordinates ``(x, y)``."""
    cx = (g["left_eye"][0] + g["right_eye"][0]) / 2
    img = 0.25 + 0.45 * _soft(np.hypot((x - cx) / 38.0, (y - 55.0) / 50.0) - 1.0, 0.02)
    for ex, ey in (g["left_eye"], g["right_eye"]):
        rx, ry = g["eye_size"] * 1.6, g["eye_size"]
        img -= 0.35 * _soft(np.hypot((x - ex) / rx, (y - ey) / ry) - 1.0, 0.08)
        img -= 0.2 * _soft(np.hypot(x - ex, y - ey) - 0.5 * g["eye_size"])
        # brow
        img -= 0.15 * _soft(np.maximum(np.abs(x - ex) - rx, np.abs(y - (ey - 2.2 * ry)) - 0.9))
    nx, ny = g["nose_tip"]
    top = g["left_eye"][1] + 4.0
    t = np.clip((y - top) / max(ny - top, 1e-6), 0.0, 1.0)
    half = 1.0 + t * g["nose_width"] / 2
    inside = (y >= top) & (y <= ny)
    img += 0.12 * np.where(inside, _soft(np.abs(x - nx) - half), 0.0)
    for sx in (-1, 1):
        img -= 0.3 * _soft(np.hypot(x - (nx + sx * g["nose_width"] / 3), (y - ny) / 0.7) - 1.4)
    mx, my = g["mouth"]
    half_w = g["mouth_width"] / 2
    u = (x - mx) / half_w
    curve = my + g["mouth_curvature"] * u ** 2
    band = np.maximum(np.abs(y - curve) - 1.2, (np.abs(u) - 1.0) * half_w)
    img -= 0.3 * _soft(band)
    return img


def _similarity(rng, spec: ToyFaceSpec) -> np.ndarray:
    """Random 2x3 map from face frame to image frame about the image center."""
    ang = np.deg2rad(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    s = 1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter)
    t = rng.uniform(-spec.shift, spec.shift, size=2)
    c = spec.size / 2
    r = s * np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
    return np.hstack([r, (np.array([c, c]) + t - r @ [c, c])[:, None]])


def render_image(g: dict, spec: ToyFaceSpec, rng: np.random.Generator, modality: str = "VIS"):
    """One nuisance-perturbed rendering; returns pixels (H, W, 1) and image-frame landmarks (4, 2)."""
    n = spec.size
    m = _similarity(rng, spec)
    a, b = m[:, :2], m[:, 2]
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    pts = np.stack([xx.ravel(), yy.ravel()])
    face = np.linalg.solve(a, pts - b[:, None])
    refl = render_geometry(g, face[0].reshape(n, n), face[1].reshape(n, n))
    gain_range, ramp_max = (spec.alt_gain, spec.alt_ramp) if modality != "VIS" else (spec.gain, spec.ramp)
    gain = rng.uniform(*gain_range)
    theta = rng.uniform(0, 2 * np.pi)
    strength = rng.uniform(-ramp_max, ramp_max)
    proj = ((xx - n / 2) * np.cos(theta) + (yy - n / 2) * np.sin(theta)) / n
    shading = gain * (1.0 + strength * proj)
    pixels = np.clip(refl * shading + rng.normal(0, spec.noise_sigma, (n, n)), 0.0, 1.0)
    lms = np.array([g["left_eye"], g["right_eye"], g["nose_tip"], g["mouth"]])
    return pixels[:, :, None], lms @ a.T + b


def generate_toy_faces(spec: ToyFaceSpec, seed: int, out_dir=None) -> ToyFaces:
    """Render ``num_identities x images_per_identity`` images per modality.

    With ``out_dir`` the PNGs are written under ``out_dir/<subject>/`` and the
    manifest to ``out_dir/manifest.tsv``; output is a pure function of
    ``(spec, seed)``.
    """
    units = sample_identities(spec, seed)
    records, images, params = [], {}, {}
    for i, unit in enumerate(units):
        sid = f"toy{i:04d}"
        params[sid] = unit
        for mi, mod in enumerate(spec.modalities):
            for k in range(spec.images_per_identity):
                rng = _rng(seed, 1, i, mi, k)
                varied = unit + rng.normal(0.0, spec.part_jitter, unit.size) if spec.part_jitter else unit
                pixels, lms = render_image(geometry(varied, spec), spec, rng, mod)
                image_id = f"{sid}_{mod.lower()}{k:02d}"
                path = f"{sid}/{image_id}.png"
                records.append(FaceRecord(image_id, sid, Modality(mod), path,
                                          tuple(map(tuple, lms.tolist()))))
                images[image_id] = pixels
    manifest = DatasetManifest.from_records(records)
    if out_dir is not None:
        out = Path(out_dir)
        for rec in records:
            save_image(images[rec.image_id], out / rec.path)
        save_manifest(manifest, out / "manifest.tsv")
    return ToyFaces(manifest, images, params)
