"""Deterministic synthetic exam generator with closed-form ground truth.

Anatomy is deliberately simple: the "ventricle" is a stack of concentric
discs (blood pool, label 1) wrapped in rings (myocardium, label 2), radius
shrinking linearly toward the apex and pulsing over the cardiac cycle, so
every volume is known analytically. Distractor stacks show the same
anatomy off-axis as elongated ellipses, a localizer series contributes
non-cine files, and apical slices carry a bright off-heart lure blob that
mask post-processing must reject. Everything is a pure function of the
spec seed, down to UIDs and file bytes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .dicom_io import MR_IMAGE_STORAGE, write_dicom
from .dicom_ingest import content_stack_id
from .errors import ContractViolation

STUDY_DATE = "20240102"  # fixed so file bytes never depend on the clock
_DISTRACTOR_ORIENTATIONS = (
    (1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
    (0.0, 1.0, 0.0, 0.0, 0.0, 1.0),
    (0.707107, 0.707107, 0.0, -0.707107, 0.707107, 0.0),
    (1.0, 0.0, 0.0, 0.0, 0.707107, 0.707107),
)
SAX_ORIENTATION = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    image_size: int = 256
    pixel_spacing: tuple = (1.5, 1.5)  # (row mm, col mm)
    slice_gap: float = 8.0
    n_slices: int = 8
    n_phases: int = 12
    base_radius_mm: float = 34.0  # blood-pool radius at base, end diastole
    contraction: float = 0.38  # fractional radius loss at end systole
    apex_taper: float = 0.42  # fractional radius loss base -> apex
    myo_thickness_mm: float = 9.0
    center_offset_mm: tuple = (0.0, 0.0)  # heart center offset from image center
    n_distractors: int = 2
    noise_level: float = 0.04
    bsa_m2: float = 1.6
    lure: bool = True  # bright off-heart blob in apical slices

    def __post_init__(self):
        if self.n_slices < 6:
            raise ContractViolation("phantom needs >= 6 slices to form a stack")
        if self.n_phases < 10:
            raise ContractViolation("phantom needs >= 10 phases to qualify as cine")
        if not 0 <= self.contraction < 1 or not 0 <= self.apex_taper < 1:
            raise ContractViolation("contraction and apex_taper must lie in [0, 1)")
        if self.base_radius_mm <= 0 or self.myo_thickness_mm <= 0:
            raise ContractViolation("radius and thickness must be positive")
        if not 0 <= self.n_distractors <= len(_DISTRACTOR_ORIENTATIONS):
            raise ContractViolation(
                f"n_distractors must be 0..{len(_DISTRACTOR_ORIENTATIONS)}")
        r_apex_es = self.base_radius_mm * (1 - self.apex_taper) * (1 - self.contraction)
        if r_apex_es <= 0:
            raise ContractViolation("radius profile must stay positive")
        # heart (plus lure clearance) must fit inside the field of view
        extent = self.base_radius_mm + self.myo_thickness_mm
        half_fov = self.image_size / 2 * min(self.pixel_spacing)
        if extent + max(map(abs, self.center_offset_mm)) >= half_fov:
            raise ContractViolation("heart does not fit in the field of view")


@dataclass
class PhantomTruth:
    blood_ml: list  # analytic blood-pool volume per phase
    myo_ml: list  # analytic myocardial volume per phase
    ed_phase: int
    es_phase: int
    bsa_m2: float
    sax_series_uid: str
    sax_stack_id: str
    declared_stacks: list  # geometry of every cine stack written
    heart_extent_phase0: list  # [row0, row1, col0, col1] inclusive, first phase
    heart_extent_all: list  # same, union over all phases
    per_slice_extent_phase0: list  # one [row0,row1,col0,col1] or None per slice
    n_files: int
    spec: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _uid(*parts) -> str:
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).hexdigest()
    return "2.25." + str(int(h[:30], 16))


def radius_profile(spec: PhantomSpec) -> np.ndarray:
    """Blood-pool radius in mm, shape (n_slices, n_phases); slice 0 = base."""
    s = np.arange(spec.n_slices)[:, None]
    t = np.arange(spec.n_phases)[None, :]
    taper = 1.0 - spec.apex_taper * s / max(spec.n_slices - 1, 1)
    pulse = 1.0 - spec.contraction * np.sin(math.pi * t / spec.n_phases) ** 2
    return spec.base_radius_mm * taper * pulse


def analytic_volumes(spec: PhantomSpec):
    """Closed-form blood and myocardium volume (mL) per phase, plus ED/ES.

    Each slice contributes a cylinder of height slice_gap: blood pi r^2 g,
    myocardium pi ((r+th)^2 - r^2) g. Ties resolve to the earliest phase.
    """
    r = radius_profile(spec)
    g = spec.slice_gap
    blood = (math.pi * r ** 2 * g).sum(axis=0) / 1000.0
    outer = r + spec.myo_thickness_mm
    myo = (math.pi * (outer ** 2 - r ** 2) * g).sum(axis=0) / 1000.0
    ed = int(np.argmax(blood))
    es = int(np.argmin(blood))
    return blood, myo, ed, es


def _heart_center_px(spec: PhantomSpec):
    half = (spec.image_size - 1) / 2.0
    return (half + spec.center_offset_mm[0] / spec.pixel_spacing[0],
            half + spec.center_offset_mm[1] / spec.pixel_spacing[1])


def _mm_grid(spec: PhantomSpec):
    ci, cj = _heart_center_px(spec)
    ii = (np.arange(spec.image_size) - ci) * spec.pixel_spacing[0]
    jj = (np.arange(spec.image_size) - cj) * spec.pixel_spacing[1]
    return np.hypot(ii[:, None], jj[None, :])


def voxelize_sax_labels(spec: PhantomSpec) -> np.ndarray:
    """Pixel-center ground-truth labels, shape (n_phases, n_slices, H, W)."""
    r = radius_profile(spec)
    dist = _mm_grid(spec)
    labels = np.zeros((spec.n_phases, spec.n_slices, spec.image_size, spec.image_size),
                      dtype=np.uint8)
    for t in range(spec.n_phases):
        for s in range(spec.n_slices):
            rr = r[s, t]
            labels[t, s][dist <= rr + spec.myo_thickness_mm] = 2
            labels[t, s][dist <= rr] = 1
    return labels


def _lure_mask(spec: PhantomSpec) -> np.ndarray:
    """Bright blob far from the heart, present only in the apical slices."""
    ci, cj = _heart_center_px(spec)
    off = (spec.base_radius_mm + spec.myo_thickness_mm + 22.0)
    li = ci + off / spec.pixel_spacing[0] * 0.55
    lj = cj - off / spec.pixel_spacing[1] * 0.80
    ii = (np.arange(spec.image_size) - li) * spec.pixel_spacing[0]
    jj = (np.arange(spec.image_size) - lj) * spec.pixel_spacing[1]
    return np.hypot(ii[:, None], jj[None, :]) <= 9.0


def _render_sax_frame(spec: PhantomSpec, labels_st: np.ndarray, lure: np.ndarray | None,
                      rng: np.random.Generator) -> np.ndarray:
    img = np.full(labels_st.shape, 0.14, dtype=np.float64)
    img[labels_st == 2] = 0.42
    img[labels_st == 1] = 0.88
    if lure is not None:
        img[lure] = 0.80
    img += rng.normal(0.0, spec.noise_level, size=img.shape)
    return np.clip(img * 900.0, 0, 4000).astype(np.uint16)


def _render_distractor_frame(spec: PhantomSpec, d_idx: int, s: int, t: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Off-axis view: elongated ellipse + surrounding band, pulsing like the
    true anatomy but never circular."""
    n = spec.image_size
    half = (n - 1) / 2.0
    pulse = 1.0 - spec.contraction * math.sin(math.pi * t / spec.n_phases) ** 2
    # through-plane profile: slices farther from the stack middle cut smaller sections
    rel = (s - (spec.n_slices - 1) / 2.0) / max((spec.n_slices - 1) / 2.0, 1.0)
    section = math.sqrt(max(0.25, 1.0 - 0.6 * rel * rel))
    a = spec.base_radius_mm * 1.9 * section  # semi-major, mm
    b = spec.base_radius_mm * 0.62 * section * pulse  # semi-minor pulses
    ii = (np.arange(n) - half) * spec.pixel_spacing[0]
    jj = (np.arange(n) - half) * spec.pixel_spacing[1]
    if d_idx % 2 == 0:
        q = (ii[:, None] / b) ** 2 + (jj[None, :] / a) ** 2
    else:
        q = (ii[:, None] / a) ** 2 + (jj[None, :] / b) ** 2
    img = np.full((n, n), 0.14, dtype=np.float64)
    band = spec.myo_thickness_mm / spec.base_radius_mm
    img[q <= (1.0 + band) ** 2] = 0.42
    img[q <= 1.0] = 0.88
    img += rng.normal(0.0, spec.noise_level, size=img.shape)
    return np.clip(img * 900.0, 0, 4000).astype(np.uint16)


def _render_localizer(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.image_size
    half = (n - 1) / 2.0
    ii = (np.arange(n) - half)[:, None] / (0.46 * n)
    jj = (np.arange(n) - half)[None, :] / (0.30 * n)
    img = np.full((n, n), 0.10, dtype=np.float64)
    img[ii ** 2 + jj ** 2 <= 1.0] = 0.35
    img += rng.normal(0.0, spec.noise_level, size=img.shape)
    return np.clip(img * 900.0, 0, 4000).astype(np.uint16)


def _base_elements(spec: PhantomSpec, study_uid: str, series_uid: str,
                   series_no: int, description: str) -> dict:
    return {
        (0x0008, 0x0016): ("UI", MR_IMAGE_STORAGE),
        (0x0008, 0x0020): ("DA", STUDY_DATE),
        (0x0008, 0x0030): ("TM", "080000"),
        (0x0008, 0x0060): ("CS", "MR"),
        (0x0008, 0x103E): ("LO", description),
        (0x0010, 0x0010): ("PN", "PHANTOM"),
        (0x0010, 0x0020): ("LO", f"PH{spec.seed:06d}"),
        (0x0020, 0x000D): ("UI", study_uid),
        (0x0020, 0x000E): ("UI", series_uid),
        (0x0020, 0x0011): ("IS", series_no),
        (0x0028, 0x0002): ("US", 1),
        (0x0028, 0x0004): ("CS", "MONOCHROME2"),
        (0x0028, 0x0010): ("US", spec.image_size),
        (0x0028, 0x0011): ("US", spec.image_size),
        (0x0028, 0x0030): ("DS", list(spec.pixel_spacing)),
        (0x0028, 0x0100): ("US", 16),
        (0x0028, 0x0101): ("US", 16),
        (0x0028, 0x0102): ("US", 15),
        (0x0028, 0x0103): ("US", 0),
    }


def _slice_positions(origin, normal, n_slices, gap):
    return [tuple(float(origin[k] + s * gap * normal[k]) for k in range(3))
            for s in range(n_slices)]


def _extent(mask: np.ndarray):
    rows = np.any(mask, axis=1).nonzero()[0]
    cols = np.any(mask, axis=0).nonzero()[0]
    if rows.size == 0:
        return None
    return [int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])]


def generate_phantom_exam(spec: PhantomSpec, out_dir) -> PhantomTruth:
    """Write the exam files plus truth.json / truth_labels.npz / metadata.json
    into out_dir; returns the ground truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    study_uid = _uid(spec.seed, "study")
    labels = voxelize_sax_labels(spec)
    lure = _lure_mask(spec) if spec.lure else None
    blood, myo, ed, es = analytic_volumes(spec)
    trigger_ms = 40.0

    n_files = 0
    declared = []

    # short-axis stack: series 1
    sax_uid = _uid(spec.seed, "series", 0)
    normal = (0.0, 0.0, 1.0)
    origin = (-0.5 * spec.image_size * spec.pixel_spacing[1],
              -0.5 * spec.image_size * spec.pixel_spacing[0], 10.0)
    positions = _slice_positions(origin, normal, spec.n_slices, spec.slice_gap)
    for s in range(spec.n_slices):
        apical = s >= spec.n_slices - 2
        for t in range(spec.n_phases):
            rng = np.random.default_rng((spec.seed, 0, s, t))
            img = _render_sax_frame(spec, labels[t, s],
                                    lure if (apical and spec.lure) else None, rng)
            elems = _base_elements(spec, study_uid, sax_uid, 1, "cine short axis")
            elems.update({
                (0x0008, 0x0018): ("UI", _uid(spec.seed, "sop", 0, s, t)),
                (0x0018, 0x0088): ("DS", spec.slice_gap),
                (0x0018, 0x1060): ("DS", t * trigger_ms),
                (0x0020, 0x0013): ("IS", s * spec.n_phases + t + 1),
                (0x0020, 0x0032): ("DS", list(positions[s])),
                (0x0020, 0x0037): ("DS", list(SAX_ORIENTATION)),
                (0x7FE0, 0x0010): ("OW", img.astype("<u2").tobytes()),
            })
            write_dicom(out / f"ser01_s{s:02d}_t{t:02d}.dcm", elems)
            n_files += 1
    declared.append({
        "series_uid": sax_uid,
        "orientation": list(SAX_ORIENTATION),
        "pixel_spacing": list(spec.pixel_spacing),
        "slice_positions": [list(p) for p in positions],
        "frame_count": spec.n_phases,
        "stack_id": content_stack_id(SAX_ORIENTATION, spec.pixel_spacing, positions,
                                     [spec.n_phases] * spec.n_slices),
        "is_sax": True,
    })

    # distractor stacks: series 2..
    for d in range(spec.n_distractors):
        ser_uid = _uid(spec.seed, "series", d + 1)
        orient = _DISTRACTOR_ORIENTATIONS[d]
        r3 = np.asarray(orient[:3])
        c3 = np.asarray(orient[3:])
        d_normal = tuple(np.cross(r3, c3))
        d_origin = (60.0 + 7.0 * d, -45.0, -20.0)
        d_positions = _slice_positions(d_origin, d_normal, spec.n_slices, spec.slice_gap)
        for s in range(spec.n_slices):
            for t in range(spec.n_phases):
                rng = np.random.default_rng((spec.seed, d + 1, s, t))
                img = _render_distractor_frame(spec, d, s, t, rng)
                elems = _base_elements(spec, study_uid, ser_uid, d + 2,
                                       f"cine view {d + 2}")
                elems.update({
                    (0x0008, 0x0018): ("UI", _uid(spec.seed, "sop", d + 1, s, t)),
                    (0x0018, 0x0088): ("DS", spec.slice_gap),
                    (0x0018, 0x1060): ("DS", t * trigger_ms),
                    (0x0020, 0x0013): ("IS", s * spec.n_phases + t + 1),
                    (0x0020, 0x0032): ("DS", list(d_positions[s])),
                    (0x0020, 0x0037): ("DS", list(orient)),
                    (0x7FE0, 0x0010): ("OW", img.astype("<u2").tobytes()),
                })
                write_dicom(out / f"ser{d + 2:02d}_s{s:02d}_t{t:02d}.dcm", elems)
                n_files += 1
        declared.append({
            "series_uid": ser_uid,
            "orientation": list(orient),
            "pixel_spacing": list(spec.pixel_spacing),
            "slice_positions": [list(p) for p in d_positions],
            "frame_count": spec.n_phases,
            "stack_id": content_stack_id(orient, spec.pixel_spacing, d_positions,
                                         [spec.n_phases] * spec.n_slices),
            "is_sax": False,
        })

    # one static localizer series (single frame, never a cine slice)
    loc_uid = _uid(spec.seed, "series", 90)
    rng = np.random.default_rng((spec.seed, 90))
    img = _render_localizer(spec, rng)
    elems = _base_elements(spec, study_uid, loc_uid, 99, "localizer")
    elems.update({
        (0x0008, 0x0018): ("UI", _uid(spec.seed, "sop", 90)),
        (0x0020, 0x0013): ("IS", 1),
        (0x0020, 0x0032): ("DS", [-180.0, -180.0, 0.0]),
        (0x0020, 0x0037): ("DS", [1.0, 0.0, 0.0, 0.0, 0.0, -1.0]),
        (0x7FE0, 0x0010): ("OW", img.astype("<u2").tobytes()),
    })
    write_dicom(out / "ser99_localizer.dcm", elems)
    n_files += 1

    heart = labels > 0
    extent0 = _extent(heart[0].any(axis=0))
    extent_all = _extent(heart.any(axis=(0, 1)))
    per_slice0 = [_extent(heart[0, s]) for s in range(spec.n_slices)]
    truth = PhantomTruth(
        blood_ml=[float(v) for v in blood],
        myo_ml=[float(v) for v in myo],
        ed_phase=ed,
        es_phase=es,
        bsa_m2=spec.bsa_m2,
        sax_series_uid=sax_uid,
        sax_stack_id=declared[0]["stack_id"],
        declared_stacks=declared,
        heart_extent_phase0=extent0,
        heart_extent_all=extent_all,
        per_slice_extent_phase0=per_slice0,
        n_files=n_files,
        spec=asdict(spec),
    )
    (out / "truth.json").write_text(json.dumps(truth.to_dict(), indent=1, sort_keys=True))
    np.savez_compressed(out / "truth_labels.npz", labels=labels)
    (out / "metadata.json").write_text(json.dumps({"bsa_m2": spec.bsa_m2}))
    return truth


def sample_spec(seed: int, **overrides) -> PhantomSpec:
    """Draw a geometrically varied spec, deterministic in the seed.

    Ranges are conservative so every draw passes PhantomSpec validation.
    Keyword overrides win over sampled values (and over the seed itself).
    """
    rng = np.random.default_rng(seed)
    draw = {
        "seed": seed,
        "n_slices": int(rng.integers(7, 10)),
        "base_radius_mm": float(rng.uniform(27.0, 38.0)),
        "contraction": float(rng.uniform(0.30, 0.45)),
        "apex_taper": float(rng.uniform(0.28, 0.50)),
        "myo_thickness_mm": float(rng.uniform(7.0, 11.0)),
        "center_offset_mm": (float(rng.uniform(-12.0, 12.0)),
                             float(rng.uniform(-12.0, 12.0))),
        "n_distractors": int(rng.integers(1, 4)),
        "noise_level": float(rng.uniform(0.02, 0.06)),
        "bsa_m2": float(rng.uniform(1.2, 2.1)),
    }
    draw.update(overrides)
    return PhantomSpec(**draw)


def load_truth(exam_dir) -> dict:
    """Read truth.json written by generate_phantom_exam."""
    return json.loads((Path(exam_dir) / "truth.json").read_text())


def load_truth_labels(exam_dir) -> np.ndarray:
    with np.load(Path(exam_dir) / "truth_labels.npz") as z:
        return z["labels"]
