"""Cine-stack extraction: parse an exam directory and group images into
multi-slice, multi-phase cine stacks from header geometry alone.

Grouping rules: a spatial position with at least 10 temporally ordered
frames is a cine slice; cine slices (possibly from different series) merge
into a stack when they share orientation (1e-3 per component) and pixel
spacing (1e-3 mm) and their out-of-plane positions form an arithmetic
progression (step within 5% of SpacingBetweenSlices when the tag exists);
a stack needs at least 6 slices. Grouping is permutation-invariant: inputs
are canonically sorted before clustering and stack ids are content hashes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dicom_io import pixel_array, read_dicom
from .errors import ContractViolation, IngestError

MIN_FRAMES = 10
MIN_SLICES = 6
ORIENT_TOL = 1e-3
SPACING_TOL = 1e-3
GAP_REL_TOL = 0.05
_POS_EPS = 1e-6


@dataclass(frozen=True)
class IngestLimits:
    """Grouping thresholds, overridable per run.

    These steer which slices qualify and merge; the CineStack type
    invariants keep the module defaults as hard floors, so loosening a
    limit below its default fails at stack construction rather than
    producing a stack that violates its own contract.
    """

    min_frames: int = MIN_FRAMES
    min_slices: int = MIN_SLICES
    orientation_tol: float = ORIENT_TOL
    spacing_tol: float = SPACING_TOL
    gap_rel_tol: float = GAP_REL_TOL

    def __post_init__(self):
        if self.min_frames < 1 or self.min_slices < 1:
            raise ContractViolation("minimum counts must be >= 1")
        if min(self.orientation_tol, self.spacing_tol, self.gap_rel_tol) < 0:
            raise ContractViolation("tolerances must be non-negative")


@dataclass(frozen=True, eq=False)
class DicomImageMeta:
    """Header subset plus pixels for one single-frame image."""

    file_id: str
    series_uid: str
    instance_uid: str
    rows: int
    cols: int
    pixel_spacing: tuple  # (row mm, col mm)
    image_orientation: tuple  # 6 direction cosines, row triple then column triple
    image_position: tuple  # 3 mm coordinates
    spacing_between_slices: float | None
    temporal_index: float
    instance_number: int | None
    pixel_data: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ContractViolation("rows/cols must be positive")
        if len(self.pixel_spacing) != 2 or min(self.pixel_spacing) <= 0:
            raise ContractViolation("pixel_spacing must be two positive reals")
        if len(self.image_orientation) != 6 or len(self.image_position) != 3:
            raise ContractViolation("orientation needs 6 values, position 3")
        r = np.asarray(self.image_orientation[:3], dtype=float)
        c = np.asarray(self.image_orientation[3:], dtype=float)
        if abs(np.linalg.norm(r) - 1.0) > 1e-3 or abs(np.linalg.norm(c) - 1.0) > 1e-3:
            raise ContractViolation("direction cosines must have unit norm within 1e-3")
        if abs(float(r @ c)) >= 1e-3:
            raise ContractViolation("direction cosine triples must be orthogonal")
        if self.spacing_between_slices is not None and self.spacing_between_slices <= 0:
            raise ContractViolation("spacing_between_slices must be positive")
        if self.pixel_data.shape != (self.rows, self.cols):
            raise ContractViolation(
                f"pixel data {self.pixel_data.shape} does not match ({self.rows},{self.cols})")
        if self.pixel_data.min() < 0:
            raise ContractViolation("pixel intensities must be non-negative")

    @property
    def normal(self) -> np.ndarray:
        r = np.asarray(self.image_orientation[:3], dtype=float)
        c = np.asarray(self.image_orientation[3:], dtype=float)
        return np.cross(r, c)


@dataclass(frozen=True, eq=False)
class CineSlice:
    """All frames acquired at one spatial position, in temporal order."""

    position: tuple
    frames: tuple  # >= MIN_FRAMES DicomImageMeta entries
    series_uid: str

    def __post_init__(self):
        if len({(f.rows, f.cols) for f in self.frames}) != 1:
            raise ContractViolation("frames at one position must share a matrix size")

    @property
    def orientation(self) -> tuple:
        return self.frames[0].image_orientation

    @property
    def matrix(self) -> tuple:
        return (self.frames[0].rows, self.frames[0].cols)

    @property
    def pixel_spacing(self) -> tuple:
        return self.frames[0].pixel_spacing

    @property
    def spacing_between_slices(self):
        return self.frames[0].spacing_between_slices

    @property
    def frame_count(self) -> int:
        return len(self.frames)


@dataclass(frozen=True, eq=False)
class CineSeries:
    series_uid: str
    slices: tuple  # CineSlice entries


@dataclass(frozen=True, eq=False)
class CineStack:
    """Ordered multi-slice, multi-phase cine volume with shared geometry."""

    slices: tuple  # CineSlice entries ordered by signed out-of-plane distance
    pixel_spacing: tuple
    slice_gap: float
    orientation: tuple
    source_series: frozenset
    stack_id: str

    def __post_init__(self):
        if len(self.slices) < MIN_SLICES:
            raise ContractViolation(f"stack needs >= {MIN_SLICES} slices")
        counts = {s.frame_count for s in self.slices}
        if len(counts) != 1 or min(counts) < MIN_FRAMES:
            raise ContractViolation("slices must share one frame count >= 10")
        if self.slice_gap <= 0:
            raise ContractViolation("slice_gap must be positive")
        ref_o = np.asarray(self.orientation, dtype=float)
        ref_s = np.asarray(self.pixel_spacing, dtype=float)
        for s in self.slices:
            if np.abs(np.asarray(s.orientation) - ref_o).max() > ORIENT_TOL:
                raise ContractViolation("slice orientation departs from stack orientation")
            if np.abs(np.asarray(s.pixel_spacing) - ref_s).max() > SPACING_TOL:
                raise ContractViolation("slice pixel spacing departs from stack spacing")
        d = self.slice_distances()
        gaps = np.diff(d)
        if gaps.min() <= 0:
            raise ContractViolation("out-of-plane positions must be strictly monotone")
        if np.abs(gaps - self.slice_gap).max() > GAP_REL_TOL * self.slice_gap:
            raise ContractViolation("successive gaps depart from slice_gap beyond 5%")

    @property
    def normal(self) -> np.ndarray:
        r = np.asarray(self.orientation[:3], dtype=float)
        c = np.asarray(self.orientation[3:], dtype=float)
        return np.cross(r, c)

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    @property
    def n_frames(self) -> int:
        return self.slices[0].frame_count

    def slice_distances(self) -> np.ndarray:
        n = self.normal
        return np.array([float(n @ np.asarray(s.position)) for s in self.slices])

    def frame_image(self, slice_idx: int, frame_idx: int) -> np.ndarray:
        return self.slices[slice_idx].frames[frame_idx].pixel_data


@dataclass
class IngestDiagnostics:
    files_seen: int = 0
    files_parsed: int = 0
    files_skipped: int = 0
    series_seen: int = 0
    series_rejected: int = 0
    positions_below_min_frames: int = 0
    groups_discarded: int = 0
    slices_discarded: int = 0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "files_seen": self.files_seen,
            "files_parsed": self.files_parsed,
            "files_skipped": self.files_skipped,
            "series_seen": self.series_seen,
            "series_rejected": self.series_rejected,
            "positions_below_min_frames": self.positions_below_min_frames,
            "groups_discarded": self.groups_discarded,
            "slices_discarded": self.slices_discarded,
            "warnings": list(self.warnings),
        }


def _meta_from_elements(path: str, elems: dict) -> DicomImageMeta:
    def need(tag, what):
        if tag not in elems:
            raise IngestError(f"{path}: missing {what}")
        return elems[tag]

    series_uid = need((0x0020, 0x000E), "SeriesInstanceUID")
    instance_uid = elems.get((0x0008, 0x0018), "")
    rows = need((0x0028, 0x0010), "Rows")
    cols = need((0x0028, 0x0011), "Columns")
    spacing = need((0x0028, 0x0030), "PixelSpacing")
    orientation = need((0x0020, 0x0037), "ImageOrientationPatient")
    position = need((0x0020, 0x0032), "ImagePositionPatient")
    if len(spacing) != 2 or len(orientation) != 6 or len(position) != 3:
        raise IngestError(f"{path}: malformed geometry tags")
    gap = elems.get((0x0018, 0x0088))
    gap_val = float(gap[0]) if gap else None
    trigger = elems.get((0x0018, 0x1060))
    inst = elems.get((0x0020, 0x0013))
    inst_val = int(inst[0]) if inst else None
    if trigger:
        temporal = float(trigger[0])
    elif inst_val is not None:
        temporal = float(inst_val)
    else:
        raise IngestError(f"{path}: no TriggerTime or InstanceNumber for temporal order")
    pixels = pixel_array(elems)
    return DicomImageMeta(
        file_id=path,
        series_uid=series_uid,
        instance_uid=instance_uid,
        rows=int(rows),
        cols=int(cols),
        pixel_spacing=tuple(float(v) for v in spacing),
        image_orientation=tuple(float(v) for v in orientation),
        image_position=tuple(float(v) for v in position),
        spacing_between_slices=gap_val,
        temporal_index=temporal,
        instance_number=inst_val,
        pixel_data=pixels,
    )


def parse_exam_directory(path, diag: IngestDiagnostics | None = None):
    """Read every parseable DICOM file under path; skip and count the rest."""
    root = Path(path)
    if not root.is_dir():
        raise IngestError(f"{path} is not a readable directory")
    diag = diag if diag is not None else IngestDiagnostics()
    images = []
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        diag.files_seen += 1
        try:
            elems = read_dicom(f)
            images.append(_meta_from_elements(str(f), elems))
            diag.files_parsed += 1
        except (IngestError, ContractViolation) as e:
            diag.files_skipped += 1
            diag.warnings.append(str(e))
    return images, diag


def _position_key(position) -> tuple:
    return tuple(round(float(v), 6) for v in position)


def collect_cine_series(images, diag: IngestDiagnostics | None = None,
                        limits: IngestLimits | None = None):
    """Group images by (series, spatial position) into temporally ordered
    cine slices; positions with fewer than min_frames frames do not qualify."""
    diag = diag if diag is not None else IngestDiagnostics()
    limits = limits if limits is not None else IngestLimits()
    by_series: dict = {}
    for img in images:
        by_series.setdefault(img.series_uid, []).append(img)
    diag.series_seen = len(by_series)
    out = []
    for series_uid in sorted(by_series):
        members = by_series[series_uid]
        by_pos: dict = {}
        for img in members:
            by_pos.setdefault(_position_key(img.image_position), []).append(img)
        slices = []
        rejected = False
        for pos_key in sorted(by_pos):
            frames = sorted(by_pos[pos_key],
                            key=lambda m: (m.temporal_index, m.instance_number or 0,
                                           m.instance_uid))
            times = [f.temporal_index for f in frames]
            if len(set(times)) != len(times):
                diag.series_rejected += 1
                diag.warnings.append(
                    f"series {series_uid}: duplicate temporal index at position {pos_key}")
                rejected = True
                break
            if len(frames) < limits.min_frames:
                diag.positions_below_min_frames += 1
                continue
            slices.append(CineSlice(position=pos_key, frames=tuple(frames),
                                    series_uid=series_uid))
        if rejected or not slices:
            continue
        out.append(CineSeries(series_uid=series_uid, slices=tuple(slices)))
    return out


def _orient_key(sl: CineSlice) -> tuple:
    return tuple(round(v, 6) for v in sl.orientation) + \
        tuple(round(v, 6) for v in sl.pixel_spacing) + \
        (sl.frame_count,) + sl.matrix


def _match(sl: CineSlice, ref: CineSlice, limits: IngestLimits) -> bool:
    if sl.frame_count != ref.frame_count or sl.matrix != ref.matrix:
        return False
    od = max(abs(a - b) for a, b in zip(sl.orientation, ref.orientation))
    sd = max(abs(a - b) for a, b in zip(sl.pixel_spacing, ref.pixel_spacing))
    return od <= limits.orientation_tol and sd <= limits.spacing_tol


def _slice_normal_distance(sl: CineSlice) -> float:
    r = np.asarray(sl.orientation[:3], dtype=float)
    c = np.asarray(sl.orientation[3:], dtype=float)
    n = np.cross(r, c)
    return float(n @ np.asarray(sl.position, dtype=float))


def _split_runs(cluster: list, limits: IngestLimits) -> list:
    """Partition a geometry cluster (list of (slice, distance) sorted by
    distance) into maximal arithmetic runs honouring the relative step rule.

    Each slice extends the first open run whose step it continues, so two
    acquisitions interleaved along the same axis (e.g. a re-shoot at nearby
    positions) separate into parallel runs instead of shredding each other.
    """

    def tag_gap(run, candidate):
        # first declared SpacingBetweenSlices among run members + candidate
        for sl, _d in run["items"] + [candidate]:
            if sl.spacing_between_slices is not None:
                return sl.spacing_between_slices
        return None

    def extends(run, sl, d):
        gap = d - run["items"][-1][1]
        if gap <= _POS_EPS:
            return False
        tag = tag_gap(run, (sl, d))
        if tag is not None and abs(gap - tag) > limits.gap_rel_tol * tag:
            return False
        step = run["step"]
        return step is None or abs(gap - step) <= limits.gap_rel_tol * step

    runs: list = []
    for sl, d in cluster:
        for run in runs:
            if extends(run, sl, d):
                if run["step"] is None:
                    run["step"] = d - run["items"][-1][1]
                run["items"].append((sl, d))
                break
        else:
            runs.append({"items": [(sl, d)], "step": None})
    return [[(sl, d) for sl, d in run["items"]] for run in runs]


def content_stack_id(orientation, pixel_spacing, slice_positions, frame_counts) -> str:
    """Deterministic stack identifier from geometry content alone, so ids are
    independent of file arrival order and reproducible by a generator that
    knows what it wrote."""
    payload = {
        "orientation": [round(float(v), 6) for v in orientation],
        "pixel_spacing": [round(float(v), 6) for v in pixel_spacing],
        "slices": [
            {"position": [round(float(v), 6) for v in pos], "frames": int(n)}
            for pos, n in zip(slice_positions, frame_counts)
        ],
    }
    h = hashlib.sha256(json.dumps(payload, sort_keys=True).encode())
    return h.hexdigest()[:16]


def _stack_id(orientation, spacing, slices) -> str:
    return content_stack_id(orientation, spacing,
                            [s.position for s in slices],
                            [s.frame_count for s in slices])


def group_into_stacks(cine, diag: IngestDiagnostics | None = None,
                      limits: IngestLimits | None = None):
    """Merge cine slices across series into geometry-consistent stacks."""
    diag = diag if diag is not None else IngestDiagnostics()
    limits = limits if limits is not None else IngestLimits()
    slices = [sl for series in cine for sl in series.slices]
    # canonical order makes clustering independent of input order
    slices.sort(key=lambda sl: (_orient_key(sl), _position_key(sl.position),
                                sl.series_uid))
    clusters: list = []
    for sl in slices:
        for ref, members in clusters:
            if _match(sl, ref, limits):
                members.append(sl)
                break
        else:
            clusters.append((sl, [sl]))
    stacks = []
    for ref, members in clusters:
        decorated = sorted(
            ((sl, _slice_normal_distance(sl)) for sl in members),
            key=lambda t: (t[1], _position_key(t[0].position), t[0].series_uid))
        for run in _split_runs(decorated, limits):
            run_slices = [sl for sl, _d in run]
            if len(run_slices) < limits.min_slices:
                diag.groups_discarded += 1
                diag.slices_discarded += len(run_slices)
                continue
            dists = [d for _sl, d in run]
            gaps = np.diff(dists)
            tag = next((s.spacing_between_slices for s in run_slices
                        if s.spacing_between_slices is not None), None)
            gap = float(tag) if tag is not None else float(np.mean(gaps))
            orientation = run_slices[0].orientation
            spacing = run_slices[0].pixel_spacing
            stacks.append(CineStack(
                slices=tuple(run_slices),
                pixel_spacing=spacing,
                slice_gap=gap,
                orientation=orientation,
                source_series=frozenset(s.series_uid for s in run_slices),
                stack_id=_stack_id(orientation, spacing, run_slices),
            ))
    # two acquisitions with bit-identical geometry hash to the same id;
    # suffix the later ones (canonical series order) so ids stay unique
    stacks.sort(key=lambda s: (s.stack_id, sorted(s.source_series)))
    by_id: dict = {}
    for i, st in enumerate(stacks):
        n = by_id.get(st.stack_id, 0) + 1
        by_id[st.stack_id] = n
        if n > 1:
            stacks[i] = CineStack(
                slices=st.slices, pixel_spacing=st.pixel_spacing,
                slice_gap=st.slice_gap, orientation=st.orientation,
                source_series=st.source_series,
                stack_id=f"{st.stack_id}-{n}")
    stacks.sort(key=lambda s: s.stack_id)
    return stacks


def extract_stacks(path, limits: IngestLimits | None = None):
    """Convenience: directory -> (stacks, diagnostics)."""
    images, diag = parse_exam_directory(path)
    series = collect_cine_series(images, diag, limits)
    stacks = group_into_stacks(series, diag, limits)
    return stacks, diag


def stack_manifest(stacks, diag: IngestDiagnostics | None = None) -> dict:
    """JSON-ready summary of the extracted stacks."""
    entries = []
    for st in stacks:
        entries.append({
            "stack_id": st.stack_id,
            "n_slices": st.n_slices,
            "n_frames": st.n_frames,
            "pixel_spacing_mm": list(st.pixel_spacing),
            "slice_gap_mm": st.slice_gap,
            "orientation": list(st.orientation),
            "source_series": sorted(st.source_series),
            "slice_positions": [list(s.position) for s in st.slices],
            "frame_counts": [s.frame_count for s in st.slices],
        })
    out = {"stacks": entries}
    if diag is not None:
        out["diagnostics"] = diag.to_dict()
    return out
