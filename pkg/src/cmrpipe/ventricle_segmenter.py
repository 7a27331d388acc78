"""Ventricle segmentation and function metrics (stage 4).

Every slice and frame of the cropped stack is segmented into background /
blood pool / myocardium, each phase is cleaned to its largest 3D connected
component, the volume-time curve over the middle five slices fixes ED and
ES, and volumes over all slices at those phases yield EDV, ESV, SV, EF and
myocardial mass (indexed to body surface area).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dicom_ingest import CineStack
from .errors import ContractViolation, EmptySegmentationError
from .preprocess import preprocess_for_model

MYO_DENSITY_G_PER_ML = 1.05
MIDDLE_K = 5

# 6-connectivity in 3D
_STRUCT_3D = ndimage.generate_binary_structure(3, 1)


@dataclass
class LabelVolume:
    """labels: (phases, slices, rows, cols) over {0 bg, 1 blood, 2 myo}."""

    labels: np.ndarray
    pixel_spacing: tuple  # (row mm, col mm)
    slice_gap: float

    def __post_init__(self):
        if self.labels.ndim != 4:
            raise ContractViolation("labels must be (phases, slices, rows, cols)")
        if self.labels.max(initial=0) > 2 or self.labels.min(initial=0) < 0:
            raise ContractViolation("labels must lie in {0, 1, 2}")

    @property
    def n_phases(self) -> int:
        return self.labels.shape[0]

    @property
    def n_slices(self) -> int:
        return self.labels.shape[1]

    @property
    def voxel_mm3(self) -> float:
        return self.pixel_spacing[0] * self.pixel_spacing[1] * self.slice_gap

    def count_to_ml(self, count) -> float:
        # multiply before the single division so integer-exact products
        # (e.g. 1000 voxels at 1.5 x 1.5 x 8 mm) convert without drift
        return float(count) * self.voxel_mm3 / 1000.0


@dataclass
class VolumeTimeCurve:
    volumes_ml: np.ndarray  # one value per phase
    slice_range: str  # "all" or "middle_five"
    fallback: bool = False  # middle_five requested but too few slices

    def __post_init__(self):
        if np.any(self.volumes_ml < 0):
            raise ContractViolation("volumes must be non-negative")


@dataclass
class FunctionReport:
    edv_ml: float
    esv_ml: float
    sv_ml: float
    ef: float
    mass_g: float
    ed_phase: int
    es_phase: int
    bsa_m2: float
    edv_i: float
    esv_i: float
    sv_i: float
    mass_i: float
    non_physiologic: bool = False

    def to_dict(self) -> dict:
        return {
            "edv_ml": self.edv_ml, "esv_ml": self.esv_ml, "sv_ml": self.sv_ml,
            "ef": self.ef, "mass_g": self.mass_g,
            "ed_phase": self.ed_phase, "es_phase": self.es_phase,
            "bsa_m2": self.bsa_m2, "edv_i": self.edv_i, "esv_i": self.esv_i,
            "sv_i": self.sv_i, "mass_i": self.mass_i,
            "non_physiologic": self.non_physiologic,
        }


def segment_stack(model, cropped: CineStack, batch_size: int = 8) -> LabelVolume:
    """Per-pixel argmax labels for every slice and frame, mapped back to
    the cropped stack's resolution."""
    side = model.spec.input_size
    n_s, n_t = cropped.n_slices, cropped.n_frames
    tensors = []
    for s in range(n_s):
        for t in range(n_t):
            tensors.append(preprocess_for_model(
                cropped.frame_image(s, t).astype(np.float32), side))
    batch = np.stack([t.data for t in tensors])[:, None]
    probs = model.predict(batch, batch_size=batch_size)
    h, w = cropped.frame_image(0, 0).shape
    labels = np.zeros((n_t, n_s, h, w), dtype=np.uint8)
    for idx, tens in enumerate(tensors):
        s, t = divmod(idx, n_t)
        lab = probs[idx].argmax(axis=0).astype(np.uint8)
        labels[t, s] = tens.provenance.mask_to_original(lab)
    return LabelVolume(labels=labels, pixel_spacing=cropped.pixel_spacing,
                       slice_gap=cropped.slice_gap)


def largest_component_filter(vol: LabelVolume) -> LabelVolume:
    """Per phase, keep only the largest 6-connected 3D foreground component
    (anisotropy ignored: voxels are treated as a unit grid); labels inside
    the kept component are unchanged."""
    out = vol.labels.copy()
    for t in range(vol.n_phases):
        fg = out[t] > 0
        if not fg.any():
            continue
        lab, n = ndimage.label(fg, structure=_STRUCT_3D)
        if n <= 1:
            continue
        sizes = np.bincount(lab.ravel())[1:]
        best = int(np.argmax(sizes)) + 1  # ties -> lowest label id
        out[t][lab != best] = 0
    return LabelVolume(labels=out, pixel_spacing=vol.pixel_spacing,
                       slice_gap=vol.slice_gap)


def _middle_window(n_slices: int, k: int = MIDDLE_K):
    k = min(k, n_slices)
    start = (n_slices - k) // 2
    return start, start + k


def volume_time_curve(vol: LabelVolume, slice_range: str = "middle_five",
                      k: int = MIDDLE_K) -> VolumeTimeCurve:
    """Blood-pool volume per phase over the requested slice range."""
    if slice_range not in ("all", "middle_five"):
        raise ContractViolation(f"unknown slice_range {slice_range!r}")
    if k < 1:
        raise ContractViolation("window size must be >= 1")
    fallback = False
    if slice_range == "middle_five" and vol.n_slices >= k:
        lo, hi = _middle_window(vol.n_slices, k)
        sel = vol.labels[:, lo:hi]
    else:
        if slice_range == "middle_five":
            fallback = True
        sel = vol.labels
    counts = (sel == 1).sum(axis=(1, 2, 3))
    volumes = np.array([vol.count_to_ml(c) for c in counts])
    return VolumeTimeCurve(volumes_ml=volumes, slice_range=slice_range,
                           fallback=fallback)


def detect_phases(curve: VolumeTimeCurve):
    """(ed_phase, es_phase, constant_flag); ties resolve to the earliest
    phase, a constant curve gives (0, 0) with the flag raised."""
    v = np.asarray(curve.volumes_ml)
    if v.size < 2:
        raise ContractViolation("phase detection needs at least 2 phases")
    ed = int(np.argmax(v))
    es = int(np.argmin(v))
    constant = bool(np.all(v == v[0]))
    if constant:
        return 0, 0, True
    return ed, es, False


def compute_function_report(vol: LabelVolume, ed_phase: int, es_phase: int,
                            bsa_m2: float,
                            density_g_per_ml: float = MYO_DENSITY_G_PER_ML
                            ) -> FunctionReport:
    """Volumes over ALL slices at the detected phases; mass from myocardium
    at end diastole; everything indexed by body surface area."""
    if bsa_m2 <= 0:
        raise ContractViolation("bsa_m2 must be positive")
    if density_g_per_ml <= 0:
        raise ContractViolation("density must be positive")
    if not (0 <= ed_phase < vol.n_phases and 0 <= es_phase < vol.n_phases):
        raise ContractViolation("phase index out of range")
    edv = vol.count_to_ml((vol.labels[ed_phase] == 1).sum())
    esv = vol.count_to_ml((vol.labels[es_phase] == 1).sum())
    if edv == 0:
        raise EmptySegmentationError("empty segmentation: EDV is zero")
    sv = edv - esv
    ef = sv / edv
    myo_ml = vol.count_to_ml((vol.labels[ed_phase] == 2).sum())
    mass = myo_ml * density_g_per_ml
    return FunctionReport(
        edv_ml=edv, esv_ml=esv, sv_ml=sv, ef=ef, mass_g=mass,
        ed_phase=int(ed_phase), es_phase=int(es_phase), bsa_m2=bsa_m2,
        edv_i=edv / bsa_m2, esv_i=esv / bsa_m2, sv_i=sv / bsa_m2,
        mass_i=mass / bsa_m2,
        non_physiologic=bool(esv > edv),
    )
