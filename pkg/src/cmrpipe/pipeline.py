"""Stage orchestration: one exam directory in, one JSON-ready report out.

run_pipeline chains extraction, short-axis selection, heart localization
and ventricle segmentation; a stage failure maps to a report status rather
than an exception so batches never abort on a bad exam. run_batch fans out
over exam directories with shared read-only models; per-exam output
(timings excluded) is deterministic regardless of scheduling. evaluate_exam
scores a result against a phantom exam's stored ground truth.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import eval_stats
from .dicom_ingest import IngestLimits, extract_stacks
from .errors import (
    ContractViolation,
    DegenerateDataError,
    EmptySegmentationError,
    NoCineStacksError,
    NoHeartFoundError,
    WeightFormatError,
)
from .heart_locator import (
    BoundingBox,
    box_iou,
    compute_bounding_box,
    crop_stack,
    predict_heart_masks,
    remove_islands,
)
from .nn.weights import load_model
from .phantom_gen import load_truth, load_truth_labels
from .sax_classifier import CENTRAL_K, select_sax_stack
from .ventricle_segmenter import (
    MIDDLE_K,
    MYO_DENSITY_G_PER_ML,
    compute_function_report,
    detect_phases,
    largest_component_filter,
    segment_stack,
    volume_time_curve,
)

REPORT_SCHEMA = "cmr-report/1"
STATUSES = ("ok", "crop_fail", "no_sax", "empty_segmentation", "error")


@dataclass(frozen=True)
class PipelineConfig:
    """Every decision constant of the pipeline, JSON-overridable.

    The ingest limits steer grouping only; the stack type invariants keep
    the documented defaults as hard floors. bsa_source picks where body
    surface area comes from: "metadata" reads bsa_m2 from the exam's
    metadata.json and falls back to the default, "default" always uses
    default_bsa_m2.
    """

    min_frames: int = 10
    min_slices: int = 6
    orientation_tol: float = 1e-3
    spacing_tol: float = 1e-3
    gap_rel_tol: float = 0.05
    central_k: int = CENTRAL_K
    mask_threshold: float = 0.5
    box_expansion: float = 1.5
    slice_range: str = "middle_five"  # or "all"
    middle_k: int = MIDDLE_K
    myocardium_density_g_per_ml: float = MYO_DENSITY_G_PER_ML
    bsa_source: str = "metadata"  # or "default"
    default_bsa_m2: float = 1.6
    workers: int = 1

    def __post_init__(self):
        if self.bsa_source not in ("metadata", "default"):
            raise ContractViolation(f"unknown bsa_source {self.bsa_source!r}")
        if self.slice_range not in ("middle_five", "all"):
            raise ContractViolation(f"unknown slice_range {self.slice_range!r}")
        if self.default_bsa_m2 <= 0 or self.myocardium_density_g_per_ml <= 0:
            raise ContractViolation("BSA and density must be positive")
        if not 0 < self.mask_threshold < 1:
            raise ContractViolation("mask_threshold must lie in (0, 1)")
        if self.central_k < 1 or self.workers < 1:
            raise ContractViolation("central_k and workers must be >= 1")

    def ingest_limits(self) -> IngestLimits:
        return IngestLimits(
            min_frames=self.min_frames, min_slices=self.min_slices,
            orientation_tol=self.orientation_tol, spacing_tol=self.spacing_tol,
            gap_rel_tol=self.gap_rel_tol)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ModelBundle:
    """The three trained models the pipeline needs, loaded once and shared."""

    classifier: object
    locator: object
    segmenter: object

    @classmethod
    def load(cls, bundle_dir) -> "ModelBundle":
        bundle = Path(bundle_dir)
        clf = load_model(bundle / "classifier",
                         expect_architecture="sax_classifier")
        loc = load_model(bundle / "locator", expect_architecture="unet3plus")
        seg = load_model(bundle / "segmenter", expect_architecture="unet3plus")
        if loc.spec.out_classes != 2:
            raise WeightFormatError("locator must be a 2-class model")
        if seg.spec.out_classes != 3:
            raise WeightFormatError("segmenter must be a 3-class model")
        return cls(classifier=clf, locator=loc, segmenter=seg)


@dataclass
class PipelineReport:
    exam_id: str
    status: str
    schema: str = REPORT_SCHEMA
    timings: dict = field(default_factory=dict)  # extract_s .. total_s
    counts: dict = field(default_factory=dict)
    chosen_stack_id: str | None = None
    selection: dict | None = None
    box: dict | None = None
    function: dict | None = None  # FunctionReport.to_dict() when status == ok
    flags: dict = field(default_factory=lambda: {
        "non_physiologic": False, "middle_five_fallback": False})
    config: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ContractViolation(f"unknown status {self.status!r}")
        if any(v < 0 for v in self.timings.values()):
            raise ContractViolation("timings must be non-negative")
        if self.status == "ok" and self.function is None:
            raise ContractViolation("status ok requires a function report")

    def to_dict(self, include_timings: bool = True) -> dict:
        d = asdict(self)
        if not include_timings:
            d.pop("timings")
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineReport":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ContractViolation(f"unknown report keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class PipelineResult:
    """Report plus the in-memory artifacts evaluation needs."""

    report: PipelineReport
    label_volume: np.ndarray | None = None  # (phases, slices, H, W) full grid
    box: BoundingBox | None = None


def _resolve_bsa(exam_dir, config: PipelineConfig):
    """(bsa_m2, warning-or-None) according to the configured source."""
    if config.bsa_source == "metadata":
        meta = Path(exam_dir) / "metadata.json"
        if meta.is_file():
            try:
                val = float(json.loads(meta.read_text())["bsa_m2"])
                if val > 0:
                    return val, None
            except (ValueError, KeyError, json.JSONDecodeError):
                pass
        return config.default_bsa_m2, "bsa metadata missing; default used"
    return config.default_bsa_m2, None


def run_pipeline(exam_dir, models: ModelBundle,
                 config: PipelineConfig | None = None) -> PipelineResult:
    """Stages 1-4 over one exam; failures map to report statuses."""
    config = config if config is not None else PipelineConfig()
    exam_dir = Path(exam_dir)
    report = PipelineReport(exam_id=exam_dir.name, status="error",
                            config=config.to_dict())
    t_start = time.perf_counter()
    timings = report.timings

    stacks, diag = extract_stacks(exam_dir, config.ingest_limits())
    timings["extract_s"] = time.perf_counter() - t_start
    report.warnings.extend(diag.warnings)
    report.counts = {
        "files": diag.files_parsed,
        "series": diag.series_seen,
        "stacks": len(stacks),
        "images_classified": 0,
        "images_localized": 0,
        "images_segmented": 0,
    }
    if not stacks:
        report.status = "no_sax"
        timings["total_s"] = time.perf_counter() - t_start
        return PipelineResult(report=report)

    t = time.perf_counter()
    try:
        selection = select_sax_stack(stacks, models.classifier, k=config.central_k)
    except NoCineStacksError:
        report.status = "no_sax"
        timings["total_s"] = time.perf_counter() - t_start
        return PipelineResult(report=report)
    timings["identify_s"] = time.perf_counter() - t
    report.selection = selection.to_dict()
    report.chosen_stack_id = selection.chosen_stack_id
    report.counts["images_classified"] = sum(
        len(s["per_slice"]) for s in selection.per_stack_scores.values())
    stack = next(s for s in stacks if s.stack_id == selection.chosen_stack_id)

    t = time.perf_counter()
    masks = predict_heart_masks(models.locator, stack,
                                threshold=config.mask_threshold)
    cleaned = remove_islands(masks)
    try:
        box = compute_bounding_box(cleaned, expansion=config.box_expansion)
    except NoHeartFoundError as e:
        report.status = "crop_fail"
        report.warnings.append(str(e))
        timings["localise_s"] = time.perf_counter() - t
        timings["total_s"] = time.perf_counter() - t_start
        return PipelineResult(report=report)
    cropped = crop_stack(stack, box)
    timings["localise_s"] = time.perf_counter() - t
    report.counts["images_localized"] = stack.n_slices
    report.box = box.to_dict()

    t = time.perf_counter()
    vol = segment_stack(models.segmenter, cropped)
    vol = largest_component_filter(vol)
    curve = volume_time_curve(vol, slice_range=config.slice_range,
                              k=config.middle_k)
    ed, es, constant = detect_phases(curve)
    if constant:
        report.warnings.append("volume-time curve is constant; phases default to 0")
    bsa, bsa_warning = _resolve_bsa(exam_dir, config)
    if bsa_warning:
        report.warnings.append(bsa_warning)
    try:
        fn = compute_function_report(
            vol, ed, es, bsa,
            density_g_per_ml=config.myocardium_density_g_per_ml)
    except EmptySegmentationError as e:
        report.status = "empty_segmentation"
        report.warnings.append(str(e))
        timings["segment_s"] = time.perf_counter() - t
        timings["total_s"] = time.perf_counter() - t_start
        return PipelineResult(report=report, box=box)
    timings["segment_s"] = time.perf_counter() - t
    report.counts["images_segmented"] = cropped.n_slices * cropped.n_frames

    report.function = fn.to_dict()
    report.flags = {
        "non_physiologic": fn.non_physiologic,
        "middle_five_fallback": curve.fallback,
    }
    report.status = "ok"
    timings["total_s"] = time.perf_counter() - t_start

    # predicted labels embedded back into the uncropped pixel grid
    h0, w0 = stack.slices[0].matrix
    full = np.zeros((vol.n_phases, vol.n_slices, h0, w0), dtype=np.uint8)
    full[:, :, box.row0:box.row1, box.col0:box.col1] = vol.labels
    return PipelineResult(report=report, label_volume=full, box=box)


def _run_isolated(exam_dir, models, config) -> PipelineResult:
    try:
        return run_pipeline(exam_dir, models, config)
    except Exception as e:  # failure isolation: a bad exam never kills a batch
        report = PipelineReport(
            exam_id=Path(exam_dir).name, status="error",
            config=config.to_dict() if config else PipelineConfig().to_dict(),
            warnings=[f"{type(e).__name__}: {e}"])
        return PipelineResult(report=report)


def run_batch(root_dir, models: ModelBundle,
              config: PipelineConfig | None = None):
    """Process every exam directory under root_dir; returns
    (results in directory order, summary dict)."""
    config = config if config is not None else PipelineConfig()
    root = Path(root_dir)
    exam_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not exam_dirs:
        raise ContractViolation(f"{root} contains no exam directories")
    if config.workers == 1:
        results = [_run_isolated(d, models, config) for d in exam_dirs]
    else:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(
                lambda d: _run_isolated(d, models, config), exam_dirs))
    return results, batch_summary([r.report for r in results])


def _spread(values) -> dict:
    v = np.asarray(values, dtype=float)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"median": float(med), "iqr": [float(q1), float(q3)],
            "range": [float(v.min()), float(v.max())]}


def batch_summary(reports) -> dict:
    """Median / IQR / range of timings and counts across a batch."""
    statuses: dict = {}
    for r in reports:
        statuses[r.status] = statuses.get(r.status, 0) + 1
    timing_keys = sorted({k for r in reports for k in r.timings})
    count_keys = sorted({k for r in reports for k in r.counts})
    return {
        "n_exams": len(reports),
        "statuses": statuses,
        "timings_s": {k: _spread([r.timings.get(k, 0.0) for r in reports])
                      for k in timing_keys},
        "counts": {k: _spread([r.counts.get(k, 0) for r in reports])
                   for k in count_keys},
    }


def format_summary(summary: dict) -> str:
    """Plain-text table: one row per quantity, median (IQR) (range)."""
    lines = [f"exams: {summary['n_exams']}  statuses: {summary['statuses']}"]
    for section, unit in (("timings_s", "s"), ("counts", "")):
        for key, s in summary[section].items():
            lines.append(
                f"  {key:<20} {s['median']:9.2f}{unit} "
                f"({s['iqr'][0]:.2f} - {s['iqr'][1]:.2f}) "
                f"[{s['range'][0]:.2f} - {s['range'][1]:.2f}]")
    return "\n".join(lines)


def write_result(result: PipelineResult, out_dir) -> None:
    """Persist report.json (+ predicted_labels.npz when present)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(result.report.to_dict(), indent=1, sort_keys=True))
    if result.label_volume is not None:
        np.savez_compressed(out / "predicted_labels.npz",
                            labels=result.label_volume)


def load_result(out_dir) -> PipelineResult:
    out = Path(out_dir)
    report = PipelineReport.from_dict(
        json.loads((out / "report.json").read_text()))
    labels = None
    npz = out / "predicted_labels.npz"
    if npz.is_file():
        with np.load(npz) as z:
            labels = z["labels"]
    box = BoundingBox(**report.box) if report.box else None
    return PipelineResult(report=report, label_volume=labels, box=box)


def evaluate_exam(result: PipelineResult, exam_dir,
                  config: PipelineConfig | None = None) -> dict:
    """Score one pipeline result against the exam's stored ground truth.

    Requires truth files in exam_dir; a non-ok result yields a record with
    only its status so aggregators can exclude it.
    """
    config = config if config is not None else PipelineConfig()
    exam_dir = Path(exam_dir)
    if not (exam_dir / "truth.json").is_file():
        raise ContractViolation(f"{exam_dir} has no ground truth")
    truth = load_truth(exam_dir)
    record = {"exam_id": result.report.exam_id, "status": result.report.status}
    if result.report.status != "ok":
        return record

    tl = load_truth_labels(exam_dir)
    pred = result.label_volume
    if pred is None or pred.shape != tl.shape:
        raise ContractViolation(
            f"prediction shape {None if pred is None else pred.shape} "
            f"!= truth shape {tl.shape}")

    ed_t, es_t = int(truth["ed_phase"]), int(truth["es_phase"])
    for name, phase in (("ed", ed_t), ("es", es_t)):
        for cls_name, cls in (("blood", 1), ("myo", 2)):
            p = pred[phase] == cls
            g = tl[phase] == cls
            record[f"dice_{cls_name}_{name}"] = eval_stats.dice(p, g)
            record[f"iou_{cls_name}_{name}"] = eval_stats.iou(p, g)

    gt_masks = [tl[0, s] > 0 for s in range(tl.shape[1])]
    gt_box = compute_bounding_box(gt_masks, expansion=config.box_expansion)
    record["box_iou"] = box_iou(result.box, gt_box)
    record["box_contains_heart_phase0"] = result.box.contains_extent(
        truth["heart_extent_phase0"])
    record["box_contains_heart_all"] = result.box.contains_extent(
        truth["heart_extent_all"])

    fn = result.report.function
    truth_edv = float(truth["blood_ml"][ed_t])
    truth_esv = float(truth["blood_ml"][es_t])
    truth_ef = (truth_edv - truth_esv) / truth_edv
    truth_mass = float(truth["myo_ml"][ed_t]) * config.myocardium_density_g_per_ml
    record.update({
        "ed_phase_pred": fn["ed_phase"], "ed_phase_truth": ed_t,
        "es_phase_pred": fn["es_phase"], "es_phase_truth": es_t,
        "edv_pred_ml": fn["edv_ml"], "edv_truth_ml": truth_edv,
        "esv_pred_ml": fn["esv_ml"], "esv_truth_ml": truth_esv,
        "ef_pred": fn["ef"], "ef_truth": truth_ef,
        "mass_pred_g": fn["mass_g"], "mass_truth_g": truth_mass,
        "edv_delta_ml": fn["edv_ml"] - truth_edv,
        "esv_delta_ml": fn["esv_ml"] - truth_esv,
        "ef_delta": fn["ef"] - truth_ef,
        "mass_delta_g": fn["mass_g"] - truth_mass,
    })
    return record


def aggregate_metrics(records) -> dict:
    """Batch-level medians plus volume agreement statistics.

    Non-ok records are counted and excluded from the numeric aggregates.
    """
    ok = [r for r in records if r.get("status") == "ok"]
    out = {
        "n_records": len(records),
        "n_ok": len(ok),
        "statuses": {},
    }
    for r in records:
        s = r.get("status", "missing")
        out["statuses"][s] = out["statuses"].get(s, 0) + 1
    if not ok:
        return out
    numeric = [k for k, v in ok[0].items() if isinstance(v, (int, float))
               and not isinstance(v, bool)]
    out["median"] = {k: float(np.median([r[k] for r in ok])) for k in numeric}
    agreement_pairs = {
        "edv": [(r["edv_pred_ml"], r["edv_truth_ml"]) for r in ok],
        "esv": [(r["esv_pred_ml"], r["esv_truth_ml"]) for r in ok],
        "ef": [(r["ef_pred"], r["ef_truth"]) for r in ok],
    }
    for name, pairs in agreement_pairs.items():
        if len(pairs) < 3:
            continue
        try:
            out[f"{name}_agreement"] = eval_stats.agreement_stats(pairs).to_dict()
        except DegenerateDataError as e:
            out[f"{name}_agreement"] = {"degenerate": str(e)}
    return out
