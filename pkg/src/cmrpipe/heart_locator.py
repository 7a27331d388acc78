"""Heart localization and cropping (stage 3).

Whole-heart masks are predicted on the first frame of every slice,
spurious islands are removed against the slice-direction intersection,
and the union is wrapped in a square box expanded by 50% which crops
every slice and frame of the stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .dicom_ingest import CineSlice, CineStack, DicomImageMeta
from .errors import ContractViolation, NoHeartFoundError
from .preprocess import preprocess_for_model

# 4-connectivity in 2D
_STRUCT_2D = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True)
class BoundingBox:
    """Square region in original-image coordinates."""

    row0: int
    col0: int
    side: int

    def __post_init__(self):
        if self.side < 1 or self.row0 < 0 or self.col0 < 0:
            raise ContractViolation("box must have positive side and lie in bounds")

    @property
    def row1(self) -> int:  # exclusive
        return self.row0 + self.side

    @property
    def col1(self) -> int:  # exclusive
        return self.col0 + self.side

    def contains_extent(self, extent) -> bool:
        """extent = [row0, row1, col0, col1] inclusive."""
        r0, r1, c0, c1 = extent
        return self.row0 <= r0 and r1 < self.row1 and self.col0 <= c0 and c1 < self.col1

    def to_dict(self) -> dict:
        return {"row0": self.row0, "col0": self.col0, "side": self.side}


def predict_heart_masks(model, stack: CineStack, batch_size: int = 4,
                        threshold: float = 0.5):
    """Binary whole-heart mask per slice (first phase), original resolution.

    The threshold is strict: probability exactly at it is background.
    """
    side = model.spec.input_size
    tensors = [preprocess_for_model(stack.frame_image(s, 0).astype(np.float32), side)
               for s in range(stack.n_slices)]
    batch = np.stack([t.data for t in tensors])[:, None]
    probs = model.predict(batch, batch_size=batch_size)
    masks = []
    for t, p in zip(tensors, probs):
        fg = p[1] > threshold
        masks.append(t.provenance.mask_to_original(fg))
    return masks


def remove_islands(masks):
    """Keep per-slice components that overlap the slice-direction
    intersection of all masks; if that intersection is empty, keep only
    the largest component of each slice. Never adds pixels."""
    if not masks:
        raise ContractViolation("remove_islands needs at least one slice")
    key = masks[0].astype(bool)
    for m in masks[1:]:
        key = key & m.astype(bool)
    cleaned = []
    for m in masks:
        m = m.astype(bool)
        lab, n = ndimage.label(m, structure=_STRUCT_2D)
        if n == 0:
            cleaned.append(m)
            continue
        if key.any():
            keep_ids = np.unique(lab[key & (lab > 0)])
            cleaned.append(np.isin(lab, keep_ids))
        else:
            sizes = np.bincount(lab.ravel())[1:]
            best = int(np.argmax(sizes)) + 1  # ties -> lowest label id
            cleaned.append(lab == best)
    return cleaned


def compute_bounding_box(masks, expansion: float = 1.5) -> BoundingBox:
    """Square box over the union of masks, side scaled by the expansion
    factor, translated (never shrunk) to fit, clamped only when larger
    than the image."""
    if expansion < 1.0:
        raise ContractViolation("expansion factor must be >= 1")
    union = np.zeros_like(masks[0], dtype=bool)
    for m in masks:
        union |= m.astype(bool)
    if not union.any():
        raise NoHeartFoundError("no heart found: union of masks is empty")
    rows = np.any(union, axis=1).nonzero()[0]
    cols = np.any(union, axis=0).nonzero()[0]
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    h, w = r1 - r0 + 1, c1 - c0 + 1
    side = max(h, w)
    # centre the square on the tight box; odd leftovers fall to bottom/right
    row_start = r0 - (side - h) // 2
    col_start = c0 - (side - w) // 2
    expanded = math.ceil(expansion * side)
    row_start -= (expanded - side) // 2
    col_start -= (expanded - side) // 2
    img_h, img_w = union.shape
    final = min(expanded, img_h, img_w)
    row_start = int(np.clip(row_start, 0, img_h - final))
    col_start = int(np.clip(col_start, 0, img_w - final))
    return BoundingBox(row0=row_start, col0=col_start, side=final)


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ir = max(0, min(a.row1, b.row1) - max(a.row0, b.row0))
    ic = max(0, min(a.col1, b.col1) - max(a.col0, b.col0))
    inter = ir * ic
    union = a.side * a.side + b.side * b.side - inter
    return inter / union if union else 1.0


def crop_stack(stack: CineStack, box: BoundingBox) -> CineStack:
    """Crop every slice and frame to the box; pixel spacing, slice gap and
    orientation are unchanged and the stack keeps its identity."""
    new_slices = []
    for sl in stack.slices:
        new_frames = []
        for fr in sl.frames:
            if box.row1 > fr.rows or box.col1 > fr.cols:
                raise ContractViolation("box exceeds image bounds")
            px = fr.pixel_data[box.row0:box.row1, box.col0:box.col1]
            rdir = np.asarray(fr.image_orientation[:3])
            cdir = np.asarray(fr.image_orientation[3:])
            # first retained pixel moves in-plane; out-of-plane distance is intact
            new_pos = (np.asarray(fr.image_position)
                       + box.col0 * fr.pixel_spacing[1] * rdir
                       + box.row0 * fr.pixel_spacing[0] * cdir)
            new_frames.append(replace(
                fr, rows=box.side, cols=box.side,
                image_position=tuple(float(v) for v in new_pos),
                pixel_data=px))
        new_slices.append(CineSlice(position=new_frames[0].image_position,
                                    frames=tuple(new_frames),
                                    series_uid=sl.series_uid))
    return CineStack(
        slices=tuple(new_slices),
        pixel_spacing=stack.pixel_spacing,
        slice_gap=stack.slice_gap,
        orientation=stack.orientation,
        source_series=stack.source_series,
        stack_id=stack.stack_id,
    )
