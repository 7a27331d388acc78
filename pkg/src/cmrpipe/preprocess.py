"""Geometric and intensity normalization applied before every model.

Every image fed to a network goes through the same chain: zero-pad to a
square, resize to the model's input side, min-max normalize. The chain
records its own provenance (pad offsets, scale) so that anything computed
in processed coordinates (masks, boxes) can be mapped back to the original
pixel grid exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


@dataclass(frozen=True)
class Provenance:
    """Affine record mapping processed coordinates back to the original grid.

    original (H0, W0) -> zero-pad to (S, S) at pad_offset -> resize to (T, T).
    Recorded, never recomputed.
    """

    original_shape: tuple[int, int]
    pad_offset: tuple[int, int]
    padded_side: int
    target_side: int

    @property
    def scale(self) -> float:
        return self.target_side / self.padded_side

    def to_original(self, rows, cols):
        """Map processed (row, col) coordinates to original coordinates (float)."""
        rows = np.asarray(rows, dtype=float)
        cols = np.asarray(cols, dtype=float)
        pr, pc = self.pad_offset
        return ((rows + 0.5) / self.scale - 0.5 - pr,
                (cols + 0.5) / self.scale - 0.5 - pc)

    def _original_to_processed_index(self):
        # Nearest processed index for every original pixel; ties round half down.
        h0, w0 = self.original_shape
        pr, pc = self.pad_offset
        r = (np.arange(h0) + pr + 0.5) * self.scale - 0.5
        c = (np.arange(w0) + pc + 0.5) * self.scale - 0.5
        ri = np.clip(np.ceil(r - 0.5), 0, self.target_side - 1).astype(int)
        ci = np.clip(np.ceil(c - 0.5), 0, self.target_side - 1).astype(int)
        return ri, ci

    def mask_to_original(self, mask: np.ndarray) -> np.ndarray:
        """Carry a processed-space label/mask image back to the original grid.

        Nearest-neighbour lookup, so no new label values are introduced.
        """
        if mask.shape != (self.target_side, self.target_side):
            raise ContractViolation(
                f"mask shape {mask.shape} != processed side {self.target_side}")
        ri, ci = self._original_to_processed_index()
        return mask[np.ix_(ri, ci)]

    def box_to_original(self, row0: int, col0: int, side: int):
        """Conservative inverse map of a processed-space square box.

        Returns inclusive (r0, r1, c0, c1) in original coordinates, expanded
        outward so the returned box covers everything the input box covered.
        """
        rr, cc = self.to_original([row0 - 0.5, row0 + side - 0.5],
                                  [col0 - 0.5, col0 + side - 0.5])
        h0, w0 = self.original_shape
        r0 = int(np.clip(math.floor(rr[0] + 0.5), 0, h0 - 1))
        r1 = int(np.clip(math.ceil(rr[1] - 0.5), 0, h0 - 1))
        c0 = int(np.clip(math.floor(cc[0] + 0.5), 0, w0 - 1))
        c1 = int(np.clip(math.ceil(cc[1] - 0.5), 0, w0 - 1))
        return r0, r1, c0, c1


@dataclass
class ImageTensor:
    """2D image plus the provenance needed to invert the preprocessing chain."""

    data: np.ndarray
    provenance: Provenance

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def pad_to_square(img: np.ndarray) -> ImageTensor:
    """Zero-pad a 2D image to S x S, S = max(height, width), content centred.

    Odd padding puts the extra pixel on the right/bottom.
    """
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ContractViolation(f"expected non-empty 2D image, got shape {img.shape}")
    h, w = img.shape
    side = max(h, w)
    top = (side - h) // 2
    left = (side - w) // 2
    out = np.zeros((side, side), dtype=img.dtype if img.dtype.kind == "f" else np.float32)
    out[top:top + h, left:left + w] = img
    prov = Provenance(original_shape=(h, w), pad_offset=(top, left),
                      padded_side=side, target_side=side)
    return ImageTensor(out, prov)


def _source_coords(target: int, source: int) -> np.ndarray:
    return (np.arange(target) + 0.5) * (source / target) - 0.5


def resize(img: ImageTensor, target: int, mode: str = "bilinear") -> ImageTensor:
    """Resize a square ImageTensor to target x target.

    bilinear for intensity images, nearest for label masks. Nearest ties
    round half down (toward the smaller index).
    """
    data = img.data
    if data.shape[0] != data.shape[1]:
        raise ContractViolation(f"resize requires a square input, got {data.shape}")
    if img.provenance.target_side != data.shape[0]:
        raise ContractViolation("provenance is stale for this image")
    s = data.shape[0]
    if mode == "nearest":
        src = _source_coords(target, s)
        idx = np.clip(np.ceil(src - 0.5), 0, s - 1).astype(int)
        out = data[np.ix_(idx, idx)]
    elif mode == "bilinear":
        src = np.clip(_source_coords(target, s), 0, s - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, s - 1)
        f = src - i0
        top = data[np.ix_(i0, i0)] * np.outer(1 - f, 1 - f) + data[np.ix_(i0, i1)] * np.outer(1 - f, f)
        bot = data[np.ix_(i1, i0)] * np.outer(f, 1 - f) + data[np.ix_(i1, i1)] * np.outer(f, f)
        out = (top + bot).astype(np.result_type(data, np.float32))
    else:
        raise ContractViolation(f"unknown resize mode {mode!r}")
    p = img.provenance
    prov = Provenance(original_shape=p.original_shape, pad_offset=p.pad_offset,
                      padded_side=p.padded_side, target_side=target)
    return ImageTensor(out, prov)


def normalize_intensity(img: ImageTensor) -> ImageTensor:
    """Per-image min-max scaling to [0, 1]; a constant image maps to zeros."""
    data = np.asarray(img.data, dtype=np.float32)
    lo = float(data.min())
    hi = float(data.max())
    if hi - lo <= 0:
        out = np.zeros_like(data)
    else:
        out = (data - lo) / (hi - lo)
    return ImageTensor(out, img.provenance)


def preprocess_for_model(img: np.ndarray, target: int) -> ImageTensor:
    """Full input chain: pad to square, bilinear resize, min-max normalize."""
    return normalize_intensity(resize(pad_to_square(img), target, mode="bilinear"))
