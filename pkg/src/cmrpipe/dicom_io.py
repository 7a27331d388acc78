"""Minimal DICOM Part-10 reader/writer.

Covers exactly what the pipeline needs: single-frame, uncompressed,
monochrome MR images in explicit or implicit VR little endian. The writer
always emits explicit VR little endian with a standard preamble and file
meta group. This is not a general DICOM implementation; sequences are
skipped, compressed transfer syntaxes are rejected.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IngestError

EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
IMPLICIT_VR_LE = "1.2.840.10008.1.2"
MR_IMAGE_STORAGE = "1.2.840.10008.5.1.4.1.1.4"
IMPLEMENTATION_UID = "2.25.573295831489711042"

# VRs whose explicit encoding uses a 2-byte reserved field + 32-bit length
_LONG_VRS = {"OB", "OW", "OF", "SQ", "UT", "UN"}
_STR_VRS = {"AE", "AS", "CS", "DA", "DT", "LO", "LT", "PN", "SH", "ST", "TM", "UI", "UT"}

# tag -> VR, for implicit-VR decoding of the tags the pipeline reads
_TAG_VR = {
    (0x0008, 0x0016): "UI", (0x0008, 0x0018): "UI", (0x0008, 0x0020): "DA",
    (0x0008, 0x0030): "TM", (0x0008, 0x0060): "CS", (0x0008, 0x103E): "LO",
    (0x0010, 0x0010): "PN", (0x0010, 0x0020): "LO",
    (0x0018, 0x0088): "DS", (0x0018, 0x1060): "DS",
    (0x0020, 0x000D): "UI", (0x0020, 0x000E): "UI", (0x0020, 0x0011): "IS",
    (0x0020, 0x0013): "IS", (0x0020, 0x0032): "DS", (0x0020, 0x0037): "DS",
    (0x0028, 0x0002): "US", (0x0028, 0x0004): "CS", (0x0028, 0x0010): "US",
    (0x0028, 0x0011): "US", (0x0028, 0x0030): "DS", (0x0028, 0x0100): "US",
    (0x0028, 0x0101): "US", (0x0028, 0x0102): "US", (0x0028, 0x0103): "US",
    (0x7FE0, 0x0010): "OW",
}


def _encode_value(vr: str, value) -> bytes:
    if vr in ("OB", "OW", "UN"):
        raw = bytes(value)
    elif vr == "US":
        vals = value if isinstance(value, (list, tuple)) else [value]
        raw = struct.pack(f"<{len(vals)}H", *vals)
    elif vr == "UL":
        vals = value if isinstance(value, (list, tuple)) else [value]
        raw = struct.pack(f"<{len(vals)}I", *vals)
    elif vr in ("DS", "IS"):
        vals = value if isinstance(value, (list, tuple)) else [value]
        raw = "\\".join(_format_number(vr, v) for v in vals).encode("ascii")
    elif vr in _STR_VRS:
        raw = str(value).encode("ascii")
    else:
        raise IngestError(f"writer does not support VR {vr}")
    if len(raw) % 2:
        raw += b"\x00" if vr in ("UI", "OB", "UN") else b" "
    return raw


def _format_number(vr: str, v) -> str:
    if vr == "IS":
        return str(int(v))
    s = repr(float(v))
    if len(s) > 16:  # DS values are capped at 16 bytes
        s = f"{float(v):.10g}"
    return s


def encode_element(group: int, elem: int, vr: str, value) -> bytes:
    raw = _encode_value(vr, value)
    head = struct.pack("<HH", group, elem) + vr.encode("ascii")
    if vr in _LONG_VRS:
        return head + b"\x00\x00" + struct.pack("<I", len(raw)) + raw
    if len(raw) > 0xFFFF:
        raise IngestError(f"value too long for short-form VR {vr}")
    return head + struct.pack("<H", len(raw)) + raw


def write_dicom(path, elements: dict) -> None:
    """Write a Part-10 file. elements maps (group, elem) -> (vr, value);
    must include SOPInstanceUID (0008,0018). File meta is generated."""
    sop_uid = elements.get((0x0008, 0x0018))
    if sop_uid is None:
        raise IngestError("dataset needs (0008,0018) SOPInstanceUID")
    meta_elements = (
        encode_element(0x0002, 0x0001, "OB", b"\x00\x01")
        + encode_element(0x0002, 0x0002, "UI", MR_IMAGE_STORAGE)
        + encode_element(0x0002, 0x0003, "UI", sop_uid[1])
        + encode_element(0x0002, 0x0010, "UI", EXPLICIT_VR_LE)
        + encode_element(0x0002, 0x0012, "UI", IMPLEMENTATION_UID)
    )
    body = b"".join(
        encode_element(g, e, vr, value)
        for (g, e), (vr, value) in sorted(elements.items())
    )
    with open(path, "wb") as f:
        f.write(b"\x00" * 128)
        f.write(b"DICM")
        f.write(encode_element(0x0002, 0x0000, "UL", len(meta_elements)))
        f.write(meta_elements)
        f.write(body)


def _decode_value(vr: str, raw: bytes):
    if vr in ("OB", "OW", "UN", "OF"):
        return raw
    if vr == "US":
        vals = struct.unpack(f"<{len(raw) // 2}H", raw)
        return vals[0] if len(vals) == 1 else list(vals)
    if vr == "UL":
        vals = struct.unpack(f"<{len(raw) // 4}I", raw)
        return vals[0] if len(vals) == 1 else list(vals)
    if vr in ("SS", "SL"):
        fmt = "h" if vr == "SS" else "i"
        size = 2 if vr == "SS" else 4
        vals = struct.unpack(f"<{len(raw) // size}{fmt}", raw)
        return vals[0] if len(vals) == 1 else list(vals)
    if vr in ("FL", "FD"):
        fmt, size = ("f", 4) if vr == "FL" else ("d", 8)
        vals = struct.unpack(f"<{len(raw) // size}{fmt}", raw)
        return vals[0] if len(vals) == 1 else list(vals)
    text = raw.decode("ascii", errors="replace").rstrip("\x00 ")
    if vr == "DS":
        return [float(v) for v in text.split("\\")] if text else []
    if vr == "IS":
        return [int(v) for v in text.split("\\")] if text else []
    return text


class _Stream:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise IngestError("truncated DICOM stream")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def eof(self) -> bool:
        return self.pos >= len(self.data)


def _skip_undefined_sequence(s: _Stream) -> None:
    # consume items until the sequence delimitation item (FFFE,E0DD)
    while True:
        group, elem = struct.unpack("<HH", s.read(4))
        length = struct.unpack("<I", s.read(4))[0]
        if (group, elem) == (0xFFFE, 0xE0DD):
            return
        if (group, elem) != (0xFFFE, 0xE000):
            raise IngestError("malformed sequence encoding")
        if length == 0xFFFFFFFF:
            _skip_undefined_item(s)
        else:
            s.read(length)


def _skip_undefined_item(s: _Stream) -> None:
    # items of undefined length end at (FFFE,E00D); nested elements are
    # skipped blind using implicit-style (tag, len32) framing, which covers
    # the files this reader accepts
    while True:
        group, elem = struct.unpack("<HH", s.read(4))
        length = struct.unpack("<I", s.read(4))[0]
        if (group, elem) == (0xFFFE, 0xE00D):
            return
        if length == 0xFFFFFFFF:
            raise IngestError("nested undefined lengths are not supported")
        s.read(length)


def _parse_elements(s: _Stream, explicit: bool, out: dict) -> None:
    while not s.eof():
        group, elem = struct.unpack("<HH", s.read(4))
        if explicit:
            vr = s.read(2).decode("ascii")
            if vr in _LONG_VRS:
                s.read(2)
                length = struct.unpack("<I", s.read(4))[0]
            else:
                length = struct.unpack("<H", s.read(2))[0]
        else:
            vr = _TAG_VR.get((group, elem), "UN")
            length = struct.unpack("<I", s.read(4))[0]
        if vr == "SQ" or length == 0xFFFFFFFF:
            if length == 0xFFFFFFFF:
                _skip_undefined_sequence(s)
            else:
                s.read(length)
            continue
        raw = s.read(length)
        out[(group, elem)] = _decode_value(vr, raw)


def read_dicom(path) -> dict:
    """Parse a Part-10 file into {(group, elem): decoded value}."""
    data = Path(path).read_bytes()
    if len(data) < 132 or data[128:132] != b"DICM":
        raise IngestError(f"{path}: not a DICOM Part-10 file")
    s = _Stream(data, 132)
    # file meta group is always explicit VR little endian
    group, elem = struct.unpack("<HH", s.read(4))
    if (group, elem) != (0x0002, 0x0000):
        raise IngestError(f"{path}: missing file meta group length")
    s.read(2)  # UL
    s.read(2)  # 16-bit length (always 4)
    meta_len = struct.unpack("<I", s.read(4))[0]
    meta = _Stream(s.read(meta_len))
    meta_elems: dict = {}
    _parse_elements(meta, explicit=True, out=meta_elems)
    syntax = meta_elems.get((0x0002, 0x0010), EXPLICIT_VR_LE)
    if syntax == EXPLICIT_VR_LE:
        explicit = True
    elif syntax == IMPLICIT_VR_LE:
        explicit = False
    else:
        raise IngestError(f"{path}: unsupported transfer syntax {syntax}")
    elems: dict = {}
    try:
        _parse_elements(s, explicit=explicit, out=elems)
    except (struct.error, UnicodeDecodeError) as e:
        raise IngestError(f"{path}: corrupt element stream: {e}") from e
    return elems


def pixel_array(elems: dict) -> np.ndarray:
    """Decode (7FE0,0010) into a (rows, cols) array using the header fields."""
    rows = elems.get((0x0028, 0x0010))
    cols = elems.get((0x0028, 0x0011))
    bits = elems.get((0x0028, 0x0100), 16)
    signed = elems.get((0x0028, 0x0103), 0) == 1
    raw = elems.get((0x7FE0, 0x0010))
    if rows is None or cols is None or raw is None:
        raise IngestError("missing Rows/Columns/PixelData")
    if bits == 16:
        dtype = "<i2" if signed else "<u2"
    elif bits == 8:
        dtype = "i1" if signed else "u1"
    else:
        raise IngestError(f"unsupported BitsAllocated {bits}")
    count = rows * cols
    if len(raw) < count * np.dtype(dtype).itemsize:
        raise IngestError("pixel data shorter than Rows*Columns")
    return np.frombuffer(raw, dtype=dtype, count=count).reshape(rows, cols)
