"""Part-10 file writer/reader round trips and malformed-input rejection."""

import struct

import numpy as np
import pytest

from cmrpipe.dicom_io import (
    EXPLICIT_VR_LE,
    IMPLICIT_VR_LE,
    encode_element,
    pixel_array,
    read_dicom,
    write_dicom,
)
from cmrpipe.errors import IngestError


def _sample_elements(rows=4, cols=6, seed=0):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 4096, size=(rows, cols), dtype=np.uint16)
    return {
        (0x0008, 0x0016): ("UI", "1.2.840.10008.5.1.4.1.1.4"),
        (0x0008, 0x0018): ("UI", "2.25.1234"),
        (0x0008, 0x0060): ("CS", "MR"),
        (0x0008, 0x103E): ("LO", "cine SAX stack"),
        (0x0018, 0x0088): ("DS", 8.0),
        (0x0018, 0x1060): ("DS", 120.0),
        (0x0020, 0x000D): ("UI", "2.25.9"),
        (0x0020, 0x000E): ("UI", "2.25.10"),
        (0x0020, 0x0011): ("IS", 3),
        (0x0020, 0x0013): ("IS", 17),
        (0x0020, 0x0032): ("DS", [-120.0, -110.5, 10.0]),
        (0x0020, 0x0037): ("DS", [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        (0x0028, 0x0002): ("US", 1),
        (0x0028, 0x0010): ("US", rows),
        (0x0028, 0x0011): ("US", cols),
        (0x0028, 0x0030): ("DS", [1.5, 1.5]),
        (0x0028, 0x0100): ("US", 16),
        (0x0028, 0x0101): ("US", 12),
        (0x0028, 0x0103): ("US", 0),
        (0x7FE0, 0x0010): ("OW", pixels.astype("<u2").tobytes()),
    }, pixels


def test_write_read_round_trip(tmp_path):
    elements, pixels = _sample_elements()
    path = tmp_path / "img.dcm"
    write_dicom(path, elements)
    got = read_dicom(path)
    assert got[(0x0008, 0x0018)] == "2.25.1234"
    assert got[(0x0008, 0x0060)] == "MR"
    assert got[(0x0008, 0x103E)] == "cine SAX stack"
    assert got[(0x0018, 0x0088)] == [8.0]
    assert got[(0x0018, 0x1060)] == [120.0]
    assert got[(0x0020, 0x0011)] == [3]
    assert got[(0x0020, 0x0013)] == [17]
    assert got[(0x0020, 0x0032)] == [-120.0, -110.5, 10.0]
    assert got[(0x0020, 0x0037)] == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
    assert got[(0x0028, 0x0030)] == [1.5, 1.5]
    assert got[(0x0028, 0x0010)] == 4 and got[(0x0028, 0x0011)] == 6
    arr = pixel_array(got)
    assert arr.dtype == np.dtype("<u2")
    assert np.array_equal(arr, pixels)


def test_ds_precision_survives_round_trip(tmp_path):
    elements, _ = _sample_elements()
    # spacing values that don't terminate in binary
    elements[(0x0028, 0x0030)] = ("DS", [1.3671875, 0.702148])
    elements[(0x0020, 0x0032)] = ("DS", [-119.3359375, 33.25, 7.125])
    path = tmp_path / "img.dcm"
    write_dicom(path, elements)
    got = read_dicom(path)
    assert got[(0x0028, 0x0030)] == [1.3671875, 0.702148]
    assert got[(0x0020, 0x0032)] == [-119.3359375, 33.25, 7.125]


def test_preamble_and_meta_layout(tmp_path):
    elements, _ = _sample_elements()
    path = tmp_path / "img.dcm"
    write_dicom(path, elements)
    data = path.read_bytes()
    assert data[:128] == b"\x00" * 128
    assert data[128:132] == b"DICM"
    # first element after the magic is the file meta group length
    group, elem = struct.unpack("<HH", data[132:136])
    assert (group, elem) == (0x0002, 0x0000)


def test_implicit_vr_read():
    """Hand-build an implicit-VR body and confirm tag-table decoding."""
    body = b""
    for group, elem, raw in [
        (0x0008, 0x0060, b"MR"),
        (0x0028, 0x0010, struct.pack("<H", 2)),
        (0x0028, 0x0011, struct.pack("<H", 2)),
        (0x0028, 0x0030, b"1.5\\1.5 "),
        (0x7FE0, 0x0010, struct.pack("<4H", 1, 2, 3, 4)),
    ]:
        body += struct.pack("<HH", group, elem) + struct.pack("<I", len(raw)) + raw
    meta = (encode_element(0x0002, 0x0002, "UI", "1.2.840.10008.5.1.4.1.1.4")
            + encode_element(0x0002, 0x0010, "UI", IMPLICIT_VR_LE))
    blob = (b"\x00" * 128 + b"DICM"
            + encode_element(0x0002, 0x0000, "UL", len(meta)) + meta + body)
    import tempfile
    with tempfile.NamedTemporaryFile(suffix=".dcm", delete=False) as f:
        f.write(blob)
        name = f.name
    got = read_dicom(name)
    assert got[(0x0008, 0x0060)] == "MR"
    assert got[(0x0028, 0x0030)] == [1.5, 1.5]
    assert np.array_equal(pixel_array(got), [[1, 2], [3, 4]])


def test_undefined_length_sequence_is_skipped(tmp_path):
    elements, _ = _sample_elements()
    path = tmp_path / "img.dcm"
    write_dicom(path, elements)
    data = bytearray(path.read_bytes())
    # append an undefined-length SQ with one defined-length empty item
    sq = struct.pack("<HH", 0x0018, 0x9006) + b"SQ\x00\x00" + struct.pack("<I", 0xFFFFFFFF)
    sq += struct.pack("<HHI", 0xFFFE, 0xE000, 0)
    sq += struct.pack("<HHI", 0xFFFE, 0xE0DD, 0)
    trailer = encode_element(0x0020, 0x4000, "LT", "after sequence")
    (tmp_path / "seq.dcm").write_bytes(bytes(data) + sq + trailer)
    got = read_dicom(tmp_path / "seq.dcm")
    assert (0x0018, 0x9006) not in got
    assert got[(0x0020, 0x4000)] == "after sequence"
    assert np.array_equal(pixel_array(got), pixel_array(read_dicom(path)))


def test_rejects_non_dicom(tmp_path):
    path = tmp_path / "junk.dcm"
    path.write_bytes(b"PNG-ish junk that is definitely not a part-10 file")
    with pytest.raises(IngestError, match="not a DICOM"):
        read_dicom(path)
    path.write_bytes(b"\x00" * 128 + b"DICM")  # magic but no meta
    with pytest.raises(IngestError):
        read_dicom(path)


def test_rejects_unsupported_transfer_syntax(tmp_path):
    meta = (encode_element(0x0002, 0x0002, "UI", "1.2.840.10008.5.1.4.1.1.4")
            + encode_element(0x0002, 0x0010, "UI", "1.2.840.10008.1.2.4.70"))
    blob = (b"\x00" * 128 + b"DICM"
            + encode_element(0x0002, 0x0000, "UL", len(meta)) + meta)
    path = tmp_path / "jpeg.dcm"
    path.write_bytes(blob)
    with pytest.raises(IngestError, match="transfer syntax"):
        read_dicom(path)


def test_rejects_truncated_stream(tmp_path):
    elements, _ = _sample_elements()
    path = tmp_path / "img.dcm"
    write_dicom(path, elements)
    data = path.read_bytes()
    (tmp_path / "cut.dcm").write_bytes(data[:-7])
    with pytest.raises(IngestError):
        read_dicom(tmp_path / "cut.dcm")


def test_write_requires_sop_uid(tmp_path):
    elements, _ = _sample_elements()
    del elements[(0x0008, 0x0018)]
    with pytest.raises(IngestError, match="SOPInstanceUID"):
        write_dicom(tmp_path / "x.dcm", elements)


def test_pixel_array_contracts():
    with pytest.raises(IngestError, match="Rows/Columns/PixelData"):
        pixel_array({(0x0028, 0x0010): 2})
    elems = {(0x0028, 0x0010): 2, (0x0028, 0x0011): 2,
             (0x0028, 0x0100): 16, (0x0028, 0x0103): 0,
             (0x7FE0, 0x0010): b"\x01\x00"}
    with pytest.raises(IngestError, match="shorter"):
        pixel_array(elems)
    elems[(0x7FE0, 0x0010)] = struct.pack("<4h", -1, -2, 3, 4)
    elems[(0x0028, 0x0103)] = 1
    arr = pixel_array(elems)
    assert arr.dtype == np.dtype("<i2")
    assert arr[0, 0] == -1
    elems[(0x0028, 0x0100)] = 32
    with pytest.raises(IngestError, match="BitsAllocated"):
        pixel_array(elems)


def test_odd_length_values_are_padded(tmp_path):
    elements, _ = _sample_elements()
    elements[(0x0010, 0x0010)] = ("PN", "DOE")      # 3 chars -> padded
    elements[(0x0008, 0x0018)] = ("UI", "2.25.123")  # 8 chars, even
    elements[(0x0020, 0x000D)] = ("UI", "2.25.12345")
    path = tmp_path / "img.dcm"
    write_dicom(path, elements)
    got = read_dicom(path)
    assert got[(0x0010, 0x0010)] == "DOE"
    assert got[(0x0020, 0x000D)] == "2.25.12345"
