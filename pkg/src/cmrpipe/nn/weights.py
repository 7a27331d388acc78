"""Weight bundle serialization.

A bundle is a directory holding manifest.json plus one raw binary file per
parameter tensor. Each .bin is the tensor's float32 values, little-endian,
C order, no header. The manifest records the model hyperparameters, the
tensor table (name, shape, file) in parameter order, and a sha256 over the
concatenated payload bytes in table order. Loading recomputes the digest
and refuses tampered or mismatched bundles.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..errors import WeightFormatError
from .models import ModelSpec, build_model

FORMAT_NAME = "cmr-weights"
FORMAT_VERSION = 1


def _tensor_filename(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def save_model(model, bundle_dir) -> Path:
    """Write model parameters to bundle_dir; returns the manifest path."""
    bundle = Path(bundle_dir)
    bundle.mkdir(parents=True, exist_ok=True)
    tensors = []
    digest = hashlib.sha256()
    for name, arr in model.params().items():
        payload = np.asarray(arr, dtype="<f4").tobytes(order="C")
        fname = _tensor_filename(name)
        (bundle / fname).write_bytes(payload)
        digest.update(payload)
        tensors.append({"name": name, "shape": list(arr.shape), "file": fname})
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "model": model.spec.to_dict(),
        "tensors": tensors,
        "sha256": digest.hexdigest(),
    }
    path = bundle / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_model(bundle_dir, expect_architecture: str | None = None):
    """Reconstruct a model from a bundle, verifying the content digest."""
    bundle = Path(bundle_dir)
    manifest_path = bundle / "manifest.json"
    if not manifest_path.is_file():
        raise WeightFormatError(f"no manifest.json in {bundle}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise WeightFormatError(f"manifest is not valid JSON: {e}") from e
    if manifest.get("format") != FORMAT_NAME:
        raise WeightFormatError(f"unrecognized bundle format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported bundle version {manifest.get('version')!r}")
    try:
        spec = ModelSpec.from_dict(manifest["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise WeightFormatError(f"invalid model description: {e}") from e
    if expect_architecture is not None and spec.architecture != expect_architecture:
        raise WeightFormatError(
            f"bundle holds {spec.architecture!r}, expected {expect_architecture!r}")

    model = build_model(spec)
    params = model.params()
    table = manifest.get("tensors", [])
    if [t["name"] for t in table] != list(params):
        raise WeightFormatError("tensor table does not match the declared architecture")
    digest = hashlib.sha256()
    for entry in table:
        fpath = bundle / entry["file"]
        if not fpath.is_file():
            raise WeightFormatError(f"missing tensor file {entry['file']}")
        payload = fpath.read_bytes()
        digest.update(payload)
        shape = tuple(entry["shape"])
        expected = params[entry["name"]].shape
        if shape != expected:
            raise WeightFormatError(
                f"tensor {entry['name']} has shape {shape}, architecture wants {expected}")
        count = int(np.prod(shape)) if shape else 1
        if len(payload) != 4 * count:
            raise WeightFormatError(
                f"tensor {entry['name']}: {len(payload)} bytes, expected {4 * count}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
        params[entry["name"]][...] = arr
    if digest.hexdigest() != manifest.get("sha256"):
        raise WeightFormatError("payload digest mismatch; bundle is corrupt or edited")
    return model
