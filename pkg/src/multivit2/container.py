"""On-disk container: JSON sidecar header + raw little-endian float32 payload.

Used for volumes, FNC matrices, saliency maps and model checkpoints. The
header is the file users point at (``*.json``); the payload lives next to it
under the name recorded in ``header["payload"]``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError, MissingArtifactError

FORMAT = "multivit2-array"
CHECKPOINT_FORMAT = "multivit2-checkpoint"
_DTYPE = np.dtype("<f4")


def dump_json(obj: Any, path: Path) -> None:
    # sorted keys + fixed separators keep reruns byte-identical
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def canonical_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _payload_path(header_path: Path) -> Path:
    return header_path.with_suffix(".raw")


def write_array(array: np.ndarray, path: str | Path, kind: str, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype=_DTYPE)
    payload = _payload_path(path)
    payload.write_bytes(data.tobytes())
    header = {
        "format": FORMAT,
        "kind": kind,
        "dims": list(data.shape),
        "dtype": "float32",
        "endianness": "little",
        "payload": payload.name,
    }
    if meta:
        header.update(meta)
    dump_json(header, path)
    return path


def read_array(path: str | Path, kind: str | None = None) -> tuple[np.ndarray, dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    try:
        header = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: header is not valid JSON ({exc})") from exc
    if header.get("format") != FORMAT:
        raise DataError(f"{path}: not a {FORMAT} header")
    if kind is not None and header.get("kind") != kind:
        raise DataError(f"{path}: expected kind {kind!r}, found {header.get('kind')!r}")
    if header.get("dtype") != "float32" or header.get("endianness") != "little":
        raise DataError(f"{path}: unsupported element type {header.get('dtype')}/{header.get('endianness')}")
    dims = tuple(int(d) for d in header["dims"])
    payload = path.parent / header["payload"]
    if not payload.is_file():
        raise DataError(f"{path}: payload {payload.name} missing")
    raw = payload.read_bytes()
    expected = int(np.prod(dims)) * _DTYPE.itemsize
    if len(raw) < expected:
        raise DataError(f"{path}: truncated payload ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise DataError(f"{path}: payload longer than declared dims ({len(raw)} > {expected} bytes)")
    array = np.frombuffer(raw, dtype=_DTYPE).reshape(dims).astype(np.float32)
    return array, header


def save_checkpoint(path: str | Path, kind: str, descriptor: dict, tensors: dict[str, Any],
                    extra: dict | None = None) -> Path:
    """Write named tensors as one flat float32 payload with a sha256 checksum."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(_as_numpy(value), dtype=_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    payload = _payload_path(path)
    payload.write_bytes(blob)
    header = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "descriptor": descriptor,
        "tensors": entries,
        "payload": payload.name,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        header["extra"] = extra
    dump_json(header, path)
    return path


def load_checkpoint(path: str | Path, kind: str | None = None, stage: str | None = None):
    """Return ``(descriptor, tensors, header)``; verifies the checksum."""
    path = Path(path)
    if not path.is_file():
        if stage is not None:
            raise MissingArtifactError(stage, path)
        raise DataError(f"no such checkpoint: {path}")
    header = json.loads(path.read_text(encoding="utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint")
    if kind is not None and header["kind"] != kind:
        raise DataError(f"{path}: expected checkpoint kind {kind!r}, found {header['kind']!r}")
    blob = (path.parent / header["payload"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise DataError(f"{path}: checksum mismatch, payload corrupted")
    flat = np.frombuffer(blob, dtype=_DTYPE)
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        tensors[entry["name"]] = flat[entry["offset"]:entry["offset"] + n].reshape(shape).copy()
    return header["descriptor"], tensors, header


def _as_numpy(value) -> np.ndarray:
    if hasattr(value, "detach"):
        return value.detach().cpu().numpy()
    return np.asarray(value)
