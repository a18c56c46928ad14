"""Raw-blob persistence shared by datasets, checkpoints and artifacts.

Two layouts exist. A *blob directory* holds ``manifest.json`` plus one
``<name>.bin`` per array. A *container* is a zip file with the same
members, written with fixed member timestamps so identical content
yields identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

SCHEMA_VERSION = 1
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class FormatError(ValueError):
    """Persisted file is malformed, of an unknown version, or mismatched."""


def _canonical_json(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2) + "\n").encode("utf-8")


def _to_le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(arr))
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def _tensor_table(arrays: Mapping[str, np.ndarray]) -> Dict[str, Dict[str, Any]]:
    return {
        name: {"dtype": _to_le(np.asarray(arr)).dtype.str, "shape": list(np.shape(arr)),
               "file": f"{name}.bin"}
        for name, arr in sorted(arrays.items())
    }


def _decode(table: Mapping[str, Any], read) -> Dict[str, np.ndarray]:
    out = {}
    for name, info in table.items():
        buf = read(info["file"])
        arr = np.frombuffer(buf, dtype=np.dtype(info["dtype"]))
        out[name] = arr.reshape(info["shape"]).copy()
    return out


def payload_digest(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> str:
    """sha256 over canonical metadata and array bytes, independent of layout."""
    h = hashlib.sha256()
    h.update(_canonical_json(dict(meta)))
    for name in sorted(arrays):
        arr = _to_le(np.asarray(arrays[name]))
        h.update(name.encode())
        h.update(str(arr.dtype.str).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def write_container(path: str | Path, kind: str, arrays: Mapping[str, np.ndarray],
                    meta: Mapping[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": kind, "schema_version": SCHEMA_VERSION, "meta": dict(meta),
                "tensors": _tensor_table(arrays)}
    members = [("manifest.json", _canonical_json(manifest))]
    members += [(f"{name}.bin", _to_le(arrays[name]).tobytes()) for name in sorted(arrays)]
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, data in members:
            info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)


def read_container(path: str | Path, kind: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        _check_manifest(manifest, kind, path)
        arrays = _decode(manifest["tensors"], zf.read)
    return arrays, manifest["meta"]


def write_blob_dir(path: str | Path, kind: str, arrays: Mapping[str, np.ndarray],
                   meta: Mapping[str, Any]) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"kind": kind, "schema_version": SCHEMA_VERSION, "meta": dict(meta),
                "tensors": _tensor_table(arrays)}
    for name in sorted(arrays):
        (path / f"{name}.bin").write_bytes(_to_le(arrays[name]).tobytes())
    (path / "manifest.json").write_bytes(_canonical_json(manifest))


def read_blob_dir(path: str | Path, kind: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no manifest.json under {path}")
    manifest = json.loads(mf.read_bytes())
    _check_manifest(manifest, kind, path)
    arrays = _decode(manifest["tensors"], lambda f: (path / f).read_bytes())
    return arrays, manifest["meta"]


def _check_manifest(manifest: Mapping[str, Any], kind: str, path: Path) -> None:
    if manifest.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} file, found {manifest.get('kind')!r}")
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unsupported schema version {manifest.get('schema_version')}")


def to_jsonable(obj: Any) -> Any:
    """Recursively convert numpy scalars/arrays and tuples into JSON types."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
