"""Raw little-endian array blobs described by a JSON manifest entry."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ManifestError, ShapeMismatchError, TruncatedFileError

DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4"}


def write_array(directory: Path, name: str, array: np.ndarray, dtype: str) -> dict:
    """Write ``array`` as ``<name>.bin`` and return its manifest entry."""
    if dtype not in DTYPES:
        raise ValueError(f"unsupported blob dtype {dtype!r}")
    data = np.ascontiguousarray(array, dtype=DTYPES[dtype])
    filename = f"{name}.bin"
    (Path(directory) / filename).write_bytes(data.tobytes(order="C"))
    return {"file": filename, "dtype": dtype, "shape": list(data.shape)}


def read_array(directory: Path, entry: dict) -> np.ndarray:
    try:
        filename = entry["file"]
        dtype = entry["dtype"]
        shape = tuple(int(s) for s in entry["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"malformed array entry {entry!r}") from exc
    if dtype not in DTYPES:
        raise ManifestError(f"unsupported blob dtype {dtype!r} in {filename}")
    if any(s < 0 for s in shape):
        raise ShapeMismatchError(f"negative dimension in shape {shape} for {filename}")
    path = Path(directory) / filename
    if not path.is_file():
        raise ManifestError(f"missing array file {filename}")
    raw = path.read_bytes()
    np_dtype = np.dtype(DTYPES[dtype])
    expected = int(np.prod(shape, dtype=np.int64)) * np_dtype.itemsize
    if len(raw) < expected:
        raise TruncatedFileError(
            f"{filename}: {len(raw)} bytes on disk, manifest shape {shape} needs {expected}"
        )
    if len(raw) > expected:
        raise ShapeMismatchError(
            f"{filename}: {len(raw)} bytes on disk, manifest shape {shape} needs {expected}"
        )
    # native-endian copy; the on-disk bytes are little-endian regardless of host
    return np.frombuffer(raw, dtype=np_dtype).reshape(shape).astype(np_dtype.newbyteorder("="))
