"""CVOL file format: JSON header plus raw little-endian complex64 payload.

Header fields: dims [X,Y,Z,N], spacing_mm [sx,sy,sz], dtype "c64",
order "x-fastest", optional schedule (1-based per-volume encoding labels).
The payload is float32 (real, imag) pairs with x fastest and volume slowest,
stored in a sibling file whose name replaces ".json" with ".bin".
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import FormatError
from .volumes import ComplexVolumeSet

_DTYPE = "c64"
_ORDER = "x-fastest"


def _bin_path(header_path):
    header_path = os.fspath(header_path)
    if not header_path.endswith(".json"):
        raise FormatError("CVOL header path must end with .json")
    return header_path[:-5] + ".bin"


def atomic_write_bytes(path, payload):
    """Write payload to path via a temp file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode())


def write_cvol(header_path, vols):
    """Write a ComplexVolumeSet as a CVOL header/payload pair (atomically)."""
    bin_path = _bin_path(header_path)
    x_dim, y_dim, z_dim = vols.dims
    header = {
        "dims": [x_dim, y_dim, z_dim, vols.n_volumes],
        "spacing_mm": list(vols.spacing),
        "dtype": _DTYPE,
        "order": _ORDER,
    }
    if vols.schedule is not None:
        header["schedule"] = list(vols.schedule)
    payload = np.ascontiguousarray(
        vols.data.transpose(3, 2, 1, 0)
    ).astype("<c8").tobytes()
    atomic_write_bytes(bin_path, payload)
    atomic_write_json(header_path, header)


def read_cvol(header_path):
    """Read a CVOL pair back into a ComplexVolumeSet."""
    with open(header_path, "rb") as fh:
        try:
            header = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed CVOL header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError("malformed CVOL header: not a JSON object")
    for key in ("dims", "spacing_mm", "dtype", "order"):
        if key not in header:
            raise FormatError(f"malformed CVOL header: missing {key!r}")
    if header["dtype"] != _DTYPE:
        raise FormatError(f"unsupported CVOL dtype {header['dtype']!r}")
    if header["order"] != _ORDER:
        raise FormatError(f"unsupported CVOL order {header['order']!r}")
    dims = header["dims"]
    if (not isinstance(dims, list) or len(dims) != 4
            or any(not isinstance(d, int) or d < 1 for d in dims)):
        raise FormatError("malformed CVOL header: dims must be four positive ints")
    x_dim, y_dim, z_dim, n = dims
    raw = np.fromfile(_bin_path(header_path), dtype="<c8")
    expected = x_dim * y_dim * z_dim * n
    if raw.size != expected:
        raise FormatError(
            f"CVOL payload holds {raw.size} samples, header promises {expected}")
    data = raw.reshape(n, z_dim, y_dim, x_dim).transpose(3, 2, 1, 0)
    schedule = header.get("schedule")
    if schedule is not None:
        if (not isinstance(schedule, list)
                or any(not isinstance(a, int) for a in schedule)):
            raise FormatError("malformed CVOL header: schedule must be a list of ints")
        schedule = tuple(schedule)
    return ComplexVolumeSet(data.astype(np.complex128),
                            tuple(header["spacing_mm"]), schedule)


def write_map_cvol(header_path, values, spacing):
    """Write a real (X,Y,Z) map as a single-volume CVOL (imag = 0)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ValueError("map must have shape (X, Y, Z)")
    write_cvol(header_path,
               ComplexVolumeSet(values[..., None].astype(np.complex128), spacing))
