"""On-disk formats: self-describing binary arrays, manifests, TUM trajectories.

Array file layout (all integers little-endian)::

    b"PVOARR1\\n"            magic
    u8   len(dtype)         followed by the numpy dtype string, e.g. "<f8"
    u8   ndim               followed by ndim u64 dimensions
    data                    row-major, little-endian
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import SE3Pose
from .metrics import Trajectory

MAGIC = b"PVOARR1\n"
DTYPES = ("<f8", "<f4", "<i8", "<i4", "|u1", "|b1")


def _dtype_str(dtype: np.dtype) -> str:
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)
    if dt.str not in DTYPES:
        raise FormatError(f"unsupported dtype {dtype}")
    return dt.str


def array_to_bytes(array) -> bytes:
    a = np.asarray(array)
    code = _dtype_str(a.dtype)
    head = MAGIC + struct.pack("<B", len(code)) + code.encode("ascii")
    head += struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype=np.dtype(code)).tobytes(order="C")


def array_from_bytes(data: bytes, what="array") -> np.ndarray:
    if not data.startswith(MAGIC):
        raise FormatError(f"{what}: bad magic")
    try:
        pos = len(MAGIC)
        (n,) = struct.unpack_from("<B", data, pos)
        code = data[pos + 1:pos + 1 + n].decode("ascii")
        pos += 1 + n
        (ndim,) = struct.unpack_from("<B", data, pos)
        shape = struct.unpack_from(f"<{ndim}Q", data, pos + 1)
        pos += 1 + 8 * ndim
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{what}: truncated header") from exc
    if code not in DTYPES:
        raise FormatError(f"{what}: unsupported dtype '{code}'")
    dtype = np.dtype(code)
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - pos != expected:
        raise FormatError(f"{what}: expected {expected} data bytes, found {len(data) - pos}")
    return np.frombuffer(data, dtype=dtype, offset=pos).reshape(shape).copy()


def write_array(path, array) -> None:
    Path(path).write_bytes(array_to_bytes(array))


def read_array(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing array file {path}")
    return array_from_bytes(path.read_bytes(), str(path))


def write_manifest(path, entries: dict) -> None:
    """``key = value`` lines in insertion order."""
    lines = []
    for key, value in entries.items():
        if "=" in key or "\n" in str(value):
            raise FormatError(f"manifest entry {key!r} cannot be written")
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing manifest {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: line {n}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def c2w_to_tum(timestamps, c2w_poses) -> str:
    """One ``timestamp tx ty tz qx qy qz qw`` line per camera-to-world pose."""
    lines = []
    for t, pose in zip(timestamps, c2w_poses):
        w, x, y, z = pose.rotation
        vals = (t, *pose.translation, x, y, z, w)
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def trajectory_to_tum(traj: Trajectory) -> str:
    return c2w_to_tum(traj.timestamps, [p.inverse() for p in traj.poses])


def parse_tum(text: str, what="trajectory") -> tuple[np.ndarray, list]:
    """Timestamps and camera-to-world poses, exactly as written."""
    stamps, poses = [], []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise FormatError(f"{what}: line {n}: expected 8 fields, found {len(parts)}")
        try:
            t, tx, ty, tz, qx, qy, qz, qw = map(float, parts)
        except ValueError as exc:
            raise FormatError(f"{what}: line {n}: {exc}") from exc
        q = np.array([qw, qx, qy, qz])
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise FormatError(f"{what}: line {n}: quaternion is not unit length")
        stamps.append(t)
        poses.append(SE3Pose(q, np.array([tx, ty, tz])))
    return np.array(stamps), poses


def write_tum(path, traj: Trajectory) -> None:
    Path(path).write_text(trajectory_to_tum(traj))


def read_tum(path) -> Trajectory:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing trajectory {path}")
    stamps, c2w = parse_tum(path.read_text(), str(path))
    return Trajectory(stamps, [p.inverse() for p in c2w])


def directory_digest(root) -> str:
    """SHA-256 over relative paths and contents of every file, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    files = sorted(p for p in root.rglob("*") if p.is_file())
    for p in files:
        rel = p.relative_to(root).as_posix().encode("utf-8")
        data = p.read_bytes()
        h.update(struct.pack("<Q", len(rel)) + rel + struct.pack("<Q", len(data)))
        h.update(data)
    return h.hexdigest()


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
