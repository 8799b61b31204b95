"""File formats: binary PLY point clouds, PFM float images with PNG masks, camera files.

All binary formats are little-endian. Sparse float images are persisted as PFM
with a companion 1-bit PNG mask at ``<stem>.mask.png``.
"""

from __future__ import annotations

import configparser
import io as _io
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import RigidTransform

_PLY_TYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "ushort": "<u2",
    "uint16": "<u2",
    "uint": "<u4",
    "uint32": "<u4",
    "int": "<i4",
    "int32": "<i4",
    "short": "<i2",
    "int16": "<i2",
    "char": "i1",
    "int8": "i1",
}
_PLY_NAMES = {
    "<f4": "float",
    "<f8": "double",
    "u1": "uchar",
    "<u2": "ushort",
    "<u4": "uint",
    "<i4": "int",
    "<i2": "short",
    "i1": "char",
}

SWEEP_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("intensity", "<f4"),
        ("ring", "<u2"),
        ("azimuth_index", "<u4"),
        ("timestamp", "<f8"),
    ]
)

LABELED_DTYPE = np.dtype(
    SWEEP_DTYPE.descr
    + [("label", "u1"), ("smoothness", "<f4"), ("refl_grad", "<f4")]
)


class PlyError(ValueError):
    pass


def write_ply(path: str | Path, vertices: np.ndarray) -> None:
    """Write a structured array as binary_little_endian vertex-only PLY."""
    vertices = np.ascontiguousarray(vertices)
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(vertices)}"]
    for name in vertices.dtype.names:
        dt = vertices.dtype[name].str.lstrip("=|")
        if dt.startswith(">"):
            raise PlyError("big-endian arrays are not supported")
        key = dt if dt in _PLY_NAMES else "<" + dt.lstrip("<")
        if key not in _PLY_NAMES:
            raise PlyError(f"unsupported dtype {dt} for property {name}")
        lines.append(f"property {_PLY_NAMES[key]} {name}")
    lines.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(vertices.tobytes())


def read_ply(path: str | Path) -> np.ndarray:
    """Read a binary_little_endian vertex-only PLY into a structured array."""
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise PlyError(f"{path}: no end_header")
    header = data[:end].decode("ascii").splitlines()
    body = data[end + len(b"end_header\n") :]
    if not header or header[0].strip() != "ply":
        raise PlyError(f"{path}: not a PLY file")
    fmt = None
    count = None
    fields: list[tuple[str, str]] = []
    in_vertex = False
    for line in header[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise PlyError(f"{path}: list properties are not supported")
            if parts[1] not in _PLY_TYPES:
                raise PlyError(f"{path}: unknown property type {parts[1]}")
            fields.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise PlyError(f"{path}: expected binary_little_endian, got {fmt}")
    if count is None:
        raise PlyError(f"{path}: no vertex element")
    dtype = np.dtype(fields)
    need = count * dtype.itemsize
    if len(body) < need:
        raise PlyError(f"{path}: truncated body ({len(body)} < {need} bytes)")
    return np.frombuffer(body[:need], dtype=dtype).copy()


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """Single-channel PFM, float32, little-endian (negative scale)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ValueError("write_pfm expects a 2D array")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        # PFM stores rows bottom-to-top
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ValueError(f"{path}: expected grayscale PFM (Pf), got {magic!r}")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(w * h * 4), dtype="<f4" if scale < 0 else ">f4")
    return data.reshape(h, w)[::-1].astype(np.float32)


def mask_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".mask.png")


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)


def read_mask(path: str | Path) -> np.ndarray:
    return np.array(Image.open(path).convert("1"), dtype=bool)


def write_image_png(path: str | Path, rgb: np.ndarray) -> None:
    """RGB floats in [0,1] -> 8-bit sRGB PNG."""
    arr = np.clip(np.asarray(rgb), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def read_image_png(path: str | Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def write_camera_file(path: str | Path, fx, fy, cx, cy, extrinsics, width, height) -> None:
    """Structured-text camera model: [intrinsics], [extrinsics] (row-major 3x4), [size]."""
    ext = np.asarray(extrinsics, dtype=np.float64)
    if ext.shape == (4, 4):
        ext = ext[:3]
    if ext.shape != (3, 4):
        raise ValueError(f"extrinsics must be 3x4, got {ext.shape}")
    cfg = configparser.ConfigParser()
    cfg["intrinsics"] = {"fx": repr(float(fx)), "fy": repr(float(fy)),
                         "cx": repr(float(cx)), "cy": repr(float(cy))}
    cfg["extrinsics"] = {"matrix": " ".join(repr(float(v)) for v in ext.ravel())}
    cfg["size"] = {"width": str(int(width)), "height": str(int(height))}
    with open(path, "w") as f:
        cfg.write(f)


def read_camera_file(path: str | Path):
    """Returns (K 3x3, RigidTransform, width, height)."""
    cfg = configparser.ConfigParser()
    if not cfg.read(path):
        raise FileNotFoundError(path)
    intr = cfg["intrinsics"]
    fx, fy = float(intr["fx"]), float(intr["fy"])
    cx, cy = float(intr["cx"]), float(intr["cy"])
    vals = [float(v) for v in cfg["extrinsics"]["matrix"].split()]
    if len(vals) != 12:
        raise ValueError(f"{path}: extrinsics matrix must have 12 entries, got {len(vals)}")
    ext = np.array(vals, dtype=np.float64).reshape(3, 4)
    k = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    size = cfg["size"]
    return k, RigidTransform(ext), int(size["width"]), int(size["height"])


def write_matrix_txt(path: str | Path, matrix: np.ndarray) -> None:
    np.savetxt(path, np.asarray(matrix, dtype=np.float64), fmt="%.17g")


def read_matrix_txt(path: str | Path) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64)
