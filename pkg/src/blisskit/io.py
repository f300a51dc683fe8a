"""Mesh, cloud and binary-array file I/O.

Meshes travel as OBJ (v/f records, 1-based indices), clouds as ascii PLY or
XYZ. Coordinates are printed with 9 significant digits so a save/load round
trip stays within 1e-6 m. Binary matrices (skinning weights, shape spaces,
model checkpoints) use small magic-tagged headers described per function.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import MeshError, ScanCloud, TriMesh


class ParseError(ValueError):
    """File-format violation; message carries the path and 1-based line."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


def save_mesh(mesh: TriMesh, path) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
        if mesh.normals is not None:
            for x, y, z in mesh.normals:
                fh.write(f"vn {x:.9g} {y:.9g} {z:.9g}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def load_mesh(path) -> TriMesh:
    path = Path(path)
    verts: list[list[float]] = []
    normals: list[list[float]] = []
    faces: list[list[int]] = []
    with path.open() as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) < 3:
                    raise ParseError(path, line_no, "vertex needs 3 coordinates")
                try:
                    verts.append([float(t) for t in rest[:3]])
                except ValueError:
                    raise ParseError(path, line_no, f"bad vertex coordinate in {line!r}")
            elif tag == "vn":
                try:
                    normals.append([float(t) for t in rest[:3]])
                except ValueError:
                    raise ParseError(path, line_no, f"bad normal in {line!r}")
            elif tag == "f":
                if len(rest) != 3:
                    raise ParseError(path, line_no, "only triangle faces are supported")
                idx = []
                for tok in rest:
                    head = tok.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError:
                        raise ParseError(path, line_no, f"bad face index {tok!r}")
                    if i < 1 or i > len(verts):
                        raise ParseError(
                            path, line_no, f"face index {i} out of range [1, {len(verts)}]"
                        )
                    idx.append(i - 1)
                faces.append(idx)
            # other records (vt, o, g, s, usemtl, ...) are ignored
    if not verts or not faces:
        raise ParseError(path, 1, "no vertices or faces found")
    nrm = np.array(normals) if len(normals) == len(verts) else None
    try:
        return TriMesh(np.array(verts), np.array(faces), normals=nrm)
    except MeshError as exc:
        raise ParseError(path, 1, f"invalid mesh: {exc}")


def save_cloud(cloud: ScanCloud, path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".xyz":
        cols = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
        with path.open("w") as fh:
            for row in cols:
                fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")
        return
    with path.open("w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"comment provenance {cloud.provenance}\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if cloud.normals is not None:
            fh.write("property float nx\nproperty float ny\nproperty float nz\n")
        fh.write("end_header\n")
        cols = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
        for row in cols:
            fh.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def load_cloud(path) -> ScanCloud:
    path = Path(path)
    if path.suffix.lower() == ".xyz":
        return _load_xyz(path)
    return _load_ply(path)


def _load_xyz(path: Path) -> ScanCloud:
    rows = []
    width = None
    with path.open() as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            toks = line.split()
            if len(toks) not in (3, 6):
                raise ParseError(path, line_no, f"expected 3 or 6 columns, got {len(toks)}")
            if width is None:
                width = len(toks)
            elif len(toks) != width:
                raise ParseError(path, line_no, f"inconsistent column count {len(toks)} != {width}")
            try:
                rows.append([float(t) for t in toks])
            except ValueError:
                raise ParseError(path, line_no, f"bad number in {line!r}")
    if not rows:
        raise ParseError(path, 1, "empty cloud file")
    arr = np.array(rows)
    normals = arr[:, 3:6] if arr.shape[1] == 6 else None
    return ScanCloud(arr[:, :3], normals=normals)


def _load_ply(path: Path) -> ScanCloud:
    with path.open() as fh:
        lines = fh.readlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(path, 1, "not an ascii PLY file (missing 'ply')")
    n_points = None
    props: list[str] = []
    provenance = "imported"
    body_start = None
    for line_no, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if line.startswith("format"):
            if "ascii" not in line:
                raise ParseError(path, line_no, "only ascii PLY is supported")
        elif line.startswith("comment provenance"):
            provenance = line.split()[-1]
        elif line.startswith("element vertex"):
            try:
                n_points = int(line.split()[-1])
            except ValueError:
                raise ParseError(path, line_no, f"bad vertex count in {line!r}")
        elif line.startswith("element"):
            raise ParseError(path, line_no, "only 'element vertex' is supported")
        elif line.startswith("property"):
            props.append(line.split()[-1])
        elif line == "end_header":
            body_start = line_no
            break
    if n_points is None or body_start is None:
        raise ParseError(path, 1, "incomplete PLY header")
    want = ["x", "y", "z"]
    has_normals = props[:6] == ["x", "y", "z", "nx", "ny", "nz"]
    if props[:3] != want:
        raise ParseError(path, 1, f"first properties must be x y z, got {props[:3]}")
    ncol = 6 if has_normals else 3
    rows = []
    for line_no, raw in enumerate(lines[body_start:], start=body_start + 1):
        line = raw.strip()
        if not line:
            continue
        toks = line.split()
        if len(toks) < ncol:
            raise ParseError(path, line_no, f"expected {ncol} values, got {len(toks)}")
        try:
            rows.append([float(t) for t in toks[:ncol]])
        except ValueError:
            raise ParseError(path, line_no, f"bad number in {line!r}")
        if len(rows) == n_points:
            break
    if len(rows) != n_points:
        raise ParseError(path, len(lines), f"expected {n_points} points, found {len(rows)}")
    arr = np.array(rows)
    normals = arr[:, 3:6] if has_normals else None
    return ScanCloud(arr[:, :3], normals=normals, provenance=provenance)


# --- binary matrix container -------------------------------------------------
#
# <magic:4s> <rows:u4> <cols:u4> <reserved:u4> header (16 bytes, little endian)
# followed by rows*cols float64 values, row major.

def save_matrix(path, magic: bytes, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected 2-D array, got shape {arr.shape}")
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<4sIII", magic, arr.shape[0], arr.shape[1], 0))
        fh.write(arr.tobytes())


def load_matrix(path, magic: bytes) -> np.ndarray:
    path = Path(path)
    with path.open("rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ParseError(path, 1, "truncated header")
        tag, rows, cols, _ = struct.unpack("<4sIII", header)
        if tag != magic:
            raise ParseError(path, 1, f"bad magic {tag!r}, expected {magic!r}")
        data = np.frombuffer(fh.read(rows * cols * 8), dtype=np.float64)
    if data.size != rows * cols:
        raise ParseError(path, 1, f"truncated payload: {data.size} of {rows * cols} values")
    return data.reshape(rows, cols).copy()


# --- tagged array bundles (model checkpoints, family modes) ------------------
#
# <magic:4s> <count:u4>, then per array: <ndim:u4> <dims:u4 * ndim> <float64 data>.

def save_arrays(path, magic: bytes, arrays: dict[str, np.ndarray]) -> None:
    with Path(path).open("wb") as fh:
        fh.write(struct.pack("<4sI", magic, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            name_b = name.encode()
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_arrays(path, magic: bytes) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with path.open("rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ParseError(path, 1, "truncated header")
        tag, count = struct.unpack("<4sI", head)
        if tag != magic:
            raise ParseError(path, 1, f"bad magic {tag!r}, expected {magic!r}")
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode()
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_val = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(fh.read(8 * n_val), dtype=np.float64)
            if data.size != n_val:
                raise ParseError(path, 1, f"truncated array {name!r}")
            out[name] = data.reshape(shape).copy()
    return out
