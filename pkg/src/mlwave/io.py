"""File formats: OBJ grids, binary PLY point clouds, landmark and mask files, manifests.

OBJ grid files start with a ``# mlwave-grid rows=R cols=C levels=L`` comment;
vertices follow in row-major order (vertex ``r * cols + c``) and faces are the
grid quads. PLY scans are ``binary_little_endian`` with ``x y z nx ny nz``
vertex properties.
"""
from __future__ import annotations

import re
import sys
from pathlib import Path

import numpy as np

from .errors import IoFailure
from .mesh import LandmarkSet, QuadGridShape, TargetScan

GRID_HEADER = re.compile(r"#\s*mlwave-grid\s+rows=(\d+)\s+cols=(\d+)(?:\s+levels=(\d+))?")

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_text(path) -> str:
    try:
        return Path(path).read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write(path, data) -> None:
    try:
        if isinstance(data, bytes):
            Path(path).write_bytes(data)
        else:
            Path(path).write_text(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _rows(path, text: str):
    """Non-empty, non-comment lines split on whitespace, with 1-based line numbers."""
    for no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            yield no, line.split()


# OBJ grids

def format_obj(shape: QuadGridShape) -> str:
    g = shape.geometry
    out = [
        f"# mlwave-grid rows={g.rows} cols={g.cols} levels={g.levels}",
        "# vertices are row-major: vertex r*cols+c is grid node (r, c); faces are the grid quads",
    ]
    out += [f"v {x!r} {y!r} {z!r}" for x, y, z in shape.vertices.tolist()]
    idx = np.arange(g.n_vertices).reshape(g.rows, g.cols) + 1
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    out += [f"f {p} {q} {r} {s}" for p, q, r, s in zip(a, d, c, b)]
    return "\n".join(out) + "\n"


def write_obj(shape: QuadGridShape, path) -> None:
    _write(path, format_obj(shape))


def parse_obj(text: str, source: str = "<obj>") -> QuadGridShape:
    header = None
    verts = []
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("#"):
            m = GRID_HEADER.match(s)
            if m and header is None:
                header = m
            continue
        if s.startswith("v "):
            parts = s.split()
            try:
                verts.append([float(v) for v in parts[1:4]])
            except ValueError as exc:
                raise IoFailure(f"{source}:{no}: bad vertex line") from exc
            if len(parts) < 4:
                raise IoFailure(f"{source}:{no}: vertex needs 3 coordinates")
    if header is None:
        raise IoFailure(f"{source}: missing '# mlwave-grid rows=R cols=C' header")
    rows, cols = int(header.group(1)), int(header.group(2))
    levels = int(header.group(3)) if header.group(3) else None
    if len(verts) != rows * cols:
        raise IoFailure(f"{source}: header promises {rows}x{cols} vertices, found {len(verts)}")
    return QuadGridShape(np.array(verts, dtype=float).reshape(rows, cols, 3), levels)


def read_obj(path) -> QuadGridShape:
    return parse_obj(read_text(path), str(path))


# PLY point clouds

def format_ply(points, normals) -> bytes:
    points = np.asarray(points, dtype="<f8").reshape(-1, 3)
    normals = np.asarray(normals, dtype="<f8").reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\ncomment mlwave oriented point cloud\n"
        f"element vertex {len(points)}\n"
        + "".join(f"property double {p}\n" for p in ("x", "y", "z", "nx", "ny", "nz"))
        + "end_header\n"
    )
    body = np.ascontiguousarray(np.hstack([points, normals]), dtype="<f8").tobytes()
    return header.encode("ascii") + body


def write_ply(scan: TargetScan, path) -> None:
    _write(path, format_ply(scan.points, scan.normals))


def parse_ply(data: bytes, source: str = "<ply>") -> tuple[np.ndarray, np.ndarray]:
    """``(points, normals)`` from a binary little-endian PLY."""
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise IoFailure(f"{source}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[tuple[str, int, list]] = []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "element" and len(parts) == 3:
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property" and elements:
            elements[-1][2].append(parts[1:])
        else:
            raise IoFailure(f"{source}: unexpected header line {line!r}")
    if fmt != "binary_little_endian":
        raise IoFailure(f"{source}: only binary_little_endian PLY is supported, got {fmt}")
    if not elements or elements[0][0] != "vertex":
        raise IoFailure(f"{source}: the first element must be 'vertex'")
    _, count, props = elements[0]
    fields = []
    for p in props:
        if p[0] == "list" or len(p) != 2 or p[0] not in _PLY_TYPES:
            raise IoFailure(f"{source}: unsupported vertex property {' '.join(p)}")
        fields.append((p[1], "<" + _PLY_TYPES[p[0]]))
    names = [f[0] for f in fields]
    missing = [n for n in ("x", "y", "z", "nx", "ny", "nz") if n not in names]
    if missing:
        raise IoFailure(f"{source}: vertex element lacks properties {missing}")
    dtype = np.dtype(fields)
    need = count * dtype.itemsize
    if len(data) - body_start < need:
        raise IoFailure(f"{source}: truncated vertex data")
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=body_start)
    pts = np.column_stack([rec[n] for n in ("x", "y", "z")]).astype(float)
    nrm = np.column_stack([rec[n] for n in ("nx", "ny", "nz")]).astype(float)
    return pts, nrm


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return parse_ply(data, str(path))


def read_scan(path, landmarks_path=None) -> TargetScan:
    """Scan from a PLY whose normals are renormalized, plus optional landmarks."""
    pts, nrm = read_ply(path)
    length = np.linalg.norm(nrm, axis=1)
    if np.any(length == 0) or not np.all(np.isfinite(length)):
        raise IoFailure(f"{path}: scan has zero or non-finite normals")
    lm = read_landmarks(landmarks_path) if landmarks_path is not None else None
    return TargetScan(pts, nrm / length[:, None], lm)


# landmark, mask and index files

def format_landmarks(lm: LandmarkSet) -> str:
    lines = ["# model_index x y z"]
    lines += [f"{i} {x!r} {y!r} {z!r}" for i, (x, y, z) in zip(lm.model_indices.tolist(), lm.data_points.tolist())]
    return "\n".join(lines) + "\n"


def write_landmarks(lm: LandmarkSet, path) -> None:
    _write(path, format_landmarks(lm))


def read_landmarks(path) -> LandmarkSet:
    idx, pts = [], []
    for no, parts in _rows(path, read_text(path)):
        if len(parts) != 4:
            raise IoFailure(f"{path}:{no}: expected 'model_index x y z'")
        try:
            idx.append(int(parts[0]))
            pts.append([float(v) for v in parts[1:]])
        except ValueError as exc:
            raise IoFailure(f"{path}:{no}: {exc}") from exc
    return LandmarkSet(np.array(idx, dtype=np.int64), np.array(pts, dtype=float).reshape(-1, 3))


def write_indices(indices, path) -> None:
    _write(path, "".join(f"{int(i)}\n" for i in np.asarray(indices).ravel()))


def read_indices(path) -> np.ndarray:
    """One non-negative vertex index per line (mask and landmark-index files)."""
    out = []
    for no, parts in _rows(path, read_text(path)):
        if len(parts) != 1:
            raise IoFailure(f"{path}:{no}: expected one index per line")
        try:
            v = int(parts[0])
        except ValueError as exc:
            raise IoFailure(f"{path}:{no}: {exc}") from exc
        if v < 0:
            raise IoFailure(f"{path}:{no}: negative index")
        out.append(v)
    return np.array(out, dtype=np.int64)


# manifests

def _resolve(base: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else base / p


def read_training_manifest(path) -> tuple[list[str], list[str], dict]:
    """Lines ``identity_id expression_id path``; returns ids in first-seen order and a path map."""
    base = Path(path).parent
    ids, exprs, table = [], [], {}
    for no, parts in _rows(path, read_text(path)):
        if len(parts) != 3:
            raise IoFailure(f"{path}:{no}: expected 'identity_id expression_id path'")
        i, e, p = parts
        if (i, e) in table:
            raise IoFailure(f"{path}:{no}: duplicate entry for ({i}, {e})")
        if i not in ids:
            ids.append(i)
        if e not in exprs:
            exprs.append(e)
        table[(i, e)] = _resolve(base, p)
    return ids, exprs, table


def write_training_manifest(entries, path) -> None:
    _write(path, "# identity_id expression_id path\n" + "".join(f"{i} {e} {p}\n" for i, e, p in entries))


def read_frame_manifest(path) -> list[tuple[Path, Path | None]]:
    """Lines ``scan.ply [landmarks.txt]``, one per frame."""
    base = Path(path).parent
    out = []
    for no, parts in _rows(path, read_text(path)):
        if len(parts) not in (1, 2):
            raise IoFailure(f"{path}:{no}: expected 'scan.ply [landmarks.txt]'")
        out.append((_resolve(base, parts[0]), _resolve(base, parts[1]) if len(parts) == 2 else None))
    return out


def write_text(path, text: str) -> None:
    if path == "-":
        sys.stdout.write(text)
    else:
        _write(path, text)
