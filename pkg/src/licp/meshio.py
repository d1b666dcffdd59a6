"""OBJ and PLY readers/writers.

OBJ: vertices and faces only, polygons fan-triangulated. PLY: ascii and
binary_little_endian with properties x,y,z,nx,ny,nz,red,green,blue; writes
are always binary_little_endian.
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from .core3d import PointCloud, TriangleMesh, remove_degenerate
from .errors import ParseError, UnsupportedElement

logger = logging.getLogger(__name__)

_PLY_PROPS = ("x", "y", "z", "nx", "ny", "nz", "red", "green", "blue")
_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1),
}


def load_obj(path) -> TriangleMesh:
    """Load an OBJ mesh (v / f records); degenerate triangles are dropped."""
    verts: list[list[float]] = []
    tris: list[list[int]] = []
    with open(path, "r", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ParseError("vertex needs 3 coordinates", line=lineno)
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ParseError(f"bad vertex {line!r}", line=lineno) from None
            elif tag == "f":
                if len(parts) < 4:
                    raise ParseError("face needs >= 3 vertices", line=lineno)
                idx = []
                for tok in parts[1:]:
                    try:
                        i = int(tok.split("/")[0])
                    except ValueError:
                        raise ParseError(f"bad face index {tok!r}", line=lineno) from None
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for a, b in zip(idx[1:-1], idx[2:]):
                    tris.append([idx[0], a, b])
            # vt/vn/g/o/usemtl/mtllib/s silently ignored
    if not verts:
        raise ParseError(f"{path}: no vertices found")
    try:
        mesh = TriangleMesh(np.array(verts), np.array(tris).reshape(-1, 3))
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from None
    mesh, dropped = remove_degenerate(mesh)
    if dropped:
        logger.warning("%s: dropped %d degenerate triangles", path, dropped)
    return mesh


def save_obj(path, groups: list[tuple[str, TriangleMesh]]):
    """Write named mesh groups to a single OBJ file."""
    with open(path, "w") as fh:
        fh.write("# exported by licp\n")
        offset = 1
        for name, mesh in groups:
            fh.write(f"g {name}\n")
            for v in mesh.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for t in mesh.triangles:
                fh.write(f"f {t[0]+offset} {t[1]+offset} {t[2]+offset}\n")
            offset += len(mesh.vertices)


def _parse_ply_header(fh):
    """Returns (fmt, n_vertices, props [(name, dtype, size)], lineno after header)."""
    def next_line(lineno):
        raw = fh.readline()
        if not raw:
            raise ParseError("unexpected end of header", line=lineno)
        return raw.decode("ascii", errors="replace").strip(), lineno + 1

    line, lineno = next_line(0)
    if line != "ply":
        raise ParseError("missing 'ply' magic", line=1)
    fmt = None
    n_vertices = None
    props = []
    in_vertex = False
    while True:
        line, lineno = next_line(lineno)
        if line.startswith("comment") or not line:
            continue
        parts = line.split()
        if parts[0] == "format":
            if parts[1] not in ("ascii", "binary_little_endian"):
                raise UnsupportedElement(f"format {parts[1]}", line=lineno)
            fmt = parts[1]
        elif parts[0] == "element":
            if parts[1] == "vertex":
                n_vertices = int(parts[2])
                in_vertex = True
            else:
                # non-vertex elements tolerated only if empty
                if int(parts[2]) != 0:
                    raise UnsupportedElement(f"element {parts[1]}", line=lineno)
                in_vertex = False
        elif parts[0] == "property":
            if not in_vertex:
                continue
            if parts[1] == "list":
                raise UnsupportedElement("list property on vertex", line=lineno)
            if len(parts) != 3:
                raise ParseError(f"bad property {line!r}", line=lineno)
            ptype, pname = parts[1], parts[2]
            if pname not in _PLY_PROPS:
                raise UnsupportedElement(f"property {pname}", line=lineno)
            if ptype not in _PLY_TYPES:
                raise UnsupportedElement(f"property type {ptype}", line=lineno)
            props.append((pname, *_PLY_TYPES[ptype]))
        elif parts[0] == "end_header":
            break
        else:
            raise ParseError(f"unknown header record {parts[0]!r}", line=lineno)
    if fmt is None or n_vertices is None:
        raise ParseError("header missing format or vertex element")
    names = [p[0] for p in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise ParseError(f"vertex element missing property {req!r}")
    return fmt, n_vertices, props, lineno


def load_ply(path) -> PointCloud:
    """Load a point cloud from PLY (positions + optional normals/colors)."""
    with open(path, "rb") as fh:
        fmt, n, props, header_lines = _parse_ply_header(fh)
        names = [p[0] for p in props]
        if fmt == "ascii":
            rows = []
            for i in range(n):
                raw = fh.readline()
                if not raw:
                    raise ParseError("truncated vertex data",
                                     line=header_lines + i + 1)
                toks = raw.split()
                if len(toks) != len(props):
                    raise ParseError(
                        f"expected {len(props)} values, got {len(toks)}",
                        line=header_lines + i + 1)
                try:
                    rows.append([float(t) for t in toks])
                except ValueError:
                    raise ParseError("bad vertex value",
                                     line=header_lines + i + 1) from None
            data = np.array(rows, dtype=float).reshape(n, len(props))
            cols = {name: data[:, i] for i, name in enumerate(names)}
        else:
            dtype = np.dtype([(p[0], p[1]) for p in props])
            buf = fh.read(dtype.itemsize * n)
            if len(buf) != dtype.itemsize * n:
                raise ParseError("truncated binary vertex data")
            rec = np.frombuffer(buf, dtype=dtype, count=n)
            cols = {name: rec[name].astype(float) for name in names}
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    colors = None
    if all(k in cols for k in ("red", "green", "blue")):
        colors = np.stack([cols["red"], cols["green"], cols["blue"]], axis=1) / 255.0
    return PointCloud(pts, normals, colors)


def save_ply(cloud: PointCloud, path):
    """Write a point cloud as binary_little_endian PLY (float32 + uchar colors)."""
    n = len(cloud)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if cloud.colors is not None:
        fields += [("red", "<u1"), ("green", "<u1"), ("blue", "<u1")]
    rec = np.zeros(n, dtype=np.dtype(fields))
    rec["x"], rec["y"], rec["z"] = cloud.points.T.astype(np.float32)
    if cloud.normals is not None:
        rec["nx"], rec["ny"], rec["nz"] = cloud.normals.T.astype(np.float32)
    if cloud.colors is not None:
        rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = rgb.T
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    type_name = {"<f4": "float", "<u1": "uchar"}
    header += [f"property {type_name[t]} {name}" for name, t in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def save_depth_pgm(depth: np.ndarray, path):
    """Dump a depth image as 16-bit PGM, millimeter quantization."""
    mm = np.clip(np.rint(np.asarray(depth) * 1000.0), 0, 65535).astype(">u2")
    h, w = mm.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(mm.tobytes())
