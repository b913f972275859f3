"""OBJ / PLY / OpenSCAD writers, plus readers used to validate our own output."""

from __future__ import annotations

import logging
import re
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from qcsg.errors import QcsgError, ValidationError
from qcsg.extract import Mesh, PartMesh

log = logging.getLogger(__name__)

MIN_PART_VOLUME = 1e-6


class ExportError(QcsgError, OSError):
    pass


def _write(path, data, mode="w"):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, mode) as fh:
            fh.write(data)
    except OSError as exc:
        raise ExportError(f"cannot write {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------- OBJ

def export_obj(parts, path, mtl=True):
    """ASCII OBJ with one group (and one material) per part.

    ``parts`` is a list of (name, Mesh, rgb) triples or a PartMesh.
    """
    if isinstance(parts, PartMesh):
        parts = [(f"part_{p.index:03d}", p.mesh, p.color) for p in parts.parts]
    elif isinstance(parts, Mesh):
        parts = [("shape", parts, (0.7, 0.7, 0.7))]
    path = Path(path)
    lines = ["# quadric convex assembly"]
    mtl_lines = []
    if mtl:
        lines.append(f"mtllib {path.with_suffix('.mtl').name}")
    offset = 1
    for name, mesh, rgb in parts:
        lines.append(f"g {name}")
        if mtl:
            lines.append(f"usemtl {name}")
            mtl_lines += [f"newmtl {name}", "Kd {:.6f} {:.6f} {:.6f}".format(*rgb), ""]
        lines += ["v {:.9g} {:.9g} {:.9g}".format(*v) for v in mesh.vertices]
        lines += ["f {} {} {}".format(*(f + offset)) for f in mesh.faces]
        offset += len(mesh.vertices)
    _write(path, "\n".join(lines) + "\n")
    if mtl:
        _write(path.with_suffix(".mtl"), "\n".join(mtl_lines) + "\n")
    return path


def read_obj(path):
    """Parse our OBJ subset into {group: Mesh} (vertex indices are global in OBJ)."""
    verts, groups, order = [], {}, []
    current = "default"
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            if len(tok) < 4:
                raise ValidationError(f"{path}:{lineno}: vertex needs three coordinates")
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            idx = [int(t.split("/")[0]) for t in tok[1:]]
            if len(idx) < 3:
                raise ValidationError(f"{path}:{lineno}: face needs three vertices")
            idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
            if min(idx) < 0 or max(idx) >= len(verts):
                raise ValidationError(f"{path}:{lineno}: face index out of range")
            if current not in groups:
                groups[current] = []
                order.append(current)
            for k in range(1, len(idx) - 1):
                groups[current].append([idx[0], idx[k], idx[k + 1]])
        elif tok[0] == "g":
            current = " ".join(tok[1:]) or "default"
        elif tok[0] in ("o", "usemtl", "mtllib", "s", "vn", "vt"):
            continue
        else:
            raise ValidationError(f"{path}:{lineno}: unsupported statement {tok[0]!r}")
    V = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    out = {}
    for g in order:
        F = np.asarray(groups[g], dtype=np.int64)
        used, inv = np.unique(F, return_inverse=True)
        out[g] = Mesh(V[used], inv.reshape(-1, 3))
    return out


# ---------------------------------------------------------------- PLY

def export_ply(mesh: Mesh, path):
    """Binary little-endian PLY with float32 vertices and int32 triangle lists."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.faces)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    ).encode("ascii")
    v = mesh.vertices.astype("<f4").tobytes()
    f = np.empty(len(mesh.faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
    f["n"] = 3
    f["i"] = mesh.faces
    return _write(path, header + v + f.tobytes(), mode="wb")


def read_ply(path) -> Mesh:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ExportError(f"cannot read {path}: {exc}") from exc
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValidationError(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValidationError(f"{path}: only binary little-endian PLY is supported")
    nv = nf = 0
    for line in header:
        m = re.match(r"element (vertex|face) (\d+)", line)
        if m:
            if m.group(1) == "vertex":
                nv = int(m.group(2))
            else:
                nf = int(m.group(2))
    body = data[end + len(b"end_header\n"):]
    V = np.frombuffer(body, dtype="<f4", count=nv * 3).reshape(nv, 3).astype(np.float64)
    F = np.frombuffer(body, dtype=[("n", "u1"), ("i", "<i4", (3,))], count=nf, offset=nv * 12)
    if nf and np.any(F["n"] != 3):
        raise ValidationError(f"{path}: only triangle faces are supported")
    return Mesh(V, F["i"].astype(np.int64))


# ---------------------------------------------------------------- OpenSCAD

def _fmt(x):
    return f"{float(x):.6g}"


def _vec(v):
    return "[" + ", ".join(_fmt(x) for x in v) + "]"


def fit_oriented_box(points, refine=True):
    """Small-volume oriented box around ``points``: PCA axes, then local refinement.

    Returns (center, rotation with box axes as columns, full extents).
    """
    pts = np.asarray(points, dtype=np.float64)
    mean = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - mean, full_matrices=False)
    R0 = vt.T
    if np.linalg.det(R0) < 0:
        R0[:, 2] *= -1

    def volume(rv):
        R = Rotation.from_rotvec(rv).as_matrix() @ R0
        local = (pts - mean) @ R
        return float(np.prod(local.max(axis=0) - local.min(axis=0)))

    best = np.zeros(3)
    if refine:
        starts = [np.zeros(3)]
        # PCA is unreliable for near-isotropic point sets; also try the world axes
        Rw = R0.T
        starts.append(Rotation.from_matrix(Rw).as_rotvec())
        best_v = np.inf
        for s in starts:
            res = minimize(volume, s, method="Nelder-Mead",
                           options={"xatol": 1e-5, "fatol": 1e-10, "maxiter": 600})
            if res.fun < best_v:
                best_v, best = res.fun, res.x
    R = Rotation.from_rotvec(best).as_matrix() @ R0
    local = (pts - mean) @ R
    lo, hi = local.min(axis=0), local.max(axis=0)
    center = mean + R @ ((lo + hi) / 2)
    return center, R, hi - lo


def export_openscad(parts: PartMesh, path=None, mode="polyhedron"):
    """OpenSCAD script: a union of polyhedra, or of fitted oriented cubes."""
    if mode not in ("polyhedron", "fitted-box"):
        raise ValidationError(f"unknown OpenSCAD mode {mode!r}")
    lines = ["// convex part assembly", "union() {"]
    for p in parts.parts:
        mesh = p.mesh
        if mesh.is_empty or abs(mesh.volume()) < MIN_PART_VOLUME:
            log.warning("skipping degenerate part %d", p.index)
            continue
        color = _vec(p.color)
        if mode == "polyhedron":
            pts = ", ".join(_vec(v) for v in mesh.vertices)
            # OpenSCAD wants faces clockwise when seen from outside
            faces = ", ".join("[" + ", ".join(str(int(i)) for i in f[::-1]) + "]" for f in mesh.faces)
            lines.append(f"  // part {p.index}")
            lines.append(f"  color({color}) polyhedron(points=[{pts}], faces=[{faces}]);")
        else:
            center, R, ext = fit_oriented_box(mesh.vertices)
            M = np.eye(4)
            M[:3, :3] = R
            M[:3, 3] = center
            rows = ", ".join(_vec(r) for r in M)
            lines.append(f"  // part {p.index}")
            lines.append(f"  color({color}) multmatrix(m=[{rows}]) cube(size={_vec(ext)}, center=true);")
    lines.append("}")
    text = "\n".join(lines) + "\n"
    if path is not None:
        _write(path, text)
    return text
