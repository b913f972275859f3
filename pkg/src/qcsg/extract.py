"""Meshing of the occupancy field and of individual convex parts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from skimage import measure

from qcsg.assembly import Mode, PrimitiveBank, convex_fields, occupancy
from qcsg.errors import ValidationError

log = logging.getLogger(__name__)

ISO = 0.01
EVAL_RESOLUTION = 128
PREVIEW_RESOLUTION = 64


@dataclass
class Mesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def face_normals(self, normalize=True):
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self):
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def volume(self):
        v = self.vertices[self.faces]
        return float(np.sum(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2]))) / 6.0)

    def is_watertight(self):
        """Every undirected edge is shared by exactly two faces with opposite orientation."""
        if self.is_empty:
            return False
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        und = np.sort(directed, axis=1)
        _, counts = np.unique(und, axis=0, return_counts=True)
        if np.any(counts != 2):
            return False
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        return bool(np.all(dcounts == 1))

    def transformed(self, R=np.eye(3), t=np.zeros(3)):
        return Mesh(self.vertices @ np.asarray(R).T + t, self.faces.copy())

    @staticmethod
    def merge(meshes):
        verts, faces, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + off)
            off += len(m.vertices)
        if not verts:
            return Mesh()
        return Mesh(np.concatenate(verts), np.concatenate(faces))


@dataclass
class Part:
    index: int
    mesh: Mesh
    color: tuple = (0.7, 0.7, 0.7)
    watertight: bool = True


@dataclass
class PartMesh:
    parts: list
    merged: Mesh

    @property
    def count(self):
        return len(self.parts)


def grid_points(resolution, lo=-1.0, hi=1.0):
    ax = np.linspace(lo, hi, resolution)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1), ax


def mesh_from_grid(values, level, inside_below=True, lo=-1.0, hi=1.0):
    """Marching cubes over a cubic grid spanning [lo, hi]^3, outward-oriented.

    The grid is padded with an outside value so surfaces touching the
    boundary still close.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    inside = values < level if inside_below else values > level
    if not inside.any():
        return Mesh()
    pad_val = level + (1.0 if inside_below else -1.0) * max(1.0, np.abs(values).max())
    vol = np.pad(values, 1, mode="constant", constant_values=pad_val)
    step = (hi - lo) / (n - 1)
    verts, faces, _, _ = measure.marching_cubes(vol, level=level, spacing=(step,) * 3,
                                                allow_degenerate=False)
    verts = verts + (lo - step)
    mesh = Mesh(verts, faces)
    if mesh.is_empty:
        return mesh
    if mesh.volume() < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


def occupancy_grid(bank: PrimitiveBank, resolution=EVAL_RESOLUTION, dtype=np.float64):
    pts, _ = grid_points(resolution)
    return occupancy(bank, pts, dtype=dtype).reshape((resolution,) * 3)


def extract_mesh(bank: PrimitiveBank, grid_resolution=EVAL_RESOLUTION, iso=ISO) -> Mesh:
    """Surface of the hard occupancy field at ``iso`` over [-1, 1]^3."""
    if grid_resolution < 16:
        raise ValidationError("grid resolution must be at least 16")
    if not bank.active_convexes().any():
        log.warning("bank has no active convexes; returning an empty mesh")
        return Mesh()
    vals = occupancy_grid(bank, grid_resolution)
    if not np.any(vals < iso):
        log.warning("occupancy field is empty at iso %.3g; returning an empty mesh", iso)
        return Mesh()
    return mesh_from_grid(vals, iso)


def extract_parts(bank: PrimitiveBank, grid_resolution=EVAL_RESOLUTION, iso=ISO, colors=None) -> PartMesh:
    """One mesh per non-empty convex (column field O[:, c] below ``iso``)."""
    if bank.mode is not Mode.BINARY:
        raise ValidationError("part extraction needs a binarized selection matrix")
    if grid_resolution < 16:
        raise ValidationError("grid resolution must be at least 16")
    pts, _ = grid_points(grid_resolution)
    active = np.flatnonzero(bank.active_convexes())
    parts = []
    if len(active):
        sub = PrimitiveBank(bank.params, bank.selection[:, active], bank.weights[active], bank.mode)
        O = convex_fields(sub, pts)
        shape = (grid_resolution,) * 3
        for k, c in enumerate(active):
            vals = O[:, k].reshape(shape)
            if not np.any(vals < iso):
                continue
            m = mesh_from_grid(vals, iso)
            if m.is_empty:
                continue
            col = tuple(float(x) for x in colors[c]) if colors is not None else part_palette(c)
            parts.append(Part(int(c), m, col, m.is_watertight()))
        merged_vals = O.min(axis=1).reshape(shape)
        merged = mesh_from_grid(merged_vals, iso) if np.any(merged_vals < iso) else Mesh()
    else:
        merged = Mesh()
    for p in parts:
        if not p.watertight:
            log.warning("part %d is not watertight at resolution %d", p.index, grid_resolution)
    return PartMesh(parts, merged)


def nonempty_convex_count(bank: PrimitiveBank, grid_resolution=PREVIEW_RESOLUTION, iso=ISO):
    """Convexes with at least one interior grid sample."""
    active = np.flatnonzero(bank.active_convexes())
    if not len(active):
        return 0
    pts, _ = grid_points(grid_resolution)
    sub = PrimitiveBank(bank.params, bank.selection[:, active], bank.weights[active], Mode.FLOAT)
    O = convex_fields(sub, pts)
    return int(np.sum(np.any(O < iso, axis=0)))


def part_palette(i):
    rng = np.random.default_rng(1000 + int(i))
    return tuple(float(x) for x in rng.uniform(0.2, 0.95, 3))
