"""Primitive bank and the forward field: points -> D -> O -> occupancy.

Conventions: ``D[i, p] < 0`` means point ``i`` is inside primitive ``p``;
``O[i, c] == 0`` means inside convex ``c``; ``a_star == 0`` means inside the
shape while ``a_plus == 1`` means (approximately) inside.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from qcsg.errors import NumericalError, ValidationError

N_COEFFS = 7


class Mode(str, enum.Enum):
    FLOAT = "float"
    BINARY = "binary"


@dataclass
class PrimitiveBank:
    """Learnable assembly state.

    ``params`` is P x 7 with rows (a, b, c, d, e, f, g); ``selection`` is the
    P x C matrix T; ``weights`` is the length-C vector w.
    """

    params: np.ndarray
    selection: np.ndarray
    weights: np.ndarray
    mode: Mode = Mode.FLOAT

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        self.selection = np.asarray(self.selection, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.mode = Mode(self.mode)
        P, C = self.selection.shape
        if self.params.shape != (P, N_COEFFS):
            raise ValidationError(
                f"params shape {self.params.shape} does not match selection {self.selection.shape}"
            )
        if self.weights.shape != (C,):
            raise ValidationError(f"weights shape {self.weights.shape}, expected ({C},)")
        if self.mode is Mode.BINARY and not np.all((self.selection == 0) | (self.selection == 1)):
            raise ValidationError("binary-mode selection must contain only 0 and 1")

    @property
    def primitive_count(self) -> int:
        return self.selection.shape[0]

    @property
    def convex_count(self) -> int:
        return self.selection.shape[1]

    @classmethod
    def initialize(cls, primitive_count=4096, convex_count=256, seed=0,
                   param_sigma=0.1, g_shift=-0.2, selection_high=0.05):
        """Dense random start: Gaussian params, T ~ U[0, selection_high], w = 1."""
        rng = np.random.default_rng(seed)
        params = rng.normal(0.0, param_sigma, size=(primitive_count, N_COEFFS))
        params[:, 6] += g_shift
        selection = rng.uniform(0.0, selection_high, size=(primitive_count, convex_count))
        weights = np.ones(convex_count)
        return cls(params, selection, weights, Mode.FLOAT)

    @classmethod
    def initialize_blocks(cls, primitive_count=4096, convex_count=256, seed=0,
                          radius=0.2, spread=0.6, slope=3.0, curvature=0.1):
        """Each convex starts as a small blob owned by its own block of primitives.

        Primitive ``p`` belongs to convex ``p % C``; it is a nearly flat quadric
        tangent to a sphere of ``radius`` around the convex's random center,
        with outward normals spread over the sphere. T is 1 on owned entries
        and 0 elsewhere, so every convex interior is exactly inside.
        """
        if primitive_count < convex_count:
            raise ValidationError("need at least one primitive per convex")
        rng = np.random.default_rng(seed)
        centers = rng.uniform(-spread, spread, size=(convex_count, 3))
        owner = np.arange(primitive_count) % convex_count
        rank = np.arange(primitive_count) // convex_count
        per = np.bincount(owner, minlength=convex_count)
        # Fibonacci directions within each block, randomly rotated per convex
        k = rank + 0.5
        n_k = per[owner]
        z = 1.0 - 2.0 * k / n_k
        phi = np.pi * (1.0 + 5.0 ** 0.5) * k
        rxy = np.sqrt(np.clip(1.0 - z * z, 0.0, 1.0))
        normals = np.stack([rxy * np.cos(phi), rxy * np.sin(phi), z], axis=1)
        rot = np.linalg.qr(rng.normal(size=(convex_count, 3, 3)))[0]
        normals = np.einsum("pij,pj->pi", rot[owner], normals)
        m = centers[owner]
        # D = q |x|^2 + s n.(x - m) - s*radius, shifted so the quadratic term vanishes at m
        q = curvature
        params = np.zeros((primitive_count, N_COEFFS))
        params[:, 0:3] = q
        params[:, 3:6] = slope * normals - 2.0 * q * m
        params[:, 6] = q * np.sum(m * m, axis=1) - slope * (np.sum(normals * m, axis=1) + radius)
        selection = np.zeros((primitive_count, convex_count))
        selection[np.arange(primitive_count), owner] = 1.0
        return cls(params, selection, np.ones(convex_count), Mode.FLOAT)

    def copy(self) -> "PrimitiveBank":
        return PrimitiveBank(self.params.copy(), self.selection.copy(), self.weights.copy(), self.mode)

    def effective_params(self) -> np.ndarray:
        """Params with the quadratic coefficients replaced by their magnitudes."""
        out = self.params.copy()
        out[:, :3] = np.abs(out[:, :3])
        return out

    def active_convexes(self) -> np.ndarray:
        """Convexes whose selection column has at least one nonzero entry."""
        return np.any(self.selection != 0, axis=0)

    def active_primitives(self) -> np.ndarray:
        return np.any(self.selection != 0, axis=1)


@dataclass
class QueryBatch:
    points: np.ndarray
    q_rows: np.ndarray

    def __len__(self):
        return self.points.shape[0]


@dataclass
class FieldSample:
    D: np.ndarray
    O: np.ndarray
    a_star: np.ndarray
    a_plus: np.ndarray
    active: np.ndarray = field(default=None)


def lift_points(points) -> QueryBatch:
    points = np.asarray(points)
    if points.ndim == 1:
        points = points[None, :]
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValidationError(f"points must be N x 3, got {points.shape}")
    if not np.all(np.isfinite(points)):
        bad = np.flatnonzero(~np.all(np.isfinite(points), axis=1))
        raise NumericalError(f"{bad.size} non-finite query points (first at row {bad[0]})", node="lift")
    dtype = points.dtype if points.dtype in (np.float32, np.float64) else np.float64
    points = points.astype(dtype, copy=False)
    q = np.empty((points.shape[0], N_COEFFS), dtype=dtype)
    q[:, 0:3] = points * points
    q[:, 3:6] = points
    q[:, 6] = 1.0
    return QueryBatch(points, q)


def distance_matrix(q: QueryBatch, bank_or_params) -> np.ndarray:
    """N x P quadric values; negative inside."""
    if isinstance(bank_or_params, PrimitiveBank):
        eff = bank_or_params.effective_params()
    else:
        eff = np.array(bank_or_params, dtype=np.float64)
        eff[:, :3] = np.abs(eff[:, :3])
    if eff.ndim != 2 or eff.shape[1] != q.q_rows.shape[1]:
        raise ValidationError(f"params shape {eff.shape} incompatible with lifted rows {q.q_rows.shape}")
    if not np.all(np.isfinite(eff)):
        raise NumericalError("non-finite primitive parameters", node="distance_matrix")
    return q.q_rows @ eff.astype(q.q_rows.dtype, copy=False).T


def intersect(D: np.ndarray, T: np.ndarray) -> np.ndarray:
    D = np.asarray(D)
    T = np.asarray(T)
    if D.ndim != 2 or T.ndim != 2 or D.shape[1] != T.shape[0]:
        raise ValidationError(f"cannot intersect D {D.shape} with T {T.shape}")
    return np.maximum(D, 0.0) @ T.astype(D.dtype, copy=False)


def union_hard(O: np.ndarray, active=None, return_index=False):
    """Min over active convexes; ties resolve to the lowest index."""
    O = np.asarray(O)
    C = O.shape[1]
    if active is None:
        active = np.ones(C, dtype=bool)
    active = np.asarray(active, dtype=bool)
    if active.shape != (C,):
        raise ValidationError(f"active mask shape {active.shape}, expected ({C},)")
    if not active.any():
        raise ValidationError("union over zero active convexes")
    idx_active = np.flatnonzero(active)
    sub = O[:, idx_active]
    local = np.argmin(sub, axis=1)
    a_star = sub[np.arange(O.shape[0]), local]
    if return_index:
        return a_star, idx_active[local]
    return a_star


def union_soft(O: np.ndarray, w: np.ndarray, active=None) -> np.ndarray:
    O = np.asarray(O)
    w = np.asarray(w, dtype=O.dtype)
    if active is not None:
        w = np.where(np.asarray(active, dtype=bool), w, 0.0).astype(O.dtype)
    return np.clip(np.clip(1.0 - O, 0.0, 1.0) @ w, 0.0, 1.0)


def overlap_indicator(O: np.ndarray, active=None) -> np.ndarray:
    """Soft count of convexes containing each point: sum_c exp(-10 O[:, c])."""
    E = np.exp(-10.0 * np.asarray(O))
    if active is not None:
        E = E[:, np.asarray(active, dtype=bool)]
    return E.sum(axis=1)


def evaluate_field(bank: PrimitiveBank, points, active=None, chunk=65536) -> FieldSample:
    """Full forward evaluation; rows are processed in chunks of ``chunk`` points."""
    if active is None:
        active = bank.active_convexes()
    pts = np.asarray(points, dtype=np.float64)
    Ds, Os = [], []
    for start in range(0, max(len(pts), 1), chunk):
        q = lift_points(pts[start:start + chunk])
        D = distance_matrix(q, bank)
        Ds.append(D)
        Os.append(intersect(D, bank.selection))
    D = np.concatenate(Ds) if Ds else np.zeros((0, bank.primitive_count))
    O = np.concatenate(Os) if Os else np.zeros((0, bank.convex_count))
    a_star = union_hard(O, active)
    a_plus = union_soft(O, bank.weights, active)
    return FieldSample(D, O, a_star, a_plus, active)


def occupancy(bank: PrimitiveBank, points, active=None, chunk=65536, dtype=np.float64) -> np.ndarray:
    """Hard occupancy a* only, without keeping D around (for grids and probes)."""
    if active is None:
        active = bank.active_convexes()
    active = np.asarray(active, dtype=bool)
    if not active.any():
        raise ValidationError("union over zero active convexes")
    eff = bank.effective_params().astype(dtype)
    T = bank.selection[:, active].astype(dtype)
    rows = np.flatnonzero(np.any(T != 0, axis=1))
    eff, T = eff[rows], T[rows]
    pts = np.asarray(points, dtype=dtype)
    out = np.empty(len(pts), dtype=dtype)
    for start in range(0, len(pts), chunk):
        q = lift_points(pts[start:start + chunk]).q_rows
        O = np.maximum(q @ eff.T, 0.0) @ T
        out[start:start + chunk] = O.min(axis=1)
    return out


def convex_fields(bank: PrimitiveBank, points, chunk=65536, dtype=np.float64) -> np.ndarray:
    """O for every convex at ``points`` (N x C)."""
    eff = bank.effective_params().astype(dtype)
    T = bank.selection.astype(dtype)
    pts = np.asarray(points, dtype=dtype)
    out = np.empty((len(pts), bank.convex_count), dtype=dtype)
    for start in range(0, len(pts), chunk):
        q = lift_points(pts[start:start + chunk]).q_rows
        out[start:start + chunk] = np.maximum(q @ eff.T, 0.0) @ T
    return out
