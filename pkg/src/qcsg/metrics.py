"""Mesh and image metrics: CD, ECD, NC, PSNR, SSIM, mask IoU."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity

from qcsg.errors import ValidationError

N_SAMPLES = 10_000
EDGE_NEIGHBORS = 10
EDGE_DOT = 0.1
PSNR_CAP = 99.0
CD_SCALE = 1000.0


def sample_surface(mesh, n_samples=N_SAMPLES, seed=0):
    """Area-weighted uniform samples and their face normals."""
    if mesh.is_empty:
        raise ValidationError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValidationError("mesh has zero surface area")
    face = rng.choice(len(areas), size=n_samples, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=n_samples))
    r2 = rng.uniform(size=n_samples)
    v = mesh.vertices[mesh.faces[face]]
    pts = (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]
    normals = mesh.face_normals()[face]
    return pts, normals


def _sym_sq_chamfer(a, b):
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (np.mean(da ** 2) + np.mean(db ** 2))


def chamfer(mesh_a, mesh_b, n_samples=N_SAMPLES, seed=0):
    """Symmetric squared Chamfer distance between surface samples, times 1000."""
    pa, _ = sample_surface(mesh_a, n_samples, seed)
    pb, _ = sample_surface(mesh_b, n_samples, seed)
    return CD_SCALE * float(_sym_sq_chamfer(pa, pb))


def edge_samples(points, normals, k=EDGE_NEIGHBORS, dot_threshold=EDGE_DOT):
    """Samples whose k-neighborhood contains two normals with dot below the threshold."""
    k = min(k, len(points))
    _, idx = cKDTree(points).query(points, k=k)
    nb = normals[idx]  # (n, k, 3)
    dots = np.einsum("nik,njk->nij", nb, nb)
    return dots.min(axis=(1, 2)) < dot_threshold


def edge_chamfer(mesh_a, mesh_b, n_samples=N_SAMPLES, edge_dot=EDGE_DOT, seed=0):
    """Chamfer restricted to sharp-feature samples; None when either side has no edges."""
    pa, na = sample_surface(mesh_a, n_samples, seed)
    pb, nb = sample_surface(mesh_b, n_samples, seed)
    ea = edge_samples(pa, na, dot_threshold=edge_dot)
    eb = edge_samples(pb, nb, dot_threshold=edge_dot)
    if not ea.any() or not eb.any():
        return None
    return CD_SCALE * float(_sym_sq_chamfer(pa[ea], pb[eb]))


def normal_consistency(mesh_a, mesh_b, n_samples=N_SAMPLES, seed=0):
    """Mean |n_a . n_b| over nearest-neighbor sample pairs, averaged over both directions."""
    pa, na = sample_surface(mesh_a, n_samples, seed)
    pb, nb = sample_surface(mesh_b, n_samples, seed)
    _, ia = cKDTree(pb).query(pa)
    _, ib = cKDTree(pa).query(pb)
    ab = np.abs(np.sum(na * nb[ia], axis=1)).mean()
    ba = np.abs(np.sum(nb * na[ib], axis=1)).mean()
    return float(min(0.5 * (ab + ba), 1.0))


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def ssim(a, b):
    """Gaussian-window SSIM (sigma 1.5, 11x11) with the standard constants."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False,
                                       channel_axis=-1 if a.ndim == 3 else None))


def mask_iou(rendered_mask, gt_mask, threshold=0.5):
    pred = np.asarray(rendered_mask) > threshold
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def image_metrics(rendered, gt, rendered_mask, gt_mask):
    return psnr(rendered, gt), ssim(rendered, gt), mask_iou(rendered_mask, gt_mask)


@dataclass
class EvalReport:
    cd: float | None = None
    ecd: float | None = None
    ecd_status: str = "omitted"
    nc: float | None = None
    parts: int = 0
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    mask_iou: list = field(default_factory=list)
    views: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    seed: int = 0
    config_hash: str = ""

    def to_json(self):
        return json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True)

    def table(self):
        def fmt(x, spec=".4f"):
            return "n/a" if x is None else format(x, spec)

        rows = [("CD x1000", fmt(self.cd)), ("ECD x1000", fmt(self.ecd) if self.ecd is not None
                                              else self.ecd_status),
                ("NC", fmt(self.nc)), ("#Parts", str(self.parts))]
        for name, p, s, i in zip(self.views, self.psnr, self.ssim, self.mask_iou):
            rows.append((f"view {name}", f"PSNR {p:.2f} dB  SSIM {s:.4f}  IoU {i:.4f}"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def mesh_metrics(pred, gt, n_samples=N_SAMPLES, seed=0):
    """(cd, ecd, ecd_status, nc) for two non-empty meshes."""
    if pred.is_empty or gt.is_empty:
        raise ValidationError("mesh metrics need two non-empty meshes")
    cd = chamfer(pred, gt, n_samples, seed)
    ecd = edge_chamfer(pred, gt, n_samples, seed=seed)
    nc = normal_consistency(pred, gt, n_samples, seed)
    return cd, ecd, "ok" if ecd is not None else "no-edges", nc
