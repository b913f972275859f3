"""Pinhole cameras, pixel samplers, ray sampling and alpha compositing.

Pixel coordinates are (u, v) = (column, row) with integer values at pixel
centers, so a pixel at exactly (cx, cy) looks down the optical axis. Cameras
follow the usual computer-vision convention: +z forward, +x right, +y down.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from qcsg.errors import ValidationError

SCENE_RADIUS = float(np.sqrt(3.0))
CLOSING_KERNEL = 5


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        self.validate()

    def validate(self):
        M = self.world_to_camera
        if M.shape != (4, 4) or not np.all(np.isfinite(M)):
            raise ValidationError("world_to_camera must be a finite 4x4 matrix")
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError("raster size must be positive")
        R = M[:3, :3]
        if abs(np.linalg.det(R)) < 1e-9:
            raise ValidationError("degenerate (non-invertible) camera pose")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise ValidationError("camera rotation block is not a proper orthonormal rotation")
        if np.abs(M[3] - [0, 0, 0, 1]).max() > 1e-9:
            raise ValidationError("world_to_camera bottom row must be (0, 0, 0, 1)")

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def center(self):
        """Camera center in world coordinates."""
        R = self.rotation
        return -R.T @ self.world_to_camera[:3, 3]

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), width=128, height=128, fov_deg=40.0):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        M = np.eye(4)
        M[:3, :3] = R
        M[:3, 3] = -R @ eye
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, M, width, height)

    @classmethod
    def orbit(cls, azimuth_deg, elevation_deg, distance=4.0, **kw):
        az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
        eye = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        return cls.look_at(eye, **kw)

    def to_dict(self):
        return {
            "fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
            "world_to_camera": [float(x) for x in self.world_to_camera.reshape(-1)],
            "width": int(self.width), "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d):
        M = np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4)
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), M,
                   int(d["width"]), int(d["height"]))


class PixelSource(enum.IntEnum):
    RANDOM = 0
    CONTOUR = 1


@dataclass
class PixelSample:
    """Sampled pixels of one view. ``uv`` holds integer (column, row) pairs."""

    uv: np.ndarray
    source: np.ndarray
    colors: np.ndarray | None = None
    masks: np.ndarray | None = None

    def __len__(self):
        return self.uv.shape[0]


@dataclass
class RayBundle:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    hit: np.ndarray

    def __len__(self):
        return self.origins.shape[0]


def closed_contour(mask, kernel=CLOSING_KERNEL):
    """Boundary pixels (row, col) of the morphologically closed mask.

    A boundary pixel is foreground with at least one background 4-neighbor;
    everything outside the raster counts as background.
    """
    mask = np.asarray(mask, dtype=bool)
    pad = kernel
    padded = np.pad(mask, pad, mode="edge")
    closed = ndimage.binary_closing(padded, structure=np.ones((kernel, kernel), bool))
    closed = closed[pad:-pad, pad:-pad] | mask
    interior = ndimage.binary_erosion(closed, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)
    return np.argwhere(closed & ~interior), closed


def sample_pixels(mask, n_random=256, n_contour=1000, noise_sigma=2.0, rng=None, image=None):
    """Uniform pixels over the raster plus noisy pixels around the mask contour."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValidationError("cannot sample contour pixels from an empty mask")
    rng = np.random.default_rng(rng)
    H, W = mask.shape
    rand_uv = np.stack([rng.integers(0, W, n_random), rng.integers(0, H, n_random)], axis=1)
    contour, _ = closed_contour(mask)
    pick = contour[rng.integers(0, len(contour), n_contour)]
    rc = pick.astype(np.float64)
    if noise_sigma > 0:
        rc = rc + rng.normal(0.0, noise_sigma, size=rc.shape)
    rows = np.clip(np.rint(rc[:, 0]), 0, H - 1).astype(np.int64)
    cols = np.clip(np.rint(rc[:, 1]), 0, W - 1).astype(np.int64)
    cont_uv = np.stack([cols, rows], axis=1)
    uv = np.concatenate([rand_uv, cont_uv]).astype(np.int64)
    source = np.concatenate([np.full(n_random, PixelSource.RANDOM), np.full(n_contour, PixelSource.CONTOUR)])
    sample = PixelSample(uv, source)
    sample.masks = mask[uv[:, 1], uv[:, 0]].astype(np.float64)
    if image is not None:
        sample.colors = np.asarray(image, dtype=np.float64)[uv[:, 1], uv[:, 0]]
    return sample


def all_pixels(width, height):
    v, u = np.mgrid[0:height, 0:width]
    uv = np.stack([u.ravel(), v.ravel()], axis=1)
    return PixelSample(uv, np.full(len(uv), PixelSource.RANDOM))


def generate_rays(camera: Camera, pixels, radius=SCENE_RADIUS) -> RayBundle:
    """World-space rays through pixel centers, clipped to the scene sphere."""
    camera.validate()
    uv = pixels.uv if isinstance(pixels, PixelSample) else np.asarray(pixels)
    uv = np.atleast_2d(uv).astype(np.float64)
    d_cam = np.stack([(uv[:, 0] - camera.cx) / camera.fx,
                      (uv[:, 1] - camera.cy) / camera.fy,
                      np.ones(len(uv))], axis=1)
    dirs = d_cam @ camera.rotation  # R^T d for each row
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origin = camera.center
    origins = np.broadcast_to(origin, dirs.shape).copy()
    # |o + t d|^2 = r^2 with |d| = 1
    b = dirs @ origin
    c = origin @ origin - radius * radius
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    near = np.maximum(-b - sq, 0.0)
    far = -b + sq
    # misses get a short span just past the closest approach; their samples lie outside the sphere
    tc = np.maximum(-b, 0.0)
    near = np.where(hit, near, tc)
    far = np.where(hit & (far > near), far, near + 1e-3)
    return RayBundle(origins, dirs, near, far, hit)


def sample_along_rays(bundle: RayBundle, n_samples: int, stratified=False, rng=None):
    """Bin-midpoint depths (jittered within bins if stratified) and the 3D points."""
    if n_samples < 2:
        raise ValidationError("need at least 2 samples per ray")
    n = len(bundle)
    u = (np.arange(n_samples) + 0.5) / n_samples
    u = np.broadcast_to(u, (n, n_samples))
    if stratified:
        rng = np.random.default_rng(rng)
        u = (np.arange(n_samples) + rng.uniform(0.0, 1.0, size=(n, n_samples))) / n_samples
    span = (bundle.far - bundle.near)[:, None]
    depths = bundle.near[:, None] + span * u
    points = bundle.origins[:, None, :] + depths[..., None] * bundle.directions[:, None, :]
    return points, depths


def convex_softmax(O, active=None):
    """Blend weights over convexes, softmax of -10 O restricted to active ones."""
    logits = -10.0 * np.asarray(O)
    if active is not None:
        logits = np.where(np.asarray(active, dtype=bool), logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def point_color(O, colors, active=None, hard=False):
    O = np.asarray(O)
    single = O.ndim == 1
    O2 = O[None, :] if single else O
    colors = np.asarray(colors)
    if hard:
        a = np.ones(O2.shape[1], bool) if active is None else np.asarray(active, bool)
        masked = np.where(a, O2, np.inf)
        rgb = colors[np.argmin(masked, axis=1)]
    else:
        rgb = convex_softmax(O2, active) @ colors.astype(O2.dtype, copy=False)
    return rgb[0] if single else rgb


def transmittance(alphas):
    """t_i = prod_{k<i} (1 - alpha_k) along the last axis."""
    alphas = np.asarray(alphas)
    one_minus = 1.0 - alphas
    t = np.ones_like(alphas)
    t[..., 1:] = np.cumprod(one_minus[..., :-1], axis=-1)
    return t


def accumulate(alphas, colors=None):
    """Composite per-sample alphas (and colors) along each ray.

    ``alphas`` is (..., R); ``colors`` is (..., R, 3). Returns the pixel color
    (or None when colors are omitted) and the pixel mask.
    """
    alphas = np.asarray(alphas)
    weights = transmittance(alphas) * alphas
    mask = weights.sum(axis=-1)
    rgb = None
    if colors is not None:
        rgb = np.einsum("...r,...rk->...k", weights, np.asarray(colors))
    return rgb, mask


def opacity_for_phase(phase: int, a_star=None, a_plus=None):
    if phase == 1:
        return np.asarray(a_plus)
    if phase in (2, 3):
        return np.exp(-10.0 * np.asarray(a_star))
    raise ValidationError(f"unknown phase {phase}")
