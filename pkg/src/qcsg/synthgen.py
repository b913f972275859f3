"""Analytic CSG scenes used as ground truth: occupancy, views and meshes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from qcsg.dataset import View, ViewSet
from qcsg.errors import ValidationError
from qcsg.render import Camera, all_pixels, generate_rays

LIGHT_DIR = np.array([0.4, -0.3, 0.866])
LIGHT_DIR = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
AMBIENT = 0.35


def rotation_about(axis, degrees):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    th = np.radians(degrees)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K


@dataclass
class Solid:
    """Closed solid with a rigid pose; subclasses work in local coordinates."""

    center: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    color: tuple = (0.8, 0.8, 0.8)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)

    def to_local(self, p):
        return (np.asarray(p) - self.center) @ self.rotation

    def dir_to_local(self, d):
        return np.asarray(d) @ self.rotation

    def normal_to_world(self, n):
        n = n @ self.rotation.T
        return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-300)

    def contains(self, p):
        return self.local_implicit(self.to_local(p)) <= 0

    def implicit(self, p):
        return self.local_implicit(self.to_local(p))

    def intersect(self, o, d):
        """(t_hit, normal) of the first entry along each ray; t_hit is inf on a miss."""
        return self.local_intersect(self.to_local(o), self.dir_to_local(d))

    def bounds(self):
        raise NotImplementedError

    def local_implicit(self, p):
        raise NotImplementedError

    def local_intersect(self, o, d):
        raise NotImplementedError


def _slab(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tmin = np.fmin(t1, t2)
    tmax = np.fmax(t1, t2)
    parallel = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    return tmin, tmax


def _finalize(t_in, t_out, normal):
    hit = (t_in <= t_out) & (t_out >= 0) & np.isfinite(t_in)
    t = np.where(hit, np.maximum(t_in, 0.0), np.inf)
    return t, normal


@dataclass
class Ellipsoid(Solid):
    radii: tuple = (0.5, 0.5, 0.5)

    def bounds(self):
        r = np.asarray(self.radii)
        ext = np.sqrt((self.rotation ** 2) @ (r ** 2))
        return self.center - ext, self.center + ext

    def local_implicit(self, p):
        r = np.asarray(self.radii)
        return (np.linalg.norm(p / r, axis=-1) - 1.0) * r.min()

    def local_intersect(self, o, d):
        r = np.asarray(self.radii)
        os_, ds = o / r, d / r
        a = np.sum(ds * ds, axis=-1)
        b = np.sum(os_ * ds, axis=-1)
        c = np.sum(os_ * os_, axis=-1) - 1.0
        disc = b * b - a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t_in = np.where(ok, (-b - sq) / a, np.inf)
        t_out = np.where(ok, (-b + sq) / a, -np.inf)
        p = o + np.where(np.isfinite(t_in), np.maximum(t_in, 0), 0)[:, None] * d
        return _finalize(t_in, t_out, self.normal_to_world(p / r ** 2))


@dataclass
class Sphere(Ellipsoid):
    radius: float = 0.5

    def __post_init__(self):
        super().__post_init__()
        self.radii = (self.radius,) * 3


@dataclass
class Box(Solid):
    half: tuple = (0.5, 0.5, 0.5)

    def bounds(self):
        h = np.asarray(self.half)
        ext = np.abs(self.rotation) @ h
        return self.center - ext, self.center + ext

    def local_implicit(self, p):
        return np.max(np.abs(p) - np.asarray(self.half), axis=-1)

    def local_intersect(self, o, d):
        h = np.asarray(self.half)
        tmin, tmax = _slab(o, d, -h, h)
        axis = np.argmax(tmin, axis=1)
        t_in = tmin[np.arange(len(o)), axis]
        t_out = tmax.min(axis=1)
        n = np.zeros_like(o)
        n[np.arange(len(o)), axis] = -np.sign(d[np.arange(len(o)), axis])
        return _finalize(t_in, t_out, self.normal_to_world(n))


@dataclass
class Cylinder(Solid):
    """Capped cylinder along the local z axis."""

    radius: float = 0.3
    half_height: float = 0.5

    def bounds(self):
        ax = self.rotation[:, 2]
        ext = np.sqrt(np.clip(1 - ax ** 2, 0, 1)) * self.radius + np.abs(ax) * self.half_height
        return self.center - ext, self.center + ext

    def local_implicit(self, p):
        radial = np.linalg.norm(p[..., :2], axis=-1) - self.radius
        return np.maximum(radial, np.abs(p[..., 2]) - self.half_height)

    def local_intersect(self, o, d):
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
        c = o[:, 0] ** 2 + o[:, 1] ** 2 - self.radius ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = b * b - a * c
            ok = (disc >= 0) & (a > 0)
            sq = np.sqrt(np.where(ok, disc, 0.0))
            r_in = np.where(ok, (-b - sq) / a, np.where((a == 0) & (c <= 0), -np.inf, np.inf))
            r_out = np.where(ok, (-b + sq) / a, np.where((a == 0) & (c <= 0), np.inf, -np.inf))
        z_in, z_out = _slab(o[:, 2], d[:, 2], -self.half_height, self.half_height)
        t_in = np.maximum(r_in, z_in)
        t_out = np.minimum(r_out, z_out)
        p = o + np.where(np.isfinite(t_in), t_in, 0)[:, None] * d
        n_side = np.stack([p[:, 0], p[:, 1], np.zeros(len(p))], axis=1)
        n_cap = np.stack([np.zeros(len(p)), np.zeros(len(p)), -np.sign(d[:, 2])], axis=1)
        n = np.where((z_in > r_in)[:, None], n_cap, n_side)
        return _finalize(t_in, t_out, self.normal_to_world(n))


@dataclass
class Bowl(Solid):
    """Hemispherical shell open towards +z; concave, used only as a negative example."""

    outer: float = 0.7
    inner: float = 0.55
    cut: float = 0.1

    def bounds(self):
        lo = self.center + np.array([-self.outer, -self.outer, -self.outer])
        hi = self.center + np.array([self.outer, self.outer, self.cut])
        return lo, hi

    def local_implicit(self, p):
        r = np.linalg.norm(p, axis=-1)
        return np.maximum(np.maximum(r - self.outer, self.inner - r), p[..., 2] - self.cut)

    def local_intersect(self, o, d):
        # candidate crossings: both spheres and the cut plane; first one entering the solid wins
        cands = []
        for rad in (self.outer, self.inner):
            b = np.sum(o * d, axis=1)
            c = np.sum(o * o, axis=1) - rad ** 2
            disc = b * b - c
            sq = np.sqrt(np.where(disc >= 0, disc, 0.0))
            for s in (-1, 1):
                cands.append(np.where(disc >= 0, -b + s * sq, np.inf))
        with np.errstate(divide="ignore", invalid="ignore"):
            cands.append(np.where(d[:, 2] != 0, (self.cut - o[:, 2]) / d[:, 2], np.inf))
        cands = np.stack(cands, axis=1)
        cands = np.where(cands >= 0, cands, np.inf)
        order = np.argsort(cands, axis=1)
        t_hit = np.full(len(o), np.inf)
        eps = 1e-7
        for k in range(cands.shape[1]):
            t = cands[np.arange(len(o)), order[:, k]]
            pend = np.isinf(t_hit) & np.isfinite(t)
            p = o + (t + eps)[:, None] * d
            enter = pend & (self.local_implicit(p) <= 0)
            t_hit = np.where(enter, t, t_hit)
        p = o + np.where(np.isfinite(t_hit), t_hit, 0)[:, None] * d
        h = 1e-6
        grad = np.stack([
            (self.local_implicit(p + h * e) - self.local_implicit(p - h * e)) / (2 * h)
            for e in np.eye(3)
        ], axis=1)
        return t_hit, self.normal_to_world(grad)


@dataclass
class AnalyticScene:
    name: str
    solids: list
    cameras: list = field(default_factory=list)
    holdout: tuple = ()
    convex: bool = True

    def __post_init__(self):
        if not self.solids:
            raise ValidationError("scene needs at least one solid")
        lo, hi = self.bounds()
        if np.any(lo < -1) or np.any(hi > 1):
            raise ValidationError(f"scene {self.name!r} leaves [-1, 1]^3: {lo}, {hi}")

    def bounds(self):
        los, his = zip(*(s.bounds() for s in self.solids))
        return np.min(los, axis=0), np.max(his, axis=0)

    def implicit(self, points):
        """Union of the solids' implicit functions (negative inside)."""
        return np.min([s.implicit(points) for s in self.solids], axis=0)


def analytic_occupancy(scene: AnalyticScene, points):
    """Inside flags and the lowest-index solid containing each point (-1 if none)."""
    points = np.asarray(points, dtype=np.float64)
    inside = np.stack([s.contains(points) for s in scene.solids], axis=1)
    any_in = inside.any(axis=1)
    owner = np.where(any_in, np.argmax(inside, axis=1), -1)
    return any_in, owner


def first_hit(scene: AnalyticScene, origins, directions):
    ts, normals = [], []
    for s in scene.solids:
        t, n = s.intersect(origins, directions)
        ts.append(t)
        normals.append(n)
    ts = np.stack(ts, axis=1)
    owner = np.argmin(ts, axis=1)
    rows = np.arange(len(origins))
    t = ts[rows, owner]
    normal = np.stack(normals, axis=1)[rows, owner]
    hit = np.isfinite(t)
    return t, np.where(hit, owner, -1), normal


def render_gt_views(scene: AnalyticScene, cameras=None):
    """Binary first-hit masks and flat Lambert-shaded colors, one View per camera."""
    cameras = scene.cameras if cameras is None else cameras
    views = []
    colors = np.array([s.color for s in scene.solids], dtype=np.float64)
    for i, cam in enumerate(cameras):
        pix = all_pixels(cam.width, cam.height)
        rays = generate_rays(cam, pix, radius=np.inf)
        t, owner, normal = first_hit(scene, rays.origins, rays.directions)
        hit = owner >= 0
        # face the normal towards the camera
        normal = np.where((np.sum(normal * rays.directions, axis=1) > 0)[:, None], -normal, normal)
        shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0.0, 1.0)
        rgb = np.where(hit[:, None], colors[np.maximum(owner, 0)] * shade[:, None], 0.0)
        H, W = cam.height, cam.width
        views.append(View(rgb.reshape(H, W, 3), hit.reshape(H, W), cam, f"{i:03d}"))
    return ViewSet(views, {"scene": scene.name, "holdout": list(scene.holdout)})


RIG_AZIMUTHS = (0.0, 120.0, 240.0)
RIG_ELEVATION = 30.0
HOLDOUT_VIEW = (60.0, 15.0)
RIG_DISTANCE = 3.5
RIG_FOV = 40.0
RESOLUTION = 128


def standard_rig(resolution=RESOLUTION, azimuth_offset=15.0):
    """Three training cameras 120 degrees apart plus one held-out camera."""
    kw = dict(distance=RIG_DISTANCE, width=resolution, height=resolution, fov_deg=RIG_FOV)
    cams = [Camera.orbit(a + azimuth_offset, RIG_ELEVATION, **kw) for a in RIG_AZIMUTHS]
    cams.append(Camera.orbit(HOLDOUT_VIEW[0] + azimuth_offset, HOLDOUT_VIEW[1], **kw))
    return cams


RED = (0.85, 0.25, 0.2)
GREEN = (0.25, 0.7, 0.3)
BLUE = (0.2, 0.35, 0.85)
WOOD = (0.7, 0.5, 0.3)
GRAY = (0.7, 0.7, 0.7)


def _catalog():
    x_axis = rotation_about([0, 1, 0], 90)
    legs = [Box(center=(sx * 0.52, sy * 0.32, -0.24), half=(0.08, 0.08, 0.42), color=WOOD)
            for sx in (-1, 1) for sy in (-1, 1)]
    return {
        "sphere": [Sphere(center=(0.0, 0.0, 0.0), radius=0.6, color=RED)],
        "box": [Box(center=(0.0, 0.0, 0.0), half=(0.55, 0.4, 0.3), color=BLUE)],
        "two-boxes-L": [
            Box(center=(0.0, 0.0, -0.35), half=(0.6, 0.3, 0.2), color=BLUE),
            Box(center=(-0.4, 0.0, 0.2), half=(0.2, 0.3, 0.35), color=GREEN),
        ],
        "table": [Box(center=(0.0, 0.0, 0.24), half=(0.65, 0.45, 0.06), color=WOOD)] + legs,
        "dumbbell": [
            Sphere(center=(-0.55, 0.0, 0.0), radius=0.33, color=RED),
            Sphere(center=(0.55, 0.0, 0.0), radius=0.33, color=RED),
            Cylinder(center=(0.0, 0.0, 0.0), rotation=x_axis, radius=0.14, half_height=0.55, color=GRAY),
        ],
        "bowl": [Bowl(center=(0.0, 0.0, 0.15), outer=0.7, inner=0.55, cut=0.1, color=GREEN)],
    }


CONVEX_SCENES = ("sphere", "box", "two-boxes-L", "table", "dumbbell")


def standard_scenes(resolution=RESOLUTION):
    """Pinned scene catalog, each with the standard camera rig (view 3 held out)."""
    out = {}
    for name, solids in _catalog().items():
        out[name] = AnalyticScene(name, solids, standard_rig(resolution), holdout=(3,),
                                  convex=name != "bowl")
    return out


def get_scene(name, resolution=RESOLUTION):
    scenes = standard_scenes(resolution)
    if name not in scenes:
        raise ValidationError(f"unknown scene {name!r}; catalog: {', '.join(sorted(scenes))}")
    return scenes[name]


def gt_mesh(scene: AnalyticScene, resolution=256):
    """Marching-cubes mesh of the scene's analytic implicit function over [-1, 1]^3."""
    from qcsg.extract import mesh_from_grid

    n = resolution
    ax = np.linspace(-1.0, 1.0, n)
    vals = np.empty((n, n, n))
    yy, zz = np.meshgrid(ax, ax, indexing="ij")
    for i, x in enumerate(ax):
        pts = np.stack([np.full(yy.size, x), yy.ravel(), zz.ravel()], axis=1)
        vals[i] = scene.implicit(pts).reshape(n, n)
    return mesh_from_grid(vals, 0.0, inside_below=True)
