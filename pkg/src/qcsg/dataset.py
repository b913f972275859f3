"""Posed-image datasets on disk and in memory.

Directory layout::

    images/000.png  masks/000.png  ...  cameras.json  [meta.json]

``cameras.json`` is a list with one object per view (fx, fy, cx, cy,
world_to_camera as 16 row-major numbers, width, height). If ``meta.json``
carries ``bbox_min``/``bbox_max`` the scene is mapped into [-1, 1]^3 at load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from qcsg.errors import ValidationError
from qcsg.render import Camera


@dataclass
class View:
    image: np.ndarray  # H x W x 3 in [0, 1], background zeroed
    mask: np.ndarray  # H x W bool
    camera: Camera
    name: str = ""


@dataclass
class ViewSet:
    views: list
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.views)

    def __getitem__(self, i):
        return self.views[i]

    def subset(self, indices):
        return ViewSet([self.views[i] for i in indices], dict(self.meta))


def _view_name(i):
    return f"{i:03d}"


def validate_directory(root) -> list:
    """All problems with a dataset directory, empty when valid."""
    root = Path(root)
    problems = []
    cam_path = root / "cameras.json"
    if not root.is_dir():
        return [f"{root}: not a directory"]
    if not cam_path.exists():
        return [f"{cam_path}: missing cameras.json"]
    try:
        cams = json.loads(cam_path.read_text())
    except json.JSONDecodeError as exc:
        return [f"{cam_path}: invalid JSON ({exc})"]
    if not isinstance(cams, list) or not cams:
        return [f"{cam_path}: expected a non-empty list of cameras"]
    images = sorted((root / "images").glob("*.png"))
    masks = sorted((root / "masks").glob("*.png"))
    if len(images) != len(cams) or len(masks) != len(cams):
        problems.append(f"count mismatch: {len(images)} images, {len(masks)} masks, {len(cams)} cameras")
    for i, cam in enumerate(cams):
        name = cam.get("name", _view_name(i))
        img_p = root / "images" / f"{name}.png"
        mask_p = root / "masks" / f"{name}.png"
        if not img_p.exists():
            problems.append(f"view {name}: missing image {img_p}")
        if not mask_p.exists():
            problems.append(f"view {name}: missing mask {mask_p}")
        try:
            c = Camera.from_dict(cam)
        except (KeyError, ValueError, TypeError) as exc:
            problems.append(f"view {name}: bad camera ({exc})")
            continue
        if img_p.exists() and mask_p.exists():
            with Image.open(img_p) as im, Image.open(mask_p) as mk:
                if im.size != mk.size:
                    problems.append(f"view {name}: mask size {mk.size} != image size {im.size}")
                if im.size != (c.width, c.height):
                    problems.append(f"view {name}: image size {im.size} != camera raster {(c.width, c.height)}")
    return problems


def _normalizer(meta):
    if "bbox_min" not in meta or "bbox_max" not in meta:
        return None
    lo = np.asarray(meta["bbox_min"], dtype=np.float64)
    hi = np.asarray(meta["bbox_max"], dtype=np.float64)
    center = (lo + hi) / 2
    scale = float(np.max(hi - lo) / 2)
    if not scale > 0:
        raise ValidationError("degenerate bounding box in meta.json")
    return center, scale


def normalize_camera(camera: Camera, center, scale) -> Camera:
    """Re-express a world camera for points x_n with x = center + scale * x_n."""
    M = camera.world_to_camera.copy()
    R, t = M[:3, :3], M[:3, 3]
    M[:3, 3] = (R @ center + t) / scale
    return Camera(camera.fx, camera.fy, camera.cx, camera.cy, M, camera.width, camera.height)


def load_dataset(root) -> ViewSet:
    root = Path(root)
    problems = validate_directory(root)
    if problems:
        raise ValidationError("invalid dataset:\n  " + "\n  ".join(problems))
    cams = json.loads((root / "cameras.json").read_text())
    meta_p = root / "meta.json"
    meta = json.loads(meta_p.read_text()) if meta_p.exists() else {}
    norm = _normalizer(meta)
    views = []
    for i, cam in enumerate(cams):
        name = cam.get("name", _view_name(i))
        camera = Camera.from_dict(cam)
        if norm is not None:
            camera = normalize_camera(camera, *norm)
        with Image.open(root / "images" / f"{name}.png") as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        with Image.open(root / "masks" / f"{name}.png") as mk:
            mask = np.asarray(mk.convert("L")) >= 128
        image = image * mask[..., None]
        views.append(View(image, mask, camera, name))
    return ViewSet(views, meta)


def save_dataset(views: ViewSet, root, meta=None):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    cams = []
    for i, v in enumerate(views.views):
        name = v.name or _view_name(i)
        rgb = np.clip(np.rint(np.asarray(v.image) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, "RGB").save(root / "images" / f"{name}.png")
        Image.fromarray(np.where(v.mask, 255, 0).astype(np.uint8), "L").save(root / "masks" / f"{name}.png")
        d = v.camera.to_dict()
        d["name"] = name
        cams.append(d)
    (root / "cameras.json").write_text(json.dumps(cams, indent=1))
    meta = dict(views.meta if meta is None else meta)
    if meta:
        (root / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return root
