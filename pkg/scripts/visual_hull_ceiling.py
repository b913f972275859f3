"""Held-out mask IoU and CD of the visual hull carved from the training masks.

Any shape that reproduces the training silhouettes exactly lies inside the
visual hull; this prints how well the hull itself explains the held-out view,
as a reference point for the fitted assemblies.

usage: python scripts/visual_hull_ceiling.py [SCENE ...] [--samples 400]
"""

import argparse

import numpy as np

from qcsg.extract import grid_points, mesh_from_grid
from qcsg.metrics import chamfer, mask_iou
from qcsg.render import all_pixels, generate_rays, sample_along_rays
from qcsg.synthgen import CONVEX_SCENES, get_scene, gt_mesh, render_gt_views


def project(cam, pts):
    R, t = cam.world_to_camera[:3, :3], cam.world_to_camera[:3, 3]
    pc = pts @ R.T + t
    u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
    v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
    return np.rint(u).astype(int), np.rint(v).astype(int)


def in_hull(views, pts, indices):
    ok = np.ones(len(pts), bool)
    for i in indices:
        view = views[i]
        u, v = project(view.camera, pts)
        H, W = view.mask.shape
        inb = (u >= 0) & (u < W) & (v >= 0) & (v < H)
        hit = np.zeros(len(pts), bool)
        hit[inb] = view.mask[v[inb], u[inb]]
        ok &= hit
    return ok


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("scenes", nargs="*", default=list(CONVEX_SCENES))
    ap.add_argument("--samples", type=int, default=400)
    ap.add_argument("--grid", type=int, default=128)
    args = ap.parse_args()
    for name in args.scenes:
        scene = get_scene(name)
        views = render_gt_views(scene)
        train = [i for i in range(len(views)) if i not in scene.holdout]
        for h in scene.holdout:
            cam = views[h].camera
            pts, _ = sample_along_rays(generate_rays(cam, all_pixels(cam.width, cam.height)), args.samples)
            occ = in_hull(views, pts.reshape(-1, 3), train).reshape(pts.shape[:2]).any(axis=1)
            iou = mask_iou(occ.reshape(cam.height, cam.width).astype(float), views[h].mask)
        P, _ = grid_points(args.grid)
        vals = np.where(in_hull(views, P, train), -1.0, 1.0).reshape((args.grid,) * 3)
        cd = chamfer(mesh_from_grid(vals, 0.0), gt_mesh(scene, 128))
        print(f"{name:12s} visual-hull held-out IoU {iou:.3f}  CD x1000 {cd:.2f}")


if __name__ == "__main__":
    main()
