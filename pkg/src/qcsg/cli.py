"""Command line: synth, fit, extract, eval, grad-check.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from qcsg.errors import NumericalError, QcsgError, ValidationError

log = logging.getLogger("qcsg")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 1, 2


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _save_png(path, arr):
    arr = np.clip(np.asarray(arr), 0.0, 1.0)
    Image.fromarray((arr * 255 + 0.5).astype(np.uint8)).save(path)


# ---------------------------------------------------------------- synth

def cmd_synth(args):
    from qcsg.dataset import save_dataset
    from qcsg.export import export_ply
    from qcsg.synthgen import get_scene, gt_mesh, render_gt_views

    scene = get_scene(args.scene, resolution=args.resolution)
    views = render_gt_views(scene)
    out = Path(args.out)
    save_dataset(views, out, views.meta)
    export_ply(gt_mesh(scene, args.gt_resolution), out / "gt.ply")
    print(f"wrote {len(views)} views and gt.ply to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- fit

def _fit_config(args):
    from qcsg.optim import FitConfig
    from qcsg.presets import default_config, synthetic_config

    cfg = FitConfig.load(args.config) if args.config else (
        synthetic_config() if args.preset == "synthetic" else default_config())
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.mask_only:
        kw["rgb"] = False
    if args.holdout is not None:
        kw["holdout_views"] = tuple(args.holdout)
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        import yaml
        kw[k] = yaml.safe_load(v)
    if kw:
        d = cfg.to_dict()
        d.update(kw)
        cfg = FitConfig.from_dict(d)
    return cfg


def cmd_fit(args):
    from qcsg.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
    from qcsg.dataset import load_dataset, validate_directory
    from qcsg.optim import render_view, run_fit

    problems = validate_directory(args.dataset)
    if problems:
        raise ValidationError("dataset failed validation:\n  " + "\n  ".join(problems))
    cfg = _fit_config(args)
    views = load_dataset(args.dataset)
    bad = [i for i in cfg.holdout_views if not 0 <= i < len(views)]
    if bad:
        raise ValidationError(f"held-out view indices {bad} out of range for {len(views)} views")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    preview_idx = next(i for i in range(len(views)) if i not in set(cfg.holdout_views))

    class PhaseWriter:
        def __call__(self, **kw):
            pass

        def phase_done(self, pc, bank, colors):
            ck = Checkpoint(bank.copy(), colors.copy(), phase=pc.phase, config_hash=cfg.hash(), seed=cfg.seed,
                            meta={"config": cfg.to_dict()})
            if pc.phase < 3:
                save_checkpoint(ck, out / f"phase{pc.phase}.dpa")
            if bank.active_convexes().any():
                img, mask = render_view(bank, colors, views[preview_idx].camera, phase=max(pc.phase, 2),
                                        samples=cfg.samples_per_ray, rgb=cfg.rgb)
                _save_png(out / f"preview_phase{pc.phase}.png", img if cfg.rgb else mask)

    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, report = run_fit(views, cfg, resume=resume, hooks=[PhaseWriter()])
    ckpt.meta["config"] = cfg.to_dict()
    save_checkpoint(ckpt, out / "assembly.dpa")
    rep = report.to_dict()
    rep["config"] = cfg.to_dict()
    _write_json(out / "report.json", rep)
    for r in report.views:
        tag = " (held out)" if r["heldout"] else ""
        print(f"view {r['view']}{tag}: PSNR {r['psnr']:.2f}  SSIM {r['ssim']:.4f}  IoU {r['iou']:.4f}")
    print(f"active primitives {report.active_primitives}, non-empty convexes {report.nonempty_convexes}")
    for w in report.warnings:
        print(f"warning: {w}")
    print(f"checkpoint: {out / 'assembly.dpa'}")
    return EXIT_OK


# ---------------------------------------------------------------- extract

def cmd_extract(args):
    from qcsg.assembly import Mode
    from qcsg.checkpoint import load_checkpoint
    from qcsg.export import export_obj, export_openscad, export_ply
    from qcsg.extract import extract_mesh, extract_parts
    from qcsg.optim import binarize_selection

    ckpt = load_checkpoint(args.checkpoint)
    bank = ckpt.bank if ckpt.bank.mode is Mode.BINARY else binarize_selection(ckpt.bank)
    out = Path(args.out)
    merged = extract_mesh(bank, args.resolution)
    export_obj(merged, out / "merged.obj")
    export_ply(merged, out / "merged.ply")
    parts = extract_parts(bank, args.resolution, colors=ckpt.colors)
    for p in parts.parts:
        export_obj([(f"part_{p.index:03d}", p.mesh, p.color)], out / "parts" / f"part_{p.index:03d}.obj")
    export_obj(parts, out / "parts.obj")
    if args.scad != "none":
        name = "boxes.scad" if args.scad == "fitted-box" else "assembly.scad"
        export_openscad(parts, out / name, mode=args.scad)
    print(f"merged mesh: {len(merged.vertices)} vertices, {len(merged.faces)} faces; {parts.count} parts -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args):
    from qcsg.assembly import Mode
    from qcsg.checkpoint import load_checkpoint
    from qcsg.dataset import load_dataset, validate_directory
    from qcsg.export import read_ply
    from qcsg.extract import extract_mesh, extract_parts
    from qcsg.metrics import EvalReport, image_metrics, mesh_metrics
    from qcsg.optim import binarize_selection, render_view

    ckpt = load_checkpoint(args.checkpoint)
    problems = validate_directory(args.dataset)
    if problems:
        raise ValidationError("dataset failed validation:\n  " + "\n  ".join(problems))
    views = load_dataset(args.dataset)
    cfg = ckpt.meta.get("config", {})
    held = list(args.views) if args.views is not None else list(cfg.get("holdout_views", [])) or list(range(len(views)))
    rgb = bool(cfg.get("rgb", True))
    samples = int(cfg.get("samples_per_ray", 96))
    rep = EvalReport(seed=args.seed, config_hash=ckpt.config_hash)
    for i in held:
        if not 0 <= i < len(views):
            raise ValidationError(f"view index {i} out of range for {len(views)} views")
        v = views[i]
        img, mask = render_view(ckpt.bank, ckpt.colors, v.camera, samples=samples, rgb=rgb)
        p, s, iou = image_metrics(img, v.image, mask, v.mask)
        rep.views.append(v.name or f"{i:03d}")
        rep.psnr.append(p)
        rep.ssim.append(s)
        rep.mask_iou.append(iou)
    bank = ckpt.bank if ckpt.bank.mode is Mode.BINARY else binarize_selection(ckpt.bank)
    rep.parts = extract_parts(bank, args.resolution).count if bank.active_convexes().any() else 0
    gt_path = Path(args.gt) if args.gt else Path(args.dataset) / "gt.ply"
    if gt_path.exists():
        mesh = extract_mesh(bank, args.resolution)
        if mesh.is_empty:
            rep.notes.append("fitted shape is empty; mesh metrics omitted")
        else:
            rep.cd, rep.ecd, rep.ecd_status, rep.nc = mesh_metrics(mesh, read_ply(gt_path), seed=args.seed)
    else:
        rep.notes.append(f"no ground-truth mesh at {gt_path}; CD/ECD/NC omitted")
    print(rep.table())
    for n in rep.notes:
        print(f"note: {n}")
    if args.json:
        Path(args.json).write_text(rep.to_json() + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- grad-check

def cmd_gradcheck(args):
    from qcsg import grad as G
    from qcsg.gradcheck import run_suite

    sizes = {}
    for k in ("P", "C", "views", "size", "rays_per_view", "samples", "probes"):
        v = getattr(args, k)
        if v is not None:
            sizes[k] = v
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    if args.corrupt:
        if args.corrupt not in G.NODES:
            raise ValidationError(f"unknown node {args.corrupt!r}; nodes: {', '.join(sorted(G.NODES))}")
        with G.corrupt_adjoint(args.corrupt):
            results = run_suite(seeds, n_coords=args.coords, **sizes)
    else:
        results = run_suite(seeds, n_coords=args.coords, **sizes)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        names = ", ".join(r.name for r in failed)
        raise NumericalError(f"gradient check failed: {names}", node=args.corrupt or failed[0].name)
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser():
    ap = argparse.ArgumentParser(prog="qcsg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a catalog scene to a dataset directory")
    p.add_argument("scene")
    p.add_argument("out")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--gt-resolution", type=int, default=256)
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; synthesis is deterministic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit an assembly to a dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="YAML fit configuration")
    p.add_argument("--preset", choices=("default", "synthetic"), default="default")
    p.add_argument("--mask-only", action="store_true", help="drop the color term")
    p.add_argument("--holdout", type=int, nargs="*", help="view indices excluded from fitting")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to resume from (e.g. phase2.dpa)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("extract", help="mesh a checkpoint and export OBJ/PLY/SCAD")
    p.add_argument("checkpoint")
    p.add_argument("out")
    p.add_argument("--resolution", type=int, default=128,
                   help="grid resolution (64 previews faster, coarser surface)")
    p.add_argument("--scad", choices=("none", "polyhedron", "fitted-box"), default="none")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--gt", help="ground-truth mesh (default: DATASET/gt.ply)")
    p.add_argument("--views", type=int, nargs="*", help="views to render (default: held-out views)")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", help="write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds")
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--corrupt", help="scale one node's adjoint (negative test)")
    for k in ("P", "C", "views", "size", "rays_per_view", "samples", "probes"):
        p.add_argument(f"--{k.replace('_', '-')}", dest=k, type=int)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, QcsgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
