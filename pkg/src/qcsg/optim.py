"""Losses, Adam, the three-phase fitting schedule, binarization and dropout."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
import yaml

from qcsg import grad as G
from qcsg.assembly import Mode, PrimitiveBank, occupancy
from qcsg.errors import NumericalError, ValidationError
from qcsg.render import generate_rays, sample_along_rays, sample_pixels

log = logging.getLogger(__name__)

BINARIZE_THRESHOLD = 0.01
INSIDE_THRESHOLD = 0.01  # membership in the overlap set
DROPOUT_INSIDE = 0.1  # inside test used by the shape-variation measure
PROBE_COUNT = 40960


# ---------------------------------------------------------------- losses

def loss_photo(colors, masks, gt_colors, gt_masks):
    """Mean squared color error plus mean squared mask error; colors may be None."""
    masks = np.asarray(masks, dtype=np.float64)
    return float(G.photo_fwd(None if colors is None else np.asarray(colors, dtype=np.float64),
                             masks, None if colors is None else np.asarray(gt_colors, dtype=np.float64),
                             np.asarray(gt_masks, dtype=np.float64)))


def loss_T(T):
    return G.loss_T_fwd(np.asarray(T, dtype=np.float64))


def loss_w(w):
    return G.loss_w_fwd(np.asarray(w, dtype=np.float64))


def loss_overlap(bank: PrimitiveBank, inside_points):
    """Mean of max(h, 1.9) over the points that are inside the current shape."""
    pts = np.asarray(inside_points, dtype=np.float64)
    active = bank.active_convexes()
    if len(pts) == 0:
        log.warning("overlap loss on an empty point set; the shape has vanished")
        return 0.0
    from qcsg.assembly import convex_fields

    O = convex_fields(bank, pts)
    a_star = np.where(active, O, np.inf).min(axis=1)
    inside = a_star < INSIDE_THRESHOLD
    if not inside.any():
        log.warning("no probe point is inside the shape; overlap loss is 0")
        return 0.0
    return G.overlap_fwd(O[inside], active)[0]


# ---------------------------------------------------------------- Adam

class Adam:
    """Adam with bias correction over a dict of named arrays."""

    def __init__(self, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, lr_overrides=None):
        self.lr = lr
        self.lr_overrides = dict(lr_overrides or {})
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, variables: dict, grads: dict, trainable=None):
        trainable = set(variables) if trainable is None else set(trainable)
        for name in trainable:
            if not np.all(np.isfinite(grads[name])):
                raise NumericalError("non-finite gradient; step rejected", node=name)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, x in variables.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if name not in self.m:
                self.m[name] = np.zeros_like(x)
                self.v[name] = np.zeros_like(x)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if name in trainable:
                lr = self.lr_overrides.get(name, self.lr)
                x -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return variables


def adam_step(variables, gradients, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, state=None, trainable=None):
    """Functional form: one update using (and advancing) ``state``, an ``Adam``."""
    state = state or Adam(lr, betas, eps)
    state.step(variables, gradients, trainable)
    return variables, state


# ---------------------------------------------------------------- selection ops

def binarize_selection(bank: PrimitiveBank, threshold=BINARIZE_THRESHOLD) -> PrimitiveBank:
    if bank.mode is Mode.BINARY:
        raise ValidationError("selection is already binary")
    T = (bank.selection > threshold).astype(np.float64)
    if not T.any():
        raise ValidationError(f"binarization at {threshold} leaves no active convex")
    return PrimitiveBank(bank.params.copy(), T, bank.weights.copy(), Mode.BINARY)


def shape_bbox(bank: PrimitiveBank, resolution=48, iso=INSIDE_THRESHOLD):
    """Axis-aligned bounds of the grid samples inside the shape, or None."""
    ax = np.linspace(-1, 1, resolution)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    if not bank.active_convexes().any():
        return None
    inside = occupancy(bank, pts) < iso
    if not inside.any():
        return None
    half = 1.0 / (resolution - 1)
    return pts[inside].min(axis=0) - half, pts[inside].max(axis=0) + half


def sample_probe_points(bank: PrimitiveBank, count=PROBE_COUNT, rng=None, margin=0.1):
    """Uniform samples in the shape's bounding box dilated by ``margin``."""
    rng = np.random.default_rng(rng)
    box = shape_bbox(bank)
    if box is None:
        lo, hi = np.full(3, -1.0), np.full(3, 1.0)
    else:
        lo, hi = box[0] - margin, box[1] + margin
    return rng.uniform(lo, hi, size=(count, 3))


@dataclass
class DropoutResult:
    bank: PrimitiveBank
    dropped: list
    variations: dict


def primitive_dropout(bank: PrimitiveBank, probe_points, v_threshold=0.002, inside=DROPOUT_INSIDE):
    """Greedy row-by-row removal of primitives that barely change the shape.

    Rows are tried in index order against the progressively updated bank; a
    zeroed row stays zeroed when the fraction of probe points whose inside
    state flips is at most ``v_threshold``.
    """
    if bank.mode is not Mode.BINARY:
        raise ValidationError("dropout requires a binary selection matrix")
    out = bank.copy()
    pts = np.asarray(probe_points, dtype=np.float64)
    from qcsg.assembly import lift_points

    eff = out.effective_params()
    Rl = np.maximum(lift_points(pts).q_rows @ eff.T, 0.0)
    T = out.selection
    O = Rl @ T

    def hard(O_, T_):
        act = np.any(T_ != 0, axis=0)
        if not act.any():
            return np.full(len(O_), np.inf)
        return O_[:, act].min(axis=1)

    ref_inside = hard(O, T) < inside
    dropped, variations = [], {}
    for p in range(out.primitive_count):
        cols = np.flatnonzero(T[p])
        if not len(cols):
            continue
        O_new = O.copy()
        O_new[:, cols] -= Rl[:, p:p + 1] * T[p, cols]
        T_new = T.copy()
        T_new[p] = 0.0
        new_inside = hard(O_new, T_new) < inside
        v = float(np.mean(new_inside != ref_inside))
        variations[p] = v
        if v <= v_threshold:
            T, O, ref_inside = T_new, O_new, new_inside
            dropped.append(p)
    out.selection = T
    return DropoutResult(out, dropped, variations)


# ---------------------------------------------------------------- configuration

@dataclass
class FitConfig:
    primitive_count: int = 4096
    convex_count: int = 256
    init: str = "gaussian"  # or "blocks"
    init_radius: float = 0.2
    init_spread: float = 0.6
    init_slope: float = 3.0
    init_sigma: float = 0.1
    init_g_shift: float = -0.2
    init_selection_high: float = 0.05
    phase_iters: tuple = (3000, 2000, 2000)
    lr: float = 1e-4
    lr_selection: float | None = None
    lr_quadratic: float | None = None  # step size for the |a|, |b|, |c| columns
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    n_random: int = 256
    n_contour: int = 1000
    contour_sigma: float = 2.0
    samples_per_ray: int = 96
    dropout_period: int = 400
    v_threshold: float = 0.002
    probe_count: int = PROBE_COUNT
    overlap_batch: int = PROBE_COUNT
    binarize_threshold: float = BINARIZE_THRESHOLD
    rgb: bool = True
    use_overlap: bool = True
    use_dropout: bool = True
    view_order: str = "random"  # or "round-robin"
    holdout_views: tuple = ()
    seed: int = 0
    dtype: str = "float64"
    eval_resolution: int = 64
    log_every: int = 100

    def __post_init__(self):
        self.phase_iters = tuple(int(x) for x in self.phase_iters)
        self.betas = tuple(float(x) for x in self.betas)
        self.holdout_views = tuple(int(x) for x in self.holdout_views)
        if len(self.phase_iters) != 3:
            raise ValidationError("phase_iters needs three entries")
        if self.view_order not in ("random", "round-robin"):
            raise ValidationError(f"unknown view_order {self.view_order!r}")
        if self.init not in ("blocks", "gaussian"):
            raise ValidationError(f"unknown init {self.init!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: config must be a mapping")
        return cls.from_dict(data)

    def dump(self, path):
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=True)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class PhaseConfig:
    phase: int
    occupancy: str
    opacity: str
    terms: tuple
    trainable: frozenset
    iterations: int
    dropout_period: int = 0

    def graph_spec(self, rgb):
        return G.GraphSpec(self.phase, rgb=rgb, terms=self.terms, trainable=self.trainable)


def phase_configs(cfg: FitConfig):
    """The three phases: soft union, hard union, then binary T with overlap and dropout."""
    color = {"colors"} if cfg.rgb else set()
    over = ("overlap",) if cfg.use_overlap else ()
    return [
        PhaseConfig(1, "a_plus", "a_plus", ("photo", "loss_T", "loss_w"),
                    frozenset({"params", "selection", "weights"} | color), cfg.phase_iters[0]),
        PhaseConfig(2, "a_star", "exp(-10*a_star)", ("photo", "loss_T"),
                    frozenset({"params", "selection"} | color), cfg.phase_iters[1]),
        PhaseConfig(3, "a_star", "exp(-10*a_star)", ("photo",) + over,
                    frozenset({"params"} | color), cfg.phase_iters[2],
                    cfg.dropout_period if cfg.use_dropout else 0),
    ]


# ---------------------------------------------------------------- fitting

@dataclass
class FitReport:
    losses: dict = field(default_factory=dict)  # phase -> list of totals
    terms: dict = field(default_factory=dict)  # phase -> {term: list}
    active_primitives: int = 0
    nonempty_convexes: int = 0
    primitives_before_dropout: int = 0
    dropout_events: list = field(default_factory=list)
    wall_clock: dict = field(default_factory=dict)
    views: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    config_hash: str = ""
    seed: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


def _as_state(bank, colors, dtype):
    return {"params": bank.params, "selection": bank.selection, "weights": bank.weights, "colors": colors}


def render_view(bank: PrimitiveBank, colors, camera, phase=3, samples=96, rgb=True, chunk=2048, dtype=np.float64):
    """Deterministic (bin-midpoint) render of a whole view: (H x W x 3, H x W)."""
    from qcsg.render import all_pixels

    H, W = camera.height, camera.width
    if not bank.active_convexes().any():
        return np.zeros((H, W, 3)), np.zeros((H, W))
    spec = G.GraphSpec(phase, rgb=rgb, terms=("photo",), trainable=frozenset())
    pix = all_pixels(camera.width, camera.height)
    bundle = generate_rays(camera, pix)
    n = len(pix)
    out_c = np.zeros((n, 3))
    out_m = np.zeros(n)
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        sub = type(bundle)(bundle.origins[sl], bundle.directions[sl], bundle.near[sl], bundle.far[sl], bundle.hit[sl])
        pts, _ = sample_along_rays(sub, samples, stratified=False)
        g = G.LossGraph(spec, dtype=dtype)
        m = np.zeros(len(pts))
        g.forward(bank, colors, pts, m, np.zeros((len(pts), 3)) if rgb else None)
        c, mk = g.rendered
        out_m[sl] = mk
        if rgb:
            out_c[sl] = c
    return out_c.reshape(H, W, 3), out_m.reshape(H, W)


class Fitter:
    """Runs the phase schedule on one ViewSet; hooks see every step."""

    def __init__(self, views, cfg: FitConfig, hooks=None):
        if len(views) == 0:
            raise ValidationError("need at least one view")
        self.views = views
        self.cfg = cfg
        self.hooks = list(hooks or [])
        train = [i for i in range(len(views)) if i not in set(cfg.holdout_views)]
        if not train:
            raise ValidationError("every view is held out; nothing to fit")
        for i in train:
            if not views[i].mask.any():
                raise ValidationError(f"view {views[i].name or i} has an empty mask")
        self.train_idx = train
        self.rng = np.random.default_rng(cfg.seed)
        self.dtype = np.float32 if cfg.dtype == "float32" else np.float64
        self.report = FitReport(config_hash=cfg.hash(), seed=cfg.seed)
        if len(train) < 2:
            self.report.warnings.append("under-constrained fit: fewer than two training views")
        self.probes = None

    def initial_state(self):
        c = self.cfg
        if c.init == "blocks":
            bank = PrimitiveBank.initialize_blocks(c.primitive_count, c.convex_count, seed=c.seed,
                                                   radius=c.init_radius, spread=c.init_spread,
                                                   slope=c.init_slope)
        else:
            bank = PrimitiveBank.initialize(c.primitive_count, c.convex_count, seed=c.seed,
                                            param_sigma=c.init_sigma, g_shift=c.init_g_shift,
                                            selection_high=c.init_selection_high)
        colors = np.full((c.convex_count, 3), 0.5)
        return bank, colors

    def _batch(self, step):
        c = self.cfg
        if c.view_order == "round-robin":
            vi = self.train_idx[step % len(self.train_idx)]
        else:
            vi = self.train_idx[self.rng.integers(len(self.train_idx))]
        view = self.views[vi]
        pix = sample_pixels(view.mask, c.n_random, c.n_contour, c.contour_sigma, rng=self.rng,
                            image=view.image)
        rays = generate_rays(view.camera, pix)
        pts, _ = sample_along_rays(rays, c.samples_per_ray, stratified=True, rng=self.rng)
        return pts.astype(self.dtype), pix.masks, pix.colors

    def _overlap_points(self, bank):
        if self.probes is None:
            return None
        c = self.cfg
        pts = self.probes
        if not bank.active_convexes().any():
            return pts[:0].astype(self.dtype)
        if c.overlap_batch < len(pts):
            pts = pts[self.rng.choice(len(pts), c.overlap_batch, replace=False)]
        inside = occupancy(bank, pts, dtype=self.dtype) < INSIDE_THRESHOLD
        return pts[inside].astype(self.dtype)

    def _lr_overrides(self):
        c = self.cfg
        out = {}
        if c.lr_selection is not None:
            out["selection"] = c.lr_selection
        if c.lr_quadratic is not None:
            row = np.full(7, c.lr)
            row[:3] = c.lr_quadratic
            out["params"] = row
        return out

    def run_phase(self, pc: PhaseConfig, bank, colors):
        c = self.cfg
        spec = pc.graph_spec(c.rgb)
        opt = Adam(c.lr, c.betas, c.eps, self._lr_overrides())
        curve, term_curves = [], {}
        t0 = time.perf_counter()
        state = _as_state(bank, colors, self.dtype)
        for step in range(pc.iterations):
            pts, gm, gc = self._batch(step)
            probe = self._overlap_points(bank) if "overlap" in pc.terms else None
            graph = G.LossGraph(spec, dtype=self.dtype)
            total = graph.forward(bank, colors, pts, gm, gc, probe)
            bundle = graph.backward()
            grads = {k: bundle.get(k) for k in G.VARIABLES}
            opt.step(state, grads, pc.trainable)
            np.clip(colors, 0.0, 1.0, out=colors)
            curve.append(total)
            for k, v in graph.losses.items():
                term_curves.setdefault(k, []).append(float(v))
            for hook in self.hooks:
                hook(phase=pc, step=step, graph=graph, bundle=bundle, bank=bank, colors=colors)
            if pc.dropout_period and (step + 1) % pc.dropout_period == 0:
                bank = self._dropout(bank, step)
                state["selection"] = bank.selection
            if c.log_every and step % c.log_every == 0:
                log.info("phase %d step %d loss %.5f", pc.phase, step, total)
        self.report.losses[pc.phase] = curve
        self.report.terms[pc.phase] = term_curves
        self.report.wall_clock[pc.phase] = time.perf_counter() - t0
        return bank, colors

    def _dropout(self, bank, step):
        probes = sample_probe_points(bank, self.cfg.probe_count, rng=self.rng)
        before = int(bank.active_primitives().sum())
        res = primitive_dropout(bank, probes, self.cfg.v_threshold)
        after = int(res.bank.active_primitives().sum())
        accepted = [res.variations[p] for p in res.dropped]
        assert all(v <= self.cfg.v_threshold for v in accepted)
        self.report.dropout_events.append({"step": step, "before": before, "after": after})
        for hook in self.hooks:
            if hasattr(hook, "dropout_done"):
                hook.dropout_done(step, bank, res.bank)
        # in-place so the optimizer state keeps pointing at the same arrays
        bank.selection[...] = res.bank.selection
        return bank

    def fit(self, bank=None, colors=None, start_phase=1):
        if bank is None:
            bank, colors = self.initial_state()
        bank = bank.copy()
        colors = np.array(colors, dtype=np.float64)
        phases = phase_configs(self.cfg)
        for pc in phases:
            if pc.phase < start_phase:
                continue
            if pc.phase == 3:
                if bank.mode is Mode.FLOAT:
                    bank = binarize_selection(bank, self.cfg.binarize_threshold)
                if not bank.active_convexes().any():
                    msg = "shape collapsed: no convex survives binarization; phase 3 skipped"
                    log.warning(msg)
                    self.report.warnings.append(msg)
                    self.completed_phase = 3
                    self.last_bank, self.last_colors = bank, colors
                    break
                self.probes = sample_probe_points(bank, self.cfg.probe_count, rng=self.rng)
                self.report.primitives_before_dropout = int(bank.active_primitives().sum())
            bank, colors = self.run_phase(pc, bank, colors)
            self.completed_phase = pc.phase
            self.last_bank, self.last_colors = bank, colors
            for hook in self.hooks:
                if hasattr(hook, "phase_done"):
                    hook.phase_done(pc, bank, colors)
        self.report.active_primitives = int(bank.active_primitives().sum())
        return bank, colors


def evaluate_views(bank, colors, views, rgb=True, samples=96, dtype=np.float64):
    """Per-view (name, PSNR, SSIM, IoU) of full renders against the dataset."""
    from qcsg.metrics import image_metrics

    rows = []
    for i, v in enumerate(views):
        img, mask = render_view(bank, colors, v.camera, phase=3, samples=samples, rgb=rgb, dtype=dtype)
        p, s, iou = image_metrics(img, v.image, mask, v.mask)
        rows.append({"view": v.name or f"{i:03d}", "index": i, "psnr": p, "ssim": s, "iou": iou})
    return rows


def run_fit(views, cfg: FitConfig, resume=None, hooks=None):
    """Fit ``views`` from the initial state or from a checkpoint.

    A checkpoint that finished phase k resumes at phase k + 1. Returns
    (Checkpoint, FitReport); the report lists per-view metrics with held-out
    views flagged.
    """
    from qcsg.checkpoint import Checkpoint
    from qcsg.extract import nonempty_convex_count

    fitter = Fitter(views, cfg, hooks)
    if resume is not None:
        if resume.phase >= 3:
            raise ValidationError("checkpoint already finished phase 3; nothing to resume")
        if resume.config_hash and resume.config_hash != cfg.hash():
            fitter.report.warnings.append(
                f"resuming from a checkpoint made with config {resume.config_hash}, current {cfg.hash()}")
        bank, colors = fitter.fit(resume.bank, resume.colors, start_phase=resume.phase + 1)
    else:
        bank, colors = fitter.fit()
    rep = fitter.report
    rep.nonempty_convexes = nonempty_convex_count(bank)
    held = set(cfg.holdout_views)
    rows = evaluate_views(bank, colors, views, rgb=cfg.rgb, samples=cfg.samples_per_ray, dtype=fitter.dtype)
    for r in rows:
        r["heldout"] = r["index"] in held
    rep.views = rows
    ckpt = Checkpoint(bank, colors, phase=3, config_hash=cfg.hash(), seed=cfg.seed,
                      meta={"active_primitives": rep.active_primitives,
                            "nonempty_convexes": rep.nonempty_convexes})
    return ckpt, rep
