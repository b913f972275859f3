"""Finite-difference validation of the hand-written adjoints.

Two levels: ``check_nodes`` tests every registered (forward, vjp) pair with a
random directional derivative, so a broken adjoint is reported by node name;
``check_end_to_end`` compares full-loss gradients coordinate by coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from qcsg import grad as G
from qcsg.assembly import Mode, PrimitiveBank
from qcsg.render import Camera, all_pixels, generate_rays, sample_along_rays

ABS_TOL = 1e-5
REL_TOL = 1e-4
FD_EPS = 1e-6
KINK_RADIUS = 1e-4


@dataclass
class CheckResult:
    name: str
    checked: int
    skipped: int
    max_abs_err: float
    max_rel_err: float
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} checked={self.checked:<4d} skipped={self.skipped:<4d} "
                f"max_abs={self.max_abs_err:.2e} max_rel={self.max_rel_err:.2e}")


def _within(analytic, numeric):
    err = abs(analytic - numeric)
    return err <= max(ABS_TOL, REL_TOL * abs(numeric)), err


# ---------------------------------------------------------------- node level

def _node_cases(rng):
    """(name, inputs, which-input-indices-are-differentiable, forward, vjp->grads)"""
    n, p, c, b, r = 9, 6, 4, 5, 7
    params = rng.normal(0, 0.7, (p, 7))
    Q = rng.normal(0, 1, (n, 7))
    D = rng.normal(0, 1, (n, p))
    Rl = np.abs(rng.normal(0, 1, (n, p)))
    T = rng.uniform(0, 1, (p, c))
    O = rng.uniform(0, 1.4, (n, c))
    w = rng.uniform(0.1, 0.4, c)
    active = np.array([True, True, False, True])
    alpha = rng.uniform(0.05, 0.95, (b, r))
    rgb = rng.uniform(0, 1, (b, r, 3))
    colors = rng.uniform(0, 1, (c, 3))
    color = rng.uniform(0, 1, (b, 3))
    mask = rng.uniform(0, 1, b)
    gt_c = rng.uniform(0, 1, (b, 3))
    gt_m = rng.uniform(0, 1, b)
    Tr = rng.uniform(-0.5, 1.5, (p, c))
    wr = rng.uniform(0.5, 1.5, c)
    Oo = rng.uniform(0, 0.1, (n, c))

    def soft(O_, w_):
        return G.union_soft_fwd(O_, w_)[0]

    def soft_vjp(O_, w_, g):
        out, S, u = G.union_soft_fwd(O_, w_)
        return G._vjp("union_soft", O_, w_, S, u, g)

    def hard(O_):
        return G.union_hard_fwd(O_, active)[0]

    def hard_vjp(O_, g):
        _, idx = G.union_hard_fwd(O_, active)
        return (G._vjp("union_hard", O_, idx, g),)

    def col(O_, colors_):
        return G.color_fwd(O_, colors_, active)[0]

    def col_vjp(O_, colors_, g):
        _, s = G.color_fwd(O_, colors_, active)
        return G._vjp("color", s, colors_, g)

    def comp(alpha_, rgb_):
        c_, m_, _, _ = G.composite_fwd(alpha_, rgb_)
        return np.concatenate([c_.ravel(), m_.ravel()])

    def comp_vjp(alpha_, rgb_, g):
        c_, m_, t, wts = G.composite_fwd(alpha_, rgb_)
        return G._vjp("composite", alpha_, rgb_, t, wts, g[: c_.size].reshape(c_.shape), g[c_.size:])

    def over(O_):
        return G.overlap_fwd(O_, active)[0]

    def over_vjp(O_, g):
        _, h, E = G.overlap_fwd(O_, active)
        return (G._vjp("overlap", h, E, g),)

    return [
        ("abs_params", [params], G.abs_params_fwd, lambda x, g: (G._vjp("abs_params", x, g),)),
        ("distance", [Q, params], G.distance_fwd,
         lambda q, e, g: (None, G._vjp("distance", q, g))),
        ("relu", [D], G.relu_fwd, lambda d, g: (G._vjp("relu", d, g),)),
        ("intersect", [Rl, T], G.intersect_fwd, lambda r_, t_, g: G._vjp("intersect", r_, t_, g)),
        ("union_soft", [O, w], soft, soft_vjp),
        ("union_hard", [O], hard, hard_vjp),
        ("exp_opacity", [O[:, 0]], G.exp_opacity_fwd,
         lambda a, g: (G._vjp("exp_opacity", G.exp_opacity_fwd(a), g),)),
        ("color", [O, colors], col, col_vjp),
        ("composite", [alpha, rgb], comp, comp_vjp),
        ("photo", [color, mask], lambda c_, m_: G.photo_fwd(c_, m_, gt_c, gt_m),
         lambda c_, m_, g: G._vjp("photo", c_, m_, gt_c, gt_m, g)),
        ("loss_T", [Tr], G.loss_T_fwd, lambda t_, g: (G._vjp("loss_T", t_, g),)),
        ("loss_w", [wr], G.loss_w_fwd, lambda w_, g: (G._vjp("loss_w", w_, g),)),
        ("overlap", [Oo], over, over_vjp),
    ]


def check_nodes(seed=0, trials=3):
    """Directional-derivative test of every node's vjp."""
    results = []
    for name, inputs, fwd, vjp in _node_cases(np.random.default_rng(seed)):
        rng = np.random.default_rng([seed, len(name)])
        worst_abs, worst_rel, ok = 0.0, 0.0, True
        for _ in range(trials):
            y = np.asarray(fwd(*inputs))
            g = rng.normal(size=y.shape) if y.ndim else np.float64(rng.normal())
            grads = vjp(*inputs, g)
            for k, x in enumerate(inputs):
                if grads[k] is None:
                    continue
                delta = rng.normal(size=x.shape)
                args_p = list(inputs)
                args_m = list(inputs)
                args_p[k] = x + FD_EPS * delta
                args_m[k] = x - FD_EPS * delta
                fd = np.sum(g * (np.asarray(fwd(*args_p)) - np.asarray(fwd(*args_m)))) / (2 * FD_EPS)
                an = float(np.sum(grads[k] * delta))
                good, err = _within(an, fd)
                worst_abs = max(worst_abs, err)
                worst_rel = max(worst_rel, err / max(abs(fd), 1e-12))
                ok &= good
        results.append(CheckResult(f"node:{name}:seed{seed}", trials, 0, worst_abs, worst_rel, ok))
    return results


# ---------------------------------------------------------------- end to end

def random_instance(seed, P=8, C=4, views=2, size=16, rays_per_view=12, samples=16, probes=32, phase=1):
    """Small random problem whose field is live (partially inside) along most rays."""
    rng = np.random.default_rng(seed)
    params = rng.normal(0, 0.6, (P, 7))
    params[:, :3] = rng.uniform(0.3, 1.5, (P, 3)) * rng.choice([-1, 1], (P, 3))
    params[:, 6] = rng.uniform(-0.9, -0.2, P)
    if phase == 3:
        T = (rng.uniform(0, 1, (P, C)) > 0.5).astype(float)
        T[0] = 1.0
        mode = Mode.BINARY
    else:
        T = rng.uniform(-0.2, 1.2, (P, C))
        mode = Mode.FLOAT
    w = rng.uniform(0.2, 0.6, C)
    bank = PrimitiveBank(params, T, w, mode)
    colors = rng.uniform(0, 1, (C, 3))
    pts, gm, gc = [], [], []
    for v in range(views):
        cam = Camera.orbit(360.0 * v / views + 20.0, 25.0, distance=3.0, width=size, height=size, fov_deg=50)
        pix = all_pixels(size, size)
        pick = rng.choice(len(pix.uv), rays_per_view, replace=False)
        pix.uv = pix.uv[pick]
        bundle = generate_rays(cam, pix)
        p, _ = sample_along_rays(bundle, samples, stratified=True, rng=rng)
        pts.append(p)
        gm.append(rng.uniform(0, 1, rays_per_view))
        gc.append(rng.uniform(0, 1, (rays_per_view, 3)))
    probe = rng.uniform(-0.6, 0.6, (probes, 3))
    return bank, colors, np.concatenate(pts), np.concatenate(gm), np.concatenate(gc), probe


PHASE_SPECS = {
    1: G.GraphSpec(1, rgb=True, terms=("photo", "loss_T", "loss_w"),
                   trainable=frozenset({"params", "selection", "weights", "colors"})),
    2: G.GraphSpec(2, rgb=True, terms=("photo", "loss_T"),
                   trainable=frozenset({"params", "selection", "colors"})),
    3: G.GraphSpec(3, rgb=True, terms=("photo", "overlap"),
                   trainable=frozenset({"params", "colors"})),
}


def _kink_signature(graph):
    tp = graph._tape
    sig = [tp["D"] > 0, np.sign(tp["params"][:, :3])]
    if graph.spec.phase == 1:
        sig += [(tp["O"] > 0) & (tp["O"] < 1), (tp["u"] > 0) & (tp["u"] < 1)]
    else:
        sig.append(tp["idx"])
    if "loss_T" in graph.spec.terms:
        sig += [tp["T"] < 0, tp["T"] > 1]
    if "loss_w" in graph.spec.terms:
        sig.append(np.sign(tp["w"] - 1.0))
    over = tp.get("over")
    if over is not None:
        sig += [over["D"] > 0, over["h"] > G.OVERLAP_FLOOR]
    return sig


def _same(sig_a, sig_b):
    return all(np.array_equal(a, b) for a, b in zip(sig_a, sig_b))


def _perturbed(bank, colors, var, index, delta):
    b = bank.copy()
    c = colors.copy()
    target = {"params": b.params, "selection": b.selection, "weights": b.weights, "colors": c}[var]
    target[index] += delta
    return b, c


def check_end_to_end(seed=0, n_coords=200, phases=(1, 2, 3), **sizes):
    """Coordinate-wise central differences of the full loss for each phase."""
    results = []
    for phase in phases:
        spec = PHASE_SPECS[phase]
        bank, colors, pts, gm, gc, probe = random_instance(seed, phase=phase, **sizes)
        graph = G.LossGraph(spec)
        probe_arg = probe if "overlap" in spec.terms else None

        def loss_at(b, c):
            g_ = G.LossGraph(spec)
            val = g_.forward(b, c, pts, gm, gc, probe_arg)
            return val, g_

        graph.forward(bank, colors, pts, gm, gc, probe_arg)
        bundle = graph.backward()
        base_sig = _kink_signature(graph)
        rng = np.random.default_rng([seed, phase, 7])
        # frozen variables are checked for literal zeros, not by differences
        coords = []
        for var in G.VARIABLES:
            if var not in spec.trainable:
                continue
            shape = bundle.get(var).shape
            for flat in range(int(np.prod(shape))):
                coords.append((var, np.unravel_index(flat, shape)))
        order = rng.permutation(len(coords))
        checked = skipped = 0
        worst_abs = worst_rel = 0.0
        ok = True
        per_var = {}
        for k in order:
            if checked >= n_coords:
                break
            var, idx = coords[k]
            near_kink = False
            for s in (-KINK_RADIUS, KINK_RADIUS):
                _, g_ = loss_at(*_perturbed(bank, colors, var, idx, s))
                if not _same(base_sig, _kink_signature(g_)):
                    near_kink = True
                    break
            if near_kink:
                skipped += 1
                continue
            lp, _ = loss_at(*_perturbed(bank, colors, var, idx, FD_EPS))
            lm, _ = loss_at(*_perturbed(bank, colors, var, idx, -FD_EPS))
            fd = (lp - lm) / (2 * FD_EPS)
            an = float(bundle.get(var)[idx])
            good, err = _within(an, fd)
            ok &= good
            per_var[var] = per_var.get(var, 0) + 1
            worst_abs = max(worst_abs, err)
            worst_rel = max(worst_rel, err / max(abs(fd), 1e-12))
            checked += 1
        for var in G.VARIABLES:
            if var not in spec.trainable:
                ok &= not np.any(bundle.get(var))
        ok &= checked >= min(n_coords, len(coords) - skipped)
        res = CheckResult(f"phase{phase}:seed{seed}", checked, skipped, worst_abs, worst_rel, ok)
        res.per_variable = per_var
        results.append(res)
    return results


def run_suite(seeds=(0, 1, 2, 3, 4), n_coords=200, **sizes):
    results = []
    for s in seeds:
        results += check_nodes(s)
        results += check_end_to_end(s, n_coords=n_coords, **sizes)
    return results
