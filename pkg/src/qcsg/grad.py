"""Hand-written adjoints for the render-and-compare loss.

Each stage of the forward chain is a pair (forward, vjp) registered in
``NODES``. ``LossGraph`` wires them in a fixed order per phase, records the
intermediates during ``forward`` and replays the adjoints in reverse during
``backward``.

Subgradient conventions: ReLU'(0) = 0, clip' = 0 on both boundaries,
|x|'(0) = 0, and the hard min routes to the lowest-index argmin.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from qcsg.assembly import PrimitiveBank, lift_points
from qcsg.errors import NumericalError, ValidationError

VARIABLES = ("params", "selection", "weights", "colors")


@dataclass
class GradientBundle:
    d_params: np.ndarray
    d_selection: np.ndarray
    d_weights: np.ndarray
    d_colors: np.ndarray

    def get(self, name):
        return getattr(self, "d_" + name)

    def items(self):
        return [(n, self.get(n)) for n in VARIABLES]

    def all_finite(self):
        return all(np.all(np.isfinite(g)) for _, g in self.items())

    def max_abs(self):
        return {n: float(np.abs(g).max()) if g.size else 0.0 for n, g in self.items()}


# ---------------------------------------------------------------- node pairs

def abs_params_fwd(params):
    eff = params.copy()
    eff[:, :3] = np.abs(eff[:, :3])
    return eff


def abs_params_vjp(params, g):
    out = g.copy()
    out[:, :3] *= np.sign(params[:, :3])
    return out


def distance_fwd(Q, eff):
    return Q @ eff.T


def distance_vjp(Q, g):
    return g.T @ Q


def relu_fwd(D):
    return np.maximum(D, 0.0)


def relu_vjp(D, g):
    return np.where(D > 0, g, 0.0)


def intersect_fwd(R, T):
    return R @ T


def intersect_vjp(R, T, g, need_T=True):
    dR = g @ T.T
    dT = R.T @ g if need_T else None
    return dR, dT


def union_soft_fwd(O, w):
    S = np.clip(1.0 - O, 0.0, 1.0)
    u = S @ w
    return np.clip(u, 0.0, 1.0), S, u


def union_soft_vjp(O, w, S, u, g):
    du = np.where((u > 0) & (u < 1), g, 0.0)
    dw = S.T @ du
    inner = (O > 0) & (O < 1)
    dO = np.where(inner, -du[:, None] * w[None, :], 0.0)
    return dO, dw


def union_hard_fwd(O, active):
    masked = np.where(active[None, :], O, np.inf)
    idx = np.argmin(masked, axis=1)
    return O[np.arange(O.shape[0]), idx], idx


def union_hard_vjp(O, idx, g):
    dO = np.zeros_like(O)
    dO[np.arange(O.shape[0]), idx] = g
    return dO


def exp_opacity_fwd(a_star):
    return np.exp(-10.0 * a_star)


def exp_opacity_vjp(alpha, g):
    return -10.0 * alpha * g


def color_fwd(O, colors, active):
    logits = np.where(active[None, :], -10.0 * O, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    s = e / e.sum(axis=1, keepdims=True)
    return s @ colors, s


def color_vjp(s, colors, g):
    dcolors = s.T @ g
    ds = g @ colors.T
    dlogit = s * (ds - np.sum(s * ds, axis=1, keepdims=True))
    return -10.0 * dlogit, dcolors


def composite_fwd(alpha, rgb):
    """alpha (B, R), rgb (B, R, 3) or None."""
    t = np.ones_like(alpha)
    t[:, 1:] = np.cumprod(1.0 - alpha[:, :-1], axis=1)
    wts = t * alpha
    mask = wts.sum(axis=1)
    color = None if rgb is None else np.einsum("br,brk->bk", wts, rgb)
    return color, mask, t, wts


def composite_vjp(alpha, rgb, t, wts, g_color, g_mask):
    """Adjoint of compositing without dividing by (1 - alpha).

    With G_i = dL/dw_i and V_i = G_i a_i + (1 - a_i) V_{i+1}, the alpha
    adjoint is t_i (G_i - V_{i+1}).
    """
    G = np.broadcast_to(g_mask[:, None], alpha.shape).copy()
    d_rgb = None
    if rgb is not None:
        G += np.einsum("brk,bk->br", rgb, g_color)
        d_rgb = wts[..., None] * g_color[:, None, :]
    R = alpha.shape[1]
    V_next = np.zeros(alpha.shape[0], dtype=alpha.dtype)
    d_alpha = np.empty_like(alpha)
    for i in range(R - 1, -1, -1):
        d_alpha[:, i] = t[:, i] * (G[:, i] - V_next)
        V_next = G[:, i] * alpha[:, i] + (1.0 - alpha[:, i]) * V_next
    return d_alpha, d_rgb


def photo_fwd(color, mask, gt_color, gt_mask):
    B = mask.shape[0]
    loss = np.sum((mask - gt_mask) ** 2) / B
    if color is not None:
        loss += np.sum((color - gt_color) ** 2) / B
    return loss


def photo_vjp(color, mask, gt_color, gt_mask, g=1.0):
    B = mask.shape[0]
    d_mask = g * 2.0 * (mask - gt_mask) / B
    d_color = None if color is None else g * 2.0 * (color - gt_color) / B
    return d_color, d_mask


def loss_T_fwd(T):
    return float(np.sum(np.maximum(-T, 0.0) + np.maximum(T - 1.0, 0.0)))


def loss_T_vjp(T, g=1.0):
    return g * ((T > 1.0).astype(T.dtype) - (T < 0.0).astype(T.dtype))


def loss_w_fwd(w):
    return float(np.sum(np.abs(w - 1.0)))


def loss_w_vjp(w, g=1.0):
    return g * np.sign(w - 1.0)


OVERLAP_FLOOR = 1.9


def overlap_fwd(O, active):
    E = np.where(active[None, :], np.exp(-10.0 * O), 0.0)
    h = E.sum(axis=1)
    n = max(O.shape[0], 1)
    return float(np.sum(np.maximum(h, OVERLAP_FLOOR)) / n), h, E


def overlap_vjp(h, E, g=1.0):
    n = max(h.shape[0], 1)
    dh = np.where(h > OVERLAP_FLOOR, g / n, 0.0)
    return -10.0 * E * dh[:, None]


NODES = {
    "abs_params": (abs_params_fwd, abs_params_vjp),
    "distance": (distance_fwd, distance_vjp),
    "relu": (relu_fwd, relu_vjp),
    "intersect": (intersect_fwd, intersect_vjp),
    "union_soft": (union_soft_fwd, union_soft_vjp),
    "union_hard": (union_hard_fwd, union_hard_vjp),
    "exp_opacity": (exp_opacity_fwd, exp_opacity_vjp),
    "color": (color_fwd, color_vjp),
    "composite": (composite_fwd, composite_vjp),
    "photo": (photo_fwd, photo_vjp),
    "loss_T": (loss_T_fwd, loss_T_vjp),
    "loss_w": (loss_w_fwd, loss_w_vjp),
    "overlap": (overlap_fwd, overlap_vjp),
}

_corrupted: dict[str, float] = {}


@contextlib.contextmanager
def corrupt_adjoint(node, scale=1.5):
    """Test hook: scale every gradient leaving ``node`` by ``scale``."""
    if node not in NODES:
        raise ValidationError(f"unknown node {node!r}")
    _corrupted[node] = scale
    try:
        yield
    finally:
        _corrupted.pop(node, None)


def _vjp(name, *args, **kw):
    out = NODES[name][1](*args, **kw)
    scale = _corrupted.get(name)
    if scale is None:
        return out
    if isinstance(out, tuple):
        return tuple(None if o is None else o * scale for o in out)
    return out * scale


def _check(name, *arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NumericalError("non-finite gradient", node=name)


# ---------------------------------------------------------------- graph

@dataclass
class GraphSpec:
    """Static description of one phase's loss graph."""

    phase: int
    rgb: bool = True
    terms: tuple = ("photo", "loss_T", "loss_w")
    trainable: frozenset = frozenset(VARIABLES)

    @property
    def occupancy(self):
        return "a_plus" if self.phase == 1 else "a_star"

    @property
    def opacity(self):
        return "a_plus" if self.phase == 1 else "exp(-10*a_star)"


@dataclass
class LossGraph:
    spec: GraphSpec
    dtype: type = np.float64
    _tape: dict = field(default=None, repr=False)
    trace: list = field(default_factory=list, repr=False)

    def forward(self, bank: PrimitiveBank, colors, points, gt_mask, gt_color=None, probe_points=None):
        """Evaluate the total loss; ``points`` is (B, R, 3) samples along B rays."""
        spec, dt = self.spec, self.dtype
        B, R, _ = points.shape
        active = bank.active_convexes()
        if not active.any():
            raise ValidationError("bank has no active convexes")
        params = bank.params.astype(dt)
        T = bank.selection.astype(dt)
        w = bank.weights.astype(dt)
        colors = np.asarray(colors, dtype=dt)
        tape = dict(params=params, T=T, w=w, colors=colors, active=active, B=B, R=R)
        self.trace = []

        eff = abs_params_fwd(params)
        Q = lift_points(points.reshape(-1, 3).astype(dt)).q_rows
        D = distance_fwd(Q, eff)
        Rl = relu_fwd(D)
        O = intersect_fwd(Rl, T)
        tape.update(eff=eff, Q=Q, D=D, Rl=Rl, O=O)
        self.trace += ["lift", "distance", "relu", "intersect"]

        if spec.phase == 1:
            a_plus, S, u = union_soft_fwd(O, np.where(active, w, 0.0).astype(dt))
            alpha = a_plus
            tape.update(S=S, u=u)
            self.trace += ["union_soft", "opacity:a_plus"]
        else:
            a_star, idx = union_hard_fwd(O, active)
            alpha = exp_opacity_fwd(a_star)
            tape.update(idx=idx)
            self.trace += ["union_hard", "opacity:exp(-10*a_star)"]
        alpha = alpha.reshape(B, R)
        tape["alpha"] = alpha

        rgb = None
        if spec.rgb:
            pc, s = color_fwd(O, colors, active)
            rgb = pc.reshape(B, R, 3)
            tape["s"] = s
            self.trace.append("color")
        color, mask, t, wts = composite_fwd(alpha, rgb)
        tape.update(rgb=rgb, color=color, mask=mask, t=t, wts=wts)
        self.trace.append("composite")

        gt_mask = np.asarray(gt_mask, dtype=dt)
        gt_color = None if not spec.rgb else np.asarray(gt_color, dtype=dt)
        tape.update(gt_mask=gt_mask, gt_color=gt_color)
        losses = {"photo": photo_fwd(color, mask, gt_color, gt_mask)}
        self.trace.append("photo")
        if "loss_T" in spec.terms:
            losses["loss_T"] = loss_T_fwd(T)
            self.trace.append("loss_T")
        if "loss_w" in spec.terms:
            losses["loss_w"] = loss_w_fwd(w[active])
            self.trace.append("loss_w")
        if "overlap" in spec.terms:
            if probe_points is None or len(probe_points) == 0:
                losses["overlap"] = 0.0
                tape["over"] = None
            else:
                Qo = lift_points(np.asarray(probe_points, dtype=dt)).q_rows
                Do = distance_fwd(Qo, eff)
                Ro = relu_fwd(Do)
                Oo = intersect_fwd(Ro, T)
                val, h, E = overlap_fwd(Oo, active)
                losses["overlap"] = val
                tape["over"] = dict(Q=Qo, D=Do, R=Ro, h=h, E=E)
            self.trace.append("overlap")
        tape["losses"] = losses
        self._tape = tape
        total = float(sum(losses.values()))
        if not np.isfinite(total):
            raise NumericalError("non-finite loss", node="loss")
        return total

    @property
    def losses(self):
        if self._tape is None:
            raise ValidationError("no forward pass recorded")
        return dict(self._tape["losses"])

    @property
    def rendered(self):
        return self._tape["color"], self._tape["mask"]

    def backward(self) -> GradientBundle:
        if self._tape is None:
            raise ValidationError("backward called without a recorded forward pass")
        tp, spec = self._tape, self.spec
        B, R = tp["B"], tp["R"]
        need_T = "selection" in spec.trainable

        d_color, d_mask = _vjp("photo", tp["color"], tp["mask"], tp["gt_color"], tp["gt_mask"])
        _check("photo", d_color, d_mask)
        d_alpha, d_rgb = _vjp("composite", tp["alpha"], tp["rgb"], tp["t"], tp["wts"], d_color, d_mask)
        _check("composite", d_alpha, d_rgb)
        d_alpha = d_alpha.reshape(-1)

        d_colors = np.zeros_like(tp["colors"])
        dO = None
        if spec.rgb:
            dO, d_colors = _vjp("color", tp["s"], tp["colors"], d_rgb.reshape(-1, 3))
            _check("color", dO, d_colors)

        d_w = np.zeros_like(tp["w"])
        if spec.phase == 1:
            w_eff = np.where(tp["active"], tp["w"], 0.0)
            dO_u, d_w = _vjp("union_soft", tp["O"], w_eff, tp["S"], tp["u"], d_alpha)
            d_w = np.where(tp["active"], d_w, 0.0)
            _check("union_soft", dO_u, d_w)
        else:
            d_astar = _vjp("exp_opacity", tp["alpha"].reshape(-1), d_alpha)
            _check("exp_opacity", d_astar)
            dO_u = _vjp("union_hard", tp["O"], tp["idx"], d_astar)
            _check("union_hard", dO_u)
        dO = dO_u if dO is None else dO + dO_u

        dRl, d_T = _vjp("intersect", tp["Rl"], tp["T"], dO, need_T=need_T)
        _check("intersect", dRl, d_T)
        dD = _vjp("relu", tp["D"], dRl)
        _check("relu", dD)
        d_eff = _vjp("distance", tp["Q"], dD)
        _check("distance", d_eff)

        over = tp.get("over")
        if "overlap" in spec.terms and over is not None:
            dOo = _vjp("overlap", over["h"], over["E"])
            _check("overlap", dOo)
            dRo, dTo = _vjp("intersect", over["R"], tp["T"], dOo, need_T=need_T)
            dDo = _vjp("relu", over["D"], dRo)
            d_eff = d_eff + _vjp("distance", over["Q"], dDo)
            if need_T:
                d_T = d_T + dTo
            _check("overlap", d_eff)

        d_params = _vjp("abs_params", tp["params"], d_eff)
        _check("abs_params", d_params)

        if d_T is None:
            d_T = np.zeros_like(tp["T"])
        if "loss_T" in spec.terms:
            d_T = d_T + _vjp("loss_T", tp["T"])
            _check("loss_T", d_T)
        if "loss_w" in spec.terms:
            d_w = d_w + np.where(tp["active"], _vjp("loss_w", tp["w"]), 0.0)
            _check("loss_w", d_w)

        bundle = GradientBundle(d_params, d_T, d_w, d_colors)
        for name in VARIABLES:
            if name not in spec.trainable:
                g = bundle.get(name)
                setattr(bundle, "d_" + name, np.zeros_like(g))
        return bundle
