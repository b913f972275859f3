import numpy as np
import pytest

from qcsg.assembly import Mode, PrimitiveBank
from qcsg.errors import NumericalError, ValidationError
from qcsg.optim import (Adam, FitConfig, adam_step, binarize_selection, loss_overlap, loss_photo, loss_T,
                        loss_w, phase_configs, primitive_dropout, sample_probe_points)
from tests.conftest import cube_bank, sphere_bank


def test_loss_photo_examples():
    assert loss_photo(np.ones((2, 3)), np.ones(2), np.ones((2, 3)), np.ones(2)) == 0.0
    assert loss_photo(None, np.array([0.5, 0.0]), None, np.array([0.0, 0.0])) == pytest.approx(0.125)
    assert loss_photo(np.zeros((2, 3)), np.array([0.5, 0.0]), np.zeros((2, 3)), np.zeros(2)) == pytest.approx(0.125)


def test_loss_T_examples():
    assert loss_T(np.array([[0.0, 0.5, 1.0]])) == 0.0
    assert loss_T(np.array([[1.25]])) == pytest.approx(0.25)
    assert loss_T(np.array([[-0.1, 1.1]])) == pytest.approx(0.2)


def test_loss_w_examples():
    assert loss_w(np.ones(3)) == 0.0
    assert loss_w(np.array([0.8, 1.2])) == pytest.approx(0.4)
    assert loss_w(np.array([1.0, 1.0, 0.0])) == 1.0


def test_loss_constraint_sets(rng):
    T = rng.uniform(0, 1, (20, 5))
    assert loss_T(T) == 0
    T[3, 2] = 1.0001
    assert loss_T(T) > 0
    w = np.ones(4)
    assert loss_w(w) == 0
    w[0] += 1e-6
    assert loss_w(w) > 0


def test_loss_overlap_examples():
    # two disjoint unit-ish spheres, one convex each
    p = np.array([[1, 1, 1, -1.0, 0, 0, 0.25 - 0.09], [1, 1, 1, 1.0, 0, 0, 0.25 - 0.09]])
    bank = PrimitiveBank(p, np.eye(2), np.ones(2), Mode.BINARY)
    assert loss_overlap(bank, np.array([[0.5, 0, 0], [-0.5, 0, 0]])) == pytest.approx(1.9)
    # one convex duplicated -> h = 2 at its center, plus a point inside one convex only
    bank2 = PrimitiveBank(np.array([p[0], p[0], p[1]]), np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1.0]]),
                          np.ones(3), Mode.BINARY)
    # the far sphere contributes exp(-10 * 0.91) at the other center
    tail = np.exp(-9.1)
    assert loss_overlap(bank2, np.array([[0.5, 0, 0]])) == pytest.approx(2.0 + tail)
    assert loss_overlap(bank2, np.array([[0.5, 0, 0], [-0.5, 0, 0]])) == pytest.approx((2.0 + tail + 1.9) / 2)


def test_loss_overlap_empty_warns(caplog):
    bank = sphere_bank(0.2)
    assert loss_overlap(bank, np.array([[0.9, 0.9, 0.9]])) == 0.0
    assert "no probe point is inside" in caplog.text


def test_adam_first_step():
    x = {"params": np.zeros(3)}
    adam_step(x, {"params": np.ones(3)}, lr=1e-4)
    np.testing.assert_allclose(x["params"], -1e-4, rtol=1e-6)


def test_adam_zero_grad_and_frozen():
    opt = Adam(1e-2)
    x = {"params": np.ones(2), "selection": np.ones(2)}
    opt.step(x, {"params": np.ones(2), "selection": np.ones(2)})
    before = {k: v.copy() for k, v in x.items()}
    m_before = opt.m["params"].copy()
    opt.step(x, {"params": np.zeros(2), "selection": np.full(2, 5.0)}, trainable={"params"})
    # the decayed momentum still moves params, but the frozen variable stays put
    np.testing.assert_array_equal(x["selection"], before["selection"])
    np.testing.assert_allclose(opt.m["params"], 0.9 * m_before)
    y = {"params": np.ones(2)}
    Adam(1e-2).step(y, {"params": np.zeros(2)})
    np.testing.assert_array_equal(y["params"], 1.0)


def test_adam_rejects_nonfinite():
    x = {"params": np.zeros(2)}
    with pytest.raises(NumericalError):
        adam_step(x, {"params": np.array([np.inf, 0.0])})
    np.testing.assert_array_equal(x["params"], 0.0)


def test_binarize_examples():
    b = PrimitiveBank(np.zeros((3, 7)), np.array([[0.009], [0.5], [0.01]]), np.ones(1))
    bb = binarize_selection(b)
    np.testing.assert_array_equal(bb.selection[:, 0], [0, 1, 0])
    assert bb.mode is Mode.BINARY
    with pytest.raises(ValidationError):
        binarize_selection(PrimitiveBank(np.zeros((1, 7)), np.full((1, 1), 0.001), np.ones(1)))


def test_dropout_outside_primitive_dropped():
    # a tiny sphere far outside the probe box forms its own convex and is never seen
    bank = cube_bank(0.5)
    far = np.zeros((1, 7))
    far[0, :3] = 1.0
    far[0, 3] = -2 * 5.0
    far[0, 6] = 25.0 - 0.01
    b = PrimitiveBank(np.vstack([bank.params, far]), np.zeros((7, 2)), np.ones(2), Mode.BINARY)
    b.selection[:6, 0] = 1
    b.selection[6, 1] = 1
    res = primitive_dropout(b, sample_probe_points(b, 4096, rng=0))
    assert res.dropped == [6] and res.variations[6] == 0.0


def test_dropout_keeps_bounding_primitive():
    bank = cube_bank(0.5)
    res = primitive_dropout(bank, sample_probe_points(bank, 8192, rng=1))
    assert res.dropped == []
    assert min(res.variations.values()) > 0.002


def test_dropout_duplicate_first_copy():
    # O sums ReLU(D), so a copied plane shifts the iso-surface by 0.1 / (2 slope); keep that tiny
    bank = cube_bank(0.5, slope=200.0)
    params = np.vstack([bank.params[:1], bank.params])
    b = PrimitiveBank(params, np.ones((7, 1)), np.ones(1), Mode.BINARY)
    res = primitive_dropout(b, sample_probe_points(b, 8192, rng=2))
    assert res.dropped == [0] and res.variations[0] == 0.0
    # dropout never increases the number of nonzero rows
    assert res.bank.active_primitives().sum() == 6


def test_dropout_requires_binary():
    b = PrimitiveBank(np.zeros((1, 7)), np.full((1, 1), 0.5), np.ones(1))
    with pytest.raises(ValidationError):
        primitive_dropout(b, np.zeros((4, 3)))


def test_probe_points_in_dilated_bbox():
    bank = sphere_bank(0.3, center=(0.2, 0.0, 0.0))
    pts = sample_probe_points(bank, 5000, rng=0)
    assert pts.shape == (5000, 3)
    assert pts[:, 0].min() >= -0.1 - 0.1 - 0.05 and pts[:, 0].max() <= 0.5 + 0.1 + 0.05


def test_phase_table():
    cfg = FitConfig()
    p1, p2, p3 = phase_configs(cfg)
    assert p1.terms == ("photo", "loss_T", "loss_w") and p1.opacity == "a_plus"
    assert p1.trainable == {"params", "selection", "weights", "colors"}
    assert p2.terms == ("photo", "loss_T") and p2.opacity == "exp(-10*a_star)"
    assert p2.trainable == {"params", "selection", "colors"}
    assert p3.terms == ("photo", "overlap") and p3.trainable == {"params", "colors"}
    assert p3.dropout_period == 400 and p1.dropout_period == 0
    assert [p.iterations for p in (p1, p2, p3)] == [3000, 2000, 2000]
    mask_only = phase_configs(cfg.replace(rgb=False))
    assert all("colors" not in p.trainable for p in mask_only)


def test_config_defaults_and_roundtrip(tmp_path):
    cfg = FitConfig()
    assert (cfg.primitive_count, cfg.convex_count, cfg.lr) == (4096, 256, 1e-4)
    assert (cfg.n_random, cfg.n_contour, cfg.samples_per_ray) == (256, 1000, 96)
    assert cfg.v_threshold == 0.002 and cfg.probe_count == 40960 and cfg.betas == (0.9, 0.999)
    cfg.dump(tmp_path / "c.yaml")
    back = FitConfig.load(tmp_path / "c.yaml")
    assert back == cfg and back.hash() == cfg.hash()
    with pytest.raises(ValidationError):
        FitConfig.from_dict({"nonsense": 1})


def _tiny_views(scene="sphere"):
    from qcsg.synthgen import get_scene, render_gt_views

    return render_gt_views(get_scene(scene, resolution=24))


def _tiny_config(**kw):
    from qcsg.presets import synthetic_config

    base = dict(primitive_count=8, convex_count=2, n_random=16, n_contour=32, samples_per_ray=8,
                phase_iters=(3, 3, 3), probe_count=512, overlap_batch=128, holdout_views=(3,))
    base.update(kw)
    return synthetic_config(**base)


def test_run_fit_single_view_warns():
    from qcsg.optim import run_fit

    views = _tiny_views().subset([0])
    _, rep = run_fit(views, _tiny_config(holdout_views=()))
    assert any("under-constrained" in w for w in rep.warnings)


def test_resume_skips_completed_phases():
    from qcsg.checkpoint import Checkpoint
    from qcsg.optim import Fitter, run_fit

    views = _tiny_views()
    cfg = _tiny_config()
    f = Fitter(views, cfg)
    bank, colors = f.initial_state()
    ckpt = Checkpoint(bank, colors, phase=1, config_hash=cfg.hash(), seed=cfg.seed)
    seen = []
    _, rep = run_fit(views, cfg, resume=ckpt, hooks=[lambda phase, **_: seen.append(phase.phase)])
    assert 1 not in seen and set(seen) <= {2, 3}
    assert 1 not in rep.losses and 2 in rep.losses
    with pytest.raises(ValidationError):
        run_fit(views, cfg, resume=Checkpoint(bank, colors, phase=3, config_hash=cfg.hash(), seed=0))


def test_fit_is_deterministic():
    from qcsg.optim import run_fit

    views = _tiny_views()
    a, _ = run_fit(views, _tiny_config())
    b, _ = run_fit(views, _tiny_config())
    assert a.bank.params.tobytes() == b.bank.params.tobytes()
    assert a.bank.selection.tobytes() == b.bank.selection.tobytes()
