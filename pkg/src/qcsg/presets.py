"""Named fit configurations.

``default_config`` keeps the full-scale budget (4096 primitives, 256
convexes, 7000 steps at lr 1e-4). ``synthetic_config`` is the desk-scale
setting used for the synthetic catalog: a much smaller bank, fewer pixels
and samples per ray, and a larger step size so a fit takes minutes on one
core. The quadratic coefficients and the selection matrix move ten times
slower than the rest: fast quadratic terms fold primitives into thin sheets,
and a fast selection matrix lets off-block entries cross the binarization
threshold so that convexes merge.
"""

from qcsg.optim import FitConfig


def default_config(**overrides):
    return FitConfig(**overrides)


def synthetic_config(**overrides):
    base = dict(
        init="blocks",
        primitive_count=64,
        convex_count=8,
        n_random=128,
        n_contour=256,
        samples_per_ray=32,
        lr=1e-2,
        lr_quadratic=1e-3,
        lr_selection=1e-3,
        phase_iters=(500, 500, 2000),
        rgb=False,
        dtype="float32",
        probe_count=8192,
        overlap_batch=2048,
        eval_resolution=64,
    )
    base.update(overrides)
    return FitConfig(**base)
