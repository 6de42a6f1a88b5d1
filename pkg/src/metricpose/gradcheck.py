"""Central finite-difference checks of every analytic gradient in the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .correspondence import correspondence_model, sample_indices
from .geometry import DTYPE, Intrinsics, rotation_about_axis
from .kabsch import kabsch_batched, kabsch_vjp
from .objective import NullHypothesisConfig, expected_set_loss, virtual_grid, vcre_rt
from .ransac import RansacConfig, soft_inlier_scores, substream, train_hypotheses

FD_STEP = 1e-6
ERR_FLOOR = 1e-6
SUITES = ("kabsch_vjp", "soft_inlier_count", "vcre", "pathwise_chain")
DEFAULT_TOLERANCE = {"kabsch_vjp": 1e-4, "soft_inlier_count": 1e-4, "vcre": 1e-4, "pathwise_chain": 1e-3}


@dataclass
class CheckRow:
    name: str
    instances: int
    max_error: float
    tolerance: float
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), ERR_FLOOR))


def central_difference(f, x: torch.Tensor, step: float = FD_STEP) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, coordinate-wise."""
    x = x.detach().clone()
    flat = x.view(-1)
    out = np.empty(flat.numel())
    with torch.no_grad():
        for k in range(flat.numel()):
            old = flat[k].item()
            flat[k] = old + step
            fp = float(f(x))
            flat[k] = old - step
            fm = float(f(x))
            flat[k] = old
            out[k] = (fp - fm) / (2 * step)
    return out.reshape(x.shape)


def _random_rotation(rng):
    return rotation_about_axis(rng.normal(size=3), rng.uniform(-np.pi, np.pi))


def _random_problem(rng, n):
    x = torch.as_tensor(rng.normal(size=(n, 3)), dtype=DTYPE)
    R = _random_rotation(rng)
    t = torch.as_tensor(rng.normal(size=3), dtype=DTYPE)
    xp = x @ R.T + t + torch.as_tensor(0.05 * rng.normal(size=(n, 3)), dtype=DTYPE)
    w = torch.as_tensor(rng.uniform(0.2, 1.5, size=n), dtype=DTYPE)
    return x, xp, w, R, t


def check_kabsch_vjp(seed: int, bug: bool = False) -> float:
    rng = substream(seed, 101)
    x, xp, w, _, _ = _random_problem(rng, int(rng.integers(4, 12)))
    gR = torch.as_tensor(rng.normal(size=(3, 3)), dtype=DTYPE)
    gt = torch.as_tensor(rng.normal(size=3), dtype=DTYPE)
    gx, gxp, gw = kabsch_vjp(x, xp, gR, gt, w)
    if bug:
        gx = gx * 1.01

    def f(xx, xxp, ww):
        r = kabsch_batched(xx, xxp, ww)
        return (r.rotation * gR).sum() + (r.translation * gt).sum()

    fd = [
        central_difference(lambda v: f(v, xp, w), x),
        central_difference(lambda v: f(x, v, w), xp),
        central_difference(lambda v: f(x, xp, v), w),
    ]
    return relative_error(np.concatenate([g.numpy().ravel() for g in (gx, gxp, gw)]),
                          np.concatenate([a.ravel() for a in fd]))


def check_soft_inlier_count(seed: int, bug: bool = False) -> float:
    rng = substream(seed, 102)
    x, xp, _, R, t = _random_problem(rng, int(rng.integers(5, 20)))
    tau = 0.15
    params = [x.clone().requires_grad_(True), xp.clone().requires_grad_(True),
              R.clone().requires_grad_(True), t.clone().requires_grad_(True)]
    s = soft_inlier_scores(params[2], params[3], params[0], params[1], tau)
    grads = torch.autograd.grad(s, params)
    if bug:
        grads = (grads[0] * 1.01,) + grads[1:]

    def f_at(k):
        def f(v):
            p = [q.detach() for q in params]
            p[k] = v
            return soft_inlier_scores(p[2], p[3], p[0], p[1], tau)
        return f

    fd = [central_difference(f_at(k), params[k]) for k in range(4)]
    return relative_error(np.concatenate([g.numpy().ravel() for g in grads]), np.concatenate([a.ravel() for a in fd]))


def check_vcre(seed: int, bug: bool = False) -> float:
    rng = substream(seed, 103)
    K = Intrinsics(100.0, 110.0, 56.0, 56.0, 112, 112)
    grid = virtual_grid(counts=(3, 2, 3))
    R_gt = rotation_about_axis(rng.normal(size=3), rng.uniform(-0.3, 0.3))
    t_gt = torch.as_tensor(rng.normal(scale=0.3, size=3), dtype=DTYPE)
    R = (rotation_about_axis(rng.normal(size=3), 0.05) @ R_gt).requires_grad_(True)
    t = (t_gt + torch.as_tensor(rng.normal(scale=0.05, size=3), dtype=DTYPE)).requires_grad_(True)
    gR, gt = torch.autograd.grad(vcre_rt(R, t, R_gt, t_gt, K, grid), (R, t))
    if bug:
        gt = gt * 1.01
    fdR = central_difference(lambda v: vcre_rt(v, t.detach(), R_gt, t_gt, K, grid), R)
    fdt = central_difference(lambda v: vcre_rt(R.detach(), v, R_gt, t_gt, K, grid), t)
    return relative_error(np.concatenate([gR.numpy().ravel(), gt.numpy().ravel()]),
                          np.concatenate([fdR.ravel(), fdt.ravel()]))


def _chain_problem(seed):
    from .toy import SceneConfig, generate_scene, initialize_backbone

    scene = generate_scene(SceneConfig(baseline=0.5, max_rotation_deg=10.0), seed)
    bb = initialize_backbone([scene], depth_noise=0.05, seed=seed)
    return scene, bb


def chain_loss(scene, bb, log_depth, flat, rng_seed, cfg, Y, null, grid):
    """Expected loss of fixed correspondence sets as a function of the log-depth table."""
    maps = [bb.maps(0, v, log_depth[v]) for v in range(2)]
    n_b = maps[1].num_cells
    ia = torch.as_tensor(flat // n_b)
    ib = torch.as_tensor(flat % n_b)
    x_a = maps[0].points(scene.intrinsics_a)[ia]
    x_b = maps[1].points(scene.intrinsics_b)[ib]
    weights = torch.ones(flat.shape, dtype=DTYPE)
    hyps = train_hypotheses(x_a, x_b, weights, cfg, np.random.default_rng(rng_seed))
    gt = scene.gt_relative
    losses = vcre_rt(hyps.rotation, hyps.translation, gt.rotation, gt.translation, scene.intrinsics_b, grid)
    losses = torch.where(hyps.valid, losses, torch.zeros_like(losses))
    return expected_set_loss(hyps.scores, losses, null, Y, hyps.valid).mean()


def check_pathwise_chain(seed: int, bug: bool = False) -> float:
    """Directional derivative wrt all log-depths with sampling and minimal sets held fixed."""
    scene, bb = _chain_problem(seed)
    cfg = RansacConfig.train(J=8)
    Y, Q = 16, 2
    null = NullHypothesisConfig()
    grid = virtual_grid(counts=(3, 2, 3))
    rng = substream(seed, 104)
    with torch.no_grad():
        prob = correspondence_model(*bb(0))
    flat = np.stack([sample_indices(prob.P, Y, rng) for _ in range(Q)])
    base = torch.stack([bb.tables(0, v).log_depth.detach() for v in range(2)]).requires_grad_(True)
    loss = chain_loss(scene, bb, base, flat, seed, cfg, Y, null, grid)
    (g,) = torch.autograd.grad(loss, base)
    if bug:
        g = g * 1.01
    direction = torch.as_tensor(rng.normal(size=base.shape), dtype=DTYPE)
    with torch.no_grad():
        fp = float(chain_loss(scene, bb, base + FD_STEP * direction, flat, seed, cfg, Y, null, grid))
        fm = float(chain_loss(scene, bb, base - FD_STEP * direction, flat, seed, cfg, Y, null, grid))
    return relative_error(float((g * direction).sum()), (fp - fm) / (2 * FD_STEP))


CHECKS = {
    "kabsch_vjp": check_kabsch_vjp,
    "soft_inlier_count": check_soft_inlier_count,
    "vcre": check_vcre,
    "pathwise_chain": check_pathwise_chain,
}


def run_suite(name: str, instances: int = 100, tolerance: float | None = None, bug: bool = False,
              seed: int = 0) -> CheckRow:
    check = CHECKS[name]
    tol = DEFAULT_TOLERANCE[name] if tolerance is None else tolerance
    errs = [check(seed * 100003 + k, bug) for k in range(instances)]
    return CheckRow(name, instances, max(errs), tol)


def run_all(instances: int = 100, tolerance: float | None = None, inject_bug: str | None = None,
            seed: int = 0) -> list[CheckRow]:
    return [run_suite(n, instances, tolerance, n == inject_bug, seed) for n in SUITES]


def format_table(rows) -> str:
    lines = [f"{'check':<20} {'n':>5} {'max_rel_err':>12} {'tolerance':>10}  status"]
    for r in rows:
        lines.append(f"{r.name:<20} {r.instances:>5} {r.max_error:>12.3e} {r.tolerance:>10.1e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
