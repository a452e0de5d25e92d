"""Acceptance suite: one PASS/FAIL line per criterion.

Each test records ``criterion N: PASS|FAIL <detail>`` in
``conftest.ACCEPTANCE_LINES`` (collected into a terminal summary section) and
prints it, then asserts the criterion.
"""

import json
from pathlib import Path

import mpmath as mp
import numpy as np
import pytest

import conftest
from nlgrad import calculus, cli, kernels, solve
from nlgrad import grid as gridmod
from nlgrad.energy import POLY_COERCIVE, QUADRATIC, StoredEnergy, eval_energy, eval_energy_gradient
from test_kernels import MATRIX, mp_gamma_const, mp_radial

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DIVISORS = (4, 8, 16)
GRAD_TOL = 1e-8


def record(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def fmt_levels(values):
    return "[" + ", ".join(f"{v:.2e}" for v in values) + "]"


@pytest.fixture(scope="module")
def battery_summary(level, params):
    levels = [calculus.identity_battery(level(d).op, level(d).conv, seed=0) for d in DIVISORS]
    return calculus.assess(levels, params.delta)


def quadrature_criterion(number, summary, names):
    ok = all(summary[n]["pass"] for n in names)
    detail = "; ".join(
        f"{n} rel={fmt_levels(summary[n]['rel_residual'])} tol={summary[n]['tolerance']:g} "
        f"level={'ok' if summary[n]['level_pass'] else 'FAIL'} "
        f"refine={'ok' if summary[n]['refinement_pass'] else 'FAIL'}"
        for n in names
    )
    return record(number, ok, detail)


def test_criterion_01_kernel_integrity():
    mass_err, slope_err = [], []
    for n, s, d in MATRIX:
        p = kernels.KernelParams(n, s, d)
        mp.mp.dps = 30
        area = 2 * mp.pi ** (mp.mpf(n) / 2) / mp.gamma(mp.mpf(n) / 2)
        rho_l1 = float(area * mp_radial(p) / mp_gamma_const(1 - s, n))
        target = (n - 1 + s) / n * rho_l1
        mass_err.append(abs(kernels.q_mass(p) - target) / target)
        prof = kernels.build_Q_profile(p)
        r = prof.radii[5:-5:7]
        step = 1e-5 * r
        slope = (prof(r + step) - prof(r - step)) / (2 * step)
        expected = -(n - 1 + s) * kernels.rho(r, p) / r
        slope_err.append(float(np.max(np.abs(slope - expected) / np.abs(expected))))
    ok = max(mass_err) <= 1e-8 and max(slope_err) <= 1e-6
    record(1, ok, f"{len(MATRIX)} (n,s,delta) points: max mass rel err {max(mass_err):.1e} (tol 1e-8), "
                  f"max Q'/rho rel err {max(slope_err):.1e} (tol 1e-6)")
    assert ok


def test_criterion_02_exact_identities(battery_summary):
    names = [n for n, (cls, _) in calculus.TOLERANCES.items() if cls == calculus.ROUNDING]
    worst = {n: max(battery_summary[n]["rel_residual"]) for n in names}
    ok = all(battery_summary[n]["pass"] for n in names)
    record(2, ok, "max rel over h=delta/4..delta/16: " + ", ".join(f"{n}={v:.1e}" for n, v in worst.items()))
    assert ok


def test_criterion_03_affine(battery_summary):
    assert quadrature_criterion(3, battery_summary, ["affine"])


def test_criterion_04_equivalence(battery_summary):
    assert quadrature_criterion(4, battery_summary, ["gradient_equivalence"])


def test_criterion_05_duality(battery_summary):
    assert quadrature_criterion(5, battery_summary, ["duality"])


def test_criterion_06_piola(battery_summary):
    assert quadrature_criterion(6, battery_summary, ["piola_weak", "piola_affine"])


def test_criterion_07_det_ibp(battery_summary):
    assert quadrature_criterion(7, battery_summary, ["det_ibp", "det_ibp_zero"])


def test_criterion_08_weak_continuity(level, params):
    cfg = {"weak_continuity": {"schedule": [2, 4, 8, 16, 32], "final_ratio": 0.1,
                               "slope_target": -1.0, "slope_tol": 0.3}}
    wc = cli._weak_continuity(cfg, level(8).op, params)
    parts = [f"{k}: monotone={wc[k]['monotone']} final/initial={wc[k]['final_ratio']:.1e}" for k in ("det", "cof")]
    slope = wc["entries"]["slope"]
    parts.append(f"entries slope={slope:.2f} (target -1 +/- 0.3)")
    record(8, wc["pass"], "; ".join(parts))
    assert wc["pass"]


def _random_form(rng):
    kind = rng.integers(3)
    if kind == 0:
        return gridmod.Wave(rng.uniform(-12, 12, 2), rng.uniform(0.2, 2), rng.uniform(0, 2 * np.pi))
    if kind == 1:
        return gridmod.TrigBump(rng.uniform(-0.25, 0.3, 2), rng.uniform(0.7, 1.25, 2), int(rng.integers(1, 4)),
                                rng.uniform(0.2, 2), power=int(rng.integers(1, 3)))
    return gridmod.RadialBump(rng.uniform(0, 1, 2), rng.uniform(0.2, 0.6), rng.uniform(0.2, 2))


def test_criterion_09_operator_bounds(level):
    lv = level(8)
    rng = np.random.default_rng(9)
    N = lv.grid.n_nodes
    k_ratios, g_ratios = [], []
    for i in range(200):
        shape = [(N,), (N, 2), (N, 2, 2)][i % 3]
        k_ratios.append(calculus.k_bound_ratio(lv.op, _random_form(rng), rng.standard_normal(shape)))
        g_ratios.append(calculus.gradient_bound_ratio(lv.op, _random_form(rng)))
    ok = max(k_ratios) <= 1.05 and max(g_ratios) <= 1.05
    record(9, ok, f"200 trials each: max K bound ratio {max(k_ratios):.3f}, "
                  f"max gradient bound ratio {max(g_ratios):.3f} (limit 1.05)")
    assert ok


AFFINE = {"kind": "affine_map", "A": [[1.2, 0.3], [-0.2, 0.9]], "c": [0.1, -0.05]}
WAVY = {
    "kind": "vector",
    "components": [
        {"kind": "sum", "terms": [{"kind": "affine", "b": [1.1, 0.2]},
                                  {"kind": "wave", "k": [2 * np.pi, 0], "amplitude": 0.1}]},
        {"kind": "sum", "terms": [{"kind": "affine", "b": [-0.1, 0.95]},
                                  {"kind": "wave", "k": [0, 2 * np.pi], "amplitude": 0.1, "phase": 0.5}]},
    ],
}
POLY_RUNS = {
    "poly_p2": StoredEnergy(POLY_COERCIVE, 1.0, 1.0, 1.0),
    "poly_p3": StoredEnergy(POLY_COERCIVE, 1.0, 1.0, 1.0, p=3.0, q=2.5),
    "poly_barrier": StoredEnergy(POLY_COERCIVE, 1.0, 0.5, 1.0, barrier=True, gamma2=0.01),
}


@pytest.fixture(scope="module")
def solver_runs(level):
    lv = level(8)
    cfg = solve.OptimizerConfig(max_iter=500, grad_tol=GRAD_TOL)
    runs = {}
    quad = solve.DirichletProblem(lv.grid, lv.op, StoredEnergy(QUADRATIC), AFFINE)
    rng = np.random.default_rng(10)
    start = quad.g.copy()
    start[quad.free] += 0.3 * rng.standard_normal((len(quad.free), 2))
    runs["quadratic_from_datum"] = (quad, solve.minimize(quad, cfg))
    runs["quadratic_random_start"] = (quad, solve.minimize(quad, cfg, initial=start))
    for name, W in POLY_RUNS.items():
        pb = solve.DirichletProblem(lv.grid, lv.op, W, WAVY)
        runs[name] = (pb, solve.minimize(pb, cfg))
    return runs


def test_criterion_10_minimization(solver_runs):
    parts, ok = [], True
    for name, (pb, rep) in solver_runs.items():
        mono = bool(np.all(np.diff(rep.energy_history) <= 0))
        ok &= mono and rep.converged
        part = f"{name}: it={rep.iterations} |g|={rep.grad_norm:.1e} nonincreasing={mono}"
        if name.startswith("quadratic"):
            dev = float(np.max(np.abs(rep.state - pb.g)))
            ok &= dev <= 1e-6
            part += f" dev={dev:.1e}"
        else:
            ok &= rep.iterations <= 500 and rep.grad_norm <= GRAD_TOL
        parts.append(part)
    record(10, ok, "; ".join(parts))
    assert ok


def test_criterion_11_euler_lagrange(solver_runs, domain):
    battery = solve.el_battery(domain)
    worst, ok = 0.0, True
    for pb, rep in solver_runs.values():
        for e in solve.el_residual(rep.state, pb, battery):
            worst = max(worst, abs(e["pairing"]) / e["scale"])
            ok &= abs(e["pairing"]) <= 10 * GRAD_TOL * e["scale"]
    pb, rep = solver_runs["poly_p2"]
    lo = np.array(domain.lower) + domain.delta
    hi = np.array(domain.upper) - domain.delta
    state = rep.state.copy()
    state[:, 0] += 0.3 * gridmod.TrigBump(lo, hi, 1, power=2).value(pb.grid.points)
    fired = max(abs(e["pairing"]) / e["scale"] for e in solve.el_residual(state, pb, battery))
    detected = fired > 10 * GRAD_TOL
    ok &= detected
    record(11, ok, f"max |pairing|/scale at converged states {worst:.1e} (limit {10 * GRAD_TOL:.0e}); "
                   f"perturbed state gives {fired:.1e} (detector fired={detected})")
    assert ok


def _local_fd(op, W, u, node, c, eps):
    """Richardson-extrapolated central difference of the total energy.

    The difference is summed per target, so targets whose stencil misses
    ``node`` contribute an exact zero and the roundoff of the O(1) total does
    not swamp small gradient entries.  Extrapolating steps ``eps`` and
    ``eps/2`` removes the ``eps^2`` truncation term, which allows a step large
    enough to keep roundoff below the tolerance on collar entries of size
    ``1e-10``.
    """
    return (4 * _central(op, W, u, node, c, eps / 2) - _central(op, W, u, node, c, eps)) / 3


def _central(op, W, u, node, c, eps):
    from nlgrad.operators import apply_gradient_vec

    up, dn = u.copy(), u.copy()
    up[node, c] += eps
    dn[node, c] -= eps
    t = op.targets
    wp = W.value(up[t], apply_gradient_vec(op, up))
    wm = W.value(dn[t], apply_gradient_vec(op, dn))
    return op.grid.cell_volume * float(np.sum(wp - wm)) / (2 * eps)


def test_criterion_12_gradient_oracle(level):
    lv = level(8)
    rng = np.random.default_rng(12)
    x = lv.grid.points
    u = x + 0.05 * np.sin(3 * x[:, ::-1]) + 0.01 * rng.standard_normal(x.shape)
    energies = {"quadratic": StoredEnergy(QUADRATIC, anchor=0.5), **POLY_RUNS}
    eps = 1e-3
    worst, zero_ok = {}, True
    for name, W in energies.items():
        grad = eval_energy_gradient(u, lv.op, W)
        errs = []
        for flat in rng.choice(grad.size, 50, replace=False):
            node, c = divmod(int(flat), 2)
            fd = _local_fd(lv.op, W, u, node, c, eps)
            if fd == 0.0:
                # node outside every stencil: both sides must vanish exactly
                zero_ok &= grad[node, c] == 0.0
                continue
            errs.append(abs(grad[node, c] - fd) / abs(fd))
        worst[name] = max(errs)
    ok = max(worst.values()) <= 1e-5 and zero_ok
    record(12, ok, "50 coordinates per energy, max rel err: "
                   + ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
                   + f"; structurally zero entries exact={zero_ok}")
    assert ok


def test_criterion_13_poincare(level):
    a = solve.estimate_poincare(level(8).grid, level(8).op)
    b = solve.estimate_poincare(level(16).grid, level(16).op)
    change = abs(b - a) / a
    ok = bool(np.isfinite(a) and np.isfinite(b) and a > 0 and b > 0 and change <= 0.1)
    record(13, ok, f"C(delta/8)={a:.4f} C(delta/16)={b:.4f} relative change {change:.1e} (limit 0.1)")
    assert ok


def _cli_run(tmp_path, tag, name, threads, edit=None):
    cfg = json.loads((CONFIGS / name).read_text())
    cfg.pop("output", None)
    if edit:
        edit(cfg)
    path = tmp_path / f"{tag}.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / tag
    code = cli.main([cfg["command"], "--config", str(path), "--out", str(out), "--threads", str(threads), "--seed", "0"])
    return code, out


def test_criterion_14_reproducibility(tmp_path):
    def coarse(cfg):
        cfg["grid"]["h"] = [0.0625, 0.03125]

    def sweep(cfg):
        cfg["sweep"]["h"] = [0.0625]

    checks = {}
    for name, csv_name, edit in (("identities_2d.json", "identities.csv", coarse),
                                 ("minimize_quadratic_affine.json", "state.csv", None),
                                 ("sweep_poincare.json", "sweep.csv", sweep)):
        codes, blobs = [], []
        for rep in range(2):
            code, out = _cli_run(tmp_path, f"{Path(name).stem}_{rep}", name, 2, edit)
            codes.append(code)
            blobs.append((out / csv_name).read_bytes())
        checks[csv_name] = codes == [0, 0] and blobs[0] == blobs[1]
    ok = all(checks.values())
    record(14, ok, "byte-identical reruns (threads=2, seed=0): " + ", ".join(f"{k}={v}" for k, v in checks.items()))
    assert ok
