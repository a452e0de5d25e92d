import numpy as np
import pytest

from nlgrad import calculus, kernels
from nlgrad import grid as gridmod
from nlgrad.errors import ParameterError, PreconditionError


@pytest.fixture(scope="module")
def lvl(level):
    return level(8)


def bump_pair(x, domain):
    return np.stack(
        [gridmod.TrigBump(domain.lower, domain.upper, 1).value(x),
         gridmod.TrigBump(domain.lower, domain.upper, 2).value(x)], axis=1
    )


def test_duality_zero_field(lvl, domain):
    x = lvl.grid.points
    rep = calculus.residual_duality(lvl.op, np.zeros(len(x)), bump_pair(x, domain))
    assert rep.abs_residual == 0.0


def test_duality_constant_field(lvl, domain):
    x = lvl.grid.points
    A, B, C = calculus.duality_terms(lvl.op, np.ones(len(x)), bump_pair(x, domain))
    assert A == 0.0
    assert abs(B + C) <= 1e-14


def test_duality_bumps(lvl, domain):
    x = lvl.grid.points
    u = gridmod.TrigBump((-0.25, -0.25), (1.25, 1.25), 1, truncate=False).value(x) + 0.3 * x[:, 0]
    rep = calculus.residual_duality(lvl.op, u, bump_pair(x, domain))
    assert rep.rel_residual <= 1e-12
    assert abs(rep.extra["C"]) > 1e-3  # the collar term is not negligible


def test_duality_requires_support(lvl):
    x = lvl.grid.points
    with pytest.raises(PreconditionError):
        calculus.residual_duality(lvl.op, np.ones(len(x)), np.ones((len(x), 2)))


def test_product_rules(lvl, rng):
    N = lvl.grid.n_nodes
    x = lvl.grid.points
    phi = np.sin(3 * x[:, 0]) * np.cos(2 * x[:, 1])
    g = rng.standard_normal(N)
    assert calculus.residual_product_scalar(lvl.op, phi, g).rel_residual <= 1e-12
    assert calculus.residual_product_vector(lvl.op, phi, rng.standard_normal((N, 2))).rel_residual <= 1e-12
    assert calculus.residual_product_divergence(lvl.op, phi, rng.standard_normal((N, 2))).rel_residual <= 1e-12
    assert calculus.residual_product_divergence(lvl.op, phi, rng.standard_normal((N, 2, 2))).rel_residual <= 1e-12


def test_product_rule_constant_multiplier(lvl, rng):
    N = lvl.grid.n_nodes
    rep = calculus.residual_product_scalar(lvl.op, np.full(N, 2.5), rng.standard_normal(N))
    assert rep.rel_residual <= 1e-13


def test_product_rule_affine_multiplier(lvl, params):
    x = lvl.grid.points
    b = np.array([0.4, -0.9])
    rep = calculus.residual_product_scalar(lvl.op, x @ b, np.full(len(x), 2.0))
    m = kernels.affine_multiplier(params)
    np.testing.assert_allclose(rep.lhs, np.broadcast_to(2.0 * m * b, rep.lhs.shape), rtol=1e-12)
    assert rep.rel_residual <= 1e-13


def test_trace(lvl, rng, params):
    x = lvl.grid.points
    m = kernels.affine_multiplier(params)
    rep = calculus.residual_trace(lvl.op, np.tile([1.0, 2.0], (len(x), 1)))
    assert rep.abs_residual == 0.0
    rep = calculus.residual_trace(lvl.op, x)
    np.testing.assert_allclose(rep.rhs, 2 * m, rtol=1e-12)
    assert calculus.residual_trace(lvl.op, rng.standard_normal((len(x), 2))).rel_residual <= 1e-13


def test_gradient_equivalence(level, domain):
    reps = []
    for d in (4, 8, 16):
        lv = level(d)
        u = gridmod.RadialBump((0.5, 0.5), 0.6).value(lv.grid.points)
        reps.append(calculus.residual_gradient_equivalence(lv.op, lv.conv, u).rel_residual)
    assert reps[1] <= 0.05
    assert calculus.is_decreasing(reps)


def test_gradient_equivalence_zero_and_precondition(lvl):
    N = lvl.grid.n_nodes
    assert calculus.residual_gradient_equivalence(lvl.op, lvl.conv, np.zeros(N)).abs_residual == 0.0
    with pytest.raises(PreconditionError):
        calculus.residual_gradient_equivalence(lvl.op, lvl.conv, np.ones(N))


def test_gradient_equivalence_masked_affine(lvl, params):
    """Affine field under a wide plateau window: both sides give m b deep inside."""
    x = lvl.grid.points
    gap = np.maximum(np.maximum(-x, x - 1.0), 0.0)
    window = np.clip(1.0 - np.sqrt(np.sum(gap**2, axis=1)) / 0.15, 0, 1)
    window = np.where(window >= 1, 1.0, window**3 * (10 - 15 * window + 6 * window**2))
    b = np.array([0.6, -0.2])
    u = (x @ b) * window
    rep = calculus.residual_gradient_equivalence(lvl.op, lvl.conv, u)
    m = kernels.affine_multiplier(params)
    deep = np.all(np.abs(lvl.grid.points[lvl.grid.interior_nodes] - 0.5) < 0.2, axis=1)
    expected = np.broadcast_to(m * b, (int(deep.sum()), 2))
    np.testing.assert_allclose(rep.lhs[deep], expected, rtol=1e-12)
    np.testing.assert_allclose(rep.rhs[deep], expected, rtol=1e-12)


def test_piola_affine_exact(lvl):
    x = lvl.grid.points
    rep = calculus.residual_piola_pointwise(lvl.op, x @ np.array([[1.2, 0.3], [-0.2, 0.9]]).T)
    assert rep.rel_residual <= 1e-12


def test_piola_weak_refinement(level, domain):
    res = []
    for d in (4, 8, 16):
        lv = level(d)
        maps = calculus.perturbed_identity_maps(lv.grid.points)
        battery = calculus.test_battery(domain.lower, domain.upper)
        res.append(max(calculus.residual_piola(lv.op, m, battery).rel_residual for m in maps.values()))
    assert res[1] <= 0.02
    assert calculus.is_decreasing(res)


def test_det_ibp_zero_and_refinement(level, domain):
    lv = level(8)
    phi = calculus.test_battery(domain.lower, domain.upper)[0]
    lhs, rhs = calculus.det_ibp_terms(lv.op, lv.conv, np.zeros((lv.grid.n_nodes, 2)), phi)
    assert lhs == 0.0 and rhs == 0.0
    res = []
    for d in (4, 8, 16):
        lv = level(d)
        u = calculus.perturbed_identity_maps(lv.grid.points)["mixed"]
        res.append(calculus.det_ibp_natural(lv.op, lv.conv, u, phi).rel_residual)
    assert res[1] <= 0.02
    assert calculus.is_decreasing(res)


def test_det_ibp_affine(lvl, domain, params):
    """Affine map: det(Du) = m^2 det A and Q*u = m u deep inside; both sides agree."""
    A = np.array([[1.1, 0.2], [-0.3, 0.8]])
    u = lvl.grid.points @ A.T
    phi = gridmod.TrigBump((0.3, 0.3), (0.7, 0.7), 1, power=2)
    lhs, rhs = calculus.det_ibp_terms(lvl.op, lvl.conv, u, phi)
    m = kernels.affine_multiplier(params)
    x = lvl.grid.points[lvl.op.targets]
    expected = m**2 * np.linalg.det(A) * calculus.integrate(lvl.grid, phi.value(x))
    assert lhs == pytest.approx(expected, rel=1e-12)
    assert rhs == pytest.approx(lhs, rel=0.02)


def test_weak_continuity_zero_amplitude(lvl, domain):
    phi = calculus.test_battery(domain.lower, domain.upper, ks=(1,))[0]
    reps = calculus.weak_continuity_probe(lvl.op, lvl.grid.points.copy(), phi, amplitude=0.0)
    assert all(r.abs_residual == 0.0 for r in reps)


def test_weak_continuity_flags(level, domain):
    lv = level(4)
    phi = calculus.test_battery(domain.lower, domain.upper, ks=(1,))[0]
    reps = calculus.weak_continuity_probe(lv.op, lv.grid.points.copy(), phi, (2, 64))
    assert [r.extra["unreliable"] for r in reps] == [False, True]
    with pytest.raises(ParameterError):
        calculus.weak_continuity_probe(lv.op, lv.grid.points.copy(), phi, (4, 2))


def test_weak_continuity_matches_symbol(lvl, domain, params):
    """For u = identity the entry gap equals |int D(sin(j x1)/j)_1 phi|, a linear functional."""
    from nlgrad.operators import apply_gradient

    phi = calculus.test_battery(domain.lower, domain.upper, ks=(1,))[0]
    x = lvl.grid.points
    reps = calculus.weak_continuity_probe(lvl.op, x.copy(), phi, (2, 8))
    w = phi.value(x[lvl.op.targets])
    for r in reps:
        j = r.extra["j"]
        d1 = apply_gradient(lvl.op, np.sin(j * x[:, 0]) / j)[:, 0]
        assert r.extra["gaps"]["entries"] == pytest.approx(abs(calculus.integrate(lvl.grid, d1 * w)), rel=1e-9)


def test_hspd_norm(lvl):
    g = lvl.grid
    N = g.n_nodes
    assert calculus.hspd_norm(lvl.op, np.zeros(N)) == 0.0
    for p in (1.0, 2.0, 3.5):
        assert calculus.hspd_norm(lvl.op, np.ones(N), p) == pytest.approx((N * g.cell_volume) ** (1 / p))
    u = np.sin(4 * g.points[:, 0]) * g.points[:, 1]
    for p in (1.0, 2.0, 3.0):
        assert calculus.hspd_norm(lvl.op, 2 * u, p) == pytest.approx(2 * calculus.hspd_norm(lvl.op, u, p))
    with pytest.raises(ParameterError):
        calculus.hspd_norm(lvl.op, u, 0.5)


def test_is_decreasing_rule():
    assert calculus.is_decreasing([1.0, 0.7, 0.48])
    assert not calculus.is_decreasing([1.0, 0.71])
    assert calculus.is_decreasing([3e-16, 5e-16], floor=1e-12)
    assert not calculus.is_decreasing([3e-16, 5e-16])


def test_identity_battery_reproducible(lvl):
    a = calculus.identity_battery(lvl.op, lvl.conv, seed=3)
    b = calculus.identity_battery(lvl.op, lvl.conv, seed=3)
    assert [r.row() for r in a] == [r.row() for r in b]
    assert {r.name for r in a} == set(calculus.TOLERANCES)
