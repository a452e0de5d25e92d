"""Discrete checks of the identities of the nonlocal calculus.

Every check returns an :class:`IdentityReport`.  Integrals over the box are
node sums with weight ``h^n`` over the ``INTERIOR | CORE`` nodes, taken in
node order so reports are bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grid as gridmod
from .energy import cof, det, minors
from .errors import ParameterError, PreconditionError
from .operators import (
    apply_convolution,
    apply_divergence,
    apply_divergence_mat,
    apply_gradient,
    apply_gradient_vec,
    apply_K,
)

TINY = 1e-300
REFINEMENT_RATIO = 0.7


@dataclass
class IdentityReport:
    name: str
    lhs: object
    rhs: object
    abs_residual: float
    rel_residual: float
    h: float
    params: dict
    extra: dict = field(default_factory=dict)

    def row(self):
        return {
            "identity": self.name,
            "h": self.h,
            "s": self.params["s"],
            "delta": self.params["delta"],
            "abs_residual": self.abs_residual,
            "rel_residual": self.rel_residual,
        }


def _report(name, op, lhs, rhs, abs_res, scale, **extra):
    abs_res = float(abs_res)
    rel = abs_res / scale if scale > TINY else abs_res
    return IdentityReport(name, lhs, rhs, abs_res, float(rel), op.grid.h, op.params.as_dict(), extra)


def integrate(grid, values):
    """``h^n`` times the node sum of box-node values (first axis = box nodes)."""
    return grid.cell_volume * np.sum(np.asarray(values), axis=0)


def is_decreasing(residuals, ratio=REFINEMENT_RATIO, floor=0.0):
    """``r(h/2) <= ratio * r(h)`` along a refinement sequence.

    Levels where both residuals are below ``floor`` count as passing: at
    rounding level there is nothing left to decrease.
    """
    r = list(residuals)
    return all(b <= ratio * a or max(a, b) <= floor for a, b in zip(r, r[1:]))


def observed_orders(residuals):
    r = np.asarray(residuals, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return list(np.log2(r[:-1] / r[1:]))


def test_battery(lower, upper, ks=(1, 2, 3), power=2):
    """Tensor-product sine bumps on ``[lower, upper]``, zero outside."""
    return [gridmod.TrigBump(lower, upper, k=k, power=power) for k in ks]


def interior_box(domain):
    lo = np.asarray(domain.lower) + domain.delta
    hi = np.asarray(domain.upper) - domain.delta
    return lo, hi


# --- duality ---------------------------------------------------------------


def duality_terms(op, u, phi):
    """``(A, B, C)`` of the three-term duality; ``phi`` must vanish on the collar."""
    grid = op.grid
    u = np.asarray(u, dtype=float)
    phi = np.asarray(phi, dtype=float)
    collar = grid.node_class == gridmod.NodeClass.COLLAR
    if np.any(phi[collar] != 0.0):
        raise PreconditionError("test field must vanish outside the box (collar values nonzero)")
    phi_o = phi[op.targets]
    A = float(integrate(grid, np.sum(apply_gradient(op, u) * phi_o, axis=1)))
    B = -float(integrate(grid, u[op.targets] * apply_divergence(op, phi)))
    # boundary coupling: collar sources only, same weights as the gradient
    src = op.sources
    uy = np.where(collar[src], u[src], 0.0)
    C = -float(integrate(grid, np.sum(phi_o * (uy @ op.weights), axis=1)))
    return A, B, C


def residual_duality(op, u, phi):
    A, B, C = duality_terms(op, u, phi)
    scale = max(abs(A), abs(B), abs(C))
    return _report("duality", op, A, B + C, abs(A - B - C), scale, A=A, B=B, C=C)


# --- rounding-level identities ----------------------------------------------


def _maxabs(*arrays):
    return max(float(np.max(np.abs(a))) if np.size(a) else 0.0 for a in arrays)


def residual_product_scalar(op, phi, g):
    lhs = apply_gradient(op, phi * g)
    t1 = phi[op.targets][:, None] * apply_gradient(op, g)
    t2 = apply_K(op, phi, g)
    res = _maxabs(lhs - t1 - t2)
    return _report("product_scalar", op, lhs, t1 + t2, res, _maxabs(lhs, t1, t2))


def residual_product_vector(op, phi, g):
    """``D(phi g) = phi D g + K_phi(g^T)`` for a vector field ``g``."""
    lhs = apply_gradient_vec(op, phi[:, None] * g)
    t1 = phi[op.targets][:, None, None] * apply_gradient_vec(op, g)
    t2 = apply_K(op, phi, g, variant="outer")
    res = _maxabs(lhs - t1 - t2)
    return _report("product_vector", op, lhs, t1 + t2, res, _maxabs(lhs, t1, t2))


def residual_product_divergence(op, phi, Phi):
    """``div(phi Phi) = phi div Phi + K_phi(Phi)`` for vector or matrix ``Phi``."""
    Phi = np.asarray(Phi, dtype=float)
    if Phi.ndim == 2:
        lhs = apply_divergence(op, phi[:, None] * Phi)
        t1 = phi[op.targets] * apply_divergence(op, Phi)
        t2 = apply_K(op, phi, Phi, variant="dot")
        name = "product_divergence"
    else:
        lhs = apply_divergence_mat(op, phi[:, None, None] * Phi)
        t1 = phi[op.targets][:, None] * apply_divergence_mat(op, Phi)
        t2 = apply_K(op, phi, Phi, variant="matrix")
        name = "product_divergence_matrix"
    res = _maxabs(lhs - t1 - t2)
    return _report(name, op, lhs, t1 + t2, res, _maxabs(lhs, t1, t2))


def residual_trace(op, phi):
    G = apply_gradient_vec(op, phi)
    lhs = np.trace(G, axis1=1, axis2=2)
    rhs = apply_divergence(op, phi)
    return _report("trace", op, lhs, rhs, _maxabs(lhs - rhs), _maxabs(lhs, rhs))


def residual_K_trace(op, phi, U):
    outer = apply_K(op, phi, U, variant="outer")
    lhs = np.trace(outer, axis1=1, axis2=2)
    rhs = apply_K(op, phi, U, variant="dot")
    return _report("K_trace", op, lhs, rhs, _maxabs(lhs - rhs), _maxabs(lhs, rhs))


# --- local / nonlocal equivalence ------------------------------------------


def _outermost_layer(grid):
    """Nodes whose distance to the box exceeds ``delta - h``."""
    lower = np.asarray(grid.domain.lower)
    upper = np.asarray(grid.domain.upper)
    gap = np.maximum(np.maximum(lower - grid.points, grid.points - upper), 0.0)
    dist = np.sqrt(np.sum(gap**2, axis=1))
    return dist > grid.domain.delta - grid.h * (1 + 1e-9)


def _box_position(grid):
    """Map node number -> row in box-node order (``-1`` for collar nodes)."""
    pos = np.full(grid.n_nodes, -1, dtype=np.int64)
    pos[grid.omega_nodes] = np.arange(len(grid.omega_nodes))
    return pos


def central_difference(grid, values, nodes):
    """Central differences (spacing ``h``) of a box-node field at ``nodes``.

    ``values`` has one row per box node; output shape ``(len(nodes), ..., n)``
    with the derivative index last.
    """
    values = np.asarray(values, dtype=float)
    pos = _box_position(grid)
    out = []
    for i in range(grid.dim):
        e = np.zeros(grid.dim, dtype=np.int64)
        e[i] = 1
        plus = pos[grid.node_of(grid.index[nodes] + e)]
        minus = pos[grid.node_of(grid.index[nodes] - e)]
        if np.any(plus < 0) or np.any(minus < 0):
            raise ParameterError("central difference stencil leaves the box")
        out.append((values[plus] - values[minus]) / (2 * grid.h))
    return np.stack(out, axis=-1)


def residual_gradient_equivalence(op, conv, u):
    """``D u`` against central differences of ``Q * u`` at INTERIOR nodes."""
    grid = op.grid
    u = np.asarray(u, dtype=float)
    if np.any(u[_outermost_layer(grid)] != 0.0):
        raise PreconditionError("field must vanish on the outermost collar layer")
    if not np.array_equal(conv.targets, op.targets):
        raise ParameterError("convolution must be evaluated at the box nodes")
    nodes = grid.interior_nodes
    lhs = apply_gradient(op, u)[grid.interior_in_omega]
    rhs = central_difference(grid, apply_convolution(conv, u), nodes)
    return _report("gradient_equivalence", op, lhs, rhs, _maxabs(lhs - rhs), _maxabs(lhs))


# --- Piola and determinant integration by parts ---------------------------


def _l2(grid, values):
    return float(np.sqrt(integrate(grid, np.sum(np.reshape(values, (len(values), -1)) ** 2, axis=1))))


def residual_piola_pointwise(op, u):
    """Max norm of the central-difference divergence of ``cof(D u)`` at INTERIOR nodes."""
    grid = op.grid
    C = cof(apply_gradient_vec(op, u))
    dC = central_difference(grid, C, grid.interior_nodes)  # (I, n, n, n): d_k C_ij
    div = np.einsum("tijj->ti", dC)
    return _report("piola_pointwise", op, div, 0.0, _maxabs(div), _maxabs(C) / grid.h)


def residual_piola(op, u, battery):
    """Weak form ``|int cof(D u) D phi|`` maximised over a test battery.

    The relative residual divides by ``||cof D u||_2 ||D phi||_2``.
    """
    grid = op.grid
    x = grid.points[op.targets]
    C = cof(apply_gradient_vec(op, u))
    worst_abs, worst_rel = 0.0, 0.0
    values = []
    for phi in battery:
        dphi = phi.grad(x)
        v = integrate(grid, np.einsum("tij,tj->ti", C, dphi))
        a = float(np.linalg.norm(v))
        scale = _l2(grid, C) * _l2(grid, dphi)
        values.append(a)
        worst_abs = max(worst_abs, a)
        worst_rel = max(worst_rel, a / scale if scale > TINY else a)
    rep = _report("piola_weak", op, values, 0.0, worst_abs, 1.0)
    rep.rel_residual = worst_rel
    return rep


def det_ibp_terms(op, conv, u, phi):
    """``(int det(Du) phi, -(1/n) int (Q*u) . cof(Du) D phi)``."""
    grid = op.grid
    n = grid.dim
    x = grid.points[op.targets]
    G = apply_gradient_vec(op, u)
    lhs = float(integrate(grid, det(G) * phi.value(x)))
    Qu = apply_convolution(conv, u)
    rhs = -float(integrate(grid, np.einsum("ti,tij,tj->t", Qu, cof(G), phi.grad(x)))) / n
    return lhs, rhs


def residual_det_ibp(op, conv, u, phi):
    lhs, rhs = det_ibp_terms(op, conv, u, phi)
    return _report("det_ibp", op, lhs, rhs, abs(lhs - rhs), max(abs(lhs), abs(rhs)))


# --- weak continuity ----------------------------------------------------------


def weak_continuity_probe(op, u, phi, schedule=(2, 4, 8, 16, 32), direction=0, amplitude=1.0):
    """Gaps ``|int (mu(D u_j) - mu(D u)) phi|`` for ``u_j = u + (A/j) sin(j x_1) e``.

    ``u`` is a node-sampled vector field, ``phi`` a closed-form scalar.
    Returns one report per ``j``; ``extra`` holds the gaps split into entries
    (max over ``F_ij``), ``cof`` (max over cofactor entries) and ``det``.
    """
    grid = op.grid
    schedule = list(schedule)
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ParameterError("frequency schedule must be increasing")
    n = grid.dim
    x = grid.points
    w = phi.value(x[op.targets])
    G0 = apply_gradient_vec(op, u)
    base = integrate(grid, minors(G0) * w[:, None])
    base_cof = integrate(grid, cof(G0).reshape(len(w), -1) * w[:, None])
    e = np.zeros(n)
    e[direction] = 1.0
    reports = []
    for j in schedule:
        uj = u + (amplitude / j) * np.sin(j * x[:, 0])[:, None] * e
        Gj = apply_gradient_vec(op, uj)
        gap_mu = np.abs(integrate(grid, minors(Gj) * w[:, None]) - base)
        gap_cof = np.abs(integrate(grid, cof(Gj).reshape(len(w), -1) * w[:, None]) - base_cof)
        gaps = {
            "entries": float(np.max(gap_mu[: n * n])),
            "cof": float(np.max(gap_cof)),
            "det": float(gap_mu[-1]),
        }
        rep = _report("weak_continuity", op, j, 0.0, max(gaps.values()), 1.0, j=j, gaps=gaps,
                      unreliable=bool(j * grid.h > np.pi))
        reports.append(rep)
    return reports


def loglog_slope(js, gaps):
    return float(np.polyfit(np.log(js), np.log(gaps), 1)[0])


# --- norms ----------------------------------------------------------------------


def hspd_norm(op, u, p=2.0):
    """``(||u||_p^p on the closure + ||D u||_p^p on the box)^(1/p)``."""
    if p < 1:
        raise ParameterError(f"exponent p must be >= 1, got {p}")
    grid = op.grid
    u = np.asarray(u, dtype=float)
    G = apply_gradient(op, u) if u.ndim == 1 else apply_gradient_vec(op, u)
    uabs = np.abs(u) if u.ndim == 1 else np.sqrt(np.sum(u**2, axis=1))
    gabs = np.sqrt(np.sum(G.reshape(len(G), -1) ** 2, axis=1))
    hn = grid.cell_volume
    return float((hn * np.sum(uabs**p) + hn * np.sum(gabs**p)) ** (1.0 / p))


# --- closed-form affine battery and operator bounds -----------------------------


def residual_affine(op, b):
    """``D (b.x)`` against ``m b`` at every box node (relative to ``m |b|``)."""
    from .kernels import affine_multiplier

    b = np.asarray(b, dtype=float)
    m = affine_multiplier(op.params)
    Du = apply_gradient(op, op.grid.points @ b)
    err = _maxabs(Du - m * b)
    return _report("affine", op, Du, m * b, err, m * float(np.linalg.norm(b)), m=m)


def residual_constant(op):
    """``max |D 1|`` relative to the affine multiplier."""
    from .kernels import affine_multiplier

    Du = apply_gradient(op, np.ones(op.grid.n_nodes))
    return _report("constant_annihilation", op, Du, 0.0, _maxabs(Du), affine_multiplier(op.params))


def k_bound_ratio(op, phi, U):
    """``||K_phi(U)||_2 / ((n-1+s) [phi]_Lip ||rho||_1 ||U||_2``; at most 1 in theory.

    ``phi`` is a closed form (its Lipschitz bound is used), ``U`` a nodal
    field of any rank; the norm of ``U`` is taken over every node.
    """
    from .kernels import rho_l1_norm

    grid = op.grid
    K = apply_K(op, phi.value(grid.points), U)
    lhs = _l2(grid, K)
    hn = grid.cell_volume
    normU = float(np.sqrt(hn * np.sum(np.reshape(U, (len(U), -1)) ** 2)))
    bound = op.params.alpha * phi.lipschitz(grid.dim) * rho_l1_norm(op.params) * normU
    return lhs / bound if bound > 0 else (0.0 if lhs == 0 else np.inf)


def gradient_bound_ratio(op, u):
    """``||D u||_2(box) / ((n-1+s) ||rho||_1 ||grad u||_2(closure))`` for a closed form ``u``."""
    from .kernels import rho_l1_norm

    grid = op.grid
    Du = apply_gradient(op, u.value(grid.points))
    gu = u.grad(grid.points)
    rhs = op.params.alpha * rho_l1_norm(op.params) * float(np.sqrt(grid.cell_volume * np.sum(gu**2)))
    return _l2(grid, Du) / rhs if rhs > 0 else 0.0


# --- the identity battery ---------------------------------------------------------

ROUNDING = "rounding"
QUADRATURE = "quadrature"
ROUNDING_TOL = 1e-12

#: name -> (class, relative tolerance)
TOLERANCES = {
    "constant_annihilation": (ROUNDING, ROUNDING_TOL),
    "trace": (ROUNDING, ROUNDING_TOL),
    "product_scalar": (ROUNDING, ROUNDING_TOL),
    "product_vector": (ROUNDING, ROUNDING_TOL),
    "product_divergence": (ROUNDING, ROUNDING_TOL),
    "product_divergence_matrix": (ROUNDING, ROUNDING_TOL),
    "K_trace": (ROUNDING, ROUNDING_TOL),
    "cof_identity": (ROUNDING, ROUNDING_TOL),
    "piola_affine": (ROUNDING, ROUNDING_TOL),
    "det_ibp_zero": (ROUNDING, ROUNDING_TOL),
    "affine": (QUADRATURE, 0.02),
    "gradient_equivalence": (QUADRATURE, 0.05),
    "duality": (QUADRATURE, 0.02),
    "piola_weak": (QUADRATURE, 0.02),
    "det_ibp": (QUADRATURE, 0.02),
}


def perturbed_identity_maps(x):
    """Smooth perturbations of the identity map used by the Piola and determinant checks."""
    a, b = x[:, 0], x[:, 1]
    return {
        "separable": np.stack([a + 0.1 * np.sin(np.pi * b), b + 0.1 * np.sin(np.pi * a)], axis=1),
        "mixed": np.stack(
            [a + 0.1 * np.sin(np.pi * (a + 2 * b)), b + 0.1 * np.cos(np.pi * (2 * a - b))], axis=1
        ),
    }


def equivalence_bumps(domain):
    """Radial bumps that vanish on the outer collar layer."""
    lo = np.asarray(domain.lower, dtype=float)
    hi = np.asarray(domain.upper, dtype=float)
    mid = 0.5 * (lo + hi)
    edge = float(np.min(hi - lo))
    return [
        gridmod.RadialBump(mid, 0.5 * edge + 0.4 * domain.delta),
        gridmod.RadialBump(lo + 0.4 * (hi - lo), 0.3 * edge),
    ]


def _random_smooth(rng, domain, n):
    b = rng.uniform(-1, 1, n)
    k = rng.uniform(-2 * np.pi, 2 * np.pi, n)
    return gridmod.Sum([gridmod.Affine(b, rng.uniform(-1, 1)), gridmod.Wave(k, rng.uniform(0.2, 1.0), rng.uniform(0, 2 * np.pi))])


def det_ibp_natural(op, conv, u, phi):
    """Determinant integration by parts relative to the integrand magnitudes.

    The scale is ``max(int |det(Du) phi|, (1/n) int |(Q*u) . cof(Du) D phi|)``;
    the signed right-hand side cancels strongly for oscillating ``phi``.
    """
    grid = op.grid
    x = grid.points[op.targets]
    G = apply_gradient_vec(op, u)
    lhs, rhs = det_ibp_terms(op, conv, u, phi)
    Qu = apply_convolution(conv, u)
    m1 = float(integrate(grid, np.abs(det(G) * phi.value(x))))
    m2 = float(integrate(grid, np.abs(np.einsum("ti,tij,tj->t", Qu, cof(G), phi.grad(x))))) / grid.dim
    return _report("det_ibp", op, lhs, rhs, abs(lhs - rhs), max(m1, m2),
                   value_relative=abs(lhs - rhs) / max(abs(lhs), abs(rhs), TINY))


def identity_battery(op, conv, seed=0):
    """All identity residuals at one grid level (``n = 2``)."""
    grid = op.grid
    if grid.dim != 2:
        raise ParameterError("the identity battery is defined for n = 2")
    rng = np.random.default_rng(seed)
    x = grid.points
    N, n = grid.n_nodes, grid.dim
    dom = grid.domain
    out = [residual_constant(op)]

    # rounding-level identities on random inputs
    phi = _random_smooth(rng, dom, n).value(x)
    g = rng.standard_normal(N)
    gv = rng.standard_normal((N, n))
    Gm = rng.standard_normal((N, n, n))
    out.append(residual_trace(op, gv))
    out.append(residual_product_scalar(op, phi, g))
    out.append(residual_product_vector(op, phi, gv))
    out.append(residual_product_divergence(op, phi, gv))
    out.append(residual_product_divergence(op, phi, Gm))
    out.append(residual_K_trace(op, phi, gv))
    A = rng.standard_normal((1000, n, n))
    lhs = cof(A) @ np.swapaxes(A, 1, 2)
    rhs = det(A)[:, None, None] * np.eye(n)
    out.append(_report("cof_identity", op, lhs, rhs, _maxabs(lhs - rhs), _maxabs(lhs, rhs)))

    out.append(residual_affine(op, (0.7, -0.4)))

    reps = [residual_gradient_equivalence(op, conv, bump.value(x)) for bump in equivalence_bumps(dom)]
    out.append(max(reps, key=lambda r: r.rel_residual))

    lo, hi = np.asarray(dom.lower, float), np.asarray(dom.upper, float)
    pad = dom.delta
    u = gridmod.TrigBump(lo - pad, hi + pad, 1, truncate=False).value(x) + 0.3 * x[:, 0]
    pair = np.stack([gridmod.TrigBump(lo, hi, 1).value(x), gridmod.TrigBump(lo, hi, 2).value(x)], axis=1)
    out.append(residual_duality(op, u, pair))

    battery = test_battery(lo, hi)
    maps = perturbed_identity_maps(x)
    reps = [residual_piola(op, m, battery) for m in maps.values()]
    out.append(max(reps, key=lambda r: r.rel_residual))
    aff = x @ np.array([[1.2, 0.3], [-0.2, 0.9]]).T
    rep = residual_piola_pointwise(op, aff)
    rep.name = "piola_affine"
    out.append(rep)

    reps = [det_ibp_natural(op, conv, m, phi_) for m in maps.values() for phi_ in battery]
    out.append(max(reps, key=lambda r: r.rel_residual))
    zero = det_ibp_terms(op, conv, np.zeros((N, n)), battery[0])
    out.append(_report("det_ibp_zero", op, zero[0], zero[1], abs(zero[0] - zero[1]), 1.0))
    return out


def assess(levels, delta, tolerances=None, coarse_limit=None):
    """Pass/fail per identity over a refinement sequence.

    ``levels`` is a list of report lists, one per grid level, ordered from
    coarse to fine.  Rounding identities must meet their tolerance at every
    level.  Quadrature identities must meet theirs at every level with
    ``h <= coarse_limit`` (default ``delta/8``) and shrink by the refinement
    ratio between consecutive levels (or sit below the rounding tolerance).
    """
    tolerances = dict(TOLERANCES if tolerances is None else tolerances)
    coarse_limit = delta / 8 if coarse_limit is None else coarse_limit
    names = [r.name for r in levels[0]]
    summary = {}
    for name in names:
        reps = [next(r for r in lvl if r.name == name) for lvl in levels]
        cls, tol = tolerances.get(name, (QUADRATURE, np.inf))
        rel = [r.rel_residual for r in reps]
        hs = [r.h for r in reps]
        if cls == ROUNDING:
            level_ok = all(v <= tol for v in rel)
            refine_ok = True
        else:
            level_ok = all(v <= tol for v, h in zip(rel, hs) if h <= coarse_limit * (1 + 1e-12))
            refine_ok = is_decreasing(rel, floor=ROUNDING_TOL)
        summary[name] = {
            "class": cls,
            "tolerance": tol,
            "h": hs,
            "rel_residual": rel,
            "abs_residual": [r.abs_residual for r in reps],
            "level_pass": bool(level_ok),
            "refinement_pass": bool(refine_ok),
            "pass": bool(level_ok and refine_ok),
        }
    return summary
