"""Discrete direct method with volumetric Dirichlet data.

The unknowns are the INTERIOR nodal values; every other node is frozen at
the boundary datum.  Minimisation is limited-memory BFGS with a strong-Wolfe
line search (scipy), falling back to Armijo backtracking along steepest
descent when the quasi-Newton step fails.
"""

from __future__ import annotations

import time
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import line_search
from scipy.optimize._linesearch import LineSearchWarning
from scipy.sparse.linalg import splu, spsolve

from . import grid as gridmod
from .energy import QUADRATIC, eval_energy, eval_energy_gradient
from .errors import ConvergenceError, EnergyEvaluationError, ParameterError, PreconditionError
from .operators import apply_gradient, apply_gradient_vec


@dataclass
class DirichletProblem:
    grid: object
    op: object
    energy: object
    datum: object  # VectorForm
    g: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.datum = gridmod.vector_form(self.datum, self.grid.domain)
        self.g = self.datum.value(self.grid.points)
        if self.g.shape != (self.grid.n_nodes, self.grid.dim):
            raise ParameterError(f"boundary datum must have {self.grid.dim} components")

    @property
    def free(self):
        return self.grid.interior_nodes

    def state(self, x):
        """Full nodal field from free values ``x`` (flattened or ``(F, n)``)."""
        u = self.g.copy()
        u[self.free] = np.reshape(x, (len(self.free), self.grid.dim))
        return u

    def energy_value(self, x):
        return eval_energy(self.state(x), self.op, self.energy)

    def energy_grad(self, x):
        return eval_energy_gradient(self.state(x), self.op, self.energy, self.free).ravel()


@dataclass
class OptimizerConfig:
    max_iter: int = 500
    grad_tol: float = 1e-8
    memory: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    ls_max_iter: int = 40
    backtrack_steps: int = 60

    def __post_init__(self):
        if self.max_iter < 0 or self.memory < 1 or not self.grad_tol > 0:
            raise ParameterError("invalid optimizer configuration")
        if not 0 < self.c1 < self.c2 < 1:
            raise ParameterError("line search needs 0 < c1 < c2 < 1")


@dataclass
class SolveReport:
    state: np.ndarray
    energy_history: list
    grad_norm: float
    iterations: int
    converged: bool
    failed: bool
    message: str
    wall_time: float
    fallback_steps: int = 0
    el_residuals: list = field(default_factory=list)

    def to_dict(self):
        return {
            "converged": self.converged,
            "failed": self.failed,
            "message": self.message,
            "iterations": self.iterations,
            "grad_norm": self.grad_norm,
            "final_energy": self.energy_history[-1] if self.energy_history else None,
            "energy_history": list(self.energy_history),
            "fallback_steps": self.fallback_steps,
            "wall_time": self.wall_time,
            "el_residuals": [dict(r) for r in self.el_residuals],
        }


def _safe_value(problem, x):
    try:
        return problem.energy_value(x)
    except EnergyEvaluationError:
        return np.inf


def _two_loop(grad, pairs):
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _backtrack(problem, x, f, g, d, cfg):
    slope = g @ d
    t = 1.0
    for _ in range(cfg.backtrack_steps):
        f_new = _safe_value(problem, x + t * d)
        if f_new <= f + cfg.c1 * t * slope:
            return t, f_new
        t *= 0.5
    return None, f


def minimize(problem, config=None, initial=None):
    """Minimise the discrete energy over the free nodes.

    ``initial`` (full nodal field) defaults to the boundary datum; its
    non-free values are ignored.
    """
    cfg = config or OptimizerConfig()
    t0 = time.perf_counter()
    start = problem.g if initial is None else np.asarray(initial, dtype=float)
    x = start[problem.free].ravel().copy()
    f = problem.energy_value(x)  # raises on a non-finite initial iterate
    g = problem.energy_grad(x)
    history = [f]
    pairs = deque(maxlen=cfg.memory)
    it, fallbacks, failed, message = 0, 0, False, "max_iter reached"
    while True:
        gnorm = float(np.linalg.norm(g))
        if gnorm <= cfg.grad_tol:
            message = "gradient tolerance reached"
            break
        if it >= cfg.max_iter:
            break
        d = _two_loop(g, list(pairs))
        if not g @ d < 0:
            d = -g
            pairs.clear()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LineSearchWarning)
            warnings.simplefilter("ignore", RuntimeWarning)
            res = line_search(
                lambda z: _safe_value(problem, z), problem.energy_grad, x, d, g, f,
                c1=cfg.c1, c2=cfg.c2, maxiter=cfg.ls_max_iter,
            )
        step, f_new = res[0], res[3]
        if step is None or not np.isfinite(f_new) or f_new > f:
            fallbacks += 1
            pairs.clear()
            d = -g
            step, f_new = _backtrack(problem, x, f, g, d, cfg)
            if step is None:
                failed, message = True, "line search failed after steepest-descent fallback"
                break
        x_new = x + step * d
        g_new = problem.energy_grad(x_new)
        s, y = x_new - x, g_new - g
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
        history.append(f)
        it += 1
    return SolveReport(
        problem.state(x), history, float(np.linalg.norm(g)), it,
        bool(np.linalg.norm(g) <= cfg.grad_tol), failed, message,
        time.perf_counter() - t0, fallbacks,
    )


def solve_quadratic_direct(problem):
    """Direct sparse solve of the normal equations of a QUADRATIC energy."""
    W = problem.energy
    if W.form != QUADRATIC:
        raise ParameterError("direct solve needs a QUADRATIC energy")
    grid, op = problem.grid, problem.op
    hn = grid.cell_volume
    free = problem.free
    fixed = np.setdiff1d(np.arange(grid.n_nodes), free)
    mats = op.matrices
    A = sum(2 * W.alpha * hn * (M[:, free].T @ M[:, free]) for M in mats)
    if W.anchor:
        A = A + W.anchor * hn * sparse.identity(len(free))
    A = A.tocsc()
    u = problem.g.copy()
    for c in range(grid.dim):
        rhs = -sum(2 * W.alpha * hn * (M[:, free].T @ (M[:, fixed] @ problem.g[fixed, c])) for M in mats)
        u[free, c] = spsolve(A, rhs)
    return u


def el_residual(state, problem, battery):
    """Weak Euler-Lagrange pairings against ``phi e_c`` for each ``phi`` in the battery.

    Each entry holds the pairing ``int D_yW . phi e_c + D_FW : D(phi e_c)``
    and its scale ``||phi||`` (Euclidean norm of the free nodal values), the
    constant for which ``|pairing| <= ||grad E|| * scale``.
    """
    grid, op, W = problem.grid, problem.op, problem.energy
    state = np.asarray(state, dtype=float)
    G = apply_gradient_vec(op, state)
    uo = state[op.targets]
    dF = W.dF(uo, G)
    dy = W.dy(uo, G)
    hn = grid.cell_volume
    out = []
    for idx, phi in enumerate(battery):
        vals = gridmod.closed_form(phi, grid.domain).value(grid.points)
        if np.any(vals[grid.node_class != gridmod.NodeClass.INTERIOR] != 0.0):
            raise PreconditionError(f"test function {idx} is not supported in the eroded interior")
        Dphi = apply_gradient(op, vals)
        scale = float(np.linalg.norm(vals[problem.free]))
        for c in range(grid.dim):
            pairing = hn * float(np.sum(dy[:, c] * vals[op.targets]) + np.sum(dF[:, c, :] * Dphi))
            out.append({"test": idx, "component": c, "pairing": pairing, "scale": scale})
    return out


def el_battery(domain, ks=(1, 2, 3)):
    """Sine-squared bumps supported in the eroded interior."""
    lo = np.asarray(domain.lower) + domain.delta
    hi = np.asarray(domain.upper) - domain.delta
    return [gridmod.TrigBump(lo, hi, k=k, power=2) for k in ks]


def normal_operator(grid, op):
    """``h^n sum_i M_i[:, F]^T M_i[:, F]`` on the free (INTERIOR) nodes."""
    free = grid.interior_nodes
    hn = grid.cell_volume
    return sum(hn * (M[:, free].T @ M[:, free]) for M in op.matrices).tocsc()


def coarse_prolongation(grid):
    """Piecewise-linear prolongation from the ``2h`` sublattice to the free nodes.

    Coarse nodes are every other lattice line starting at the zero layer just
    outside the free block; the result is a sparse ``(free, coarse)`` matrix
    whose columns are tensor-product hat functions vanishing off the block.
    """
    free = grid.interior_nodes
    idx = grid.index[free]
    factors = []
    for a in range(grid.dim):
        fine = np.unique(idx[:, a])
        lo, hi = fine[0] - 1, fine[-1] + 1
        coarse = np.arange(lo, hi + 1, 2)
        if coarse[-1] != hi:
            coarse = np.append(coarse, hi)
        cols = []
        for j in range(1, len(coarse) - 1):
            e = np.zeros(len(coarse))
            e[j] = 1.0
            cols.append(np.interp(fine, coarse, e))
        factors.append(sparse.csr_matrix(np.stack(cols, axis=1)))
    if np.prod([f.shape[0] for f in factors]) != len(free):
        raise ParameterError("free nodes do not form a tensor block")
    out = factors[0]
    for f in factors[1:]:
        out = sparse.kron(out, f)
    return out.tocsc()


def estimate_poincare(grid, op, subspace="coarse", rtol=1e-6, max_iter=10_000, shift=0.0, seed=0):
    """Discrete Poincare constant ``1/sqrt(lambda_min)`` for ``p = q = 2``.

    ``lambda_min`` minimises ``||D u||^2 / ||u||^2`` over fields vanishing
    off the free nodes, found by shifted inverse power iteration on the
    generalised problem ``B v = lambda M v``.

    ``subspace="nodal"`` uses every nodal field.  Odd stencils annihilate
    sawtooth modes of period ``2h``, so that quotient degrades like
    ``h^(1-s)`` under refinement.  ``subspace="coarse"`` (default) restricts
    to piecewise-linear fields from the ``2h`` sublattice, which stays stable.
    """
    A = normal_operator(grid, op) / grid.cell_volume
    if subspace == "nodal":
        B, M = A, sparse.identity(A.shape[0], format="csc")
    elif subspace == "coarse":
        P = coarse_prolongation(grid)
        B, M = (P.T @ A @ P).tocsc(), (P.T @ P).tocsc()
    else:
        raise ParameterError(f"unknown Poincare subspace {subspace!r}")
    lu = splu((B - shift * M).tocsc())
    v = np.random.default_rng(seed).standard_normal(B.shape[0])
    v /= np.sqrt(v @ (M @ v))
    lam = v @ (B @ v)
    for _ in range(max_iter):
        w = lu.solve(M @ v)
        v = w / np.sqrt(w @ (M @ w))
        lam_new = v @ (B @ v)
        if abs(lam_new - lam) <= rtol * abs(lam_new):
            if not lam_new > 0:
                raise ConvergenceError("normal operator is not positive definite")
            return float(1.0 / np.sqrt(lam_new))
        lam = lam_new
    raise ConvergenceError(f"inverse iteration did not converge in {max_iter} steps")
