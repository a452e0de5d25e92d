"""Polyconvex stored energies, minors, and the discrete total energy.

Cofactor convention: ``cof(A) A^T = det(A) I`` so that ``D det(A) = cof(A)``.
For ``n = 2``, ``cof [[a, b], [c, d]] = [[d, -c], [-b, a]]``.

Minor vector ordering (``n = 2``: 5 entries, ``n = 3``: 19 entries):
entries of ``F`` row-major, then (``n = 3`` only) entries of ``cof F``
row-major, then ``det F``.  For ``n = 2`` the 1x1 minors are the entries and
the cofactor entries are the same numbers up to sign, so they are not
repeated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EnergyEvaluationError, ParameterError
from .operators import apply_gradient_adjoint, apply_gradient_vec

QUADRATIC = "QUADRATIC"
POLY_COERCIVE = "POLY_COERCIVE"


def det(F):
    F = np.asarray(F, dtype=float)
    n = F.shape[-1]
    if n == 2:
        return F[..., 0, 0] * F[..., 1, 1] - F[..., 0, 1] * F[..., 1, 0]
    if n == 3:
        return np.einsum("...i,...i->...", F[..., 0, :], np.cross(F[..., 1, :], F[..., 2, :]))
    raise ParameterError(f"det supports n in (2, 3), got {n}")


def cof(F):
    F = np.asarray(F, dtype=float)
    n = F.shape[-1]
    if n == 2:
        C = np.empty_like(F)
        C[..., 0, 0] = F[..., 1, 1]
        C[..., 0, 1] = -F[..., 1, 0]
        C[..., 1, 0] = -F[..., 0, 1]
        C[..., 1, 1] = F[..., 0, 0]
        return C
    if n == 3:
        r0, r1, r2 = F[..., 0, :], F[..., 1, :], F[..., 2, :]
        return np.stack([np.cross(r1, r2), np.cross(r2, r0), np.cross(r0, r1)], axis=-2)
    raise ParameterError(f"cof supports n in (2, 3), got {n}")


def minors(F):
    """Minor vector ``mu(F)`` in the documented order."""
    F = np.asarray(F, dtype=float)
    n = F.shape[-1]
    lead = F.shape[:-2]
    parts = [F.reshape(lead + (n * n,))]
    if n == 3:
        parts.append(cof(F).reshape(lead + (9,)))
    parts.append(det(F)[..., None])
    return np.concatenate(parts, axis=-1)


def _cof_norm_sq_grad(F):
    """``d/dF (|cof F|^2 / 2)``."""
    n = F.shape[-1]
    if n == 2:
        return F.copy()
    FFtF = F @ np.swapaxes(F, -1, -2) @ F
    return np.sum(F * F, axis=(-1, -2))[..., None, None] * F - FFtF


@dataclass(frozen=True)
class StoredEnergy:
    """``QUADRATIC``: ``alpha |F|^2``.

    ``POLY_COERCIVE``: ``alpha |F|^p + beta |cof F|^q + h(det F)`` with
    ``h(t) = gamma1 (t - 1)^2``, or with ``barrier=True``
    ``h(t) = gamma1 t^2 - gamma2 log t`` (``+inf`` for ``t <= 0``).

    ``anchor`` adds ``anchor/2 |y|^2`` (a lower-order term in ``y``).
    """

    form: str = QUADRATIC
    alpha: float = 1.0
    beta: float = 0.0
    gamma1: float = 0.0
    p: float = 2.0
    q: float = 2.0
    barrier: bool = False
    gamma2: float = 0.0
    anchor: float = 0.0
    eps_reg: float = 1e-10

    def __post_init__(self):
        if self.form not in (QUADRATIC, POLY_COERCIVE):
            raise ParameterError(f"unknown energy form {self.form!r}")
        for name in ("alpha", "beta", "gamma1", "gamma2", "anchor"):
            if getattr(self, name) < 0:
                raise ParameterError(f"energy.{name} must be nonnegative")
        if self.form == POLY_COERCIVE and not self.p > 1:
            raise ParameterError("POLY_COERCIVE needs p > 1")

    def check_exponents(self, n):
        """Exponent ranges of the existence theory: ``p >= n-1``, ``q >= n/(n-1)``."""
        if self.form == QUADRATIC:
            return True
        return self.p >= n - 1 and self.p > 1 and self.q >= n / (n - 1)

    def _norm(self, X, e):
        sq = np.sum(X * X, axis=(-1, -2))
        return np.sqrt(sq + self.eps_reg**2) if e < 2 else np.sqrt(sq)

    def _h(self, t):
        if not self.barrier:
            return self.gamma1 * (t - 1.0) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(t > 0, self.gamma1 * t**2 - self.gamma2 * np.log(np.where(t > 0, t, 1.0)), np.inf)

    def _dh(self, t):
        if not self.barrier:
            return 2.0 * self.gamma1 * (t - 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(t > 0, 2.0 * self.gamma1 * t - self.gamma2 / np.where(t > 0, t, 1.0), np.nan)

    def value(self, y, F):
        F = np.asarray(F, dtype=float)
        y = np.asarray(y, dtype=float)
        out = 0.5 * self.anchor * np.sum(y * y, axis=-1)
        if self.form == QUADRATIC:
            return out + self.alpha * np.sum(F * F, axis=(-1, -2))
        out = out + self.alpha * self._norm(F, self.p) ** self.p
        if self.beta:
            out = out + self.beta * self._norm(cof(F), self.q) ** self.q
        if self.gamma1 or self.gamma2:
            out = out + self._h(det(F))
        return out

    def dy(self, y, F):
        return self.anchor * np.asarray(y, dtype=float)

    def dF(self, y, F):
        F = np.asarray(F, dtype=float)
        if self.form == QUADRATIC:
            return 2.0 * self.alpha * F
        nF = self._norm(F, self.p)
        out = (self.alpha * self.p * nF ** (self.p - 2))[..., None, None] * F
        if self.beta:
            nC = self._norm(cof(F), self.q)
            out = out + (self.beta * self.q * nC ** (self.q - 2))[..., None, None] * _cof_norm_sq_grad(F)
        if self.gamma1 or self.gamma2:
            out = out + self._dh(det(F))[..., None, None] * cof(F)
        return out

    def coercivity_bound(self, F):
        """``c|F|^p + c|cof F|^q + h(|det F|)`` lower bound used in the existence theory."""
        F = np.asarray(F, dtype=float)
        if self.form == QUADRATIC:
            return self.alpha * np.sum(F * F, axis=(-1, -2))
        c = min(self.alpha, self.beta) if self.beta else 0.0
        out = self.alpha * np.sqrt(np.sum(F * F, axis=(-1, -2))) ** self.p if not self.beta else 0.0
        if self.beta:
            out = c * np.sqrt(np.sum(F * F, axis=(-1, -2))) ** self.p
            out = out + c * np.sqrt(np.sum(cof(F) ** 2, axis=(-1, -2))) ** self.q
        return out

    def as_dict(self):
        return dict(self.__dict__)


def eval_W(W, x, y, F):
    """Pointwise stored energy; ``x`` is accepted for interface symmetry (no explicit x-dependence)."""
    return W.value(y, F)


def eval_DyW(W, x, y, F):
    return W.dy(y, F)


def eval_DFW(W, x, y, F):
    return W.dF(y, F)


def eval_energy(u, op, W, grad=None):
    """``sum_{x in box} h^n W(x, u(x), G[u](x))``."""
    grid = op.grid
    G = apply_gradient_vec(op, u) if grad is None else grad
    uo = np.asarray(u)[op.targets]
    vals = W.value(uo, G)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        node = int(op.targets[np.flatnonzero(bad)[0]])
        raise EnergyEvaluationError(f"non-finite stored energy at node {node}", node=node)
    return grid.cell_volume * float(np.sum(vals))


def eval_energy_gradient(u, op, W, free=None):
    """Exact gradient of :func:`eval_energy` w.r.t. nodal values.

    Returns an ``(N, n)`` array over all nodes; with ``free`` given, only the
    rows of those nodes, in that order.
    """
    grid = op.grid
    G = apply_gradient_vec(op, u)
    uo = np.asarray(u)[op.targets]
    hn = grid.cell_volume
    dF = W.dF(uo, G)
    if not np.all(np.isfinite(dF)):
        bad = np.flatnonzero(~np.all(np.isfinite(dF), axis=(1, 2)))[0]
        node = int(op.targets[bad])
        raise EnergyEvaluationError(f"non-finite energy derivative at node {node}", node=node)
    out = apply_gradient_adjoint(op, hn * dF)
    out[op.targets] += hn * W.dy(uo, G)
    if free is not None:
        free = np.asarray(free)
        if np.any(grid.node_class[free] != 0):
            raise ParameterError("free nodes must be INTERIOR nodes")
        return out[free]
    return out
