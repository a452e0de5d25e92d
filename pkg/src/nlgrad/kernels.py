"""Radial kernels of the truncated nonlocal gradient.

The cut-off ``w`` is a plateau function: equal to ``a0`` on ``[0, b0*delta]``,
zero beyond ``delta`` and a C-infinity monotone transition in between.  The
singular kernel is ``rho(r) = w(r) / (gamma(1-s) r^(n-1+s))`` and ``Q`` is the
radial potential with ``Q(delta) = 0`` and ``Q'(r) = -(n-1+s) rho(r) / r``.

On the plateau every radial integral has a closed form in powers of ``r``;
only the transition annulus ``[b0*delta, delta]`` is integrated numerically,
with composite Gauss-Legendre on a smooth integrand.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ParameterError, SingularityError

_GL_ORDER = 20
_GL_PANELS = 16
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_ORDER)


def gamma_const(s, n):
    """Riesz-potential normalisation ``pi^(n/2) 2^s Gamma(s/2) / Gamma((n-s)/2)``."""
    if not 0.0 < s < n:
        raise ParameterError(f"gamma_const needs 0 < s < n, got s={s}, n={n}")
    return math.pi ** (n / 2) * 2.0**s * math.gamma(s / 2) / math.gamma((n - s) / 2)


def cns_const(s, n):
    """Gradient normalisation ``c_{n,s} = (n-1+s) / gamma(1-s)``."""
    if not 0.0 < s < 1.0:
        raise ParameterError(f"cns_const needs 0 < s < 1, got s={s}")
    return (n - 1 + s) / gamma_const(1 - s, n)


def sphere_area(n):
    """Surface measure of the unit sphere in R^n."""
    return 2.0 * math.pi ** (n / 2) / math.gamma(n / 2)


@dataclass(frozen=True)
class KernelParams:
    n: int
    s: float
    delta: float
    a0: float = 1.0
    b0: float = 0.5

    def __post_init__(self):
        if self.n not in (2, 3):
            raise ParameterError(f"kernel.n must be 2 or 3, got {self.n}")
        if not 0.0 < self.s < 1.0:
            raise ParameterError(f"kernel.s must lie in (0, 1), got {self.s}")
        if not self.delta > 0.0:
            raise ParameterError(f"kernel.delta must be positive, got {self.delta}")
        if not self.a0 > 0.0:
            raise ParameterError(f"kernel.a0 must be positive, got {self.a0}")
        if not 0.0 < self.b0 < 1.0:
            raise ParameterError(f"kernel.b0 must lie in (0, 1), got {self.b0}")

    @property
    def alpha(self):
        """Singular exponent ``n - 1 + s`` of ``rho`` and ``Q``."""
        return self.n - 1 + self.s

    @property
    def plateau(self):
        return self.b0 * self.delta

    def as_dict(self):
        return {"n": self.n, "s": self.s, "delta": self.delta, "a0": self.a0, "b0": self.b0}


def smooth_step(t):
    """C-infinity step: 1 for t <= 0, 0 for t >= 1, strictly decreasing between."""
    t = np.asarray(t, dtype=float)
    out = np.where(t <= 0.0, 1.0, 0.0)
    mid = (t > 0.0) & (t < 1.0)
    tm = t[mid]
    out[mid] = expit(1.0 / tm - 1.0 / (1.0 - tm))
    return out


def cutoff_w(r, params):
    r = np.asarray(r, dtype=float)
    width = (1.0 - params.b0) * params.delta
    return params.a0 * smooth_step((r - params.plateau) / width)


def rho(r, params):
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise SingularityError("rho is singular at r = 0; use radial quadrature near the origin")
    g = gamma_const(1 - params.s, params.n)
    return cutoff_w(r, params) / (g * r**params.alpha)


def _gauss_legendre(f, a, b, panels=_GL_PANELS):
    """Composite Gauss-Legendre of ``f`` on ``[a_i, b_i]`` for arrays of endpoints."""
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    edges = a[:, None] + (b - a)[:, None] * np.linspace(0.0, 1.0, panels + 1)[None, :]
    lo, hi = edges[:, :-1], edges[:, 1:]
    half = 0.5 * (hi - lo)
    t = (0.5 * (hi + lo))[..., None] + half[..., None] * _GL_X
    vals = f(t) * _GL_W
    return (vals.sum(axis=-1) * half).sum(axis=-1)


def rho_l1_norm(params):
    """``||rho||_{L^1(R^n)}``; the plateau part ``int a0 r^-s dr`` is exact."""
    s, P = params.s, params.plateau
    inner = params.a0 * P ** (1 - s) / (1 - s)
    outer = _gauss_legendre(lambda t: cutoff_w(t, params) * t ** (-s), P, params.delta)[0]
    return sphere_area(params.n) / gamma_const(1 - s, params.n) * (inner + outer)


def rho_ball_mass(radius, params):
    """``int_{B(0,R)} rho`` for ``0 < R``."""
    s, P = params.s, params.plateau
    R = min(float(radius), params.delta)
    inner = params.a0 * min(R, P) ** (1 - s) / (1 - s)
    outer = 0.0
    if R > P:
        outer = _gauss_legendre(lambda t: cutoff_w(t, params) * t ** (-s), P, R)[0]
    return sphere_area(params.n) / gamma_const(1 - s, params.n) * (inner + outer)


def _tail_integral(r, params):
    """``T(r) = int_r^delta w(t) t^-(n+s) dt`` (so that ``Q = (n-1+s)/gamma(1-s) T``)."""
    r = np.asarray(r, dtype=float)
    a, P, d = params.alpha, params.plateau, params.delta
    out = np.zeros_like(r)
    trans = (r >= P) & (r < d)
    if np.any(trans):
        out[trans] = _gauss_legendre(
            lambda t: cutoff_w(t, params) * t ** (-(a + 1)), r[trans], np.full(trans.sum(), d)
        )
    plat = r < P
    if np.any(plat):
        t_p = _gauss_legendre(lambda t: cutoff_w(t, params) * t ** (-(a + 1)), P, d)[0]
        rp = r[plat]
        out[plat] = params.a0 * (rp ** (-a) - P ** (-a)) / a + t_p
    return out


def q_value(r, params):
    """Potential ``Q(r)``; diverges like ``r^-(n-1+s)`` at the origin."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0.0):
        raise SingularityError("Q is singular at r = 0")
    coef = params.alpha / gamma_const(1 - params.s, params.n)
    return coef * _tail_integral(r, params)


def q_ball_mass(radius, params):
    """``int_{B(0,R)} Q`` with the plateau part integrated in closed form."""
    n, s, a, P = params.n, params.s, params.alpha, params.plateau
    R = min(float(radius), params.delta)
    Rp = min(R, P)
    t_p = _tail_integral(np.array([P]), params)[0]
    total = params.a0 / a * (Rp ** (1 - s) / (1 - s) - P ** (-a) * Rp**n / n) + t_p * Rp**n / n
    if R > P:
        total += _gauss_legendre(
            lambda t: _tail_integral(t.ravel(), params).reshape(t.shape) * t ** (n - 1), P, R
        )[0]
    coef = a / gamma_const(1 - s, params.n)
    return sphere_area(n) * coef * total


def q_mass(params):
    """``int_{R^n} Q``; equals ``((n-1+s)/n) ||rho||_1``."""
    return q_ball_mass(params.delta, params)


def affine_multiplier(params):
    """Constant ``m`` with ``D(b.x) = m b``: ``m = ((n-1+s)/n) ||rho||_1``."""
    return params.alpha / params.n * rho_l1_norm(params)


@dataclass(frozen=True)
class RadialProfile:
    radii: np.ndarray
    values: np.ndarray
    singular_exponent: float
    tail_value: float
    params: KernelParams = field(repr=False)

    def __post_init__(self):
        if np.any(np.diff(self.radii) <= 0.0):
            raise ParameterError("profile radii must be strictly increasing")
        if not math.isclose(self.radii[-1], self.params.delta, rel_tol=1e-15):
            raise ParameterError("last profile radius must equal delta")
        if not np.all(np.isfinite(self.values)):
            raise ParameterError("profile values must be finite")

    def __call__(self, r):
        """Exact evaluation off the table (same closed forms as the tabulation)."""
        return q_value(r, self.params)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["radius", "value"])
            for r, v in zip(self.radii, self.values):
                w.writerow([repr(float(r)), repr(float(v))])


def build_Q_profile(params, resolution=256, r_min_ratio=1e-4):
    """Tabulate ``Q`` on a log-spaced grid ending at ``delta``."""
    if resolution < 64:
        raise ParameterError(f"Q profile needs at least 64 radial cells, got {resolution}")
    radii = np.geomspace(r_min_ratio * params.delta, params.delta, resolution)
    radii[-1] = params.delta
    values = q_value(radii, params)
    values[-1] = 0.0
    return RadialProfile(radii, values, params.alpha, 0.0, params)
