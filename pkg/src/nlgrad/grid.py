"""Uniform lattice discretisation of a box and its nonlocal closure.

Nodes are the lattice points ``lower + h*i`` (``i`` integer) at distance less
than ``delta`` from the box.  Each node is classified as

* ``INTERIOR``: distance to the boundary greater than ``delta``,
* ``CORE``: inside the open box but within ``delta`` of its boundary,
* ``COLLAR``: outside the open box (lattice points on the boundary included).

Scalar and vector fields live on all nodes; gradient fields live on the
``INTERIOR | CORE`` nodes (the box ``Omega``) in node order.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ParameterError


class NodeClass(enum.IntEnum):
    INTERIOR = 0
    CORE = 1
    COLLAR = 2


@dataclass(frozen=True)
class BoxDomain:
    lower: tuple
    upper: tuple
    delta: float

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if len(lo) != len(hi) or len(lo) not in (2, 3):
            raise ParameterError("box bounds must be 2- or 3-vectors of equal length")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ParameterError("box requires lower < upper componentwise")
        if not self.delta > 0:
            raise ParameterError("delta must be positive")
        if min(b - a for a, b in zip(lo, hi)) <= 2 * self.delta:
            raise ParameterError(
                "eroded interior is empty: min box edge must exceed 2*delta "
                f"(edge {min(b - a for a, b in zip(lo, hi))}, delta {self.delta})"
            )

    @property
    def dim(self):
        return len(self.lower)

    @property
    def volume(self):
        return float(np.prod(np.subtract(self.upper, self.lower)))


@dataclass(frozen=True, eq=False)
class Grid:
    domain: BoxDomain
    h: float
    index: np.ndarray = field(repr=False)  # (N, n) lattice indices
    points: np.ndarray = field(repr=False)  # (N, n)
    node_class: np.ndarray = field(repr=False)  # (N,) NodeClass codes

    @property
    def dim(self):
        return self.domain.dim

    @property
    def n_nodes(self):
        return len(self.points)

    @property
    def cell_volume(self):
        return self.h**self.dim

    @cached_property
    def omega_mask(self):
        return self.node_class != NodeClass.COLLAR

    @cached_property
    def omega_nodes(self):
        return np.flatnonzero(self.omega_mask)

    @cached_property
    def interior_nodes(self):
        return np.flatnonzero(self.node_class == NodeClass.INTERIOR)

    @cached_property
    def interior_in_omega(self):
        """Positions of the interior nodes inside the ``omega_nodes`` ordering."""
        return np.flatnonzero(self.node_class[self.omega_nodes] == NodeClass.INTERIOR)

    @cached_property
    def _lookup(self):
        lo = self.index.min(axis=0)
        shape = tuple(self.index.max(axis=0) - lo + 1)
        table = np.full(shape, -1, dtype=np.int64)
        table[tuple((self.index - lo).T)] = np.arange(self.n_nodes)
        return lo, table

    def node_of(self, lattice_index):
        """Node numbers of lattice indices (``-1`` where no node exists)."""
        lo, table = self._lookup
        idx = np.asarray(lattice_index) - lo
        ok = np.all((idx >= 0) & (idx < table.shape), axis=-1)
        out = np.full(idx.shape[:-1], -1, dtype=np.int64)
        out[ok] = table[tuple(idx[ok].T)]
        return out

    def counts(self):
        return {c.name: int(np.sum(self.node_class == c)) for c in NodeClass}

    def fingerprint(self):
        return {
            "lower": list(self.domain.lower),
            "upper": list(self.domain.upper),
            "delta": self.domain.delta,
            "h": self.h,
            "n_nodes": self.n_nodes,
        }


def _box_distance(points, lower, upper):
    gap = np.maximum(np.maximum(lower - points, points - upper), 0.0)
    return np.sqrt(np.sum(gap**2, axis=-1))


def build_grid(domain, h):
    """Enumerate and classify lattice nodes covering the nonlocal closure."""
    delta = domain.delta
    if not h > 0:
        raise ParameterError("grid spacing h must be positive")
    if h > delta / 4 * (1 + 1e-12):
        raise ParameterError(f"h={h} too coarse: need h <= delta/4 = {delta / 4}")
    lower = np.array(domain.lower)
    upper = np.array(domain.upper)
    tol = 1e-9 * h
    lo_i = np.floor(-delta / h).astype(int) - 1
    hi_i = np.ceil((upper - lower + delta) / h).astype(int) + 1
    axes = [np.arange(lo_i, hi_i[k] + 1) for k in range(domain.dim)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.dim)
    pts = lower + h * mesh
    keep = _box_distance(pts, lower, upper) < delta - tol
    index, pts = mesh[keep], pts[keep]

    inside = np.all((pts > lower + tol) & (pts < upper - tol), axis=1)
    deep = np.all((pts > lower + delta + tol) & (pts < upper - delta - tol), axis=1)
    cls = np.full(len(pts), NodeClass.COLLAR, dtype=np.int8)
    cls[inside] = NodeClass.CORE
    cls[deep] = NodeClass.INTERIOR
    return Grid(domain, float(h), index, pts, cls)


# --- closed-form functions -------------------------------------------------


class ClosedForm:
    """Scalar closed-form function with analytic gradient."""

    def value(self, x):
        raise NotImplementedError

    def grad(self, x):
        raise NotImplementedError

    def lipschitz(self, dim):
        """Upper bound for the Lipschitz seminorm."""
        raise NotImplementedError


class Constant(ClosedForm):
    def __init__(self, value=0.0):
        self.c = float(value)

    def value(self, x):
        return np.full(len(x), self.c)

    def grad(self, x):
        return np.zeros_like(x, dtype=float)

    def lipschitz(self, dim):
        return 0.0


class Affine(ClosedForm):
    def __init__(self, b, c=0.0):
        self.b = np.asarray(b, dtype=float)
        self.c = float(c)

    def value(self, x):
        return x @ self.b + self.c

    def grad(self, x):
        return np.broadcast_to(self.b, x.shape).copy()

    def lipschitz(self, dim):
        return float(np.linalg.norm(self.b))


class TrigBump(ClosedForm):
    """``A prod_i sin(k_i pi (x_i - a_i)/(b_i - a_i))^p``, optionally zero outside ``[a, b]``."""

    def __init__(self, lower, upper, k=1, amplitude=1.0, power=1, truncate=True):
        self.a = np.asarray(lower, dtype=float)
        self.b = np.asarray(upper, dtype=float)
        self.k = np.broadcast_to(np.asarray(k, dtype=float), self.a.shape).copy()
        self.amp = float(amplitude)
        self.p = int(power)
        self.truncate = bool(truncate)
        if self.p < 1:
            raise ParameterError("trig_bump power must be >= 1")

    def _parts(self, x):
        om = self.k * np.pi / (self.b - self.a)
        arg = om * (x - self.a)
        return om, np.sin(arg), np.cos(arg)

    def _support(self, x):
        if not self.truncate:
            return np.ones(len(x), dtype=bool)
        return np.all((x > self.a) & (x < self.b), axis=1)

    def value(self, x):
        _, sn, _ = self._parts(x)
        return np.where(self._support(x), self.amp * np.prod(sn**self.p, axis=1), 0.0)

    def grad(self, x):
        om, sn, cs = self._parts(x)
        f = sn**self.p
        df = self.p * sn ** (self.p - 1) * cs * om
        g = np.empty_like(x, dtype=float)
        for i in range(x.shape[1]):
            g[:, i] = df[:, i] * np.prod(np.delete(f, i, axis=1), axis=1)
        return np.where(self._support(x)[:, None], self.amp * g, 0.0)

    def lipschitz(self, dim):
        om = self.k * np.pi / (self.b - self.a)
        return abs(self.amp) * self.p * float(np.linalg.norm(om))


class RadialBump(ClosedForm):
    """``A exp(1 - 1/(1 - (r/R)^2))`` inside ``B(c, R)``, zero outside (peak ``A``)."""

    def __init__(self, center, radius, amplitude=1.0):
        self.c = np.asarray(center, dtype=float)
        self.R = float(radius)
        self.amp = float(amplitude)

    def value(self, x):
        q = np.sum((x - self.c) ** 2, axis=1) / self.R**2
        out = np.zeros(len(x))
        m = q < 1.0
        out[m] = self.amp * np.exp(1.0 - 1.0 / (1.0 - q[m]))
        return out

    def grad(self, x):
        d = x - self.c
        q = np.sum(d**2, axis=1) / self.R**2
        g = np.zeros_like(x, dtype=float)
        m = q < 1.0
        v = self.amp * np.exp(1.0 - 1.0 / (1.0 - q[m]))
        g[m] = (-2.0 * v / (1.0 - q[m]) ** 2 / self.R**2)[:, None] * d[m]
        return g

    def lipschitz(self, dim):
        # max over t=r/R of 2 t e^{1-1/(1-t^2)}/(1-t^2)^2 / R
        t = np.linspace(0.0, 1.0, 20001)[:-1]
        return abs(self.amp) * float(np.max(2 * t * np.exp(1 - 1 / (1 - t**2)) / (1 - t**2) ** 2)) / self.R


class Wave(ClosedForm):
    """``A sin(k.x + phase)``."""

    def __init__(self, k, amplitude=1.0, phase=0.0):
        self.k = np.asarray(k, dtype=float)
        self.amp = float(amplitude)
        self.phase = float(phase)

    def value(self, x):
        return self.amp * np.sin(x @ self.k + self.phase)

    def grad(self, x):
        return (self.amp * np.cos(x @ self.k + self.phase))[:, None] * self.k

    def lipschitz(self, dim):
        return abs(self.amp) * float(np.linalg.norm(self.k))


class Sum(ClosedForm):
    def __init__(self, terms):
        self.terms = list(terms)

    def value(self, x):
        return sum((t.value(x) for t in self.terms), np.zeros(len(x)))

    def grad(self, x):
        return sum((t.grad(x) for t in self.terms), np.zeros_like(x, dtype=float))

    def lipschitz(self, dim):
        return sum(t.lipschitz(dim) for t in self.terms)


class Product(ClosedForm):
    def __init__(self, f, g):
        self.f, self.g = f, g

    def value(self, x):
        return self.f.value(x) * self.g.value(x)

    def grad(self, x):
        return self.f.grad(x) * self.g.value(x)[:, None] + self.g.grad(x) * self.f.value(x)[:, None]


def closed_form(desc, domain=None):
    """Build a :class:`ClosedForm` (scalar) from a JSON-style descriptor."""
    if isinstance(desc, ClosedForm):
        return desc
    if not isinstance(desc, dict) or "kind" not in desc:
        raise ParameterError(f"function descriptor needs a 'kind': {desc!r}")
    kind = desc["kind"]
    try:
        if kind == "constant":
            return Constant(desc.get("value", 0.0))
        if kind == "affine":
            return Affine(desc["b"], desc.get("c", 0.0))
        if kind == "trig_bump":
            lower = desc.get("lower", domain.lower if domain else None)
            upper = desc.get("upper", domain.upper if domain else None)
            if lower is None or upper is None:
                raise ParameterError("trig_bump needs 'lower'/'upper' or a domain")
            return TrigBump(
                lower, upper, desc.get("k", 1), desc.get("amplitude", 1.0),
                desc.get("power", 1), desc.get("truncate", True),
            )
        if kind == "radial_bump":
            return RadialBump(desc["center"], desc["radius"], desc.get("amplitude", 1.0))
        if kind == "wave":
            return Wave(desc["k"], desc.get("amplitude", 1.0), desc.get("phase", 0.0))
        if kind == "sum":
            return Sum(closed_form(t, domain) for t in desc["terms"])
        if kind == "product":
            f, g = desc["factors"]
            return Product(closed_form(f, domain), closed_form(g, domain))
    except KeyError as exc:
        raise ParameterError(f"descriptor of kind {kind!r} is missing field {exc}") from None
    raise ParameterError(f"unknown function kind {kind!r}")


class VectorForm:
    """Vector-valued closed form: one scalar closed form per component."""

    def __init__(self, components):
        self.components = [closed_form(c) for c in components]

    def value(self, x):
        return np.stack([c.value(x) for c in self.components], axis=1)

    def grad(self, x):
        """``(N, m, n)`` Jacobian, row ``i`` the gradient of component ``i``."""
        return np.stack([c.grad(x) for c in self.components], axis=1)


def vector_form(desc, domain=None):
    """Vector closed form from ``{"kind": "vector", "components": [...]}`` or an affine map."""
    if isinstance(desc, VectorForm):
        return desc
    if isinstance(desc, (list, tuple)):
        return VectorForm([closed_form(d, domain) for d in desc])
    if not isinstance(desc, dict) or "kind" not in desc:
        raise ParameterError(f"vector descriptor needs a 'kind': {desc!r}")
    kind = desc["kind"]
    if kind == "vector":
        return VectorForm([closed_form(d, domain) for d in desc["components"]])
    if kind == "affine_map":
        A = np.asarray(desc["A"], dtype=float)
        c = np.asarray(desc.get("c", np.zeros(len(A))), dtype=float)
        return VectorForm([Affine(A[i], c[i]) for i in range(len(A))])
    if kind == "constant":
        v = np.atleast_1d(np.asarray(desc["value"], dtype=float))
        return VectorForm([Constant(x) for x in v])
    raise ParameterError(f"unknown vector function kind {kind!r}")


def sample_function(grid, desc, vector=False):
    """Evaluate a closed-form descriptor at every grid node."""
    if vector:
        return vector_form(desc, grid.domain).value(grid.points)
    return closed_form(desc, grid.domain).value(grid.points)


def write_field_csv(path, grid, values, nodes="all", header=None):
    """One row per node: index, coordinates, class name, field components."""
    values = np.asarray(values, dtype=float)
    ids = np.arange(grid.n_nodes) if nodes == "all" else grid.omega_nodes
    if len(values) != len(ids):
        raise ParameterError(f"field has {len(values)} rows, node set has {len(ids)}")
    flat = values.reshape(len(ids), -1)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["index"] + [f"x{i + 1}" for i in range(grid.dim)] + ["class"]
            + [f"v{j + 1}" for j in range(flat.shape[1])]
        )
        for row, node in enumerate(ids):
            w.writerow(
                [int(node)] + [format(v, ".17g") for v in grid.points[node]]
                + [NodeClass(grid.node_class[node]).name] + [format(v, ".17g") for v in flat[row]]
            )
