"""Discrete nonlocal gradient, divergence, K-operator and Q-convolution.

All operators are translation invariant on the lattice, so each is stored as
a stencil: integer offsets ``k`` (source ``y = x - h k``) with one weight per
offset, plus a ``(targets, offsets)`` table of source node numbers.

Gradient-type operators act on differences,

    D u(x) = sum_k W_k (u(x) - u(x - h k)),

with ``W_k = (n-1+s) h^n rho(|z|) z/|z|^2`` for ``z = h k``.  The lattice sum
misses the singular cell at the origin; with ``near="calibrated"`` (default)
the missing part is restored by ``kappa * (central difference gradient)`` with
``kappa = m - m_lattice`` so that affine fields are reproduced exactly.  With
``near="ball"`` the lattice sum skips ``|z| <= 2h`` and the ball is replaced by
its exact radial integral under a local-linearity model.

Because every gradient-type quantity (D, div, K) uses the same ``W_k`` and the
same difference structure, the trace and product-rule identities hold per
source sample, i.e. to rounding.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse

from . import kernels
from .errors import ParameterError

GRADIENT = "gradient"
CONVOLUTION = "convolution"

_MAGIC = b"NLGW"
_FORMAT_VERSION = 1


def stencil_offsets(dim, h, delta):
    """Integer offsets ``k != 0`` with ``|h k| < delta``, lexicographic order."""
    r = int(np.ceil(delta / h))
    axes = [np.arange(-r, r + 1)] * dim
    k = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    rad = h * np.sqrt(np.sum(k.astype(float) ** 2, axis=1))
    keep = (rad > 0) & (rad < delta * (1 - 1e-12))
    return k[keep]


def gradient_stencil(params, h, near="calibrated"):
    """Offsets and vector weights of the discrete nonlocal gradient.

    Returns ``(offsets, weights, info)``; ``info`` records the near-field
    coefficient and the lattice multiplier.
    """
    n = params.n
    offsets = stencil_offsets(n, h, params.delta)
    z = h * offsets.astype(float)
    r = np.sqrt(np.sum(z**2, axis=1))
    m_exact = kernels.affine_multiplier(params)
    if near == "calibrated":
        far = np.ones(len(r), dtype=bool)
    elif near == "ball":
        far = r > 2 * h * (1 + 1e-12)
    else:
        raise ParameterError(f"unknown near-field mode {near!r}")
    weights = np.zeros_like(z)
    weights[far] = (params.alpha * h**n * kernels.rho(r[far], params) / r[far] ** 2)[:, None] * z[far]
    m_lattice = params.alpha / n * h**n * float(np.sum(kernels.rho(r[far], params)))
    if near == "calibrated":
        kappa = m_exact - m_lattice
    else:
        kappa = params.alpha / n * kernels.rho_ball_mass(2 * h, params)
    # central difference (u(x+h e_i) - u(x-h e_i)) / 2h in difference form
    for i in range(n):
        for sign in (1, -1):
            e = np.zeros(n, dtype=offsets.dtype)
            e[i] = sign
            j = np.flatnonzero(np.all(offsets == e, axis=1))[0]
            weights[j, i] += sign * kappa / (2 * h)
    info = {"near": near, "kappa": kappa, "m_lattice": m_lattice, "m_exact": m_exact}
    return offsets, weights, info


def convolution_stencil(profile, h, near="calibrated"):
    """Offsets, scalar weights ``h^n Q(|z|)`` and the self weight of ``Q * u``."""
    params = profile.params
    n = params.n
    offsets = stencil_offsets(n, h, params.delta)
    r = h * np.sqrt(np.sum(offsets.astype(float) ** 2, axis=1))
    if near == "calibrated":
        far = np.ones(len(r), dtype=bool)
    elif near == "ball":
        far = r > 2 * h * (1 + 1e-12)
    else:
        raise ParameterError(f"unknown near-field mode {near!r}")
    weights = np.zeros(len(r))
    weights[far] = h**n * profile(r[far])
    if near == "calibrated":
        self_weight = kernels.q_mass(params) - float(np.sum(weights))
    else:
        self_weight = kernels.q_ball_mass(2 * h, params)
    return offsets, weights, {"near": near, "self_weight": self_weight}


@dataclass(eq=False)
class NonlocalOperator:
    kind: str
    grid: object
    params: kernels.KernelParams
    offsets: np.ndarray  # (K, n) int
    weights: np.ndarray  # (K, n) gradient / (K,) convolution
    targets: np.ndarray  # (T,) node numbers
    sources: np.ndarray = field(repr=False)  # (T, K) node numbers, -1 = outside
    self_weight: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def n_targets(self):
        return len(self.targets)

    # -- sparse views ----------------------------------------------------
    @cached_property
    def matrices(self):
        """CSR matrices (targets x nodes): one per direction for GRADIENT, one for CONVOLUTION."""
        T, K = self.sources.shape
        N = self.grid.n_nodes
        rows = np.repeat(np.arange(T), K)
        cols = self.sources.ravel()
        ok = cols >= 0
        if self.kind == GRADIENT:
            out = []
            for i in range(self.weights.shape[1]):
                wk = np.tile(self.weights[:, i], T)
                off = sparse.csr_matrix((-wk[ok], (rows[ok], cols[ok])), shape=(T, N))
                diag_vals = np.full(T, self.weights[:, i].sum())
                diag = sparse.csr_matrix((diag_vals, (np.arange(T), self.targets)), shape=(T, N))
                out.append((off + diag).tocsr())
            return out
        wk = np.tile(self.weights, T)
        conv = sparse.csr_matrix((wk[ok], (rows[ok], cols[ok])), shape=(T, N))
        diag = sparse.csr_matrix((np.full(T, self.self_weight), (np.arange(T), self.targets)), shape=(T, N))
        return [(conv + diag).tocsr()]

    # -- persistence -----------------------------------------------------
    def header(self):
        return {
            "kind": self.kind,
            "kernel": self.params.as_dict(),
            "grid": self.grid.fingerprint(),
            "n_offsets": int(len(self.offsets)),
            "weight_width": int(1 if self.weights.ndim == 1 else self.weights.shape[1]),
            "self_weight": self.self_weight,
            "info": self.info,
        }

    def save(self, path):
        """Binary dump: magic, version, JSON header, then (target, source, weights...) triples."""
        head = json.dumps(self.header(), sort_keys=True).encode()
        width = 1 if self.weights.ndim == 1 else self.weights.shape[1]
        T, K = self.sources.shape
        rec = np.zeros(T * K, dtype=[("t", "<i8"), ("s", "<i8"), ("w", "<f8", (width,))])
        rec["t"] = np.repeat(self.targets, K)
        rec["s"] = self.sources.ravel()
        rec["w"] = np.tile(self.weights.reshape(K, width), (T, 1))
        with open(path, "wb") as fh:
            fh.write(_MAGIC + struct.pack("<II", _FORMAT_VERSION, len(head)))
            fh.write(head)
            fh.write(self.offsets.astype("<i8").tobytes())
            fh.write(rec.tobytes())

    @classmethod
    def load(cls, path, grid):
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                raise ParameterError(f"{path}: not an operator dump")
            version, hlen = struct.unpack("<II", fh.read(8))
            if version != _FORMAT_VERSION:
                raise ParameterError(f"{path}: unsupported format version {version}")
            head = json.loads(fh.read(hlen))
            if head["grid"] != grid.fingerprint():
                raise ParameterError(f"{path}: operator was assembled on a different grid")
            K, width = head["n_offsets"], head["weight_width"]
            offsets = np.frombuffer(fh.read(K * grid.dim * 8), dtype="<i8").reshape(K, grid.dim)
            rec = np.frombuffer(
                fh.read(), dtype=[("t", "<i8"), ("s", "<i8"), ("w", "<f8", (width,))]
            )
        T = len(rec) // K
        weights = rec["w"][:K].copy()
        if head["kind"] == CONVOLUTION:
            weights = weights[:, 0]
        return cls(
            head["kind"], grid, kernels.KernelParams(**head["kernel"]), offsets.copy(), weights,
            rec["t"].reshape(T, K)[:, 0].copy(), rec["s"].reshape(T, K).copy(),
            head["self_weight"], head["info"],
        )


def _source_table(grid, targets, offsets):
    idx = grid.index[targets][:, None, :] - offsets[None, :, :]
    return grid.node_of(idx)


def _check_delta(grid, params):
    if not np.isclose(grid.domain.delta, params.delta, rtol=1e-12, atol=0.0):
        raise ParameterError(f"grid horizon {grid.domain.delta} != kernel delta {params.delta}")
    if grid.dim != params.n:
        raise ParameterError(f"grid dimension {grid.dim} != kernel n {params.n}")


def assemble_gradient(grid, params, near="calibrated"):
    """Nonlocal gradient stencil applied at every node of the box."""
    _check_delta(grid, params)
    offsets, weights, info = gradient_stencil(params, grid.h, near)
    targets = grid.omega_nodes
    sources = _source_table(grid, targets, offsets)
    if np.any(sources < 0):
        raise ParameterError("gradient stencil leaves the node set; grid does not cover the closure")
    return NonlocalOperator(GRADIENT, grid, params, offsets, weights, targets, sources, 0.0, info)


def assemble_convolution(grid, profile, near="calibrated", targets=None):
    """``Q * u`` at ``targets`` (default: box nodes); missing sources count as zero."""
    _check_delta(grid, profile.params)
    offsets, weights, info = convolution_stencil(profile, grid.h, near)
    targets = grid.omega_nodes if targets is None else np.asarray(targets)
    sources = _source_table(grid, targets, offsets)
    return NonlocalOperator(
        CONVOLUTION, grid, profile.params, offsets, weights, targets, sources, info["self_weight"], info
    )


# --- application -------------------------------------------------------------


def _require(op, kind):
    if op.kind != kind:
        raise ParameterError(f"operator of kind {op.kind!r} used where {kind!r} is required")


def _check_field(op, values, trailing):
    values = np.asarray(values, dtype=float)
    if values.shape[0] != op.grid.n_nodes or values.shape[1:] != trailing:
        raise ParameterError(
            f"field shape {values.shape} does not match grid ({op.grid.n_nodes}, *{trailing})"
        )
    return values


def _differences(op, u):
    """``u(x) - u(y)`` over the stencil: shape ``(T, K, ...)``."""
    return u[op.targets][:, None] - u[op.sources]


def apply_gradient(op, u):
    _require(op, GRADIENT)
    u = _check_field(op, u, ())
    return _differences(op, u) @ op.weights


def apply_gradient_vec(op, u):
    """Row ``i`` of the result is the nonlocal gradient of component ``i``."""
    _require(op, GRADIENT)
    u = _check_field(op, u, (op.params.n,))
    return np.einsum("tkm,kn->tmn", _differences(op, u), op.weights)


def apply_divergence(op, phi):
    _require(op, GRADIENT)
    phi = _check_field(op, phi, (op.params.n,))
    return np.einsum("tkn,kn->t", _differences(op, phi), op.weights)


def apply_divergence_mat(op, Phi):
    """Divergence of each row of a matrix field."""
    _require(op, GRADIENT)
    n = op.params.n
    Phi = _check_field(op, Phi, (n, n))
    return np.einsum("tkin,kn->ti", _differences(op, Phi), op.weights)


def apply_gradient_adjoint(op, F):
    """Transpose of :func:`apply_gradient_vec`: ``(T, m, n)`` box field -> ``(N, m)`` node field."""
    _require(op, GRADIENT)
    F = np.asarray(F, dtype=float)
    T, K = op.sources.shape
    m = F.shape[1]
    contrib = np.einsum("tmn,kn->tkm", F, op.weights)
    out = np.zeros((op.grid.n_nodes, m))
    out[op.targets] += contrib.sum(axis=1)
    flat_src = op.sources.ravel()
    flat = contrib.reshape(T * K, m)
    for a in range(m):
        out[:, a] -= np.bincount(flat_src, weights=flat[:, a], minlength=op.grid.n_nodes)
    return out


def apply_convolution(op, u):
    """``Q * u`` at the operator targets; scalar, vector or matrix fields."""
    _require(op, CONVOLUTION)
    u = np.asarray(u, dtype=float)
    if u.shape[0] != op.grid.n_nodes:
        raise ParameterError(f"field has {u.shape[0]} rows, grid has {op.grid.n_nodes} nodes")
    padded = np.concatenate([u, np.zeros((1,) + u.shape[1:])])  # index -1 -> zero extension
    return op.self_weight * u[op.targets] + np.tensordot(padded[op.sources], op.weights, axes=([1], [0]))


def apply_K(op, phi, U, variant=None):
    """Bilinear product-rule operator ``K_phi(U)`` at the box nodes.

    ``variant`` is inferred from ``U`` when omitted: scalar ``U`` -> vector
    result; matrix ``U`` -> vector (``U(y) z``); vector ``U`` -> ``"dot"``
    (scalar) or ``"outer"`` (matrix ``U(y) (x) z``).
    """
    _require(op, GRADIENT)
    n = op.params.n
    phi = _check_field(op, phi, ())
    U = np.asarray(U, dtype=float)
    if U.shape[0] != op.grid.n_nodes:
        raise ParameterError("K operand must be sampled on every node")
    dphi = _differences(op, phi)
    Uy = U[op.sources]
    W = op.weights
    if U.ndim == 1:
        if variant not in (None, "scalar"):
            raise ParameterError(f"variant {variant!r} invalid for scalar U")
        return np.einsum("tk,tk,kn->tn", dphi, Uy, W)
    if U.ndim == 2 and U.shape[1] == n:
        variant = variant or "dot"
        if variant == "dot":
            return np.einsum("tk,tki,ki->t", dphi, Uy, W)
        if variant == "outer":
            return np.einsum("tk,tki,kj->tij", dphi, Uy, W)
        raise ParameterError(f"variant {variant!r} invalid for vector U")
    if U.ndim == 3 and U.shape[1:] == (n, n):
        if variant not in (None, "matrix"):
            raise ParameterError(f"variant {variant!r} invalid for matrix U")
        return np.einsum("tk,tkij,kj->ti", dphi, Uy, W)
    raise ParameterError(f"K operand has unsupported shape {U.shape}")
