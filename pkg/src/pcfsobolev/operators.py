"""Energies, graph Laplacians, eigensystems, Green operators and
multiharmonic functions on level-M approximations."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .approximation import (
    VertexFunction,
    _level,
    _prolong_chain,
    at_level,
    energy_matrix,
    harmonic_integral_functional,
)
from .spec_core import FractalSpec

NEUMANN = "neumann"
DIRICHLET = "dirichlet"


def _check_bc(bc: str) -> str:
    bc = bc.lower()
    if bc not in (NEUMANN, DIRICHLET):
        raise ValueError(f"boundary condition must be neumann or dirichlet, got {bc!r}")
    return bc


@dataclass(frozen=True)
class GraphLaplacian:
    level: int
    H: sp.csr_matrix
    d: np.ndarray
    boundary: np.ndarray

    @property
    def interior(self) -> np.ndarray:
        return np.arange(len(self.boundary), self.H.shape[0])


@lru_cache(maxsize=None)
def tent_weights(spec: FractalSpec, m: int) -> np.ndarray:
    lev = _level(spec, m)
    ell = harmonic_integral_functional(spec)
    w = (lev.mu_w[:, None] * ell[None, :]).ravel()
    d = np.bincount(lev.cells.ravel(), weights=w, minlength=lev.n_vertices)
    d.setflags(write=False)
    return d


@lru_cache(maxsize=None)
def graph_laplacian(spec: FractalSpec, m: int) -> GraphLaplacian:
    return GraphLaplacian(m, (-energy_matrix(spec, m)).tocsr(), tent_weights(spec, m),
                          np.arange(spec.boundary))


def energy_form(f: VertexFunction, g: VertexFunction, m: int | None = None) -> float:
    m = f.level if m is None else m
    K = energy_matrix(f.spec, m)
    return float(at_level(f, m).values @ (K @ at_level(g, m).values))


def graph_energy(f: VertexFunction, m: int | None = None) -> float:
    """E_{Lambda_m}(f); f is restricted (or refined) to level m first."""
    return energy_form(f, f, m)


def pullback(f: VertexFunction, i: int) -> VertexFunction:
    """f o F_i as a function one level down (equal weights only)."""
    spec = f.spec
    if not spec.equal_weights:
        raise ValueError("pullback by a single map needs equal weights")
    if f.level < 1:
        raise ValueError("need level >= 1")
    fine, coarse = _level(spec, f.level), _level(spec, f.level - 1)
    nc = len(coarse.words)
    out = np.empty(coarse.n_vertices)
    out[coarse.cells] = f.values[fine.cells[i * nc:(i + 1) * nc]]
    return VertexFunction(spec, f.level - 1, out)


# ------------------------------------------------------------- Laplacian

def fill_boundary(spec: FractalSpec, m: int, interior_values: np.ndarray) -> np.ndarray:
    """Complete interior values to all of V_{Lambda_m}.

    Boundary values are chosen by least squares so that the discrete
    Laplacian of the completed function is as close to a constant as
    possible; this is exact when the function is harmonic or has constant
    Laplacian near V_0.
    """
    L = graph_laplacian(spec, m)
    b = len(L.boundary)
    inner = L.interior
    if len(inner) == 0:
        return np.zeros(b)
    Hc = L.H.tocsc()
    dI = L.d[inner]
    HIB = Hc[inner][:, :b].toarray() / dI[:, None]
    rhs = -(Hc[inner][:, inner] @ interior_values) / dI
    A = np.hstack([HIB, -np.ones((len(inner), 1))])
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return np.concatenate([sol[:b], interior_values])


def laplacian_apply(f: VertexFunction, m: int | None = None, fill: bool = False) -> VertexFunction:
    """Delta_m f = d^{-1} H f on V_{Lambda_m} \\ V_0.

    Boundary entries are zero unless ``fill`` is set, in which case they are
    completed by :func:`fill_boundary`.
    """
    m = f.level if m is None else m
    f = at_level(f, m)
    L = graph_laplacian(f.spec, m)
    out = (L.H @ f.values) / L.d
    b = len(L.boundary)
    if fill:
        out = fill_boundary(f.spec, m, out[b:])
    else:
        out[:b] = 0.0
    return VertexFunction(f.spec, m, out)


def laplacian_power(f: VertexFunction, k: int) -> VertexFunction:
    g = f
    for j in range(k):
        g = laplacian_apply(g, fill=j < k - 1)
    return g


def harmonic_extend(values, spec: FractalSpec, m: int, M: int) -> VertexFunction:
    """Harmonic extension of values on V_{Lambda_m} to V_{Lambda_M}."""
    values = np.asarray(values, dtype=float)
    if M < m:
        raise ValueError("target level must be >= source level")
    return VertexFunction(spec, M, _prolong_chain(spec, m, M) @ values)


# ------------------------------------------------------------- eigen

@dataclass(frozen=True)
class EigenSystem:
    bc: str
    level: int
    values: np.ndarray
    vectors: np.ndarray      # columns, full vertex length, d-orthonormal
    d: np.ndarray

    def coefficients(self, f: VertexFunction) -> np.ndarray:
        return self.vectors.T @ (self.d * at_level(f, self.level).values)

    def function(self, i: int, spec: FractalSpec) -> VertexFunction:
        return VertexFunction(spec, self.level, self.vectors[:, i].copy())


@lru_cache(maxsize=16)
def eigensystem(spec: FractalSpec, M: int, bc: str = NEUMANN, count: int | None = None) -> EigenSystem:
    """Solve H u = -lambda D u (Neumann on all vertices, Dirichlet on the interior)."""
    bc = _check_bc(bc)
    L = graph_laplacian(spec, M)
    n = L.H.shape[0]
    idx = np.arange(n) if bc == NEUMANN else L.interior
    if len(idx) > 10000:
        raise MemoryError(f"{len(idx)} unknowns exceeds the dense eigensolver budget")
    K = (-L.H)[idx][:, idx].toarray()
    s = 1.0 / np.sqrt(L.d[idx])
    S = s[:, None] * K * s[None, :]
    S = 0.5 * (S + S.T)
    sub = None if count is None else [0, min(count, len(idx)) - 1]
    lam, V = la.eigh(S, subset_by_index=sub)
    lam = np.maximum(lam, 0.0) if bc == NEUMANN else lam
    U = np.zeros((n, len(lam)))
    U[idx] = s[:, None] * V
    if bc == NEUMANN:
        U[:, 0] = 1.0 / np.sqrt(L.d.sum())
        lam[0] = 0.0
    # fix signs so that the first nonzero entry is positive
    for j in range(U.shape[1]):
        nz = np.nonzero(np.abs(U[:, j]) > 1e-12)[0]
        if len(nz) and U[nz[0], j] < 0:
            U[:, j] *= -1
    res = K @ U[idx] - (L.d[idx][:, None] * U[idx]) * lam[None, :]
    scale = max(1.0, float(np.abs(K).max()))
    if np.abs(res).max() > 1e-8 * scale:
        raise ArithmeticError("eigensolver residual above tolerance")
    U.setflags(write=False)
    lam.setflags(write=False)
    return EigenSystem(bc, M, lam, U, L.d)


def weyl_slope(eig: EigenSystem, lower: float = 0.2, upper: float = 0.8):
    """Least-squares slope of log N(lambda) against log lambda.

    Only counts between N_max^lower and N_max^upper are used, i.e. the middle
    part of the log-count axis.
    """
    lam = np.asarray(eig.values)
    lam = lam[lam > 1e-9 * max(1.0, lam.max())]
    counts = np.arange(1, len(lam) + 1)
    logn = np.log(counts)
    top = logn[-1]
    keep = (logn >= lower * top) & (logn <= upper * top)
    slope, intercept = np.polyfit(np.log(lam[keep]), logn[keep], 1)
    return float(slope), int(keep.sum())


# ------------------------------------------------------------- Green

@lru_cache(maxsize=16)
def _dirichlet_factor(spec: FractalSpec, M: int):
    L = graph_laplacian(spec, M)
    inner = L.interior
    K = (-L.H)[inner][:, inner].tocsc()
    return spla.splu(K)


@lru_cache(maxsize=16)
def _neumann_factor(spec: FractalSpec, M: int):
    L = graph_laplacian(spec, M)
    n = L.H.shape[0]
    d = sp.csr_matrix(L.d[:, None])
    K = sp.bmat([[-L.H, d], [d.T, None]]).tocsc()
    return spla.splu(K), n


def green_apply(f: VertexFunction, M: int | None = None, bc: str = DIRICHLET,
                eig: EigenSystem | None = None) -> VertexFunction:
    """Dirichlet: g = 0 on V_0 and -Delta g = f inside.  Neumann: the mean-zero
    solution of -Delta g = f - mean(f), i.e. the sum over nonzero modes."""
    bc = _check_bc(bc)
    M = f.level if M is None else M
    f = at_level(f, M)
    L = graph_laplacian(f.spec, M)
    if bc == DIRICHLET:
        inner = L.interior
        g = np.zeros_like(f.values)
        if len(inner):
            g[inner] = _dirichlet_factor(f.spec, M).solve(L.d[inner] * f.values[inner])
        return VertexFunction(f.spec, M, g)
    if eig is not None:
        c = eig.coefficients(f)
        lam = np.asarray(eig.values)
        inv = np.where(lam > 1e-12 * max(1.0, lam.max()), 1.0 / np.where(lam > 0, lam, 1.0), 0.0)
        inv[0] = 0.0
        return VertexFunction(f.spec, M, eig.vectors @ (inv * c))
    lu, n = _neumann_factor(f.spec, M)
    mean = float(L.d @ f.values) / float(L.d.sum())
    rhs = np.concatenate([L.d * (f.values - mean), [0.0]])
    return VertexFunction(f.spec, M, lu.solve(rhs)[:n])


def spectral_sobolev_norm(f: VertexFunction, sigma: float, bc: str = NEUMANN, M: int | None = None,
                          eig: EigenSystem | None = None) -> float:
    """(sum_i (1 + lambda_i)^sigma <f, u_i>_d^2)^{1/2}."""
    M = f.level if M is None else M
    eig = eigensystem(f.spec, M, _check_bc(bc)) if eig is None else eig
    c = eig.coefficients(f)
    return float(np.sqrt(np.sum((1.0 + eig.values) ** sigma * c ** 2)))


# ------------------------------------------------------------- multiharmonic

@dataclass(frozen=True)
class MultiharmonicBasis:
    k: int
    level: int
    H: np.ndarray         # columns span H_{k-1}
    H_prime: np.ndarray   # columns span H'_{k-1}
    dim: int
    dim_prime: int
    residual: float
    residual_prime: float


def _rank(X: np.ndarray, tol: float) -> int:
    if X.size == 0:
        return 0
    s = np.linalg.svd(X / np.linalg.norm(X, axis=0, keepdims=True), compute_uv=False)
    return int((s > tol * s[0]).sum())


def multiharmonic_basis(spec: FractalSpec, M: int, k: int, tol: float = 1e-8) -> MultiharmonicBasis:
    """Bases of {Delta^k f = 0} and {Delta^k f = const, integral 0} at level M."""
    if k < 1:
        raise ValueError("k must be >= 1")
    b = spec.boundary
    block = np.asarray(_prolong_chain(spec, 0, M).todense())
    blocks = [block]
    for _ in range(k - 1):
        block = np.column_stack([green_apply(VertexFunction(spec, M, c)).values for c in block.T])
        blocks.append(block)
    Hk = np.hstack(blocks)
    one = np.ones(Hk.shape[0])
    g = one
    for _ in range(k):
        g = green_apply(VertexFunction(spec, M, g)).values
    d = tent_weights(spec, M)
    raw = np.column_stack([Hk, g])
    proj = raw - np.outer(one, d @ raw)
    U, s, _ = np.linalg.svd(proj / np.linalg.norm(proj, axis=0, keepdims=True), full_matrices=False)
    Hp = U[:, s > tol * s[0]]

    # Delta^k residuals, measured against the operator scale max_x |H_xx|/d_x
    # times the size of f and Delta^{k-1} f; the boundary completion between
    # applications is exact only up to k = 2
    L = graph_laplacian(spec, M)
    op_scale = float(np.max(np.abs(L.H.diagonal()) / L.d))

    def residual(X, allow_const):
        if k > 2:
            return float("nan")
        worst = 0.0
        inner = np.arange(b, X.shape[0])
        for c in X.T:
            prev = laplacian_power(VertexFunction(spec, M, c), k - 1)
            if k > 1:
                prev = VertexFunction(spec, M, fill_boundary(spec, M, prev.values[b:]))
            lk = laplacian_apply(prev).values[inner]
            dev = lk - lk.mean() if allow_const else lk
            size = max(float(np.abs(prev.values).max()), float(np.abs(c).max()))
            worst = max(worst, float(np.abs(dev).max()) / (op_scale * size))
        return worst

    return MultiharmonicBasis(
        k=k, level=M, H=Hk, H_prime=Hp, dim=_rank(Hk, tol), dim_prime=Hp.shape[1],
        residual=residual(Hk, False), residual_prime=residual(Hp, True),
    )


def green_split(f: VertexFunction) -> tuple[VertexFunction, VertexFunction, float]:
    """f = G(-Delta f) + h with h harmonic; returns (G part, h, deviation of h
    from the harmonic extension of f|V_0)."""
    g = green_apply(laplacian_apply(f) * -1.0)
    h = f - g
    ref = harmonic_extend(f.values[: f.spec.boundary], f.spec, 0, f.level)
    dev = float(np.abs(h.values - ref.values).max()) / max(1.0, float(np.abs(f.values).max()))
    return g, h, dev
