"""Besov-type norms, difference fields, sequence norms and boundary restriction."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .approximation import (
    CellFunction,
    VertexFunction,
    _level,
    at_level,
    build_cell_approx,
    build_vertex_approx,
    cell_anchors,
    harmonic_gram,
    l2_norm,
    refine_cells,
    resistance_matrix,
    vertex_graph_edges,
)
from .decompositions import cell_averages, cell_l2_norm, coarsen, haar_expand
from .operators import NEUMANN, DIRICHLET, eigensystem, graph_laplacian, harmonic_extend, spectral_sobolev_norm
from .spec_core import FractalSpec, derived_constants, extension_matrices

CONVERGING, DIVERGING, FLAT = "converging", "diverging", "flat"
CONVERGE_BELOW = 0.9
NOISE_FLOOR = 1e-20   # terms below this fraction of the total are rounding noise
DIVERGE_FROM = 1.0 - 1e-9
B22_CELL_LIMIT = 2000

_ALIASES = {
    "gamma": "gamma", "Γ": "gamma",
    "tgamma": "tgamma", "Γ̃": "tgamma", "gamma~": "tgamma",
    "lambda": "lambda", "Λ": "lambda",
    "tlambda": "tlambda", "Λ̃": "tlambda", "lambda~": "tlambda",
    "b22": "b22", "B": "b22",
    "spectraln": "spectralN", "spectralN": "spectralN",
    "spectrald": "spectralD", "spectralD": "spectralD",
}
NORM_KINDS = ("gamma", "tgamma", "lambda", "tlambda", "b22", "spectralN", "spectralD")


def norm_kind(name: str) -> str:
    try:
        return _ALIASES[name] if name in _ALIASES else _ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown norm kind {name!r}; choose from {', '.join(NORM_KINDS)}") from None


# ------------------------------------------------------------ differences

@dataclass(frozen=True)
class DifferenceField:
    kind: str              # "cell", "refined" or "vertex"
    level: int
    edges: np.ndarray      # (E, 2) word indices or vertex ids
    values: np.ndarray

    @property
    def sq_norm(self) -> float:
        return float(self.values @ self.values)


def averages_at(f, m: int) -> np.ndarray:
    """Cell averages of f on Lambda_m for vertex or cell functions."""
    if isinstance(f, CellFunction):
        if m <= f.level:
            return coarsen(f, m).averages
        return refine_cells(f, m).averages
    return cell_averages(at_level(f, max(m, f.level)), m).averages


def difference_field(f, m: int, kind: str = "cell") -> DifferenceField:
    if kind in ("cell", "refined"):
        if m == 0:
            return DifferenceField(kind, 0, np.zeros((0, 2), int), np.zeros(0))
        avg = averages_at(f, m)
        ca = build_cell_approx(f.spec, m)
        edges = ca.edges if kind == "cell" else ca.refined_edges
        return DifferenceField(kind, m, edges, avg[edges[:, 0]] - avg[edges[:, 1]])
    if kind == "vertex":
        if isinstance(f, CellFunction):
            raise TypeError("vertex differences need a VertexFunction")
        vals = at_level(f, m).values
        edges, _ = vertex_graph_edges(f.spec, m)
        return DifferenceField(kind, m, edges, vals[edges[:, 0]] - vals[edges[:, 1]])
    raise ValueError(f"unknown difference kind {kind!r}")


# ------------------------------------------------------------ reports

@dataclass
class NormReport:
    name: str
    sigma: float
    level: int
    base: float
    levels: list
    terms: np.ndarray
    total: float
    tail_ratios: np.ndarray
    verdict: str
    extra: dict = field(default_factory=dict)


def tail_ratios(terms, count: int = 3) -> np.ndarray:
    t = np.asarray(terms, dtype=float)
    if len(t) < 2:
        return np.zeros(0)
    t = t[-(count + 1):]
    num, den = t[1:], t[:-1]
    out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.where(num > 0, np.finfo(float).max, 0.0))
    return out


def verdict(ratios) -> str:
    ratios = np.asarray(ratios)
    if len(ratios) == 0:
        return FLAT
    if (ratios < CONVERGE_BELOW).all():
        return CONVERGING
    if (ratios >= DIVERGE_FROM).all():
        return DIVERGING
    return FLAT


def _report(name, sigma, M, base, levels, terms, extra=None) -> NormReport:
    terms = np.asarray(terms, dtype=float)
    squared = base + terms.sum()
    ratios = tail_ratios(np.where(terms > NOISE_FLOOR * squared, terms, 0.0))
    total = float(np.sqrt(squared))
    return NormReport(name, float(sigma), M, float(base), list(levels), terms, total, ratios,
                      verdict(ratios), extra or {})


def _l2_sq(f) -> float:
    if isinstance(f, CellFunction):
        return cell_l2_norm(f) ** 2
    return l2_norm(f) ** 2


def besov_norm(f, sigma: float, M: int | None = None, kind: str = "gamma", eig=None) -> NormReport:
    """Truncated norm of the requested kind with per-level terms.

    gamma:   ||f||^2 + sum_{m=1..M} lam^{2m} ||D_m f||^2
    tgamma:  C^2 + sum_{m=1..M} r^{-m d_H} lam^{2m} ||f~_m||^2
    lambda:  ||f||^2 + sum_{m=0..M} lam^{2m} ||grad_m f||^2
    tlambda: ||f||^2 + sum_{m=1..M} r^{2m} lam^{2m} ||H_m f||^2 (interior rows)
    b22:     ||f||^2 + sum_{m=0..M-1} lam^{2m} I_m(f)^2 at cell resolution M
    spectralN / spectralD: sum_i (1 + lambda_i)^sigma <f, u_i>^2, no level terms
    """
    kind = norm_kind(kind)
    spec = f.spec
    const = derived_constants(spec)
    M = f.level if M is None else M
    lam2 = const.lam(sigma) ** 2
    r = const.r_min

    if kind == "gamma":
        levels = list(range(1, M + 1))
        terms = [lam2 ** m * difference_field(f, m, "cell").sq_norm for m in levels]
        return _report(kind, sigma, M, _l2_sq(_at(f, M)), levels, terms)

    if kind == "tgamma":
        cf = f if isinstance(f, CellFunction) else cell_averages(at_level(f, max(M, f.level)), max(M, f.level))
        cf = coarsen(cf, M) if cf.level > M else refine_cells(cf, M)
        layers = haar_expand(cf)
        levels = list(range(1, M + 1))
        terms = [r ** (-m * const.d_h) * lam2 ** m * layers.layer_norm(m) ** 2 for m in levels]
        return _report(kind, sigma, M, layers.C ** 2, levels, terms)

    if kind in ("lambda", "tlambda"):
        if isinstance(f, CellFunction):
            raise TypeError(f"{kind} needs a VertexFunction")
        if sigma <= const.d_s / 2:
            warnings.warn(f"{kind} norm needs sigma > d_S/2 = {const.d_s / 2:.5f}", stacklevel=2)
        base = l2_norm(at_level(f, max(M, f.level)))
        if kind == "lambda":
            levels = list(range(0, M + 1))
            terms = [lam2 ** m * difference_field(f, m, "vertex").sq_norm for m in levels]
        else:
            levels = list(range(1, M + 1))
            terms = []
            for m in levels:
                L = graph_laplacian(spec, m)
                hv = (L.H @ at_level(f, m).values)[spec.boundary:]
                terms.append((r * r * lam2) ** m * float(hv @ hv))
        return _report(kind, sigma, M, base ** 2, levels, terms)

    if kind == "b22":
        levels, terms = b22_terms(f, sigma, M)
        return _report(kind, sigma, M, _l2_sq(_at(f, M)), levels, terms)

    bc = NEUMANN if kind == "spectralN" else DIRICHLET
    if isinstance(f, CellFunction):
        raise TypeError("spectral norms need a VertexFunction")
    fm = at_level(f, M)
    eig = eigensystem(spec, M, bc) if eig is None else eig
    total = spectral_sobolev_norm(fm, sigma, bc, M, eig)
    return NormReport(kind, float(sigma), M, total ** 2, [], np.zeros(0), total, np.zeros(0), CONVERGING)


def _at(f, M: int):
    if isinstance(f, CellFunction):
        return f if f.level == M else (coarsen(f, M) if f.level > M else refine_cells(f, M))
    return at_level(f, max(M, f.level))


@lru_cache(maxsize=8)
def _anchor_resistance(spec: FractalSpec, M: int) -> np.ndarray:
    n_cells = len(_level(spec, M).words)
    if n_cells > B22_CELL_LIMIT:
        raise MemoryError(f"b22 needs {n_cells}^2 cell-pair resistances; limit is {B22_CELL_LIMIT} cells")
    anchors = cell_anchors(spec, M)
    approx = build_vertex_approx(spec, M)
    if approx.n_vertices <= 4000:
        R = resistance_matrix(approx)[np.ix_(anchors, anchors)]
    else:
        uniq, inv = np.unique(anchors, return_inverse=True)
        R = resistance_matrix(approx, uniq)[np.ix_(inv, inv)]
    R.setflags(write=False)
    return R


def b22_terms(f, sigma: float, M: int):
    """Levels m = 0..M-1 and lam^{2m} I_m(f)^2, with
    I_m^2 = r^{-2 m d_H} sum over cell pairs (resistance of anchors < r^m) mu mu' |A - A'|^2."""
    spec = f.spec
    const = derived_constants(spec)
    r = const.r_min
    R = _anchor_resistance(spec, M)
    mu = _level(spec, M).mu_w
    avg = averages_at(f, M)
    diff2 = (avg[:, None] - avg[None, :]) ** 2 * mu[:, None] * mu[None, :]
    lam2 = const.lam(sigma) ** 2
    levels = list(range(0, M))
    terms = []
    for m in levels:
        inside = R < r ** m
        Im2 = r ** (-2 * m * const.d_h) * float(diff2[inside].sum())
        terms.append(lam2 ** m * Im2)
    return levels, terms


# ------------------------------------------------------------ sequences

def sequence_norm(alpha, sigma: float, kind: str, spec: FractalSpec) -> float:
    """S or S~ norm of a family of sequences (rows indexed by boundary point,
    entry j holding alpha_{j+1})."""
    a = np.atleast_2d(np.asarray(alpha, dtype=float))
    if not np.isfinite(a).all():
        raise ValueError("sequence entries must be finite")
    lam = derived_constants(spec).lam(sigma)
    if kind == "S":
        steps = np.diff(a, axis=1)
        w = lam ** np.arange(1, steps.shape[1] + 1)
        return float(np.sum(np.abs(a[:, 0]) + np.sqrt(np.sum((w * steps) ** 2, axis=1))))
    if kind in ("tS", "S~", "S̃"):
        w = lam ** np.arange(1, a.shape[1] + 1)
        return float(np.sum(np.sqrt(np.sum((w * a) ** 2, axis=1))))
    raise ValueError(f"unknown sequence kind {kind!r}")


# ------------------------------------------------------------ boundary data

@dataclass(frozen=True)
class RieszRepresenters:
    level: int
    phi: list         # phi[p] reproduces h(p)
    psi: list         # psi[p] reproduces the normal derivative at p
    phi_coeffs: np.ndarray   # boundary values, row p
    psi_coeffs: np.ndarray


@lru_cache(maxsize=None)
def _representer_coeffs(spec: FractalSpec):
    Q = harmonic_gram(spec)
    if np.linalg.cond(Q) > 1e12:
        raise np.linalg.LinAlgError("harmonic Gram matrix is near singular")
    Qi = np.linalg.inv(Q)
    phi = Qi.copy()                       # row p: boundary values of phi_p
    psi = (Qi @ (-spec.h0_array)).T       # row p: Q^{-1} (-H0[:, p])
    return phi, psi


def riesz_representers(spec: FractalSpec, M: int = 0) -> RieszRepresenters:
    phi, psi = _representer_coeffs(spec)
    mk = lambda c: harmonic_extend(c, spec, 0, M)
    return RieszRepresenters(M, [mk(c) for c in phi], [mk(c) for c in psi], phi, psi)


def normal_derivative(h_boundary: np.ndarray, spec: FractalSpec) -> np.ndarray:
    return -(spec.h0_array @ np.asarray(h_boundary, dtype=float))


def boundary_restriction(f: VertexFunction, p: int, depth: int, kind: str = "v") -> np.ndarray:
    """Entries m = 1..depth of the restriction sequence of f at boundary point p."""
    spec = f.spec
    if not 0 <= p < spec.boundary:
        raise ValueError(f"{p} is not a boundary vertex")
    if depth > f.level - 2:
        raise ValueError("depth must be at most f.level - 2")
    if kind not in ("v", "n"):
        raise ValueError("kind must be 'v' or 'n'")
    const = derived_constants(spec)
    phi, psi = _representer_coeffs(spec)
    coeff = phi if kind == "v" else psi
    Q = harmonic_gram(spec)
    ext = extension_matrices(spec)
    fine = _level(spec, f.level)
    vals = f.values[fine.cells]              # (cells, B)
    out = np.zeros(depth)
    for m in range(1, depth + 1):
        lev = _level(spec, m)
        for j in np.nonzero((lev.cells == p).any(axis=1))[0]:
            w = lev.words[j]
            q = int(np.nonzero(lev.cells[j] == p)[0][0])
            r_w = lev.r_w[j]
            weight = r_w ** (-const.d_h) if kind == "v" else r_w ** (-1.0 - const.d_h)
            total = 0.0
            for k, v in enumerate(fine.words):
                if v[: len(w)] != w:
                    continue
                s = v[len(w):]
                mu_s = fine.mu_w[k] / lev.mu_w[j]
                total += lev.mu_w[j] * mu_s * float((ext.word(s) @ coeff[q]) @ Q @ vals[k])
            out[m - 1] += weight * total
    return out
