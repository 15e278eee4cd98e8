"""Haar, smoothed Haar, tent, smoothed tent and atomic decompositions."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .approximation import (
    CellFunction,
    VertexFunction,
    _level,
    _prolong_chain,
    ancestor_map,
    at_level,
    energy_matrix,
    harmonic_integral_functional,
    l2_norm,
    prolong,
)
from .operators import graph_laplacian, green_apply, laplacian_apply, harmonic_extend
from .spec_core import FractalSpec, derived_constants

DEFAULT_DEPTH = 3


# ----------------------------------------------------------- cell averages

def cell_averages(f: VertexFunction, m: int) -> CellFunction:
    """Exact averages of the piecewise-harmonic f over the cells of Lambda_m."""
    if m > f.level:
        raise ValueError("averages requested below the function's resolution; prolong first")
    spec = f.spec
    lev = _level(spec, f.level)
    ints = lev.mu_w * (f.values[lev.cells] @ harmonic_integral_functional(spec))
    return _aggregate(spec, ints, f.level, m)


def _aggregate(spec: FractalSpec, ints: np.ndarray, M: int, m: int) -> CellFunction:
    coarse = _level(spec, m)
    total = np.bincount(ancestor_map(spec, M, m), weights=ints, minlength=len(coarse.words))
    return CellFunction(spec, m, total / coarse.mu_w)


def coarsen(f: CellFunction, m: int) -> CellFunction:
    if m > f.level:
        raise ValueError("cannot coarsen to a finer level")
    lev = _level(f.spec, f.level)
    return _aggregate(f.spec, lev.mu_w * f.averages, f.level, m)


def cell_l2_norm(f: CellFunction) -> float:
    return float(np.sqrt(_level(f.spec, f.level).mu_w @ f.averages ** 2))


def indicator(spec: FractalSpec, word, level: int | None = None) -> CellFunction:
    """Cell function of the indicator of F_w K at level max(|w|, level)."""
    word = tuple(word)
    level = len(word) if level is None else max(level, len(word))
    lev = _level(spec, level)
    vals = np.array([1.0 if w[: len(word)] == word else 0.0 for w in lev.words])
    return CellFunction(spec, level, vals)


# ----------------------------------------------------------------- Haar

@dataclass
class HaarLayers:
    spec: FractalSpec
    C: float
    layers: list   # layers[m-1] holds values on Lambda_m

    @property
    def level(self) -> int:
        return len(self.layers)

    def layer(self, m: int) -> CellFunction:
        return CellFunction(self.spec, m, self.layers[m - 1])

    def layer_norm(self, m: int) -> float:
        return float(np.sqrt(_level(self.spec, m).mu_w @ self.layers[m - 1] ** 2))


def haar_expand(f: CellFunction) -> HaarLayers:
    spec = f.spec
    avgs = {f.level: f.averages}
    for m in range(f.level - 1, -1, -1):
        avgs[m] = coarsen(CellFunction(spec, m + 1, avgs[m + 1]), m).averages
    layers = [avgs[m] - avgs[m - 1][_level(spec, m).parent] for m in range(1, f.level + 1)]
    return HaarLayers(spec, float(avgs[0][0]), layers)


def haar_reconstruct(layers: HaarLayers) -> CellFunction:
    spec = layers.spec
    acc = np.array([layers.C])
    for m, layer in enumerate(layers.layers, start=1):
        acc = acc[_level(spec, m).parent] + layer
    return CellFunction(spec, layers.level, acc)


def project_haar(spec: FractalSpec, m: int, values: np.ndarray) -> np.ndarray:
    """Remove the mu-weighted parent means so the values form an m-Haar layer."""
    lev = _level(spec, m)
    parent_mu = np.bincount(lev.parent, weights=lev.mu_w)
    mean = np.bincount(lev.parent, weights=lev.mu_w * values) / parent_mu
    return values - mean[lev.parent]


def random_haar_layer(spec: FractalSpec, m: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    n = len(_level(spec, m).words)
    return project_haar(spec, m, scale * rng.standard_normal(n))


# ------------------------------------------------------------------ KKT

class SaddleSolver:
    """Minimize g^T K g subject to C g = b through the symmetric saddle system.

    Constraint rows are scaled to unit Euclidean norm before factorization.
    """

    def __init__(self, K: sp.spmatrix, C: sp.spmatrix):
        C = sp.csr_matrix(C)
        norms = np.sqrt(np.asarray(C.multiply(C).sum(axis=1)).ravel())
        if (norms == 0).any():
            raise ValueError("empty constraint row")
        self.row_scale = 1.0 / norms
        Cs = sp.diags(self.row_scale) @ C
        self.n = K.shape[0]
        self.k = C.shape[0]
        A = sp.bmat([[sp.csr_matrix(K), Cs.T], [Cs, None]], format="csc")
        try:
            self.lu = spla.splu(A)
        except RuntimeError as exc:
            raise np.linalg.LinAlgError("saddle system is singular; constraints rank-deficient") from exc
        self.C = C

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        rhs = np.zeros((self.n + self.k,) + b.shape[1:])
        rhs[self.n:] = b * (self.row_scale if b.ndim == 1 else self.row_scale[:, None])
        x = self.lu.solve(rhs)
        return x[: self.n]


@lru_cache(maxsize=None)
def average_rows(spec: FractalSpec, m: int, M: int) -> sp.csr_matrix:
    """Rows mapping level-M vertex values to averages over Lambda_m cells."""
    fine = _level(spec, M)
    coarse = _level(spec, m)
    anc = ancestor_map(spec, M, m)
    ell = harmonic_integral_functional(spec)
    b = spec.boundary
    rows = np.repeat(anc, b)
    cols = fine.cells.ravel()
    vals = ((fine.mu_w / coarse.mu_w[anc])[:, None] * ell[None, :]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(coarse.words), fine.n_vertices))


@lru_cache(maxsize=32)
def _haar_solver(spec: FractalSpec, m: int, M: int) -> SaddleSolver:
    return SaddleSolver(energy_matrix(spec, M), average_rows(spec, m, M))


def smoothed_haar_layer(layer, M: int | None = None, depth: int = DEFAULT_DEPTH,
                        spec: FractalSpec | None = None, m: int | None = None) -> VertexFunction:
    """Energy minimizer at working level M with the averages of the Haar layer on Lambda_m.

    ``layer`` is a CellFunction at level m, or a raw value array together with
    ``spec`` and ``m``.
    """
    if isinstance(layer, CellFunction):
        spec, m, values = layer.spec, layer.level, layer.averages
    else:
        values = np.asarray(layer, dtype=float)
        if spec is None or m is None:
            raise ValueError("raw layer values need spec and m")
    M = m + depth if M is None else M
    if M < m:
        raise ValueError("working level must be at least the layer level")
    if not np.any(values):
        return VertexFunction(spec, M, np.zeros(_level(spec, M).n_vertices))
    g = _haar_solver(spec, m, M).solve(values)
    return VertexFunction(spec, M, g)


def smoothed_haar_energy_drift(layer: CellFunction, depth: int = DEFAULT_DEPTH) -> float:
    """Relative energy change of the smoothed layer from depth to depth + 1."""
    m = layer.level
    e0 = _energy(smoothed_haar_layer(layer, m + depth))
    e1 = _energy(smoothed_haar_layer(layer, m + depth + 1))
    return abs(e1 - e0) / max(e0, 1e-300)


def _energy(f: VertexFunction) -> float:
    return float(f.values @ (energy_matrix(f.spec, f.level) @ f.values))


@dataclass
class SmoothedLayers:
    kind: str
    level: int
    base: VertexFunction           # constant (haar) or harmonic part (tent)
    layers: list                    # VertexFunctions for m = 1..top
    diagnostics: list = field(default_factory=list)
    C: float = 0.0

    def total(self) -> VertexFunction:
        out = self.base
        for g in self.layers:
            out = out + g
        return out


def smoothed_haar_expand(f: VertexFunction, M: int | None = None, top: int | None = None) -> SmoothedLayers:
    """Greedy expansion into smoothed Haar functions at working level M.

    Layer m matches the averages of f on Lambda_m given the previous layers,
    for m = 1..top (default: the function's level).
    """
    spec = f.spec
    top = f.level if top is None else top
    M = max(f.level, top + DEFAULT_DEPTH) if M is None else M
    if M < max(top, f.level):
        raise ValueError("working level below the expansion depth")
    fM = prolong(f, M) if M >= f.level else None
    C = float((average_rows(spec, 0, M) @ fM.values)[0])
    acc = np.full(_level(spec, M).n_vertices, C)
    layers, diag = [], []
    K = energy_matrix(spec, M)
    for m in range(1, top + 1):
        rows = average_rows(spec, m, M)
        target = project_haar(spec, m, rows @ (fM.values - acc))
        g = _haar_solver(spec, m, M).solve(target)
        acc = acc + g
        layers.append(VertexFunction(spec, M, g))
        diag.append({"level": m, "energy": float(g @ (K @ g)),
                     "feasibility": float(np.abs(rows @ g - target).max())})
    base = VertexFunction(spec, M, np.full(len(acc), C))
    return SmoothedLayers("haar", M, base, layers, diag, C)


# ----------------------------------------------------------------- tents

@dataclass
class TentLayers:
    spec: FractalSpec
    level: int
    boundary_values: np.ndarray
    coefficients: list   # coefficients[m-1]: values at V_{Lambda_m} \ V_{Lambda_{m-1}}

    def group_weights(self, m: int) -> np.ndarray:
        """r_w of the Lambda^-_m word owning each new vertex of level m."""
        lev = _level(self.spec, m)
        r = np.array([_word_r(self.spec, w) for w in lev.group_words])
        return r[lev.new_group]

    def layer(self, m: int) -> VertexFunction:
        """phi_m as a level-M function (m = 0 gives the harmonic part)."""
        spec = self.spec
        if m == 0:
            return harmonic_extend(self.boundary_values, spec, 0, self.level)
        lev = _level(spec, m)
        vec = np.zeros(lev.n_vertices)
        vec[lev.n_prev:] = self.coefficients[m - 1]
        return VertexFunction(spec, self.level, _prolong_chain(spec, m, self.level) @ vec)


def _word_r(spec: FractalSpec, w) -> float:
    out = 1.0
    for i in w:
        out *= spec.r[i]
    return out


def tent_expand(f: VertexFunction) -> TentLayers:
    spec = f.spec
    coeffs = []
    for m in range(1, f.level + 1):
        lev = _level(spec, m)
        interp = lev.prolong @ f.values[: lev.n_prev]
        coeffs.append(f.values[lev.n_prev: lev.n_vertices] - interp[lev.n_prev:])
    return TentLayers(spec, f.level, f.values[: spec.boundary].copy(), coeffs)


def tent_reconstruct(layers: TentLayers) -> VertexFunction:
    spec = layers.spec
    vec = np.asarray(layers.boundary_values, dtype=float)
    for m in range(1, layers.level + 1):
        lev = _level(spec, m)
        vec = lev.prolong @ vec
        vec[lev.n_prev:] += layers.coefficients[m - 1]
    return VertexFunction(spec, layers.level, vec)


def tent(spec: FractalSpec, vertex: int, level: int | None = None) -> VertexFunction:
    """Tent at a vertex born at level l: 1 there, 0 at the other vertices of
    V_{Lambda_l}, harmonic in every Lambda_l cell."""
    born = 0
    while _level(spec, born).n_vertices <= vertex:
        born += 1
    vec = np.zeros(_level(spec, born).n_vertices)
    vec[vertex] = 1.0
    f = VertexFunction(spec, born, vec)
    return f if level is None else prolong(f, level)


@lru_cache(maxsize=32)
def _tent_solver(spec: FractalSpec, m: int, M: int) -> SaddleSolver:
    L = graph_laplacian(spec, M)
    inner = L.interior
    HI = L.H.tocsr()[inner]
    Q = (HI.T @ sp.diags(1.0 / L.d[inner]) @ HI).tocsr()
    nm = _level(spec, m).n_vertices
    C = sp.csr_matrix((np.ones(nm), (np.arange(nm), np.arange(nm))), shape=(nm, L.H.shape[0]))
    return SaddleSolver(Q, C)


def laplacian_l2(f: VertexFunction) -> float:
    """d-weighted norm of the discrete Laplacian over interior vertices."""
    L = graph_laplacian(f.spec, f.level)
    b = len(L.boundary)
    hv = (L.H @ f.values)[b:]
    return float(np.sqrt(np.sum(hv ** 2 / L.d[b:])))


def smoothed_tent_layer(values: np.ndarray, spec: FractalSpec, m: int, M: int | None = None,
                        depth: int = DEFAULT_DEPTH) -> VertexFunction:
    """Minimizer of the Laplacian norm at level M with prescribed values on V_{Lambda_m}."""
    M = m + depth if M is None else M
    values = np.asarray(values, dtype=float)
    if values.shape != (_level(spec, m).n_vertices,):
        raise ValueError("values must be given on V_{Lambda_m}")
    return VertexFunction(spec, M, _tent_solver(spec, m, M).solve(values))


def smoothed_tent_expand(f: VertexFunction, M: int | None = None, top: int | None = None) -> SmoothedLayers:
    spec = f.spec
    top = f.level if top is None else top
    M = max(f.level, top + DEFAULT_DEPTH) if M is None else M
    if top > f.level:
        raise ValueError("vertex values beyond the function's level are not defined")
    fM = prolong(f, M)
    base = harmonic_extend(f.values[: spec.boundary], spec, 0, M)
    acc = base.values.copy()
    layers, diag = [], []
    for m in range(1, top + 1):
        nm = _level(spec, m).n_vertices
        target = fM.values[:nm] - acc[:nm]
        target[: _level(spec, m - 1).n_vertices] = 0.0
        g = VertexFunction(spec, M, _tent_solver(spec, m, M).solve(target))
        acc = acc + g.values
        layers.append(g)
        diag.append({"level": m, "laplacian_norm": laplacian_l2(g),
                     "feasibility": float(np.abs(g.values[:nm] - target).max())})
    return SmoothedLayers("tent", M, base, layers, diag)


# ---------------------------------------------------------------- atomic

@dataclass
class AtomCoefficients:
    spec: FractalSpec
    variant: str          # "a" or "b"
    k: int
    level: int
    h: VertexFunction | None
    C: float = 0.0
    words: list = field(default_factory=list)      # variant a: internal words w
    a: np.ndarray | None = None                    # variant a: (len(words), N)
    r_words: np.ndarray | None = None              # r_w per word / per tent coefficient
    c: np.ndarray | None = None                    # variant b: tent coefficients

    @property
    def balance_residual(self) -> float:
        if self.variant != "a" or self.a is None or len(self.a) == 0:
            return 0.0
        mu = np.array(derived_constants(self.spec).mu)
        return float(np.abs(self.a @ mu).max())


def atomic_window(spec: FractalSpec, variant: str, k: int) -> tuple[float, float]:
    ds = derived_constants(spec).d_s
    if variant == "a":
        return max(0.0, 2 * k - ds / 2), 2 * k + ds / 2
    if variant == "b":
        return 2 * k + ds / 2, 2 * k + 2 - ds / 2
    raise ValueError(f"unknown variant {variant!r}")


def choose_atomic_variant(spec: FractalSpec, sigma: float) -> tuple[str, int]:
    for k in (0, 1):
        for variant in ("a", "b"):
            lo, hi = atomic_window(spec, variant, k)
            if (lo < sigma < hi) or (variant == "a" and k == 0 and sigma == 0.0):
                return variant, k
    raise ValueError(f"sigma={sigma} lies in no atomic window available at desk scale (k <= 1)")


def _tree_averages(spec: FractalSpec, leaf_words, leaf_avg, leaf_mu):
    """Averages over every node of the word tree cut by the given leaves."""
    integral: dict = {}
    for w, a, mu in zip(leaf_words, leaf_avg, leaf_mu):
        for k in range(len(w) + 1):
            integral[w[:k]] = integral.get(w[:k], 0.0) + a * mu
    d_h = derived_constants(spec).d_h
    return {w: v / _word_r(spec, w) ** d_h for w, v in integral.items()}


def _haar_atoms(spec: FractalSpec, cf: CellFunction):
    lev = _level(spec, cf.level)
    avg = _tree_averages(spec, lev.words, cf.averages, lev.mu_w)
    leaves = set(lev.words)
    internal = sorted(w for w in avg if w not in leaves)
    a = np.array([[avg[w + (i,)] - avg[w] for i in range(spec.n)] for w in internal]).reshape(-1, spec.n)
    r = np.array([_word_r(spec, w) for w in internal])
    return float(avg[()]), internal, a, r


def atomic_from_function(f, sigma: float, M: int | None = None, variant: str | None = None,
                         k: int | None = None) -> AtomCoefficients:
    """Atomic coefficients of f for the window containing sigma.

    For k = 1 the Laplacian is peeled first: u = -Delta f (boundary completed),
    the Green part G u is removed and the remainder is the multiharmonic part.
    """
    spec = f.spec
    if variant is None or k is None:
        variant, k = choose_atomic_variant(spec, sigma)
    if k not in (0, 1):
        raise ValueError("desk scale supports k in {0, 1}")
    if isinstance(f, CellFunction):
        if variant != "a" or k != 0:
            raise ValueError("cell functions only admit the k=0 Haar atoms")
        C, words, a, r = _haar_atoms(spec, f)
        return AtomCoefficients(spec, "a", 0, f.level, None, C, words, a, r)
    if M is not None:
        f = at_level(f, M)
    if k == 0:
        h, g = None, f
    else:
        u = laplacian_apply(f, fill=True) * -1.0
        g = u
    if variant == "a":
        C, words, a, r = _haar_atoms(spec, cell_averages(g, g.level))
        if k == 1:
            h = f - green_apply(g)
        return AtomCoefficients(spec, "a", k, f.level, h, C, words, a, r)
    layers = tent_expand(g)
    c = np.concatenate(layers.coefficients) if layers.coefficients else np.zeros(0)
    r = np.concatenate([layers.group_weights(m) for m in range(1, layers.level + 1)]) if layers.coefficients else np.zeros(0)
    phi0 = layers.layer(0)
    if k == 0:
        h = phi0
    else:
        h = f - green_apply(g - phi0)
    return AtomCoefficients(spec, "b", k, f.level, h, 0.0, [], None, r, c)


def atomic_reconstruct_cells(coeffs: AtomCoefficients) -> CellFunction:
    """Cell averages rebuilt from C and the a_{wi} (variant a, k = 0)."""
    if coeffs.variant != "a" or coeffs.k != 0:
        raise ValueError("only k=0 variant a rebuilds cell averages directly")
    spec = coeffs.spec
    lookup = {w: row for w, row in zip(coeffs.words, coeffs.a)}
    lev = _level(spec, coeffs.level)
    out = np.empty(len(lev.words))
    for j, w in enumerate(lev.words):
        val = coeffs.C
        for t in range(len(w)):
            val += lookup[w[:t]][w[t]]
        out[j] = val
    return CellFunction(spec, coeffs.level, out)


def atomic_norm(coeffs: AtomCoefficients, sigma: float, mode: str = "raise") -> float:
    """Weighted coefficient norm; ``mode`` is "raise" or "warn" outside the window."""
    spec = coeffs.spec
    const = derived_constants(spec)
    if const.is_critical(sigma, 1e-12):
        raise ValueError(f"sigma={sigma} is a critical order; the atomic norm is not equivalent there")
    lo, hi = atomic_window(spec, coeffs.variant, coeffs.k)
    inside = lo < sigma < hi or (coeffs.variant == "a" and coeffs.k == 0 and sigma == 0.0)
    if not inside:
        msg = f"sigma={sigma} outside the window ({lo:.5f}, {hi:.5f}) of variant {coeffs.variant}, k={coeffs.k}"
        if mode == "raise":
            raise ValueError(msg)
        warnings.warn(msg, stacklevel=2)
    expo = const.d_h - (sigma - 2 * coeffs.k) * const.d_w
    total = 0.0 if coeffs.h is None else l2_norm(coeffs.h) ** 2
    if coeffs.variant == "a":
        total += coeffs.C ** 2
        if coeffs.a is not None and len(coeffs.a):
            total += float(np.sum(coeffs.r_words ** expo * np.sum(coeffs.a ** 2, axis=1)))
    elif coeffs.c is not None and len(coeffs.c):
        total += float(np.sum(coeffs.r_words ** expo * coeffs.c ** 2))
    return float(np.sqrt(total))
