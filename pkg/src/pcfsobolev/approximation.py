"""Partitions, vertex and cell graphs, the self-similar measure, quadrature
and the resistance metric on level-m approximations.

Vertex ids are stable across levels: the vertices of V_{Lambda_{m-1}} keep
their ids inside V_{Lambda_m} and newly born vertices are appended, sorted by
their lexicographically smallest (word, boundary index) address.  The ids of
V_0 are therefore 0..B-1, and restricting a level-M function to level m is a
prefix slice.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .spec_core import (
    FractalSpec,
    UnionFind,
    derived_constants,
    extension_matrices,
    level1_network,
)

_RTOL = 1e-12


def level_scale(spec: FractalSpec, m: int) -> float:
    return derived_constants(spec).r_min ** m


def _word_weight(spec: FractalSpec, w) -> float:
    out = 1.0
    for i in w:
        out *= spec.r[i]
    return out


def _cut(spec: FractalSpec, rw: float, t: float):
    """Suffixes v with r_w r_v <= t < r_w r_{v*} below a node of weight rw."""
    thr = t * (1 + _RTOL)
    if rw <= thr:
        return [()]
    out = []
    stack = [((), rw)]
    while stack:
        v, rv = stack.pop()
        for i in range(spec.n):
            ri = rv * spec.r[i]
            if ri <= thr:
                out.append(v + (i,))
            else:
                stack.append((v + (i,), ri))
    out.sort()
    return out


def partition_words(spec: FractalSpec, t: float) -> list[tuple[int, ...]]:
    """Lambda(t): words with r_w <= t < r_{w*}, in lexicographic order.

    The empty word has no parent; it belongs to Lambda(1) only.
    """
    if not 0.0 < t <= 1.0:
        raise ValueError("scale t must lie in (0, 1]")
    return _cut(spec, 1.0, t)


# -------------------------------------------------------- refinement templates

@dataclass(frozen=True)
class _Template:
    leaves: tuple[tuple[int, ...], ...]
    leaf_r: np.ndarray
    local_cells: np.ndarray   # (n_leaves, B): p for boundary p, B + k for new class k
    n_new: int
    new_root: np.ndarray      # (n_new, 2): leaf index and boundary index of min address
    new_group: tuple[tuple[int, ...], ...]  # internal node t with x in F_t(V_1 \ V_0)
    new_rows: np.ndarray      # (n_new, B) harmonic extension coefficients


def identify(n_addresses: int, relations) -> list[int]:
    """Union-find over address pairs; returns the class representative
    (smallest address) for every address."""
    uf = UnionFind(n_addresses)
    for a, b in relations:
        uf.union(a, b)
    return uf.labels()


@lru_cache(maxsize=None)
def _template(spec: FractalSpec, leaves: tuple[tuple[int, ...], ...]) -> _Template:
    b = spec.boundary
    leafset = {v: k for k, v in enumerate(leaves)}
    internal = sorted({v[:k] for v in leaves for k in range(len(v))}, key=lambda t: (len(t), t))

    def leaf_of(node, p):
        while node not in leafset:
            node = node + (spec.fixed_point[p],)
        return leafset[node]

    relations = []
    for t in internal:
        for i, p, j, q in spec.gluings:
            relations.append((leaf_of(t + (i,), p) * b + p, leaf_of(t + (j,), q) * b + q))
    roots = identify(len(leaves) * b, relations)

    code = {}
    for p in range(b):
        code[roots[leaf_of((), p) * b + p]] = p
    new_roots = sorted({r for r in roots if r not in code})
    for k, r in enumerate(new_roots):
        code[r] = b + k
    local = np.array([code[r] for r in roots]).reshape(len(leaves), b)

    # Lambda^- grouping: level-1 points off V_0, pushed below every internal node
    net = level1_network(spec)
    fresh = [(i, p) for i in range(spec.n) for p in range(b) if net.classes[i, p] >= b]
    group: dict[int, tuple[int, ...]] = {}
    for t in internal:
        for i, p in fresh:
            c = code[roots[leaf_of(t + (i,), p) * b + p]] - b
            if c >= 0:
                group.setdefault(c, t)

    ext = extension_matrices(spec)
    rows = np.zeros((len(new_roots), b))
    root_info = np.zeros((len(new_roots), 2), dtype=int)
    for k, r in enumerate(new_roots):
        leaf, p = divmod(r, b)
        root_info[k] = (leaf, p)
        rows[k] = ext.word(leaves[leaf])[p]
    return _Template(
        leaves=leaves,
        leaf_r=np.array([_word_weight(spec, v) for v in leaves]),
        local_cells=local,
        n_new=len(new_roots),
        new_root=root_info,
        new_group=tuple(group[k] for k in range(len(new_roots))),
        new_rows=rows,
    )


# ------------------------------------------------------------------- levels

@dataclass
class _Level:
    m: int
    words: list
    r_w: np.ndarray
    mu_w: np.ndarray
    cells: np.ndarray          # (n_cells, B) vertex ids
    parent: np.ndarray         # index into level m-1 words
    n_vertices: int
    n_prev: int
    birth_cell: np.ndarray     # per new vertex: cell index (this level) of its min address
    birth_p: np.ndarray
    group_words: list          # Lambda^-_m, lexicographic
    new_group: np.ndarray      # per new vertex: index into group_words
    prolong: sp.csr_matrix     # n_vertices x n_prev


@lru_cache(maxsize=None)
def _level(spec: FractalSpec, m: int) -> _Level:
    b = spec.boundary
    d_h = derived_constants(spec).d_h
    if m == 0:
        return _Level(
            m=0, words=[()], r_w=np.ones(1), mu_w=np.ones(1),
            cells=np.arange(b)[None, :], parent=np.full(1, -1), n_vertices=b, n_prev=0,
            birth_cell=np.zeros(b, dtype=int), birth_p=np.arange(b),
            group_words=[], new_group=np.zeros(0, dtype=int),
            prolong=sp.csr_matrix((b, 0)),
        )
    prev = _level(spec, m - 1)
    t = level_scale(spec, m)
    temps = [_template(spec, tuple(_cut(spec, ru, t))) for ru in prev.r_w]
    n_leaves = np.array([len(tp.leaves) for tp in temps])
    n_new = np.array([tp.n_new for tp in temps])
    cell_start = np.concatenate([[0], np.cumsum(n_leaves)[:-1]])
    new_start = prev.n_vertices + np.concatenate([[0], np.cumsum(n_new)[:-1]])
    n_cells = int(n_leaves.sum())
    n_vert = prev.n_vertices + int(n_new.sum())

    cells = np.empty((n_cells, b), dtype=np.int64)
    parent = np.empty(n_cells, dtype=np.int64)
    r_w = np.empty(n_cells)
    birth_cell = np.empty(n_vert - prev.n_vertices, dtype=np.int64)
    birth_p = np.empty_like(birth_cell)
    rows, cols, vals = [np.arange(prev.n_vertices)], [np.arange(prev.n_vertices)], [np.ones(prev.n_vertices)]
    group_of_new: list = [None] * (n_vert - prev.n_vertices)

    by_template: dict[int, list[int]] = {}
    for ui, tp in enumerate(temps):
        by_template.setdefault(id(tp), []).append(ui)
    for members in by_template.values():
        tp = temps[members[0]]
        P = np.array(members)
        ids = np.hstack([prev.cells[P], new_start[P][:, None] + np.arange(tp.n_new)[None, :]])
        cidx = cell_start[P][:, None] + np.arange(len(tp.leaves))[None, :]
        cells[cidx] = ids[:, tp.local_cells]
        parent[cidx] = P[:, None]
        r_w[cidx] = prev.r_w[P][:, None] * tp.leaf_r[None, :]
        if tp.n_new:
            nid = new_start[P][:, None] + np.arange(tp.n_new)[None, :]
            rel = (nid - prev.n_vertices).ravel()
            birth_cell[rel] = (cell_start[P][:, None] + tp.new_root[:, 0][None, :]).ravel()
            birth_p[rel] = np.broadcast_to(tp.new_root[:, 1], nid.shape).ravel()
            rows.append(np.repeat(nid.ravel(), b))
            cols.append(np.repeat(prev.cells[P], tp.n_new, axis=0).ravel())
            vals.append(np.tile(tp.new_rows.ravel(), len(P)))
            for k, ui in enumerate(members):
                u = prev.words[ui]
                for j in range(tp.n_new):
                    group_of_new[nid[k, j] - prev.n_vertices] = u + tp.new_group[j]

    words = []
    for ui, tp in enumerate(temps):
        u = prev.words[ui]
        words.extend(u + v for v in tp.leaves)
    group_words = sorted(set(group_of_new))
    gindex = {w: k for k, w in enumerate(group_words)}
    prolong = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_vert, prev.n_vertices),
    )
    return _Level(
        m=m, words=words, r_w=r_w, mu_w=r_w ** d_h, cells=cells, parent=parent,
        n_vertices=n_vert, n_prev=prev.n_vertices, birth_cell=birth_cell, birth_p=birth_p,
        group_words=group_words, new_group=np.array([gindex[g] for g in group_of_new], dtype=int),
        prolong=prolong,
    )


def ancestor_map(spec: FractalSpec, M: int, m: int) -> np.ndarray:
    """Index of the Lambda_m ancestor of every Lambda_M cell."""
    idx = np.arange(len(_level(spec, M).words))
    for k in range(M, m, -1):
        idx = _level(spec, k).parent[idx]
    return idx


@lru_cache(maxsize=None)
def _prolong_chain(spec: FractalSpec, m: int, M: int) -> sp.csr_matrix:
    if M == m:
        return sp.identity(_level(spec, m).n_vertices, format="csr")
    return (_level(spec, M).prolong @ _prolong_chain(spec, m, M - 1)).tocsr()


# ---------------------------------------------------------------- public types

@dataclass(frozen=True)
class VertexApprox:
    spec: FractalSpec
    level: int
    n_vertices: int
    boundary: np.ndarray
    cells: np.ndarray
    edges: np.ndarray          # (E, 2), smaller id first
    conductance: np.ndarray
    embedding: np.ndarray      # ids of V_{Lambda_{m-1}} inside V_{Lambda_m}

    def label(self, v: int) -> tuple[tuple[int, ...], int]:
        return vertex_label(self.spec, v)


@dataclass(frozen=True)
class CellApprox:
    spec: FractalSpec
    level: int
    words: list
    r_w: np.ndarray
    mu_w: np.ndarray
    edges: np.ndarray          # (E, 2), smaller word index first
    refined: np.ndarray        # bool mask over edges
    parent: np.ndarray
    shared_vertex: np.ndarray
    overlap: int               # max number of cells meeting at one vertex

    @property
    def refined_edges(self) -> np.ndarray:
        return self.edges[self.refined]


@lru_cache(maxsize=None)
def _vertex_birth_levels(spec: FractalSpec, m: int) -> np.ndarray:
    out = np.zeros(_level(spec, m).n_vertices, dtype=int)
    for k in range(1, m + 1):
        lev = _level(spec, k)
        out[lev.n_prev:lev.n_vertices] = k
    return out


def vertex_label(spec: FractalSpec, v: int, m: int | None = None) -> tuple[tuple[int, ...], int]:
    """Smallest (word, boundary index) address of vertex v at its birth level."""
    if v < spec.boundary:
        return ((), v)
    k = 1
    while _level(spec, k).n_vertices <= v:
        k += 1
    lev = _level(spec, k)
    j = v - lev.n_prev
    return (lev.words[lev.birth_cell[j]], int(lev.birth_p[j]))


def vertex_graph_edges(spec: FractalSpec, m: int):
    lev = _level(spec, m)
    h = spec.h0_array
    b = spec.boundary
    pairs = [(p, q) for p in range(b) for q in range(p + 1, b)]
    a = np.concatenate([lev.cells[:, p] for p, _ in pairs])
    c = np.concatenate([lev.cells[:, q] for _, q in pairs])
    g = np.concatenate([h[p, q] / lev.r_w for p, q in pairs])
    lo, hi = np.minimum(a, c), np.maximum(a, c)
    key = lo * lev.n_vertices + hi
    uniq, inv = np.unique(key, return_inverse=True)
    cond = np.zeros(len(uniq))
    np.add.at(cond, inv, g)
    edges = np.stack([uniq // lev.n_vertices, uniq % lev.n_vertices], axis=1)
    return edges, cond


@lru_cache(maxsize=None)
def build_vertex_approx(spec: FractalSpec, m: int) -> VertexApprox:
    if m < 0:
        raise ValueError("level must be nonnegative")
    lev = _level(spec, m)
    edges, cond = vertex_graph_edges(spec, m)
    return VertexApprox(
        spec=spec, level=m, n_vertices=lev.n_vertices, boundary=np.arange(spec.boundary),
        cells=lev.cells, edges=edges, conductance=cond, embedding=np.arange(lev.n_prev),
    )


@lru_cache(maxsize=None)
def build_cell_approx(spec: FractalSpec, m: int) -> CellApprox:
    if m < 1:
        raise ValueError("cell graphs start at level 1")
    lev = _level(spec, m)
    n_cells, b = lev.cells.shape
    vert = lev.cells.ravel()
    cell = np.repeat(np.arange(n_cells), b)
    order = np.lexsort((cell, vert))
    vert, cell = vert[order], cell[order]
    found = []
    for k in range(1, n_cells * b):
        same = vert[k:] == vert[:-k]
        if not same.any():
            break
        idx = np.nonzero(same)[0]
        found.append(np.stack([cell[idx], cell[idx + k], vert[idx]], axis=1))
    counts = np.bincount(vert)
    trip = np.concatenate(found) if found else np.zeros((0, 3), dtype=int)
    trip = trip[trip[:, 0] != trip[:, 1]]
    key = trip[:, 0] * n_cells + trip[:, 1]
    order = np.lexsort((trip[:, 2], key))
    trip, key = trip[order], key[order]
    first = np.concatenate([[True], key[1:] != key[:-1]]) if len(key) else np.zeros(0, bool)
    trip = trip[first]
    edges = trip[:, :2]
    return CellApprox(
        spec=spec, level=m, words=lev.words, r_w=lev.r_w, mu_w=lev.mu_w, edges=edges,
        refined=lev.parent[edges[:, 0]] == lev.parent[edges[:, 1]], parent=lev.parent,
        shared_vertex=trip[:, 2], overlap=int(counts.max()),
    )


# ------------------------------------------------------------ function types

@dataclass
class VertexFunction:
    """Values on V_{Lambda_M}, read as the piecewise-harmonic interpolant."""
    spec: FractalSpec
    level: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = _level(self.spec, self.level).n_vertices
        if self.values.shape != (n,):
            raise ValueError(f"expected {n} vertex values at level {self.level}, got {self.values.shape}")

    def __add__(self, other: VertexFunction) -> VertexFunction:
        return VertexFunction(self.spec, self.level, self.values + other.values)

    def __sub__(self, other: VertexFunction) -> VertexFunction:
        return VertexFunction(self.spec, self.level, self.values - other.values)

    def __mul__(self, c: float) -> VertexFunction:
        return VertexFunction(self.spec, self.level, self.values * c)

    __rmul__ = __mul__


@dataclass
class CellFunction:
    """Cell averages A_w(f) on Lambda_M, in lexicographic word order."""
    spec: FractalSpec
    level: int
    averages: np.ndarray

    def __post_init__(self):
        self.averages = np.asarray(self.averages, dtype=float)
        n = len(_level(self.spec, self.level).words)
        if self.averages.shape != (n,):
            raise ValueError(f"expected {n} cell averages at level {self.level}, got {self.averages.shape}")


def constant(spec: FractalSpec, level: int, c: float = 1.0) -> VertexFunction:
    return VertexFunction(spec, level, np.full(_level(spec, level).n_vertices, float(c)))


def prolong(f: VertexFunction, M: int) -> VertexFunction:
    """Piecewise-harmonic refinement of f to level M >= f.level."""
    if M < f.level:
        raise ValueError("target level below the function's level")
    return VertexFunction(f.spec, M, _prolong_chain(f.spec, f.level, M) @ f.values)


def restrict(f: VertexFunction, m: int) -> VertexFunction:
    if m > f.level:
        raise ValueError("cannot restrict to a finer level")
    return VertexFunction(f.spec, m, f.values[: _level(f.spec, m).n_vertices].copy())


def at_level(f: VertexFunction, m: int) -> VertexFunction:
    return prolong(f, m) if m >= f.level else restrict(f, m)


def refine_cells(f: CellFunction, M: int) -> CellFunction:
    if M < f.level:
        raise ValueError("target level below the function's level")
    return CellFunction(f.spec, M, f.averages[ancestor_map(f.spec, M, f.level)])


# ----------------------------------------------------------------- measure

@lru_cache(maxsize=None)
def harmonic_integral_functional(spec: FractalSpec) -> np.ndarray:
    """Weights l on V_0 with l(h|V_0) = integral of h for harmonic h."""
    ext = extension_matrices(spec)
    mu = np.array(derived_constants(spec).mu)
    b = spec.boundary
    T = sum(mu[i] * ext.A[i].T for i in range(spec.n))
    system = np.vstack([np.eye(b) - T, np.ones((1, b))])
    rhs = np.concatenate([np.zeros(b), [1.0]])
    ell, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    if np.abs(system @ ell - rhs).max() > 1e-10:
        raise ArithmeticError("integral functional fixed point not found; check extension matrices")
    ell.setflags(write=False)
    return ell


@lru_cache(maxsize=None)
def harmonic_gram(spec: FractalSpec) -> np.ndarray:
    """Gram matrix Q_pq = integral of h_p h_q for the harmonic basis, from the
    self-similar identity Q = sum_i mu_i A_i^T Q A_i with 1^T Q 1 = 1."""
    ext = extension_matrices(spec)
    mu = np.array(derived_constants(spec).mu)
    b = spec.boundary
    T = sum(mu[i] * np.kron(ext.A[i].T, ext.A[i].T) for i in range(spec.n))
    system = np.vstack([np.eye(b * b) - T, np.ones((1, b * b))])
    rhs = np.concatenate([np.zeros(b * b), [1.0]])
    q, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    if np.abs(system @ q - rhs).max() > 1e-10:
        raise ArithmeticError("Gram fixed point not found")
    Q = q.reshape(b, b)
    Q = 0.5 * (Q + Q.T)
    Q.setflags(write=False)
    return Q


def cell_values(f: VertexFunction) -> np.ndarray:
    """(n_cells, B) boundary values of f on every Lambda_M cell."""
    return f.values[_level(f.spec, f.level).cells]


def cell_integrals(f: VertexFunction) -> np.ndarray:
    lev = _level(f.spec, f.level)
    return lev.mu_w * (f.values[lev.cells] @ harmonic_integral_functional(f.spec))


def integrate(f: VertexFunction) -> float:
    return float(cell_integrals(f).sum())


def inner_product(f: VertexFunction, g: VertexFunction, depth: int = 4, with_error: bool = False):
    """Refinement quadrature for the L^2(mu) pairing of two level-M functions."""
    if f.level != g.level:
        raise ValueError("functions must share a level")
    ell = harmonic_integral_functional(f.spec)

    def quad(d):
        lev = _level(f.spec, f.level + d)
        fv = prolong(f, f.level + d).values[lev.cells]
        gv = prolong(g, g.level + d).values[lev.cells]
        return float(lev.mu_w @ ((fv * gv) @ ell))

    value = quad(depth)
    if not with_error:
        return value
    return value, abs(value - quad(depth - 1)) if depth > 0 else float("inf")


def l2_inner(f: VertexFunction, g: VertexFunction) -> float:
    """Exact L^2(mu) pairing of piecewise-harmonic functions via the harmonic Gram matrix."""
    if f.level != g.level:
        raise ValueError("functions must share a level")
    lev = _level(f.spec, f.level)
    Q = harmonic_gram(f.spec)
    fv, gv = f.values[lev.cells], g.values[lev.cells]
    return float(lev.mu_w @ np.einsum("cp,pq,cq->c", fv, Q, gv))


def l2_norm(f: VertexFunction) -> float:
    return float(np.sqrt(max(l2_inner(f, f), 0.0)))


# -------------------------------------------------------------- resistance

@lru_cache(maxsize=None)
def energy_matrix(spec: FractalSpec, m: int) -> sp.csr_matrix:
    """Conductance Laplacian of G_{v,m} (positive semidefinite, equal to -H)."""
    lev = _level(spec, m)
    h = spec.h0_array
    b = spec.boundary
    rows = np.repeat(lev.cells, b, axis=1).ravel()
    cols = np.tile(lev.cells, (1, b)).ravel()
    vals = (-h.ravel()[None, :] / lev.r_w[:, None]).ravel()
    return sp.csr_matrix((vals, (rows, cols)), shape=(lev.n_vertices, lev.n_vertices))


def _grounded_inverse_columns(L: sp.csr_matrix, cols: np.ndarray) -> np.ndarray:
    n = L.shape[0]
    keep = np.arange(1, n)
    Lg = L[keep][:, keep].tocsc()
    rhs = np.zeros((n - 1, len(cols)))
    for k, c in enumerate(cols):
        if c > 0:
            rhs[c - 1, k] = 1.0
    X = np.zeros((n, len(cols)))
    if n > 1:
        X[1:] = spla.splu(Lg).solve(rhs)
    return X


def resistance_matrix(approx: VertexApprox, subset=None) -> np.ndarray:
    """Effective resistance between the chosen vertices of G_{v,m}."""
    L = energy_matrix(approx.spec, approx.level)
    n = L.shape[0]
    idx = np.arange(n) if subset is None else np.asarray(subset, dtype=int)
    if n <= 1:
        return np.zeros((len(idx), len(idx)))
    if subset is None and n <= 4000:
        Lp = la.pinvh(L.toarray())
        d = np.diag(Lp)
        R = d[:, None] + d[None, :] - 2 * Lp
    else:
        X = _grounded_inverse_columns(L, idx)[idx]
        d = np.diag(X)
        R = d[:, None] + d[None, :] - X - X.T
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 0.0)
    return np.maximum(R, 0.0)


def cell_anchors(spec: FractalSpec, m: int) -> np.ndarray:
    return _level(spec, m).cells.min(axis=1)


def resistance_ball(approx: VertexApprox, x: int, rho: float, R: np.ndarray | None = None, cells: bool = False):
    """Vertices (or cells, via anchors) within resistance distance rho of x."""
    if R is None:
        R = resistance_matrix(approx, [x] + [v for v in range(approx.n_vertices) if v != x])
        order = np.concatenate([[x], [v for v in range(approx.n_vertices) if v != x]])
        row = np.empty(approx.n_vertices)
        row[order] = R[0]
    else:
        row = R[x]
    inside = row < rho
    inside[x] = True
    if not cells:
        return np.nonzero(inside)[0]
    return np.nonzero(inside[cell_anchors(approx.spec, approx.level)])[0]


@dataclass(frozen=True)
class RegularityReport:
    level: int
    samples: int
    min_ratio: float
    max_ratio: float
    median_ratio: float
    overlap: int
    ratios: np.ndarray = field(repr=False)


def measure_regularity_report(spec: FractalSpec, m: int, samples: int = 200, seed: int = 0,
                              interior_only: bool = False) -> RegularityReport:
    """Statistics of mu(B(x, rho)) / rho^{d_H} over random centres and radii."""
    if m < 2:
        raise ValueError("need m >= 2")
    const = derived_constants(spec)
    approx = build_vertex_approx(spec, m)
    R = resistance_matrix(approx)
    lev = _level(spec, m)
    anchors = cell_anchors(spec, m)
    rng = np.random.default_rng(seed)
    lo = np.log(const.r_min ** m)
    first = spec.boundary if interior_only else 0
    xs = rng.integers(first, approx.n_vertices, size=samples)
    rhos = np.exp(rng.uniform(lo, 0.0, size=samples))
    ratios = np.empty(samples)
    for k, (x, rho) in enumerate(zip(xs, rhos)):
        mass = lev.mu_w[R[x, anchors] < rho].sum()
        ratios[k] = mass / rho ** const.d_h
    cells = build_cell_approx(spec, m)
    return RegularityReport(m, samples, float(ratios.min()), float(ratios.max()),
                            float(np.median(ratios)), cells.overlap, ratios)
