"""Fractal specifications, harmonic structures and derived constants.

A specification describes a p.c.f. self-similar set through its level-1
combinatorics: ``n`` contractions, a boundary of ``boundary`` points, the
gluing rules ``F_i(p) = F_j(q)`` and, for every boundary point, the
contraction that fixes it.  Together with the boundary Laplacian ``h0`` and
the renormalization weights ``r`` this is a harmonic structure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property, lru_cache
from pathlib import Path

import numpy as np
import scipy.linalg as la


class SpecError(ValueError):
    """Raised when a specification document is malformed or inconsistent."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class FractalSpec:
    name: str
    n: int
    boundary: int
    r: tuple[float, ...]
    h0: tuple[tuple[float, ...], ...]
    gluings: tuple[tuple[int, int, int, int], ...]
    fixed_point: tuple[int, ...]

    @cached_property
    def r_array(self) -> np.ndarray:
        a = np.array(self.r, dtype=float)
        a.setflags(write=False)
        return a

    @cached_property
    def h0_array(self) -> np.ndarray:
        a = np.array(self.h0, dtype=float)
        a.setflags(write=False)
        return a

    @property
    def equal_weights(self) -> bool:
        return max(self.r) == min(self.r)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n": self.n,
            "boundary": self.boundary,
            "r": list(self.r),
            "h0": [list(row) for row in self.h0],
            "gluings": [list(g) for g in self.gluings],
            "fixed_point": list(self.fixed_point),
        }


def _close_gluings(raw) -> tuple[tuple[int, int, int, int], ...]:
    # store each unordered gluing once, smaller cell first
    seen = set()
    for g in raw:
        i, p, j, q = (int(v) for v in g)
        key = (i, p, j, q) if (i, p) < (j, q) else (j, q, i, p)
        seen.add(key)
    return tuple(sorted(seen))


def _level1_components(n: int, boundary: int, gluings) -> int:
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, _, j, _ in gluings:
        parent[find(i)] = find(j)
    return len({find(i) for i in range(n)})


def validate_spec(spec: FractalSpec, tol: float = 1e-10) -> None:
    if spec.n < 2:
        raise SpecError("n", "need at least two contractions")
    if spec.boundary < 2:
        raise SpecError("boundary", "need at least two boundary points")
    if len(spec.r) != spec.n:
        raise SpecError("r", f"expected {spec.n} weights, got {len(spec.r)}")
    for i, ri in enumerate(spec.r):
        if not (0.0 < ri < 1.0):
            raise SpecError(f"r[{i}]", "regular harmonic structure requires r_i<1 and r_i>0")
    h = np.array(spec.h0, dtype=float)
    if h.shape != (spec.boundary, spec.boundary):
        raise SpecError("h0", f"expected a {spec.boundary}x{spec.boundary} matrix")
    if not np.allclose(h, h.T, atol=tol):
        raise SpecError("h0", "matrix must be symmetric")
    off = h - np.diag(np.diag(h))
    if (off < -tol).any():
        raise SpecError("h0", "off-diagonal entries must be nonnegative")
    if np.abs(h.sum(axis=1)).max() > tol * max(1.0, np.abs(h).max()):
        raise SpecError("h0", "row sums must vanish")
    ev = np.linalg.eigvalsh(h)
    scale = max(1.0, np.abs(ev).max())
    if ev.max() > tol * scale:
        raise SpecError("h0", "matrix must be negative semidefinite")
    if (np.abs(ev) <= 1e-9 * scale).sum() != 1:
        raise SpecError("h0", "kernel must be exactly the constants (connected boundary graph)")
    if not spec.gluings:
        raise SpecError("gluings", "at least one gluing is required")
    for k, (i, p, j, q) in enumerate(spec.gluings):
        if not (0 <= i < spec.n and 0 <= j < spec.n):
            raise SpecError(f"gluings[{k}]", "cell index out of range")
        if not (0 <= p < spec.boundary and 0 <= q < spec.boundary):
            raise SpecError(f"gluings[{k}]", "boundary index out of range")
        if i == j:
            raise SpecError(f"gluings[{k}]", "gluing must involve distinct cells")
    if _level1_components(spec.n, spec.boundary, spec.gluings) != 1:
        raise SpecError("gluings", "level-1 graph is disconnected")
    if len(spec.fixed_point) != spec.boundary:
        raise SpecError("fixed_point", f"expected {spec.boundary} entries")
    for p, i in enumerate(spec.fixed_point):
        if not 0 <= i < spec.n:
            raise SpecError(f"fixed_point[{p}]", "contraction index out of range")
    if len(set(spec.fixed_point)) != spec.boundary:
        raise SpecError("fixed_point", "a contraction has a single fixed point; map must be injective")


def spec_from_dict(doc: dict) -> FractalSpec:
    required = ["name", "n", "boundary", "r", "h0", "gluings", "fixed_point"]
    for key in required:
        if key not in doc:
            raise SpecError(key, "missing field")
    try:
        spec = FractalSpec(
            name=str(doc["name"]),
            n=int(doc["n"]),
            boundary=int(doc["boundary"]),
            r=tuple(float(x) for x in doc["r"]),
            h0=tuple(tuple(float(x) for x in row) for row in doc["h0"]),
            gluings=_close_gluings(doc["gluings"]),
            fixed_point=tuple(int(x) for x in doc["fixed_point"]),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, SpecError):
            raise
        raise SpecError("document", f"schema error: {exc}") from exc
    validate_spec(spec)
    return spec


def parse_spec(text: str) -> FractalSpec:
    """Parse a JSON specification document and validate it."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError("document", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SpecError("document", "top level must be an object")
    return spec_from_dict(doc)


PRESETS = {
    "sg": {
        "name": "sg",
        "n": 3,
        "boundary": 3,
        "r": [0.6, 0.6, 0.6],
        "h0": [[-2, 1, 1], [1, -2, 1], [1, 1, -2]],
        "gluings": [[0, 1, 1, 0], [0, 2, 2, 0], [1, 2, 2, 1]],
        "fixed_point": [0, 1, 2],
    },
    "interval": {
        "name": "interval",
        "n": 2,
        "boundary": 2,
        "r": [0.5, 0.5],
        "h0": [[-1, 1], [1, -1]],
        "gluings": [[0, 1, 1, 0]],
        "fixed_point": [0, 1],
    },
    # corners 0..3 counter-clockwise, cell 4 in the centre
    "vicsek": {
        "name": "vicsek",
        "n": 5,
        "boundary": 4,
        "r": [1 / 3] * 5,
        "h0": [[-3, 1, 1, 1], [1, -3, 1, 1], [1, 1, -3, 1], [1, 1, 1, -3]],
        "gluings": [[0, 2, 4, 0], [1, 3, 4, 1], [2, 0, 4, 2], [3, 1, 4, 3]],
        "fixed_point": [0, 1, 2, 3],
    },
    # interval with unequal cells; exercises mixed-length partitions
    "interval-asym": {
        "name": "interval-asym",
        "n": 2,
        "boundary": 2,
        "r": [1 / 3, 2 / 3],
        "h0": [[-1, 1], [1, -1]],
        "gluings": [[0, 1, 1, 0]],
        "fixed_point": [0, 1],
    },
}


@lru_cache(maxsize=None)
def preset(name: str) -> FractalSpec:
    if name not in PRESETS:
        raise SpecError("spec", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return spec_from_dict(PRESETS[name])


def load_spec(ref: str) -> FractalSpec:
    """Resolve a preset name or a path to a JSON document."""
    if ref in PRESETS:
        return preset(ref)
    path = Path(ref)
    if not path.exists():
        raise SpecError("spec", f"no preset or file named {ref!r}")
    return parse_spec(path.read_text())


# ---------------------------------------------------------------- dimensions

def hausdorff_dimension(spec: FractalSpec, tol: float = 1e-12) -> float:
    """Root s of sum r_i^s = 1: bisection on (0, 64], then Newton polish."""
    return _similarity_dimension(spec.r, tol)


@lru_cache(maxsize=256)
def _similarity_dimension(r: tuple[float, ...], tol: float) -> float:
    logs = np.log(np.array(r))

    def g(s):
        return float(np.exp(s * logs).sum()) - 1.0

    lo, hi = 0.0, 64.0
    if g(hi) > 0:
        raise ValueError("dimension exceeds the search bracket")
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    s = 0.5 * (lo + hi)
    for _ in range(20):
        val = g(s)
        deriv = float((logs * np.exp(s * logs)).sum())
        step = val / deriv
        s -= step
        if abs(step) < 1e-16 and abs(val) <= tol:
            break
    return s


@dataclass(frozen=True)
class DerivedConstants:
    d_h: float
    d_w: float
    d_s: float
    r_min: float
    mu: tuple[float, ...]

    def lam(self, sigma: float) -> float:
        """Level scaling factor r_min^((d_H - sigma d_W)/2)."""
        return self.r_min ** ((self.d_h - sigma * self.d_w) / 2.0)

    def critical_orders(self, upto: float = 2.0) -> list[float]:
        out = []
        k = 0
        while 2 * k + self.d_s / 2 < upto:
            out.append(2 * k + self.d_s / 2)
            if 2 * k + 2 - self.d_s / 2 < upto:
                out.append(2 * k + 2 - self.d_s / 2)
            k += 1
        return out

    def is_critical(self, sigma: float, tol: float = 1e-12) -> bool:
        return any(abs(sigma - c) <= tol for c in self.critical_orders(sigma + 1.0))


@lru_cache(maxsize=None)
def derived_constants(spec: FractalSpec) -> DerivedConstants:
    d_h = hausdorff_dimension(spec)
    d_w = 1.0 + d_h
    r = spec.r_array
    return DerivedConstants(
        d_h=d_h,
        d_w=d_w,
        d_s=2.0 * d_h / d_w,
        r_min=float(r.min()),
        mu=tuple(float(x) for x in r ** d_h),
    )


# ----------------------------------------------------------- level-1 network

class UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))

    def find(self, a: int) -> int:
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller index as root so roots do not depend on order
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra

    def labels(self) -> list[int]:
        return [self.find(a) for a in range(len(self.parent))]


@dataclass(frozen=True)
class Level1Network:
    """Vertex classes of V_1 with addresses (i, p) flattened as i*B + p."""
    classes: np.ndarray      # (n, B) class id per address
    n_classes: int
    boundary_class: np.ndarray  # class id of boundary point p
    laplacian: np.ndarray    # conductance Laplacian (positive semidefinite)


@lru_cache(maxsize=None)
def level1_network(spec: FractalSpec) -> Level1Network:
    n, b = spec.n, spec.boundary
    uf = UnionFind(n * b)
    for i, p, j, q in spec.gluings:
        uf.union(i * b + p, j * b + q)
    roots = uf.labels()
    # boundary classes first, then the rest by smallest address
    order: dict[int, int] = {}
    for p in range(b):
        root = roots[spec.fixed_point[p] * b + p]
        if root in order:
            raise SpecError("gluings", "two boundary points were identified")
        order[root] = p
    for a in range(n * b):
        if roots[a] not in order:
            order[roots[a]] = len(order)
    classes = np.array([order[roots[a]] for a in range(n * b)]).reshape(n, b)
    size = len(order)
    lap = np.zeros((size, size))
    h = spec.h0_array
    for i in range(n):
        idx = classes[i]
        lap[np.ix_(idx, idx)] += -h / spec.r[i]
    return Level1Network(classes, size, np.arange(b), lap)


@dataclass(frozen=True)
class ExtensionMatrices:
    A: tuple[np.ndarray, ...]

    def word(self, w) -> np.ndarray:
        """A_w with (f o F_w)|V0 = A_w f|V0, i.e. A_{w_k} ... A_{w_1}."""
        out = np.eye(self.A[0].shape[0])
        for i in w:
            out = self.A[i] @ out
        return out


def _interior_solve(net: Level1Network, b: int) -> np.ndarray:
    lap = net.laplacian
    interior = np.arange(b, net.n_classes)
    if interior.size == 0:
        return np.zeros((0, b))
    lii = lap[np.ix_(interior, interior)]
    lib = lap[np.ix_(interior, np.arange(b))]
    try:
        return -la.solve(lii, lib, assume_a="pos")
    except la.LinAlgError as exc:
        raise SpecError("gluings", "singular interior block; level-1 graph disconnected") from exc


@lru_cache(maxsize=None)
def extension_matrices(spec: FractalSpec) -> ExtensionMatrices:
    b = spec.boundary
    net = level1_network(spec)
    values = np.vstack([np.eye(b), _interior_solve(net, b)])  # all classes x boundary
    mats = []
    for i in range(spec.n):
        a = values[net.classes[i]].copy()
        a.setflags(write=False)
        mats.append(a)
    return ExtensionMatrices(tuple(mats))


@dataclass(frozen=True)
class HarmonicStructureReport:
    trace: np.ndarray
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.deviation <= self.tolerance


def schur_trace(spec: FractalSpec) -> np.ndarray:
    """Trace of the level-1 energy onto V_0, as a positive semidefinite matrix."""
    net = level1_network(spec)
    b = spec.boundary
    lap = net.laplacian
    bb = np.arange(b)
    if net.n_classes == b:
        return lap[np.ix_(bb, bb)]
    ii = np.arange(b, net.n_classes)
    lii = lap[np.ix_(ii, ii)]
    lib = lap[np.ix_(ii, bb)]
    return lap[np.ix_(bb, bb)] - lib.T @ la.solve(lii, lib, assume_a="pos")


def verify_harmonic_structure(spec: FractalSpec, tol: float = 1e-10) -> HarmonicStructureReport:
    trace = schur_trace(spec)
    dev = float(np.abs(trace + spec.h0_array).max())
    return HarmonicStructureReport(trace, dev, tol)
