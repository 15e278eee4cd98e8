"""Test-function recipes, equivalence experiments, divergence probes,
dimension experiments and report emission."""
from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .approximation import VertexFunction, _level, at_level
from .besov import CONVERGING, DIVERGING, besov_norm, norm_kind
from .decompositions import (
    HaarLayers,
    _haar_solver,
    haar_reconstruct,
    indicator,
    random_haar_layer,
    tent,
)
from .operators import (
    NEUMANN,
    eigensystem,
    green_split,
    harmonic_extend,
    multiharmonic_basis,
    weyl_slope,
)
from .spec_core import FractalSpec, derived_constants


@dataclass(frozen=True)
class Thresholds:
    band: float = 100.0
    instability: float = 0.10
    tail_tolerance: float = 0.02
    energy_drift: float = 0.02
    split_residual: float = 1e-8
    rank_tol: float = 1e-8
    weyl_tolerance: float = 0.05


DEFAULT_THRESHOLDS = Thresholds()


# ------------------------------------------------------------ recipes

RECIPE_KINDS = ("eigenfunction", "harmonic", "random-haar", "single-tent", "piecewise-harmonic", "indicator")


@dataclass(frozen=True)
class TestFunctionRecipe:
    """kind-specific parameters:

    eigenfunction: index, bc ("neumann"/"dirichlet"), base_level (default: level)
    harmonic: boundary (values on V_0)
    random-haar: sigma_star, cells (bool: CellFunction instead of vertex function)
    single-tent: vertex (id in birth order; default the first vertex born at tent_level), tent_level
    piecewise-harmonic: none
    indicator: word (tuple of 0-based letters)
    """
    __test__ = False  # not a pytest class

    kind: str
    level: int
    seed: int = 0
    params: tuple = ()

    def param(self, key, default=None):
        return dict(self.params).get(key, default)

    @classmethod
    def make(cls, kind: str, level: int, seed: int = 0, **params) -> TestFunctionRecipe:
        if kind not in RECIPE_KINDS:
            raise ValueError(f"unknown recipe kind {kind!r}")
        return cls(kind, level, seed, tuple(sorted((k, _freeze(v)) for k, v in params.items())))


def _freeze(v):
    return tuple(v) if isinstance(v, (list, np.ndarray)) else v


def random_haar_std(spec: FractalSpec, m: int, sigma_star: float) -> float:
    const = derived_constants(spec)
    return const.r_min ** (m * sigma_star * const.d_w / 2.0) / m


def generate(recipe: TestFunctionRecipe, spec: FractalSpec):
    kind, M = recipe.kind, recipe.level
    if kind == "eigenfunction":
        base = recipe.param("base_level", M)
        eig = eigensystem(spec, base, recipe.param("bc", NEUMANN))
        i = recipe.param("index", 1)
        if not 0 <= i < len(eig.values):
            raise IndexError(f"eigenfunction index {i} out of range 0..{len(eig.values) - 1}")
        return at_level(eig.function(i, spec), M)
    if kind == "harmonic":
        return harmonic_extend(recipe.param("boundary"), spec, 0, M)
    if kind == "random-haar":
        rng = np.random.default_rng(recipe.seed)
        sigma_star = recipe.param("sigma_star", 1.0)
        C = float(rng.standard_normal())
        if recipe.param("cells", False):
            layers = [random_haar_layer(spec, m, rng, random_haar_std(spec, m, sigma_star)) for m in range(1, M + 1)]
            return haar_reconstruct(HaarLayers(spec, C, layers))
        g = np.full(_level(spec, M).n_vertices, C)
        for m in range(1, M):
            layer = random_haar_layer(spec, m, rng, random_haar_std(spec, m, sigma_star))
            g += _haar_solver(spec, m, M).solve(layer)
        return VertexFunction(spec, M, g)
    if kind == "single-tent":
        v = recipe.param("vertex")
        if v is None:
            v = _level(spec, recipe.param("tent_level", 1)).n_prev
        return tent(spec, v, M)
    if kind == "piecewise-harmonic":
        rng = np.random.default_rng(recipe.seed)
        return VertexFunction(spec, M, rng.standard_normal(_level(spec, M).n_vertices))
    if kind == "indicator":
        return indicator(spec, recipe.param("word"), M)
    raise ValueError(f"unknown recipe kind {kind!r}")


def standard_family(spec: FractalSpec, level: int, n_random: int = 50, n_eigen: int = 10,
                    sigma_star: float = 1.0, seed: int = 0) -> list[TestFunctionRecipe]:
    """Random-haar vertex functions plus the lowest nonconstant Neumann eigenfunctions."""
    fam = [TestFunctionRecipe.make("random-haar", level, seed + j, sigma_star=sigma_star) for j in range(n_random)]
    fam += [TestFunctionRecipe.make("eigenfunction", level, 0, index=i, bc=NEUMANN) for i in range(1, n_eigen + 1)]
    return fam


# ------------------------------------------------------------ equivalence

def validity_window(spec: FractalSpec, kind: str) -> tuple[float, float, bool]:
    """(low, high, low_inclusive) of sigma for which the norm matches H^sigma."""
    ds = derived_constants(spec).d_s
    kind = norm_kind(kind)
    return {
        "spectralN": (0.0, math.inf, True),
        "spectralD": (0.0, math.inf, True),
        "gamma": (0.0, 1.0, True),
        "tgamma": (0.0, ds / 2, True),
        "lambda": (ds / 2, 1.0, False),
        "tlambda": (ds / 2, 2.0, False),
        "b22": (0.0, 1.0, False),
    }[kind]


def in_window(spec: FractalSpec, kind: str, sigma: float) -> bool:
    lo, hi, inclusive = validity_window(spec, kind)
    return (lo <= sigma if inclusive else lo < sigma) and sigma < hi


@dataclass
class EquivalenceResult:
    kinds: tuple
    sigmas: list
    level: int
    ratios: np.ndarray          # (len(sigmas), n_functions) at level M
    ratios_prev: np.ndarray     # same at level M - 1
    band: np.ndarray            # max/min ratio per sigma at M
    band_prev: np.ndarray
    instability: np.ndarray     # relative change of the band endpoints between M-1 and M
    thresholds: Thresholds = DEFAULT_THRESHOLDS

    @property
    def passed(self) -> bool:
        return bool((self.band <= self.thresholds.band).all()
                    and (self.instability <= self.thresholds.instability).all())

    def rows(self) -> list[dict]:
        out = []
        for i, s in enumerate(self.sigmas):
            lo, hi = self.ratios[i].min(), self.ratios[i].max()
            out.append({"kinds": "/".join(self.kinds), "sigma": s, "level": self.level,
                        "ratio_min": float(lo), "ratio_max": float(hi), "band": float(self.band[i]),
                        "band_prev": float(self.band_prev[i]), "instability": float(self.instability[i])})
        return out


def _eval_ratios(funcs, kinds, sigmas, M):
    out = np.zeros((len(sigmas), len(funcs)))
    for j, f in enumerate(funcs):
        for i, s in enumerate(sigmas):
            a = besov_norm(f, s, M, kinds[0]).total
            b = besov_norm(f, s, M, kinds[1]).total
            out[i, j] = a / b
    return out


def equivalence_experiment(spec: FractalSpec, kinds, sigmas, family, M: int,
                           thresholds: Thresholds = DEFAULT_THRESHOLDS) -> EquivalenceResult:
    """Ratio of two norms over a family of functions at levels M - 1 and M.

    Recipes are realized at level M - 1; the same functions (prolonged) are
    measured at level M, so the stability delta isolates truncation effects.
    """
    kinds = tuple(norm_kind(k) for k in kinds)
    if not family:
        raise ValueError("empty function family")
    for s in sigmas:
        for k in kinds:
            if not in_window(spec, k, s):
                raise ValueError(f"sigma={s} outside the validity window of {k}")
    funcs = [generate(replace(r, level=M - 1, params=_with_base(r, M - 1)), spec) for r in family]
    prev = _eval_ratios(funcs, kinds, sigmas, M - 1)
    cur = _eval_ratios(funcs, kinds, sigmas, M)
    if (cur <= 0).any() or (prev <= 0).any():
        raise ArithmeticError("nonpositive norm ratio")
    band = cur.max(axis=1) / cur.min(axis=1)
    band_prev = prev.max(axis=1) / prev.min(axis=1)
    inst = np.maximum(np.abs(cur.min(axis=1) / prev.min(axis=1) - 1),
                      np.abs(cur.max(axis=1) / prev.max(axis=1) - 1))
    return EquivalenceResult(kinds, list(sigmas), M, cur, prev, band, band_prev, inst, thresholds)


def _with_base(recipe: TestFunctionRecipe, level: int):
    if recipe.kind != "eigenfunction":
        return recipe.params
    d = dict(recipe.params)
    d["base_level"] = min(d.get("base_level", level), level)
    return tuple(sorted(d.items()))


# ------------------------------------------------------------ probes

@dataclass
class ProbeResult:
    kind: str
    sigmas: list
    verdicts: list
    tail_ratios: list           # geometric mean of the last three ratios per sigma
    transition: float           # midpoint of last converging and first diverging sigma
    crossing: float             # sigma where the fitted log tail ratio crosses zero
    level: int


def divergence_probe(spec: FractalSpec, kind: str, f, sigmas, M: int) -> ProbeResult:
    kind = norm_kind(kind)
    sigmas = sorted(float(s) for s in sigmas)
    verdicts, ratios = [], []
    for s in sigmas:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = besov_norm(f, s, M, kind)
        verdicts.append(rep.verdict)
        tr = rep.tail_ratios
        ratios.append(float(np.exp(np.mean(np.log(tr)))) if len(tr) and (tr > 0).all() else 0.0)
    conv = [s for s, v in zip(sigmas, verdicts) if v == CONVERGING]
    div = [s for s, v in zip(sigmas, verdicts) if v == DIVERGING]
    if not conv or not div:
        raise ValueError("no converging-to-diverging transition inside the grid")
    last_conv = max(conv)
    first_div = min(s for s in div if s > last_conv) if any(s > last_conv for s in div) else None
    if first_div is None:
        raise ValueError("no diverging sigma above the last converging one")
    lr = np.log(np.array(ratios))
    ok = np.isfinite(lr)
    slope, icept = np.polyfit(np.array(sigmas)[ok], lr[ok], 1)
    return ProbeResult(kind, sigmas, verdicts, ratios, 0.5 * (last_conv + first_div),
                       float(-icept / slope), M)


def predicted_tail_ratio(spec: FractalSpec, kind: str, sigma: float, probe: str) -> float:
    """Closed-form per-level ratio for the standard probes."""
    c = derived_constants(spec)
    r = c.r_min
    if probe == "tent-lambda":
        return r ** (c.d_w * (1 - sigma))
    if probe == "tent-tlambda":
        return r ** (2 + c.d_h - sigma * c.d_w)
    if probe == "indicator-gamma":
        return r ** (c.d_h - sigma * c.d_w)
    raise ValueError(f"no closed form for probe {probe!r}")


# ------------------------------------------------------------ dimensions

@dataclass
class DimensionReport:
    level: int
    dims: dict            # k -> (dim H_{k-1}, dim H'_{k-1})
    split_residual: float
    weyl_slope: float
    weyl_points: int
    weyl_target: float
    weyl_error: float


def dimension_experiment(spec: FractalSpec, M: int, seed: int = 0, weyl_level: int | None = None) -> DimensionReport:
    dims = {}
    for k in (1, 2):
        basis = multiharmonic_basis(spec, M, k)
        dims[k] = (basis.dim, basis.dim_prime)
    rng = np.random.default_rng(seed)
    f = VertexFunction(spec, M, rng.standard_normal(_level(spec, M).n_vertices))
    _, _, dev = green_split(f)
    wl = M if weyl_level is None else weyl_level
    slope, npts = weyl_slope(eigensystem(spec, wl, NEUMANN))
    target = derived_constants(spec).d_s / 2
    return DimensionReport(M, dims, dev, slope, npts, target, abs(slope - target) / target)


# ------------------------------------------------------------ reports

REPORT_COLUMNS = ("kind", "sigma", "level", "term", "cumulative", "tail_ratio", "verdict")


def norm_rows(report) -> list[dict]:
    """Long-format rows, one per (kind, sigma, level)."""
    rows = []
    cum = report.base
    last_ratio = float(report.tail_ratios[-1]) if len(report.tail_ratios) else float("nan")
    if not report.levels:
        return [{"kind": report.name, "sigma": report.sigma, "level": report.level, "term": report.base,
                 "cumulative": report.base, "tail_ratio": last_ratio, "verdict": report.verdict}]
    for lvl, t in zip(report.levels, report.terms):
        cum += float(t)
        rows.append({"kind": report.name, "sigma": report.sigma, "level": lvl, "term": float(t),
                     "cumulative": cum, "tail_ratio": last_ratio, "verdict": report.verdict})
    return rows


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, np.integer):
        return int(x)
    return x


def emit_report(rows: list[dict], fmt: str = "json", path: str | Path | None = None,
                columns=None) -> str:
    """Serialize rows with a fixed column order; write to ``path`` if given."""
    if columns is None:
        columns = list(rows[0].keys()) if rows else list(REPORT_COLUMNS)
    if fmt == "json":
        text = json.dumps({"columns": list(columns),
                           "rows": [_jsonable({c: r.get(c) for c in columns}) for r in rows]},
                          indent=1, sort_keys=False) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(r[c]) if isinstance(r.get(c), float) else r.get(c)) for c in columns})
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown format {fmt!r}")
    if path is not None:
        p = Path(path)
        try:
            p.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write report to {p}: {exc}") from exc
    return text


def parse_report(text: str, fmt: str = "json") -> list[dict]:
    if fmt == "json":
        return json.loads(text)["rows"]
    rows = list(csv.DictReader(io.StringIO(text)))
    return rows
