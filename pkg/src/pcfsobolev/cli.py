"""Command line entry point ``pcf``."""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import harness
from .approximation import (
    CellFunction,
    VertexFunction,
    _level,
    build_cell_approx,
    build_vertex_approx,
    resistance_matrix,
)
from .besov import NORM_KINDS, besov_norm, norm_kind
from .decompositions import (
    atomic_from_function,
    atomic_norm,
    haar_expand,
    cell_averages,
    smoothed_haar_expand,
    smoothed_tent_expand,
    tent_expand,
)
from .operators import eigensystem, weyl_slope
from .spec_core import SpecError, derived_constants, load_spec, verify_harmonic_structure

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad number list {text!r}") from exc


def _grid(text: str) -> list[float]:
    """'lo:hi:step' or a comma list."""
    if ":" in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        n = int(round((hi - lo) / step))
        return [round(lo + i * step, 12) for i in range(n + 1)]
    return _floats(text)


def _emit(args, rows, columns=None, passed=True) -> int:
    text = harness.emit_report(rows, args.format, args.out, columns)
    if args.out is None:
        sys.stdout.write(text)
    return EXIT_PASS if passed else EXIT_FAIL


def _read_function(spec, path: str):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read function file {path}: {exc}") from exc
    if "values" in doc:
        return VertexFunction(spec, int(doc["level"]), np.asarray(doc["values"], float))
    if "averages" in doc:
        return CellFunction(spec, int(doc["level"]), np.asarray(doc["averages"], float))
    raise UsageError("function file needs 'values' or 'averages'")


def _function(args, spec):
    if args.input:
        return _read_function(spec, args.input)
    recipe = harness.TestFunctionRecipe.make(args.recipe, args.level, args.seed, **_recipe_params(args))
    return harness.generate(recipe, spec)


def _recipe_params(args) -> dict:
    out = {}
    if getattr(args, "word", None) is not None:
        out["word"] = tuple(int(c) for c in args.word)
    if getattr(args, "vertex", None) is not None:
        out["vertex"] = args.vertex
    if getattr(args, "index", None) is not None:
        out["index"] = args.index
    if getattr(args, "sigma_star", None) is not None:
        out["sigma_star"] = args.sigma_star
    if args.recipe == "indicator" and "word" not in out:
        out["word"] = (0,)
    if args.recipe == "harmonic":
        out["boundary"] = tuple([1.0] + [0.0] * (args.spec_obj.boundary - 1))
    return out


# ------------------------------------------------------------ commands

def cmd_spec(args, spec):
    rep = verify_harmonic_structure(spec)
    doc = spec.to_dict()
    doc["harmonic_structure"] = {"deviation": rep.deviation, "passed": rep.passed}
    sys.stdout.write(json.dumps(doc, indent=1) + "\n")
    return EXIT_PASS if rep.passed else EXIT_FAIL


def cmd_dims(args, spec):
    c = derived_constants(spec)
    rows = [{"quantity": "d_H", "value": c.d_h}, {"quantity": "d_W", "value": c.d_w},
            {"quantity": "d_S", "value": c.d_s}]
    rows += [{"quantity": f"critical_{i}", "value": v} for i, v in enumerate(c.critical_orders(4.0))]
    passed = True
    if args.experiment:
        rep = harness.dimension_experiment(spec, args.level, args.seed)
        for k, (d, dp) in rep.dims.items():
            rows += [{"quantity": f"dim_H{k - 1}", "value": d}, {"quantity": f"dim_H{k - 1}_prime", "value": dp}]
        rows += [{"quantity": "split_residual", "value": rep.split_residual},
                 {"quantity": "weyl_slope", "value": rep.weyl_slope}]
        passed = (rep.split_residual <= harness.DEFAULT_THRESHOLDS.split_residual
                  and all(d == k * spec.boundary for k, (d, _) in rep.dims.items()))
    return _emit(args, rows, ["quantity", "value"], passed)


def cmd_graph(args, spec):
    m = args.level
    va = build_vertex_approx(spec, m)
    rows = [{"level": m, "vertices": va.n_vertices, "vertex_edges": len(va.edges),
             "cells": len(_level(spec, m).words)}]
    if m >= 1:
        ca = build_cell_approx(spec, m)
        rows[0].update(cell_edges=len(ca.edges), refined_edges=int(ca.refined.sum()), overlap=ca.overlap)
    return _emit(args, rows)


def cmd_resistance(args, spec):
    va = build_vertex_approx(spec, args.level)
    ids = [int(x) for x in args.vertices.split(",")] if args.vertices else list(range(spec.boundary))
    if max(ids) >= va.n_vertices:
        raise UsageError("vertex id out of range")
    R = resistance_matrix(va, ids)
    rows = [{"x": a, "y": b, "resistance": float(R[i, j])}
            for i, a in enumerate(ids) for j, b in enumerate(ids) if i < j]
    return _emit(args, rows, ["x", "y", "resistance"])


def cmd_spectrum(args, spec):
    eig = eigensystem(spec, args.level, args.bc, args.count)
    rows = [{"index": i, "eigenvalue": float(v)} for i, v in enumerate(eig.values)]
    return _emit(args, rows, ["index", "eigenvalue"])


def cmd_weyl(args, spec):
    eig = eigensystem(spec, args.level, "neumann")
    slope, npts = weyl_slope(eig)
    target = derived_constants(spec).d_s / 2
    err = abs(slope - target) / target
    rows = [{"level": args.level, "slope": slope, "points": npts, "target": target, "relative_error": err}]
    return _emit(args, rows, passed=err <= harness.DEFAULT_THRESHOLDS.weyl_tolerance)


def cmd_decompose(args, spec):
    f = _function(args, spec)
    kind = args.kind
    if kind == "haar":
        cf = f if isinstance(f, CellFunction) else cell_averages(f, f.level)
        lay = haar_expand(cf)
        doc = {"kind": kind, "C": lay.C, "layers": [l.tolist() for l in lay.layers]}
    elif isinstance(f, CellFunction):
        raise UsageError(f"{kind} needs vertex values")
    elif kind == "tent":
        lay = tent_expand(f)
        doc = {"kind": kind, "boundary": lay.boundary_values.tolist(),
               "coefficients": [c.tolist() for c in lay.coefficients]}
    elif kind in ("smoothed-haar", "smoothed-tent"):
        fn = smoothed_haar_expand if kind == "smoothed-haar" else smoothed_tent_expand
        exp = fn(f)
        doc = {"kind": kind, "working_level": exp.level, "diagnostics": exp.diagnostics,
               "layers": [g.values.tolist() for g in exp.layers]}
    elif kind in ("atomic-a", "atomic-b"):
        if args.sigma is None:
            raise UsageError("atomic decompositions need --sigma")
        sigma = _floats(args.sigma)[0]
        co = atomic_from_function(f, sigma)
        if co.variant != kind[-1]:
            raise UsageError(f"sigma={sigma} selects variant {co.variant}, not {kind[-1]}")
        doc = {"kind": kind, "k": co.k, "C": co.C, "norm": atomic_norm(co, sigma, mode="warn"),
               "coefficients": (co.a.tolist() if co.a is not None else co.c.tolist())}
    else:
        raise UsageError(f"unknown decomposition kind {kind!r}")
    text = json.dumps(harness._jsonable(doc)) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_PASS


def cmd_norms(args, spec):
    f = _function(args, spec)
    rows = []
    for kind in args.kinds.split(","):
        kind = norm_kind(kind)
        for s in _floats(args.sigma):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = besov_norm(f, s, args.level, kind)
            rows += harness.norm_rows(rep)
    return _emit(args, rows, list(harness.REPORT_COLUMNS))


def cmd_equivalence(args, spec):
    fam = harness.standard_family(spec, args.level, args.n_random, args.n_eigen, args.sigma_star, args.seed)
    limits = harness.Thresholds(band=args.band_threshold, instability=args.instability_threshold)
    res = harness.equivalence_experiment(spec, args.kinds.split(","), _floats(args.sigma), fam, args.level, limits)
    return _emit(args, res.rows(), passed=res.passed)


def cmd_probe(args, spec):
    f = _function(args, spec)
    res = harness.divergence_probe(spec, args.kind, f, _grid(args.sigma), args.level)
    rows = [{"kind": res.kind, "sigma": s, "level": res.level, "verdict": v, "tail_ratio": t,
             "transition": res.transition, "crossing": res.crossing}
            for s, v, t in zip(res.sigmas, res.verdicts, res.tail_ratios)]
    return _emit(args, rows)


def cmd_report(args, spec):
    """Dimensions plus the three standard probes in one long-format table."""
    c = derived_constants(spec)
    M = args.level
    rows = [{"item": "d_H", "value": c.d_h, "target": "", "passed": True},
            {"item": "d_S", "value": c.d_s, "target": "", "passed": True}]
    probes = [
        ("tent-lambda", "lambda", harness.TestFunctionRecipe.make("single-tent", M), 1.0, (0.5, 1.5)),
        ("tent-tlambda", "tlambda", harness.TestFunctionRecipe.make("single-tent", M), 2 - c.d_s / 2, (0.9, 1.8)),
        ("indicator-gamma", "gamma", harness.TestFunctionRecipe.make("indicator", M, word=(0,)), c.d_s / 2, (0.3, 1.1)),
    ]
    ok = True
    for name, kind, recipe, target, (lo, hi) in probes:
        grid = [round(lo + 0.025 * i, 6) for i in range(int(round((hi - lo) / 0.025)) + 1)]
        res = harness.divergence_probe(spec, kind, harness.generate(recipe, spec), grid, M)
        passed = abs(res.transition - target) <= 0.05
        ok &= passed
        rows.append({"item": f"{name}-transition", "value": res.transition, "target": target, "passed": passed})
    return _emit(args, rows, ["item", "value", "target", "passed"], ok)


COMMANDS = {
    "spec": cmd_spec, "dims": cmd_dims, "graph": cmd_graph, "resistance": cmd_resistance,
    "spectrum": cmd_spectrum, "weyl": cmd_weyl, "decompose": cmd_decompose, "norms": cmd_norms,
    "equivalence": cmd_equivalence, "probe": cmd_probe, "report": cmd_report,
}


GLOBAL_DEFAULTS = {"spec": "sg", "level": 4, "seed": 0, "out": None, "format": "json"}


def _global_flags(parser: argparse.ArgumentParser) -> None:
    # defaults are suppressed so flags may appear before or after the subcommand
    parser.add_argument("--spec", default=argparse.SUPPRESS, help="preset name or spec file (default sg)")
    parser.add_argument("--level", type=int, default=argparse.SUPPRESS, help="approximation level (default 4)")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    parser.add_argument("--out", default=argparse.SUPPRESS, help="output file (default stdout)")
    parser.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcf", description="Sobolev and Besov experiments on p.c.f. self-similar sets")
    _global_flags(p)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp_ = sub.add_parser(name, help=help_)
        _global_flags(sp_)
        return sp_

    def function_source(sp_):
        sp_.add_argument("--input", help="JSON with level and values or averages")
        sp_.add_argument("--recipe", default="single-tent", choices=harness.RECIPE_KINDS)
        sp_.add_argument("--word", help="indicator word, digits")
        sp_.add_argument("--vertex", type=int)
        sp_.add_argument("--index", type=int)
        sp_.add_argument("--sigma-star", type=float)

    add("spec", "show and validate a fractal description")
    d = add("dims", "dimensions and critical orders")
    d.add_argument("--experiment", action="store_true", help="also run multiharmonic ranks, Green split and Weyl")
    add("graph", "vertex and cell graph statistics")
    r = add("resistance", "effective resistances")
    r.add_argument("--vertices", help="comma-separated vertex ids (default V_0)")
    s = add("spectrum", "graph Laplacian eigenvalues")
    s.add_argument("--bc", default="neumann", choices=("neumann", "dirichlet"))
    s.add_argument("--count", type=int)
    add("weyl", "Weyl slope against d_S/2")
    dc = add("decompose", "expand a function")
    function_source(dc)
    dc.add_argument("--kind", required=True,
                    choices=("haar", "smoothed-haar", "tent", "smoothed-tent", "atomic-a", "atomic-b"))
    dc.add_argument("--sigma")
    n = add("norms", "Besov-type norms with per-level terms")
    function_source(n)
    n.add_argument("--sigma", default="0.3,0.7,1.0,1.3")
    n.add_argument("--kinds", default="gamma,tgamma,lambda,tlambda,b22,spectralN")
    e = add("equivalence", "norm ratio bands over a function family")
    e.add_argument("--kinds", required=True, help="two norm kinds, e.g. spectralN,gamma")
    e.add_argument("--sigma", required=True)
    e.add_argument("--n-random", type=int, default=50)
    e.add_argument("--n-eigen", type=int, default=10)
    e.add_argument("--sigma-star", type=float, default=1.0)
    e.add_argument("--band-threshold", type=float, default=harness.DEFAULT_THRESHOLDS.band)
    e.add_argument("--instability-threshold", type=float, default=harness.DEFAULT_THRESHOLDS.instability)
    pr = add("probe", "critical-order divergence probe")
    function_source(pr)
    pr.add_argument("--kind", required=True, choices=NORM_KINDS)
    pr.add_argument("--sigma", required=True, help="lo:hi:step or comma list")
    add("report", "dimensions and standard probes")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_PASS
    for key, value in GLOBAL_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, value)
    try:
        spec = load_spec(args.spec)
        args.spec_obj = spec
        return COMMANDS[args.command](args, spec)
    except (UsageError, SpecError, FileNotFoundError) as exc:
        print(f"pcf: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"pcf: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
