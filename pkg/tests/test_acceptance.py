"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run directly (``python tests/test_acceptance.py``) or through pytest; under
pytest the lines are repeated in the terminal summary.
"""
from __future__ import annotations

import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import sg_cell_edge_counts, sg_vertex_count  # noqa: E402
from pcfsobolev.approximation import (  # noqa: E402
    CellFunction,
    VertexFunction,
    _level,
    build_cell_approx,
    energy_matrix,
    l2_norm,
    prolong,
)
from pcfsobolev.besov import difference_field, sequence_norm  # noqa: E402
from pcfsobolev.decompositions import (  # noqa: E402
    average_rows,
    haar_expand,
    haar_reconstruct,
    indicator,
    random_haar_layer,
    smoothed_haar_expand,
    smoothed_haar_layer,
    tent,
    tent_expand,
    tent_reconstruct,
)
from pcfsobolev.harness import (  # noqa: E402
    DEFAULT_THRESHOLDS,
    TestFunctionRecipe,
    divergence_probe,
    equivalence_experiment,
    generate,
    predicted_tail_ratio,
    standard_family,
)
from pcfsobolev.operators import NEUMANN, eigensystem, green_split, multiharmonic_basis, weyl_slope  # noqa: E402
from pcfsobolev.spec_core import derived_constants, preset, verify_harmonic_structure  # noqa: E402

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # standalone run
    ACCEPTANCE_LINES = []

SG = preset("sg")
LOG3, LOG5 = math.log(3), math.log(5)


def report(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)


def energy(g) -> float:
    return float(g.values @ (energy_matrix(g.spec, g.level) @ g.values))


# ---------------------------------------------------------------- checks

def check_dimensions():
    t0 = time.perf_counter()
    derived_constants.cache_clear()
    c = derived_constants(SG)
    elapsed = time.perf_counter() - t0
    errs = [abs(c.d_h - LOG3 / math.log(5 / 3)), abs(c.d_s - 2 * LOG3 / LOG5),
            abs(c.critical_orders(2.0)[0] - LOG3 / LOG5), abs(c.critical_orders(2.0)[1] - (2 - LOG3 / LOG5))]
    ok = max(errs) <= 1e-9 and elapsed < 1.0
    return ok, f"max error {max(errs):.1e} (tol 1e-9), {elapsed * 1e3:.1f} ms"


def check_combinatorics():
    t0 = time.perf_counter()
    counts_ok = all(_level(SG, m).n_vertices == (3 ** (m + 1) + 3) // 2 for m in range(9))
    brute_ok = True
    for m in range(1, 5):
        ca = build_cell_approx(SG, m)
        total, refined = sg_cell_edge_counts(m)
        brute_ok &= (_level(SG, m).n_vertices == sg_vertex_count(m)
                     and len(ca.edges) == total and int(ca.refined.sum()) == refined)
    elapsed = time.perf_counter() - t0
    return counts_ok and brute_ok and elapsed < 10, \
        f"|V_m| formula m<=8: {counts_ok}, brute-force m<=4: {brute_ok}, {elapsed:.2f} s"


def check_harmonic_structure():
    devs = {name: verify_harmonic_structure(preset(name)).deviation for name in ("sg", "interval")}
    ok = max(devs.values()) <= 1e-10
    return ok, ", ".join(f"{k} deviation {v:.1e}" for k, v in devs.items()) + " (tol 1e-10)"


def check_weyl():
    t0 = time.perf_counter()
    slope, npts = weyl_slope(eigensystem(SG, 7, NEUMANN))
    elapsed = time.perf_counter() - t0
    target = LOG3 / LOG5
    err = abs(slope - target) / target
    return err <= 0.05 and elapsed < 120, \
        f"slope {slope:.5f} vs {target:.5f}, relative error {err:.2%} (tol 5%), {npts} points, {elapsed:.1f} s"


def check_round_trips():
    rng = np.random.default_rng(5)
    lev = _level(SG, 6)
    worst_haar = worst_tent = 0.0
    for _ in range(100):
        cf = CellFunction(SG, 6, rng.standard_normal(len(lev.words)))
        worst_haar = max(worst_haar, np.abs(haar_reconstruct(haar_expand(cf)).averages - cf.averages).max())
        vf = VertexFunction(SG, 6, rng.standard_normal(lev.n_vertices))
        worst_tent = max(worst_tent, np.abs(tent_reconstruct(tent_expand(vf)).values - vf.values).max())
    ok = max(worst_haar, worst_tent) <= 1e-12
    return ok, f"haar {worst_haar:.1e}, tent {worst_tent:.1e} (tol 1e-12, 100 functions each, M=6)"


def check_smoothed_haar():
    r = derived_constants(SG).r_min
    feas = 0.0
    bands = {}
    for depth in (3, 4):
        ratios = []
        layer_rng = np.random.default_rng(60)
        for m in range(1, 6):
            for _ in range(50):
                layer = CellFunction(SG, m, random_haar_layer(SG, m, layer_rng))
                g = smoothed_haar_layer(layer, m + depth)
                feas = max(feas, float(np.abs(average_rows(SG, m, m + depth) @ g.values - layer.averages).max()))
                ratios.append(r ** m * energy(g) / difference_field(layer, m).sq_norm)
        bands[depth] = (min(ratios), max(ratios))
    width = bands[3][1] / bands[3][0]
    drift = max(abs(bands[4][0] / bands[3][0] - 1), abs(bands[4][1] / bands[3][1] - 1))
    ortho = 0.0
    for j in range(5):
        f = generate(TestFunctionRecipe.make("piecewise-harmonic", 3, seed=j), SG)
        exp = smoothed_haar_expand(f, M=6)
        K = energy_matrix(SG, 6)
        for a in range(len(exp.layers)):
            for b in range(a + 1, len(exp.layers)):
                ga, gb = exp.layers[a], exp.layers[b]
                ortho = max(ortho, abs(ga.values @ (K @ gb.values)) / math.sqrt(energy(ga) * energy(gb)))
        feas = max(feas, max(d["feasibility"] for d in exp.diagnostics))
    ok = feas <= 1e-9 and ortho <= 1e-8 and width <= 30 and drift <= 0.10
    return ok, (f"feasibility {feas:.1e}, orthogonality {ortho:.1e}, band [{bands[3][0]:.3f}, {bands[3][1]:.3f}] "
                f"width {width:.3f} (<=30), depth 3->4 drift {drift:.2%} (<=10%)")


def _prop67_ratio(f, M):
    r = derived_constants(SG).r_min
    exp = smoothed_haar_expand(f, M=M, top=M - 1)
    seq = l2_norm(f) ** 2 + sum(r ** -m * difference_field(g, m).sq_norm for m, g in enumerate(exp.layers, 1))
    return (exp.C ** 2 + energy(prolong(f, M))) / seq


def check_prop67():
    M = 6
    funcs = [generate(TestFunctionRecipe.make("random-haar", M - 1, seed=j), SG) for j in range(100)]
    prev = np.array([_prop67_ratio(f, M - 1) for f in funcs])
    cur = np.array([_prop67_ratio(prolong(f, M), M) for f in funcs])
    band = cur.max() / cur.min()
    inst = max(abs(cur.min() / prev.min() - 1), abs(cur.max() / prev.max() - 1))
    ok = band <= DEFAULT_THRESHOLDS.band and inst <= DEFAULT_THRESHOLDS.instability
    return ok, f"band {band:.3f} (<=100), stability {inst:.2%} (<=10%), 100 functions, M={M}"


EQUIVALENCES = [
    (("spectralN", "gamma"), [0.2, 0.5]),
    (("spectralN", "lambda"), [0.8, 0.95]),
    (("spectralN", "b22"), [0.3, 0.6]),
    (("gamma", "tgamma"), [0.1, 0.4]),
]


def check_equivalences():
    t0 = time.perf_counter()
    fam = standard_family(SG, 6, n_random=50, n_eigen=10)
    parts, ok = [], True
    for kinds, sigmas in EQUIVALENCES:
        res = equivalence_experiment(SG, kinds, sigmas, fam, 6)
        ok &= res.passed
        parts.append(f"{'/'.join(kinds)} band<={res.band.max():.2f} stab<={res.instability.max():.1%}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 600
    return ok, "; ".join(parts) + f"; {elapsed:.0f} s"


PROBES = [
    ("tent-lambda", "lambda", lambda: tent(SG, 3, 6), 1.0, (0.7, 1.3)),
    ("tent-tlambda", "tlambda", lambda: tent(SG, 3, 6), 2 - LOG3 / LOG5, (1.0, 1.6)),
    ("indicator-gamma", "gamma", lambda: indicator(SG, (0,), 6), LOG3 / LOG5, (0.4, 1.0)),
]


def check_probes():
    ok, parts = True, []
    for name, kind, make, target, (lo, hi) in PROBES:
        grid = [round(lo + 0.025 * i, 6) for i in range(int(round((hi - lo) / 0.025)) + 1)]
        res = divergence_probe(SG, kind, make(), grid, 6)
        tail_err = max(abs(t / predicted_tail_ratio(SG, kind, s, name) - 1) for s, t in zip(res.sigmas, res.tail_ratios))
        this = abs(res.transition - target) <= 0.05 and tail_err <= 0.02
        ok &= this
        parts.append(f"{name} transition {res.transition:.4f} vs {target:.4f}, tail error {tail_err:.1e}")
    return ok, "; ".join(parts)


def check_structure():
    dims = {k: multiharmonic_basis(SG, 5, k).dim for k in (1, 2)}
    rng = np.random.default_rng(10)
    f = VertexFunction(SG, 5, rng.standard_normal(_level(SG, 5).n_vertices))
    split = green_split(f)[2]
    # constant sequences: S~ converges iff lam < 1, S stays 1
    below, above = 0.3, 1.0
    s_below = sequence_norm(np.ones((3, 40)), below, "S", SG)
    t_below = [sequence_norm(np.ones((3, M)), below, "tS", SG) for M in (40, 80)]
    t_above = [sequence_norm(np.ones((3, M)), above, "tS", SG) for M in (40, 80)]
    seq_ok = (abs(s_below - 3) < 1e-12 and abs(t_below[1] / t_below[0] - 1) < 1e-6 and t_above[1] > 2 * t_above[0])
    # random sequences: the explicit comparison constants for lam < 1
    lam = derived_constants(SG).lam(below)
    for _ in range(50):
        a = rng.standard_normal((3, 30))
        s, ts = sequence_norm(a, below, "S", SG), sequence_norm(a, below, "tS", SG)
        seq_ok &= ts <= lam / (1 - lam) * s + 1e-12 and s <= (2 / lam + 1) * ts + 1e-12
    ok = dims == {1: 3, 2: 6} and split <= 1e-8 and seq_ok
    return ok, f"dim H_0={dims[1]}, dim H_1={dims[2]}, split residual {split:.1e}, sequence spaces {seq_ok}"


CHECKS = {
    1: check_dimensions, 2: check_combinatorics, 3: check_harmonic_structure, 4: check_weyl,
    5: check_round_trips, 6: check_smoothed_haar, 7: check_prop67, 8: check_equivalences,
    9: check_probes, 10: check_structure,
}


@pytest.mark.parametrize("number", sorted(CHECKS))
def test_criterion(number):
    passed, detail = CHECKS[number]()
    report(number, passed, detail)
    assert passed, detail


def test_criterion_11_is_out_of_scope():
    line = "criterion 11: N/A   equivalence constants, non-closedness at critical orders and continuum eigenvalues are not tested"
    print(line)
    ACCEPTANCE_LINES.append(line)


if __name__ == "__main__":
    results = []
    for n in sorted(CHECKS):
        passed, detail = CHECKS[n]()
        report(n, passed, detail)
        results.append(passed)
    sys.exit(0 if all(results) else 1)
