import numpy as np
import pytest

from pcfsobolev.approximation import CellFunction, VertexFunction, _level, constant, prolong
from pcfsobolev.besov import besov_norm, difference_field
from pcfsobolev.decompositions import (
    atomic_from_function,
    atomic_norm,
    atomic_reconstruct_cells,
    average_rows,
    cell_averages,
    cell_l2_norm,
    haar_expand,
    haar_reconstruct,
    HaarLayers,
    indicator,
    laplacian_l2,
    project_haar,
    random_haar_layer,
    smoothed_haar_energy_drift,
    smoothed_haar_expand,
    smoothed_haar_layer,
    smoothed_tent_expand,
    smoothed_tent_layer,
    tent,
    tent_expand,
    tent_reconstruct,
)
from pcfsobolev.approximation import energy_matrix
from pcfsobolev.operators import graph_laplacian, harmonic_extend, laplacian_apply
from pcfsobolev.spec_core import derived_constants, preset


def random_cells(spec, m, rng):
    return CellFunction(spec, m, rng.standard_normal(len(_level(spec, m).words)))


def random_vertices(spec, m, rng):
    return VertexFunction(spec, m, rng.standard_normal(_level(spec, m).n_vertices))


def energy(g):
    return float(g.values @ (energy_matrix(g.spec, g.level) @ g.values))


# ---------------------------------------------------------------- Haar

def test_haar_parseval(sg, rng):
    f = random_cells(sg, 5, rng)
    layers = haar_expand(f)
    total = layers.C ** 2 + sum(layers.layer_norm(m) ** 2 for m in range(1, 6))
    assert total == pytest.approx(cell_l2_norm(f) ** 2, abs=1e-10)


def test_haar_parseval_unequal_weights(rng):
    spec = preset("interval-asym")
    f = random_cells(spec, 6, rng)
    layers = haar_expand(f)
    total = layers.C ** 2 + sum(layers.layer_norm(m) ** 2 for m in range(1, 7))
    assert total == pytest.approx(cell_l2_norm(f) ** 2, abs=1e-10)


def test_haar_round_trips(sg, rng):
    f = random_cells(sg, 4, rng)
    np.testing.assert_allclose(haar_reconstruct(haar_expand(f)).averages, f.averages, atol=1e-12)
    layers = HaarLayers(sg, 0.7, [random_haar_layer(sg, m, rng) for m in range(1, 5)])
    back = haar_expand(haar_reconstruct(layers))
    assert back.C == pytest.approx(0.7)
    for a, b in zip(back.layers, layers.layers):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_layers_give_constant(sg):
    layers = HaarLayers(sg, 2.5, [np.zeros(len(_level(sg, m).words)) for m in range(1, 4)])
    np.testing.assert_allclose(haar_reconstruct(layers).averages, 2.5)


def test_haar_layers_have_zero_parent_means(sg, rng):
    lev = _level(sg, 3)
    layer = project_haar(sg, 3, rng.standard_normal(len(lev.words)))
    sums = np.bincount(lev.parent, weights=lev.mu_w * layer)
    np.testing.assert_allclose(sums, 0.0, atol=1e-15)


def test_cell_averages_of_harmonic_function(sg):
    h = harmonic_extend([1.0, 0.0, 0.0], sg, 0, 3)
    avg = cell_averages(h, 1).averages
    # each level-1 cell average is the mean of its corner values under the 1/5-2/5 rule
    np.testing.assert_allclose(avg, [(1 + 0.4 + 0.4) / 3, (0.4 + 0 + 0.2) / 3, (0.4 + 0.2 + 0) / 3], atol=1e-14)


# ---------------------------------------------------------------- smoothed Haar

def test_zero_layer_smooths_to_zero(sg):
    g = smoothed_haar_layer(CellFunction(sg, 2, np.zeros(9)))
    assert not g.values.any()
    assert g.level == 5


def test_smoothed_haar_feasibility(sg, rng):
    for m in (1, 2, 3):
        layer = CellFunction(sg, m, random_haar_layer(sg, m, rng))
        g = smoothed_haar_layer(layer)
        assert np.abs(average_rows(sg, m, g.level) @ g.values - layer.averages).max() <= 1e-9


def test_smoothed_haar_minimizes_energy(sg, rng):
    """Adding anything with zero level-m averages can only raise the energy."""
    m, M = 2, 5
    layer = CellFunction(sg, m, random_haar_layer(sg, m, rng))
    g = smoothed_haar_layer(layer, M)
    base = energy(g)
    for _ in range(5):
        other = smoothed_haar_layer(CellFunction(sg, m + 1, random_haar_layer(sg, m + 1, rng)), M)
        assert energy(g + other * 0.3) >= base - 1e-12


def test_smoothed_haar_depth_convergence(sg, rng):
    layer = CellFunction(sg, 2, random_haar_layer(sg, 2, rng))
    assert smoothed_haar_energy_drift(layer) <= 0.02


def test_smoothed_expansion_matches_averages_and_is_orthogonal(sg, rng):
    f = random_vertices(sg, 3, rng)
    exp = smoothed_haar_expand(f, M=6)
    total = exp.total()
    for m in range(1, 4):
        np.testing.assert_allclose(cell_averages(total, m).averages, cell_averages(prolong(f, 6), m).averages,
                                   atol=1e-9)
    K = energy_matrix(sg, 6)
    for i, a in enumerate(exp.layers):
        for b in exp.layers[i + 1:]:
            cross = a.values @ (K @ b.values)
            assert abs(cross) <= 1e-8 * np.sqrt(energy(a) * energy(b))


def test_harmonic_function_enters_through_averages_only(sg):
    h = harmonic_extend([1.0, -1.0, 0.0], sg, 0, 3)
    exp = smoothed_haar_expand(h, M=6)
    for d in exp.diagnostics:
        assert d["feasibility"] <= 1e-9


def test_layer_energy_band_statistics(sg, rng):
    r = derived_constants(sg).r_min
    ratios = []
    for m in (1, 2, 3):
        for _ in range(10):
            layer = CellFunction(sg, m, random_haar_layer(sg, m, rng))
            g = smoothed_haar_layer(layer)
            ratios.append(r ** m * energy(g) / difference_field(layer, m).sq_norm)
    assert max(ratios) / min(ratios) < 30


# ---------------------------------------------------------------- tents

def test_tent_expand_of_harmonic(sg):
    h = harmonic_extend([0.3, 1.0, -2.0], sg, 0, 4)
    layers = tent_expand(h)
    np.testing.assert_allclose(layers.boundary_values, [0.3, 1.0, -2.0])
    for c in layers.coefficients:
        assert np.abs(c).max() < 1e-13


def test_single_level_one_tent_has_one_coefficient(sg):
    layers = tent_expand(tent(sg, 4, 4))
    assert not layers.boundary_values.any()
    np.testing.assert_allclose(layers.coefficients[0], [0, 1, 0], atol=1e-14)
    for c in layers.coefficients[1:]:
        assert np.abs(c).max() < 1e-13


def test_tent_reconstruction_exact(sg, rng):
    f = random_vertices(sg, 5, rng)
    np.testing.assert_allclose(tent_reconstruct(tent_expand(f)).values, f.values, atol=1e-12)


def test_tent_layers_sum_to_function(sg, rng):
    f = random_vertices(sg, 3, rng)
    layers = tent_expand(f)
    total = sum((layers.layer(m) for m in range(1, 4)), layers.layer(0))
    np.testing.assert_allclose(total.values, f.values, atol=1e-12)


def test_smoothed_tent_of_harmonic(sg):
    h = harmonic_extend([1.0, 2.0, 0.0], sg, 0, 3)
    exp = smoothed_tent_expand(h, M=6)
    np.testing.assert_allclose(exp.base.values, prolong(h, 6).values, atol=1e-12)
    for g in exp.layers:
        assert np.abs(g.values).max() < 1e-9


def test_smoothed_tent_feasibility_and_reconstruction_on_vertices(sg, rng):
    f = random_vertices(sg, 3, rng)
    exp = smoothed_tent_expand(f, M=6)
    for d in exp.diagnostics:
        assert d["feasibility"] <= 1e-9
    n3 = _level(sg, 3).n_vertices
    np.testing.assert_allclose(exp.total().values[:n3], f.values, atol=1e-9)


def test_smoothed_tent_laplacian_band(sg, rng):
    d_h = derived_constants(sg).d_h
    r = derived_constants(sg).r_min
    ratios = []
    for m in (1, 2):
        nm, nprev = _level(sg, m).n_vertices, _level(sg, m - 1).n_vertices
        for _ in range(10):
            vals = np.zeros(nm)
            vals[nprev:] = rng.standard_normal(nm - nprev)
            g = smoothed_tent_layer(vals, sg, m)
            H = graph_laplacian(sg, m).H
            hm = (H @ g.values[:nm])[3:]
            ratios.append(laplacian_l2(g) / (r ** (-m * d_h / 2) * np.linalg.norm(hm)))
    assert max(ratios) / min(ratios) < 30


# ---------------------------------------------------------------- atomic

def test_atomic_zero(sg):
    co = atomic_from_function(constant(sg, 3, 0.0), 1.0)
    assert atomic_norm(co, 1.0) == 0.0


def test_atomic_single_level_one_tent(sg):
    co = atomic_from_function(tent(sg, 3, 3), 1.0)
    assert co.variant == "b" and co.k == 0
    assert atomic_norm(co, 1.0) == pytest.approx(1.0, abs=1e-12)
    c = derived_constants(sg)
    co2 = atomic_from_function(tent(sg, 6, 3), 1.0)
    assert atomic_norm(co2, 1.0) ** 2 == pytest.approx(0.6 ** (c.d_h - c.d_w), rel=1e-12)


def test_atomic_variant_a_reconstructs_averages(sg, rng):
    f = random_cells(sg, 4, rng)
    co = atomic_from_function(f, 0.3)
    assert co.variant == "a"
    assert co.balance_residual < 1e-12
    np.testing.assert_allclose(atomic_reconstruct_cells(co).averages, f.averages, atol=1e-12)
    assert np.isfinite(atomic_norm(co, 0.3))


def test_atomic_variant_a_tracks_tilde_gamma(sg, rng):
    ratios = []
    for _ in range(20):
        f = random_cells(sg, 4, rng)
        ratios.append(atomic_norm(atomic_from_function(f, 0.3), 0.3) / besov_norm(f, 0.3, 4, "tgamma").total)
    assert max(ratios) / min(ratios) < 10


def test_atomic_variant_b_of_harmonic(sg):
    h = harmonic_extend([1.0, 0.0, 2.0], sg, 0, 4)
    co = atomic_from_function(h, 1.0)
    np.testing.assert_allclose(co.h.values, h.values, atol=1e-12)
    assert np.abs(co.c).max() < 1e-12


def test_atomic_k1_variant_a_leaves_harmonic_part(sg, rng):
    f = random_vertices(sg, 4, rng)
    co = atomic_from_function(f, 1.6)
    assert (co.variant, co.k) == ("a", 1)
    assert np.abs(laplacian_apply(co.h).values[3:]).max() < 1e-8 * np.abs(laplacian_apply(f).values).max()


def test_atomic_k1_variant_b_leaves_biharmonic_part(sg, rng):
    f = random_vertices(sg, 3, rng)
    co = atomic_from_function(f, 2.9)
    assert (co.variant, co.k) == ("b", 1)
    # -Delta h is the harmonic part of -Delta f, so h is biharmonic
    phi0 = tent_expand(laplacian_apply(f, fill=True) * -1.0).layer(0)
    minus_lap = laplacian_apply(co.h).values * -1.0
    assert np.abs(minus_lap[3:] - phi0.values[3:]).max() < 1e-10 * np.abs(phi0.values).max()


def test_critical_sigma_is_rejected(sg):
    c = derived_constants(sg)
    co = atomic_from_function(tent(sg, 3, 3), 1.0)
    with pytest.raises(ValueError):
        atomic_norm(co, c.d_s / 2)
    with pytest.raises(ValueError):
        atomic_from_function(tent(sg, 3, 3), c.d_s / 2)


def test_out_of_window_warns_or_raises(sg):
    co = atomic_from_function(tent(sg, 3, 3), 1.0)
    with pytest.raises(ValueError):
        atomic_norm(co, 0.3)
    with pytest.warns(UserWarning):
        atomic_norm(co, 0.3, mode="warn")


def test_indicator_is_cell_function(sg):
    np.testing.assert_array_equal(indicator(sg, (0,)).averages, [1, 0, 0])
    np.testing.assert_array_equal(indicator(sg, (1,), 1).averages, [0, 1, 0])
