import json
import math

import numpy as np
import pytest

from pcfsobolev.spec_core import (
    PRESETS,
    SpecError,
    derived_constants,
    extension_matrices,
    hausdorff_dimension,
    level1_network,
    load_spec,
    parse_spec,
    preset,
    schur_trace,
    verify_harmonic_structure,
)


def test_sg_dimensions_match_closed_forms(sg):
    c = derived_constants(sg)
    assert c.d_h == pytest.approx(math.log(3) / math.log(5 / 3), abs=1e-12)
    assert c.d_s == pytest.approx(2 * math.log(3) / math.log(5), abs=1e-12)
    assert c.critical_orders(2.0) == pytest.approx(
        [math.log(3) / math.log(5), 2 - math.log(3) / math.log(5)], abs=1e-12)


def test_interval_dimension_is_one(interval):
    c = derived_constants(interval)
    assert c.d_h == pytest.approx(1.0, abs=1e-12)
    assert c.d_w == pytest.approx(2.0)
    assert c.d_s == pytest.approx(1.0)


def test_unequal_weights_solve_moran_equation():
    spec = preset("interval-asym")
    s = hausdorff_dimension(spec)
    assert (1 / 3) ** s + (2 / 3) ** s == pytest.approx(1.0, abs=1e-12)
    assert derived_constants(spec).mu == pytest.approx(((1 / 3) ** s, (2 / 3) ** s))


def test_lambda_equals_one_at_half_spectral_dimension(sg):
    c = derived_constants(sg)
    assert c.lam(c.d_s / 2) == pytest.approx(1.0, abs=1e-12)
    assert c.lam(0.3) < 1 < c.lam(0.9)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_are_harmonic_structures(name):
    rep = verify_harmonic_structure(preset(name))
    assert rep.passed, rep.deviation


def test_schur_trace_reproduces_boundary_laplacian(sg):
    np.testing.assert_allclose(schur_trace(sg), -sg.h0_array, atol=1e-12)


def test_sg_extension_matrix_is_one_fifth_two_fifths(sg):
    A0 = extension_matrices(sg).A[0]
    np.testing.assert_allclose(A0, [[1, 0, 0], [0.4, 0.4, 0.2], [0.4, 0.2, 0.4]], atol=1e-14)


def test_level1_network_identifies_sg_midpoints(sg):
    net = level1_network(sg)
    assert net.n_classes == 6
    assert list(net.boundary_class) == [0, 1, 2]


def test_wrong_weight_is_not_a_harmonic_structure():
    doc = dict(PRESETS["sg"], r=[0.5, 0.5, 0.5])
    spec = parse_spec(json.dumps(doc))
    assert not verify_harmonic_structure(spec).passed


@pytest.mark.parametrize("field,value", [
    ("r", [0.6, 0.6]),
    ("r", [1.2, 0.6, 0.6]),
    ("h0", [[-2, 1, 1], [1, -2, 1], [1, 1, -1]]),
    ("fixed_point", [0, 0, 2]),
])
def test_invalid_documents_are_rejected(field, value):
    doc = dict(PRESETS["sg"], **{field: value})
    with pytest.raises(SpecError):
        parse_spec(json.dumps(doc))


def test_missing_field_names_the_field():
    doc = dict(PRESETS["sg"])
    del doc["gluings"]
    with pytest.raises(SpecError) as info:
        parse_spec(json.dumps(doc))
    assert info.value.field == "gluings"


def test_load_spec_from_file(tmp_path):
    path = tmp_path / "sg.json"
    path.write_text(json.dumps(PRESETS["sg"]))
    assert load_spec(str(path)) == preset("sg")
    with pytest.raises(SpecError):
        load_spec(str(tmp_path / "missing.json"))


def test_to_dict_round_trip(sg):
    assert parse_spec(json.dumps(sg.to_dict())) == sg
