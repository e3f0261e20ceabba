import json

import numpy as np
import pytest

from spcrit import acceptance
from spcrit.model import (
    BranchingData,
    ModelError,
    ParseError,
    SpatialGenerator,
    StateSpace,
    SuperprocessModel,
    as_measure,
    check_dual_submarkov,
    check_grey_domination,
    derived_coefficients,
    dual_submarkov_static,
    dump_model,
    load_model,
    m_inner,
    pairing,
    validate_model,
)

M1_TEXT = json.dumps(
    {
        "states": ["o"], "m": [1], "Q": [[0]],
        "beta": [1], "a": [0], "b": [0.5], "jumps": [[]],
    }
)
M2_TEXT = json.dumps(
    {
        "states": ["A", "B"], "m": [1, 1], "Q": [[-1, 1], [1, -1]],
        "beta": [1, 1], "a": [0, 0], "b": [1, 1], "jumps": [[], []],
    }
)


def test_load_m1():
    model = load_model(M1_TEXT)
    assert model.labels == ("o",)
    assert model.n_states == 1
    assert model.branching.b[0] == 0.5


def test_load_m2():
    model = load_model(M2_TEXT)
    assert model.labels == ("A", "B")
    np.testing.assert_allclose(model.Q, [[-1, 1], [1, -1]])


def test_zero_weight_names_the_entry():
    bad = json.loads(M2_TEXT)
    bad["m"] = [0, 1]
    with pytest.raises(ModelError, match=r"m\[0\]"):
        load_model(json.dumps(bad))


def test_malformed_json_is_a_parse_error():
    with pytest.raises(ParseError):
        load_model("{not json")


def test_unknown_and_missing_keys_rejected():
    doc = json.loads(M1_TEXT)
    doc["extra"] = 1
    with pytest.raises(ParseError, match="unknown"):
        load_model(json.dumps(doc))
    doc = json.loads(M1_TEXT)
    del doc["beta"]
    with pytest.raises(ParseError, match="missing"):
        load_model(json.dumps(doc))


def test_bad_q_signs_named():
    doc = json.loads(M2_TEXT)
    doc["Q"] = [[-1, -0.5], [1, -1]]
    with pytest.raises(ModelError, match=r"Q\[0\]\[1\]"):
        load_model(json.dumps(doc))
    doc["Q"] = [[1, 1], [1, -1]]
    with pytest.raises(ModelError, match="row sum"):
        load_model(json.dumps(doc))


def test_bad_jump_atoms_named():
    doc = json.loads(M1_TEXT)
    doc["jumps"] = [[{"y": -1, "w": 1}]]
    with pytest.raises(ModelError, match=r"jumps\[0\]\[0\].y"):
        load_model(json.dumps(doc))
    doc["jumps"] = [[{"y": 1, "w": 0}]]
    with pytest.raises(ModelError, match=r"jumps\[0\]\[0\].w"):
        load_model(json.dumps(doc))
    doc["jumps"] = [[{"y": 1, "w": 1, "z": 2}]]
    with pytest.raises(ParseError, match=r"jumps\[0\]\[0\]"):
        load_model(json.dumps(doc))


def test_dimension_mismatch_rejected():
    doc = json.loads(M2_TEXT)
    doc["beta"] = [1]
    with pytest.raises(ModelError):
        load_model(json.dumps(doc))


def test_reducible_generator_rejected_at_load():
    doc = json.loads(M2_TEXT)
    doc["Q"] = [[-1, 1], [0, 0]]
    with pytest.raises(ModelError, match="reducible"):
        load_model(json.dumps(doc))


def test_degenerate_branching_rejected():
    doc = json.loads(M1_TEXT)
    doc["b"] = [0]
    with pytest.raises(ModelError, match="non-degenerate"):
        load_model(json.dumps(doc))


def test_roundtrip_is_identical(m3, rng):
    for model in (m3, acceptance.random_model(rng), acceptance.random_model(rng)):
        back = load_model(dump_model(model))
        assert back.labels == model.labels
        np.testing.assert_array_equal(back.m, model.m)
        np.testing.assert_array_equal(back.Q, model.Q)
        np.testing.assert_array_equal(back.branching.beta, model.branching.beta)
        np.testing.assert_array_equal(back.branching.a, model.branching.a)
        np.testing.assert_array_equal(back.branching.b, model.branching.b)
        for j1, j2 in zip(back.branching.jumps, model.branching.jumps):
            np.testing.assert_array_equal(j1, j2)


def test_derived_coefficients_m1(m1):
    dc = derived_coefficients(m1)
    np.testing.assert_allclose(dc.alpha, [0.0])
    np.testing.assert_allclose(dc.avar, [1.0])
    assert dc.kbound == 1.0


def test_derived_coefficients_m2(m2):
    dc = derived_coefficients(m2)
    np.testing.assert_allclose(dc.alpha, [0.0, 0.0])
    np.testing.assert_allclose(dc.avar, [2.0, 2.0])
    assert dc.kbound == 2.0


def test_derived_coefficients_jump_atom(m3):
    # the single atom (y=1, w=1) contributes y^2 w = 1 to the variance factor
    dc = derived_coefficients(m3)
    np.testing.assert_allclose(dc.avar, [1.0])
    assert dc.kbound == 1.0


def test_kbound_is_the_exact_max(rng):
    for _ in range(50):
        model = acceptance.random_model(rng)
        dc = derived_coefficients(model)
        combined = np.abs(dc.alpha) + dc.avar
        assert np.all(combined <= dc.kbound + 1e-15)
        assert np.isclose(combined.max(), dc.kbound)


def test_dual_submarkov_symmetric_cases(m1, m2):
    assert check_dual_submarkov(m1, [0.5, 1.0, 5.0]).ok
    report = check_dual_submarkov(m2, [0.1, 1.0, 10.0])
    assert report.ok and report.static_ok


def test_dual_submarkov_detects_violation():
    # one-way chain: mass piles up at the second state, the dual gains mass
    model = SuperprocessModel(
        space=StateSpace(labels=("A", "B"), m=np.array([1.0, 1.0])),
        motion=SpatialGenerator(Q=np.array([[-1.0, 1.0], [0.0, 0.0]])),
        branching=BranchingData(
            beta=np.array([1.0, 1.0]),
            a=np.array([0.0, 0.0]),
            b=np.array([1.0, 1.0]),
            jumps=(np.empty((0, 2)), np.empty((0, 2))),
        ),
    )
    assert not dual_submarkov_static(model)
    report = check_dual_submarkov(model, [0.1, 1.0])
    assert not report.ok
    assert report.worst_state == 1
    assert report.worst_excess > 0
    # series expansion: column sum at B is 1 + t + O(t^2)
    small = check_dual_submarkov(model, [0.01])
    assert small.worst_excess == pytest.approx(0.01, rel=0.05)


def test_static_check_implies_dynamic(rng):
    # the random generator draws diag(m) Q with nonpositive row and column
    # sums, so the static certificate must hold and imply every grid time
    for _ in range(25):
        model = acceptance.random_model(rng)
        assert dual_submarkov_static(model)
        grid = rng.uniform(0.05, 20.0, 4)
        assert check_dual_submarkov(model, grid).ok


def test_grey_domination(m1, m2, m3):
    r1 = check_grey_domination(m1)
    assert r1.satisfied and r1.b_tilde == 0.5
    r2 = check_grey_domination(m2)
    assert r2.satisfied and r2.b_tilde == 1.0
    r3 = check_grey_domination(m3)
    assert not r3.satisfied and r3.b_tilde == 0.0
    # dominating mechanism is -kbound z + b_tilde z^2
    assert r1.dominating_mechanism(2.0) == pytest.approx(-2.0 * r1.kbound + 4 * 0.5)


def test_measure_validation(m2):
    with pytest.raises(ModelError, match=r"mu\[1\]"):
        as_measure(m2, [1.0, -0.5])
    with pytest.raises(ModelError, match="total mass"):
        as_measure(m2, [0.0, 0.0])
    as_measure(m2, [0.0, 0.0], allow_zero=True)


def test_pairings(m2):
    f = np.array([2.0, 0.0])
    mu = np.array([0.5, 3.0])
    assert pairing(f, mu) == 1.0
    assert m_inner(f, f, m2.m) == 4.0


def test_validate_model_passes_fixtures(m1, m2, m3):
    for model in (m1, m2, m3):
        assert validate_model(model) is model
