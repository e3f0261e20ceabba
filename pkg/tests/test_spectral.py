import math

import numpy as np
import pytest

from spcrit import acceptance
from spcrit.model import (
    BranchingData,
    SuperprocessModel,
    derived_coefficients,
    m_inner,
)
from spcrit.spectral import (
    MeanSemigroup,
    NotCriticalError,
    criticalize,
    density_matrix,
    fit_expansion_constant,
    fluctuation_variance,
    mean_semigroup,
    nu,
    remove_principal_component,
    spectral_data,
)

INV_SQRT2 = 2.0 ** -0.5


def with_linear_coefficient(model, a):
    return SuperprocessModel(
        space=model.space,
        motion=model.motion,
        branching=BranchingData(
            beta=model.branching.beta,
            a=np.asarray(a, dtype=float),
            b=model.branching.b,
            jumps=model.branching.jumps,
        ),
    )


# ---------------------------------------------------------------------------
# mean semigroup

def test_semigroup_identity_action(m1):
    np.testing.assert_allclose(mean_semigroup(m1, 3.0) @ [1.0], [1.0])


def test_semigroup_eigenvector_decay(m2):
    # (1, -1) is an eigenvector of the flip generator with eigenvalue -2
    got = mean_semigroup(m2, 0.5) @ np.array([1.0, -1.0])
    np.testing.assert_allclose(got, math.exp(-1.0) * np.array([1.0, -1.0]),
                               rtol=1e-12)


def test_semigroup_preserves_constants(m2):
    got = mean_semigroup(m2, 0.5) @ np.array([1.0, 1.0])
    np.testing.assert_allclose(got, [1.0, 1.0], rtol=1e-12)


def test_semigroup_rejects_negative_time(m2):
    with pytest.raises(ValueError):
        mean_semigroup(m2, -0.1)


def test_semigroup_property_and_positivity(rng):
    for _ in range(10):
        model = acceptance.random_model(rng)
        sg = MeanSemigroup(model)
        s, t = rng.uniform(0.1, 3.0, 2)
        np.testing.assert_allclose(
            sg.matrix(s) @ sg.matrix(t), sg.matrix(s + t), atol=1e-10, rtol=1e-10
        )
        f = rng.uniform(0.0, 2.0, model.n_states)
        assert np.all(sg.apply(t, f) >= -1e-14)


def test_duality_in_the_weighted_inner_product(rng):
    for _ in range(10):
        model = acceptance.random_model(rng)
        sg = MeanSemigroup(model)
        t = float(rng.uniform(0.1, 4.0))
        f = rng.normal(size=model.n_states)
        g = rng.normal(size=model.n_states)
        lhs = m_inner(sg.apply(t, f), g, model.m)
        rhs = m_inner(f, sg.dual_apply(t, g), model.m)
        assert lhs == pytest.approx(rhs, abs=1e-10, rel=1e-10)


# ---------------------------------------------------------------------------
# density

def test_density_m1(m1):
    np.testing.assert_allclose(density_matrix(m1, 1.0), [[1.0]])


def test_density_two_state_heat_kernel(m2):
    # closed form for the symmetric flip: (1 +/- e^{-2t})/2
    q = density_matrix(m2, 1.0)
    assert q[0, 0] == pytest.approx((1 + math.exp(-2)) / 2, rel=1e-12)
    assert q[0, 1] == pytest.approx((1 - math.exp(-2)) / 2, rel=1e-12)


def test_density_comparability(m2, rng):
    import scipy.linalg as sla

    models = [m2] + [acceptance.random_model(rng) for _ in range(10)]
    for model in models:
        kb = derived_coefficients(model).kbound
        for t in (0.1, 1.0, 5.0):
            q = density_matrix(model, t)
            p = sla.expm(t * model.Q) / model.m[None, :]
            assert np.all(q >= math.exp(-kb * t) * p - 1e-12)
            assert np.all(q <= math.exp(kb * t) * p + 1e-12)


def test_density_rejects_nonpositive_time(m2):
    with pytest.raises(ValueError):
        density_matrix(m2, 0.0)


# ---------------------------------------------------------------------------
# principal eigendata

def test_spectral_data_m1(m1):
    sd = spectral_data(m1)
    assert sd.lambda0 == pytest.approx(0.0, abs=1e-14)
    assert math.isinf(sd.gamma)
    np.testing.assert_allclose(sd.phi0, [1.0])
    np.testing.assert_allclose(sd.psi0, [1.0])
    assert sd.c_expansion == 0.0


def test_spectral_data_m2(m2):
    sd = spectral_data(m2)
    assert sd.lambda0 == pytest.approx(0.0, abs=1e-14)
    assert sd.gamma == pytest.approx(2.0, rel=1e-12)
    np.testing.assert_allclose(sd.phi0, [INV_SQRT2, INV_SQRT2], rtol=1e-12)
    np.testing.assert_allclose(sd.psi0, [INV_SQRT2, INV_SQRT2], rtol=1e-12)


def test_spectral_shift_moves_only_lambda(m2):
    shifted = with_linear_coefficient(m2, [0.3, 0.3])
    sd = spectral_data(shifted)
    assert sd.lambda0 == pytest.approx(0.3, rel=1e-12)
    assert sd.gamma == pytest.approx(2.0, rel=1e-12)
    np.testing.assert_allclose(sd.phi0, [INV_SQRT2, INV_SQRT2], rtol=1e-12)


def test_normalizations_on_random_models(rng):
    for _ in range(20):
        model = acceptance.random_model(rng)
        sd = spectral_data(model)
        assert m_inner(sd.phi0, sd.phi0, model.m) == pytest.approx(1.0, abs=1e-12)
        assert m_inner(sd.phi0, sd.psi0, model.m) == pytest.approx(1.0, abs=1e-12)
        assert np.all(sd.phi0 > 0) and np.all(sd.psi0 > 0)
        sg = MeanSemigroup(model)
        np.testing.assert_allclose(
            sg.apply(1.0, sd.phi0), math.exp(sd.lambda0) * sd.phi0, rtol=1e-10
        )
        np.testing.assert_allclose(
            sg.dual_apply(1.0, sd.psi0), math.exp(sd.lambda0) * sd.psi0, rtol=1e-10
        )


def test_expansion_bound_holds_on_the_grid(m2, rng):
    for model in (m2, acceptance.random_model(rng, n_states=3, critical=True)):
        sd = spectral_data(model)
        assert math.isfinite(sd.c_expansion)
        grid = np.geomspace(1.0, 40.0, 33)
        sg = MeanSemigroup(model)
        rank_one = np.outer(sd.phi0, sd.psi0)
        for t in grid:
            dev = np.abs(sg.density(t) * math.exp(-sd.lambda0 * t) - rank_one)
            bound = sd.c_expansion * math.exp(-sd.gamma * t) * rank_one
            assert np.all(dev <= bound * (1 + 1e-9) + 1e-300)


def test_mean_convergence_bound(rng):
    # the kernel expansion bound integrates to the field-level bound
    for _ in range(5):
        model = acceptance.random_model(rng, critical=True)
        sd = spectral_data(model)
        if not math.isfinite(sd.gamma):
            continue
        sg = MeanSemigroup(model)
        f = rng.normal(size=model.n_states)
        weight = m_inner(f, sd.psi0, model.m)
        abs_weight = m_inner(np.abs(f), sd.psi0, model.m)
        for t in (1.0, 3.0, 10.0):
            dev = np.abs(sg.apply(t, f) - weight * sd.phi0)
            bound = sd.c_expansion * math.exp(-sd.gamma * t) * abs_weight * sd.phi0
            assert np.all(dev <= bound * (1 + 1e-6) + 1e-12)


# ---------------------------------------------------------------------------
# criticalize

def test_criticalize_shift(m2):
    model = with_linear_coefficient(m2, [0.3, 0.3])
    flat = criticalize(model)
    np.testing.assert_allclose(flat.branching.a, [0.0, 0.0], atol=1e-14)
    assert abs(spectral_data(flat).lambda0) <= 1e-12


def test_criticalize_is_a_fixed_point(m1):
    assert criticalize(m1) is m1


def test_criticalize_asymmetric(m2):
    model = with_linear_coefficient(m2, [0.2, -0.2])
    assert abs(spectral_data(criticalize(model)).lambda0) <= 1e-12


def test_criticalize_needs_positive_beta(m2):
    model = SuperprocessModel(
        space=m2.space,
        motion=m2.motion,
        branching=BranchingData(
            beta=np.array([1.0, 0.0]),
            a=np.array([0.5, 0.5]),
            b=np.array([1.0, 1.0]),
            jumps=m2.branching.jumps,
        ),
    )
    with pytest.raises(ValueError, match="beta"):
        criticalize(model)


# ---------------------------------------------------------------------------
# constants

def test_nu_values(m1, m2, m3):
    assert nu(m1, spectral_data(m1)) == pytest.approx(0.5, rel=1e-14)
    assert nu(m2, spectral_data(m2)) == pytest.approx(INV_SQRT2, abs=1e-10)
    assert nu(m3, spectral_data(m3)) == pytest.approx(0.5, rel=1e-14)


def test_nu_requires_critical(m2):
    model = with_linear_coefficient(m2, [0.3, 0.3])
    with pytest.raises(NotCriticalError):
        nu(model, spectral_data(model))


def test_projection_examples(m2):
    sd = spectral_data(m2)
    np.testing.assert_allclose(
        remove_principal_component(np.array([1.0, -1.0]), sd), [1.0, -1.0],
        atol=1e-14,
    )
    np.testing.assert_allclose(
        remove_principal_component(np.array([1.0, 1.0]), sd), [0.0, 0.0],
        atol=1e-14,
    )
    # weight of (2, 0) against psi0 is sqrt(2), so sqrt(2)*phi0 = (1, 1) drops
    np.testing.assert_allclose(
        remove_principal_component(np.array([2.0, 0.0]), sd), [1.0, -1.0],
        atol=1e-12,
    )


def test_projection_annihilates_weight_and_is_idempotent(rng):
    for _ in range(20):
        model = acceptance.random_model(rng, critical=True)
        sd = spectral_data(model)
        f = rng.normal(size=model.n_states) * 3.0
        ft = remove_principal_component(f, sd)
        assert abs(m_inner(ft, sd.psi0, model.m)) <= 1e-12 * max(1, np.abs(f).max())
        np.testing.assert_allclose(
            remove_principal_component(ft, sd), ft, atol=1e-12
        )


def test_fluctuation_variance_m2(m2):
    sd = spectral_data(m2)
    got = fluctuation_variance(m2, sd, np.array([1.0, -1.0]))
    assert got == pytest.approx(INV_SQRT2, abs=1e-8)


def test_fluctuation_variance_zero_field(m2):
    sd = spectral_data(m2)
    assert fluctuation_variance(m2, sd, np.zeros(2)) == 0.0


def test_fluctuation_variance_precondition(m2):
    sd = spectral_data(m2)
    with pytest.raises(ValueError, match="psi0-weight"):
        fluctuation_variance(m2, sd, np.array([1.0, 1.0]))


def test_fluct_matrix_matches_full_matrix_on_projected_fields(m2, rng):
    for model in (m2, acceptance.random_model(rng, n_states=3, critical=True)):
        sd = spectral_data(model)
        sg = MeanSemigroup(model)
        f = remove_principal_component(rng.normal(size=model.n_states), sd)
        for t in (0.3, 1.0, 4.0):
            np.testing.assert_allclose(
                sg.fluct_apply(t, f), sg.apply(t, f), atol=1e-12, rtol=1e-8
            )


def test_fit_expansion_constant_refinement_stays_bounded(m2):
    sd = spectral_data(m2)
    dense = fit_expansion_constant(
        m2, sd.lambda0, sd.phi0, sd.psi0, sd.gamma,
        t_grid=np.geomspace(1.0, 40.0, 2049),
    )
    assert dense <= sd.c_expansion * 1.10
