import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bpmre.envmodel import (
    EnvironmentModel,
    FinitePmfLaw,
    GeometricLaw,
    TruncatedPoissonLaw,
    calibrate,
    dual_kernel,
    lattice_diagnostic,
    law_from_dict,
    primitivity_exponent,
    shift_means,
    stationary,
    validate_model,
)
from bpmre.errors import (
    ConsistencyError,
    InfeasibleTargetError,
    MomentError,
    StructuralError,
    UnsupportedRescaleError,
)
from bpmre.spectral import K_derivatives, classify

P2 = np.array([[0.3, 0.7], [0.4, 0.6]])


def geo_model(P, means):
    P = np.asarray(P, dtype=float)
    labels = tuple(f"s{i}" for i in range(P.shape[0]))
    return EnvironmentModel(labels, P, tuple(GeometricLaw.from_mean(m) for m in means))


# -- offspring laws ---------------------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.9))
def test_geometric_moments_match_numerical_derivatives(r):
    law = GeometricLaw(r)
    h = 1e-6
    assert law.pgf(0.3) == pytest.approx((1 - r) / (1 - 0.3 * r), rel=1e-15)
    # centred differences at s = 1 in complement form: om(t) = 1 - f(1 - t)
    om = law.one_minus_pgf
    d1 = (om(h) - om(-h)) / (2 * h)
    d2 = -(om(h) + om(-h)) / h**2
    assert abs(d1 - law.mean) <= 1e-6
    assert abs(d2 - law.second_factorial) <= 1e-6 * max(1.0, law.second_factorial)
    assert law.mean == pytest.approx(r / (1 - r), rel=1e-14)
    assert law.second_factorial == pytest.approx(2 * r**2 / (1 - r) ** 2, rel=1e-14)


@pytest.mark.parametrize(
    "law",
    [GeometricLaw(0.4), TruncatedPoissonLaw(1.7, 9), FinitePmfLaw([0.2, 0.5, 0.0, 0.3])],
)
def test_law_invariants(law):
    p = law.pmf(60)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-12 or isinstance(law, GeometricLaw)
    assert law.pgf(1.0) == pytest.approx(1.0, abs=1e-14)
    s = np.linspace(0, 0.999, 50)
    vals = law.pgf(s)
    assert np.all((vals >= 0) & (vals < 1))
    np.testing.assert_allclose(law.one_minus_pgf(1 - s), 1 - vals, rtol=1e-12, atol=1e-15)


def test_one_minus_pgf_keeps_relative_precision_near_one():
    law = TruncatedPoissonLaw(1.2, 10)
    t = 1e-14
    # 1 - f(1 - t) = m t - f''(1) t^2 / 2 + ...
    assert law.one_minus_pgf(t) == pytest.approx(law.mean * t, rel=1e-12)


def test_truncated_poisson_folds_tail_into_top_atom():
    law = TruncatedPoissonLaw(2.0, 3)
    from scipy.stats import poisson

    assert law.probs[-1] == pytest.approx(poisson.sf(2, 2.0), rel=1e-14)
    assert law.probs.sum() == pytest.approx(1.0, abs=1e-15)


def test_law_from_dict_round_trip():
    for law in (GeometricLaw(0.3), TruncatedPoissonLaw(1.1, 7), FinitePmfLaw([0.5, 0.5])):
        assert law_from_dict(law.to_dict()) == law
    assert law_from_dict({"kind": "geometric", "params": {"mean": 1.0}}).r == 0.5
    with pytest.raises(ValueError):
        law_from_dict({"kind": "negbin", "params": {}})


# -- model validation -------------------------------------------------------


def test_period_two_permutation_is_not_primitive():
    report = validate_model(geo_model([[0, 1], [1, 0]], [1.0, 1.0]))
    assert not report.primitive_ok and report.k0 is None


def test_positive_matrix_primitive_with_exponent_one():
    report = validate_model(geo_model([[0.5, 0.5], [0.5, 0.5]], [1.0, 2.0]))
    assert report.primitive_ok and report.k0 == 1


def test_primitivity_exponent_needs_higher_power():
    # cycle 0->1->2->0 plus a self-loop: primitive, but not positive at step 1
    P = np.array([[0.5, 0.5, 0], [0, 0, 1], [1, 0, 0]])
    k0 = primitivity_exponent(P)
    assert k0 is not None and 1 < k0 <= (3 - 1) ** 2 + 1
    assert np.all(np.linalg.matrix_power(P, k0) > 0)


def test_bad_row_named():
    with pytest.raises(StructuralError, match="row 1"):
        validate_model(geo_model([[0.5, 0.5], [0.5, 0.4]], [1.0, 1.0]))


def test_zero_mean_law_named():
    model = EnvironmentModel(
        ("alive", "dead"), np.full((2, 2), 0.5), (GeometricLaw(0.5), FinitePmfLaw([1.0]))
    )
    with pytest.raises(MomentError, match="dead"):
        validate_model(model)


def test_shape_mismatch_rejected():
    with pytest.raises(StructuralError):
        EnvironmentModel(("a",), np.full((2, 2), 0.5), (GeometricLaw(0.5),) * 2)


# -- stationary law and dual kernel ------------------------------------------


def test_stationary_two_state_oracle():
    np.testing.assert_allclose(stationary(P2), [4 / 11, 7 / 11], atol=1e-15)


def test_stationary_rank_one_and_doubly_stochastic():
    mu = np.array([0.2, 0.3, 0.5])
    np.testing.assert_allclose(stationary(np.tile(mu, (3, 1))), mu, atol=1e-15)
    D = np.array([[0.5, 0.3, 0.2], [0.3, 0.4, 0.3], [0.2, 0.3, 0.5]])
    np.testing.assert_allclose(stationary(D), np.full(3, 1 / 3), atol=1e-15)


def test_stationary_rejects_periodic():
    with pytest.raises(StructuralError, match="validate_model"):
        stationary(np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_dual_kernel_hand_value():
    nu = np.array([4 / 11, 7 / 11])
    Pd = dual_kernel(P2, nu)
    assert Pd[0, 1] == pytest.approx(0.7, abs=1e-15)
    np.testing.assert_allclose(Pd.sum(axis=1), 1.0, atol=1e-12)


def test_dual_of_reversible_kernel_is_itself():
    # birth-death chains are reversible
    P = np.array([[0.6, 0.4, 0.0], [0.3, 0.3, 0.4], [0.0, 0.5, 0.5]])
    np.testing.assert_allclose(dual_kernel(P, stationary(P)), P, atol=1e-14)


def test_dual_rejects_non_stationary_measure():
    with pytest.raises(ConsistencyError):
        dual_kernel(P2, np.array([0.5, 0.5]))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000))
def test_double_dual_is_identity(d, seed):
    rng = np.random.default_rng(seed)
    P = rng.random((d, d)) + 0.01
    P /= P.sum(axis=1, keepdims=True)
    nu = stationary(P)
    assert np.max(np.abs(nu @ P - nu)) <= 1e-12
    Pd = dual_kernel(P, nu)
    np.testing.assert_allclose(Pd.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(stationary(Pd), nu, atol=1e-12)
    np.testing.assert_allclose(dual_kernel(Pd, nu), P, atol=1e-12)


# -- lattice diagnostic -------------------------------------------------------


def test_single_state_is_lattice_with_span_rho():
    diag = lattice_diagnostic(geo_model([[1.0]], [math.exp(0.3)]))
    assert diag.is_suspect_lattice
    assert diag.span_estimate == pytest.approx(0.3, abs=1e-12)


def test_two_state_commensurable_cycles():
    diag = lattice_diagnostic(geo_model(np.full((2, 2), 0.5), [math.exp(0.7), math.exp(-0.4)]))
    assert diag.is_suspect_lattice
    assert diag.cycles_examined == 3
    assert diag.span_estimate == pytest.approx(0.1, abs=1e-9)
    assert diag.theta == pytest.approx(0.1, abs=1e-9)


def test_irrational_ratio_raw_sums_and_theta_elimination():
    # raw cycle sums 1, -sqrt2, 1 - sqrt2 are not commensurable ...
    rho = (1.0, -math.sqrt(2.0))
    from bpmre.envmodel import _real_gcd

    assert _real_gcd([1.0, -math.sqrt(2.0), 1.0 - math.sqrt(2.0)], 1e-9, 1000) is None
    # ... but with two states theta = rho(0) maps every cycle residual into (rho(1) - rho(0))Z
    diag = lattice_diagnostic(geo_model(np.full((2, 2), 0.5), np.exp(rho)))
    assert diag.is_suspect_lattice
    assert diag.cycles_examined == 3


def test_base_chain_not_lattice(fixtures):
    diag = lattice_diagnostic(fixtures["model_a"])
    assert not diag.is_suspect_lattice
    assert diag.span_estimate == 0.0


# -- mean shifts and calibration ----------------------------------------------


def test_shift_zero_is_identity(model_b):
    assert shift_means(model_b, 0.0) is model_b


def test_geometric_shift_by_log_two():
    m = 1.7
    shifted = shift_means(geo_model([[1.0]], [m]), math.log(2))
    law = shifted.laws[0]
    assert law.mean == pytest.approx(m / 2, rel=1e-14)
    assert law.r == pytest.approx((m / 2) / (1 + m / 2), rel=1e-14)


def test_shift_moves_rho_and_kprime(model_b):
    c = 0.37
    shifted = shift_means(model_b, c)
    np.testing.assert_allclose(shifted.rho, model_b.rho - c, atol=1e-12)
    assert K_derivatives(shifted, 0.0)[1] == pytest.approx(K_derivatives(model_b, 0.0)[1] - c, abs=1e-12)


def test_finite_pmf_cannot_be_rescaled():
    model = EnvironmentModel(("a",), np.eye(1), (FinitePmfLaw([0.3, 0.3, 0.4]),))
    with pytest.raises(UnsupportedRescaleError):
        shift_means(model, 0.1)


def test_single_state_critical_calibration():
    model, c = calibrate(geo_model([[1.0]], [math.e]), "critical")
    assert c == pytest.approx(1.0, abs=1e-14)
    assert model.laws[0].mean == pytest.approx(1.0, abs=1e-14)


def test_weak_target_degenerate_rho_infeasible():
    with pytest.raises(InfeasibleTargetError):
        calibrate(geo_model([[0.5, 0.5], [0.5, 0.5]], [1.2, 1.2]), "weak")


def test_calibration_loop(fixtures):
    from bpmre.cli import base_model

    base = base_model()
    crit, _ = calibrate(base, "critical")
    assert abs(stationary(crit.P) @ crit.rho) <= 1e-10
    strong, _ = calibrate(base, "strong", 0.3)
    assert classify(strong).regime == "strongly-subcritical"
    assert K_derivatives(strong, 1.0)[1] == pytest.approx(-0.3, abs=1e-10)
    weak, _ = calibrate(base, "weak")
    kp0, kp1 = K_derivatives(weak, 0.0)[1], K_derivatives(weak, 1.0)[1]
    assert kp0 < 0 < kp1
    inter, _ = calibrate(base, "intermediate")
    assert abs(K_derivatives(inter, 1.0)[1]) <= 1e-10
