import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neumann_networks import linops, oracle
from neumann_networks.errors import SingularSubspaceError
from neumann_networks.estimators import EstimatorConfig, Variant, gdn_estimate, neumann_estimate
from neumann_networks.linops import ForwardModel, ModelSpec, build_forward_model
from neumann_networks.oracle import UnionOfSubspaces


@pytest.fixture(scope="module")
def restriction():
    return linops.coordinate_restriction(10, 5)


@pytest.fixture(scope="module")
def uos3():
    return oracle.sample_subspaces(10, 3, 3, seed=0)


# --- constant c_{eta,B} ------------------------------------------------------

@pytest.mark.parametrize("eta,B,expected", [(1.0, 1, 1.0), (0.5, 2, 1.6), (1.0, 3, 1 / 3)])
def test_c_const_closed_form(eta, B, expected):
    assert oracle.c_const(eta, B) == pytest.approx(expected, rel=1e-14)


def test_c_const_reported_value():
    # the published 0.349 for the eta=0.482 UoS net corresponds to seven summed blocks
    assert oracle.c_const(0.482, 7) == pytest.approx(0.349, abs=1e-3)
    assert oracle.c_const(0.482, 6) == pytest.approx(0.41946, abs=5e-5)


@given(st.floats(0.01, 1.0), st.integers(1, 12))
@settings(max_examples=50, deadline=None)
def test_c_const_matches_direct_sum(eta, B):
    direct = 0.0
    for j in range(B):
        direct += (B - j) * (1 - eta) ** j
    assert oracle.c_const(eta, B) == pytest.approx(1 / (eta ** 2 * direct), rel=1e-12)


@pytest.mark.parametrize("eta,B", [(0.0, 2), (1.5, 2), (0.5, 0)])
def test_c_const_domain(eta, B):
    with pytest.raises(ValueError):
        oracle.c_const(eta, B)


# --- subspace sampling -------------------------------------------------------

def test_sample_subspaces_orthonormal_and_deterministic():
    a = oracle.sample_subspaces(10, 3, 3, seed=5)
    b = oracle.sample_subspaces(10, 3, 3, seed=5)
    for U, V in zip(a.bases, b.bases):
        np.testing.assert_allclose(U.T @ U, np.eye(3), atol=1e-10)
        assert U.tobytes() == V.tobytes()


def test_sample_full_basis():
    uos = oracle.sample_subspaces(4, 4, 1, seed=0)
    U = uos.bases[0]
    np.testing.assert_allclose(U @ U.T, np.eye(4), atol=1e-12)


def test_sample_subspaces_rejects_r_gt_p():
    with pytest.raises(ValueError):
        oracle.sample_subspaces(3, 4, 2, seed=0)


def test_union_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        UnionOfSubspaces((np.ones((4, 2)),))


def test_sample_points_membership_and_labels(uos3):
    rng = np.random.default_rng(0)
    betas, labels = oracle.sample_points(uos3, 3000, rng)
    for beta, k in zip(betas[:200], labels[:200]):
        U = uos3.bases[k]
        np.testing.assert_allclose(U @ (U.T @ beta), beta, atol=1e-12)
    # uniform labels: chi-square with 2 dof, 0.999 quantile ~ 13.8
    counts = np.bincount(labels, minlength=3)
    chi2 = np.sum((counts - 1000) ** 2 / 1000)
    assert chi2 < 13.8


def test_sample_point_seeded(uos3):
    a, ka = oracle.sample_point(uos3, 11)
    b, kb = oracle.sample_point(uos3, 11)
    assert ka == kb and a.tobytes() == b.tobytes()


# --- analytic regularizer ----------------------------------------------------

def test_lemma_exact_when_eta_one(restriction):
    uos = oracle.sample_subspaces(10, 3, 1, seed=2)
    U = uos.bases[0]
    R = oracle.build_single_R(restriction, U, 1.0, 1)
    beta = U @ np.array([0.3, -1.0, 2.0])
    from neumann_networks.estimators import LinearRegularizer
    beta_hat, _ = neumann_estimate(restriction, LinearRegularizer(R),
                                   EstimatorConfig(Variant.NN, eta=1.0, blocks=1),
                                   linops.apply(restriction, beta))
    np.testing.assert_allclose(beta_hat, beta, atol=1e-10)


def test_oracle_estimate_recovers_subspace_point(restriction, uos3):
    U = uos3.bases[1]
    beta = U @ np.array([1.0, 2.0, -0.5])
    np.testing.assert_allclose(oracle.oracle_estimate(restriction, U, restriction.matrix @ beta),
                               beta, atol=1e-10)


def test_build_single_R_requires_orthonormal_rows():
    model = ForwardModel(2 * np.eye(5)[:3])
    U = oracle.sample_subspaces(5, 2, 1, seed=0).bases[0]
    with pytest.raises(ValueError):
        oracle.build_single_R(model, U, 0.5, 2)


def test_build_single_R_rank_deficient():
    model = linops.coordinate_restriction(6, 3)
    U = np.zeros((6, 2))
    U[3, 0] = U[4, 1] = 1.0  # entirely in the null space
    with pytest.raises(SingularSubspaceError):
        oracle.build_single_R(model, U, 0.5, 2)


def test_classify_region_labels(restriction, uos3):
    betas, labels = oracle.trial_points(uos3, 200, seed=3)
    np.testing.assert_array_equal(oracle.classify_region(restriction, uos3, betas), labels)


def test_classify_region_tie_takes_smallest_index():
    model = linops.coordinate_restriction(4, 4)
    U = np.eye(4)[:, :2]
    uos = UnionOfSubspaces((U, U))
    assert oracle.classify_region(model, uos, np.array([1.0, 1.0, 0, 0])) == 0


def test_transversality(restriction):
    assert not oracle.check_transversality(restriction, oracle.sample_subspaces(10, 3, 3, seed=0))
    model = build_forward_model(ModelSpec.gaussian_sensing(8, 10, seed=0, row_orthonormalize=True))
    assert oracle.check_transversality(model, oracle.sample_subspaces(10, 3, 3, seed=0))


# --- bound verification ------------------------------------------------------

@pytest.mark.parametrize("variant", ["NN", "GDN"])
@pytest.mark.parametrize("eta,B", [(0.5, 1), (0.3, 4), (0.9, 6)])
def test_bound_holds(restriction, uos3, variant, eta, B):
    report = oracle.verify_bound(restriction, uos3, eta, B, trials=200, seed=7, variant=variant)
    assert report.passed
    assert report.max_relative_excess <= 1e-8


def test_bound_is_tight_and_gdn_agrees(restriction, uos3):
    nn = oracle.verify_bound(restriction, uos3, 0.5, 3, trials=50, seed=1, variant="NN")
    gdn = oracle.verify_bound(restriction, uos3, 0.5, 3, trials=50, seed=1, variant="GDN")
    np.testing.assert_allclose(nn.errors, nn.bounds, rtol=1e-9)
    np.testing.assert_allclose(nn.errors, gdn.errors, rtol=1e-9)


def test_bound_report_serialization(restriction, uos3):
    report = oracle.verify_bound(restriction, uos3, 0.5, 2, trials=10, seed=0)
    data = json.loads(report.to_json())
    assert data["pass"] is True and data["trials"] == 10
    assert report.trials_csv().count("\n") == 11


def test_bound_eta_range(restriction, uos3):
    with pytest.raises(ValueError):
        oracle.verify_bound(restriction, uos3, 1.0, 2, trials=5, seed=0)
    single = oracle.sample_subspaces(10, 3, 1, seed=0)
    assert oracle.verify_bound(restriction, single, 1.0, 1, trials=20, seed=0).passed


def test_bound_rejects_pnn(restriction, uos3):
    with pytest.raises(ValueError):
        oracle.verify_bound(restriction, uos3, 0.5, 2, trials=5, seed=0, variant="PNN")


def test_sweep_bounds(restriction, uos3):
    reports = oracle.sweep_bounds(restriction, uos3, [0.3, 0.7], [1, 2], trials=20, seed=0)
    assert len(reports) == 4 and all(r.passed for r in reports)


def test_rstar_behaves_linearly_per_region(restriction, uos3):
    rstar = oracle.build_rstar(restriction, uos3, 0.5, 6)
    beta = uos3.bases[2] @ np.array([1.0, 0.2, -0.3])
    np.testing.assert_allclose(rstar(2 * beta), 2 * rstar(beta), rtol=1e-12)
    np.testing.assert_allclose(rstar(beta), rstar.matrices[2] @ beta, rtol=1e-14)
    batch = np.stack([beta, -beta])
    np.testing.assert_allclose(rstar(batch), [rstar(beta), rstar(-beta)], rtol=1e-14)


def test_gdn_with_rstar_matches_bound_at_single_point(restriction, uos3):
    eta, B = 0.7, 2
    rstar = oracle.build_rstar(restriction, uos3, eta, B)
    beta, _ = oracle.sample_point(uos3, 99)
    y = linops.apply(restriction, beta)
    out = gdn_estimate(restriction, rstar, EstimatorConfig(Variant.GDN, eta=eta, blocks=B), y)
    assert np.linalg.norm(out - beta) <= (1 - eta) ** (B + 1) * np.linalg.norm(y) * (1 + 1e-8)


def test_single_R_vanishes_for_invertible_model():
    model = linops.coordinate_restriction(6, 6)
    U = oracle.sample_subspaces(6, 2, 1, seed=0).bases[0]
    assert np.all(oracle.build_single_R(model, U, 0.5, 3) == 0)


@pytest.mark.parametrize("seed", range(5))
def test_single_R_maps_into_null_space(seed):
    model = build_forward_model(ModelSpec.gaussian_sensing(5, 10, seed=seed, row_orthonormalize=True))
    U = oracle.sample_subspaces(10, 3, 1, seed=seed).bases[0]
    R = oracle.build_single_R(model, U, 0.4, 4)
    assert np.max(np.abs(model.gram_matrix() @ R)) <= 1e-12


def test_rstar_rowspace_response(restriction, uos3):
    eta, B = 0.482, 6
    rstar = oracle.build_rstar(restriction, uos3, eta, B)
    G = restriction.gram_matrix()
    betas, _ = oracle.trial_points(uos3, 100, seed=2)
    out = rstar(betas @ G)
    expected = -oracle.c_const(eta, B) * betas @ (np.eye(10) - G)
    np.testing.assert_allclose(out, expected, atol=1e-8)
    assert np.max(np.abs(out @ G)) <= 1e-12


def test_classify_scale_invariant(restriction, uos3):
    beta = np.random.default_rng(0).standard_normal(10)
    k = oracle.classify_region(restriction, uos3, beta)
    assert oracle.classify_region(restriction, uos3, 2 * beta) == k
    assert oracle.classify_region(restriction, uos3, beta + 1e-13) == k


def test_oracle_estimate_zero_and_wrong_subspace(restriction, uos3):
    U0, U1 = uos3.bases[0], uos3.bases[1]
    np.testing.assert_array_equal(oracle.oracle_estimate(restriction, U0, np.zeros(5)), 0)
    beta = U1 @ np.array([1.0, -1.0, 0.5])
    wrong = oracle.oracle_estimate(restriction, U0, restriction.matrix @ beta)
    assert np.linalg.norm(wrong - beta) > 1e-3


def test_transversality_duplicates_and_small_m():
    model = build_forward_model(ModelSpec.gaussian_sensing(8, 10, seed=0, row_orthonormalize=True))
    U = oracle.sample_subspaces(10, 3, 1, seed=0).bases[0]
    assert not oracle.check_transversality(model, UnionOfSubspaces((U, U)))
    assert not oracle.check_transversality(linops.coordinate_restriction(10, 2),
                                           oracle.sample_subspaces(10, 3, 1, seed=0))


def test_transversality_generic_r2_m5():
    model = linops.coordinate_restriction(10, 5)
    passed = sum(oracle.check_transversality(model, oracle.sample_subspaces(10, 2, 3, seed=s))
                 for s in range(100))
    assert passed == 100


def test_rstar_single_subspace_equals_matrix(restriction):
    uos = oracle.sample_subspaces(10, 3, 1, seed=4)
    rstar = oracle.build_rstar(restriction, uos, 0.5, 2)
    R = oracle.build_single_R(restriction, uos.bases[0], 0.5, 2)
    x = np.random.default_rng(1).standard_normal((5, 10))
    np.testing.assert_allclose(rstar(x), x @ R.T, rtol=1e-14)
