import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import qp_oracle
from headdet.detect import (
    DEFAULT_BANDWIDTHS,
    DEFAULT_NUS,
    KDE_KERNELS,
    OCSVM_KERNELS,
    fit_detector,
    hyperparameter_sweep,
    kde_fit,
    kde_score,
    kernel_matrix,
    load_detector,
    ocsvm_decision,
    ocsvm_fit,
    ocsvm_score,
    save_detector,
    score,
    standardize_apply,
    standardize_fit,
)
from headdet.errors import ContractError, ConvergenceError, FormatError
from headdet.metrics import auc_score


def test_standardizer_population_std():
    s = standardize_fit([[0.0], [2.0]])
    assert s.mean[0] == 1.0 and s.std[0] == 1.0
    assert standardize_apply(s, [3.0])[0] == 2.0


def test_standardizer_maps_mean_to_zero(rng):
    F = rng.normal(size=(20, 4)) * 3 + 1
    s = standardize_fit(F)
    np.testing.assert_array_equal(standardize_apply(s, s.mean), np.zeros(4))


def test_constant_column_is_floored():
    with pytest.warns(UserWarning, match="constant"):
        s = standardize_fit([[1.0, 0.0], [1.0, 1.0], [1.0, 2.0]])
    assert s.std[0] == 1e-12 and s.floored.tolist() == [True, False]
    assert np.all(np.isfinite(standardize_apply(s, [[5.0, 1.0]])))


def test_kde_zero_distance_and_unit_distance():
    model = kde_fit([[0.0]], "gaussian", 1.0, standardize=False)
    assert kde_score(model, [0.0]) == -1.0
    assert kde_score(model, [1.0]) == pytest.approx(-np.exp(-0.5), rel=1e-15)


def test_uniform_kernel_outside_support():
    model = kde_fit([[0.0], [1.0]], "uniform", 0.5, standardize=False)
    assert kde_score(model, [5.0]) == 0.0
    assert kde_score(model, [0.1]) < 0.0


def test_kde_contract_errors():
    with pytest.raises(ContractError):
        kde_fit([[0.0]], "gaussian", 0.0)
    with pytest.raises(ValueError, match="epanechnikov"):
        kde_fit([[0.0]], "cosine", 1.0)


@pytest.mark.parametrize("kernel", ["gaussian", "exponential"])
@given(st.lists(st.integers(0, 100), min_size=2, max_size=8, unique=True))
def test_kde_score_increases_with_distance(kernel, steps):
    model = kde_fit([[0.0, 0.0]], kernel, 7.0, standardize=False)
    distances = [0.5 * k for k in sorted(steps)]
    scores = [kde_score(model, [d, 0.0]) for d in distances]
    assert all(a < b for a, b in zip(scores, scores[1:]))


@pytest.mark.parametrize("kernel", KDE_KERNELS)
def test_kde_permutation_and_duplication(rng, kernel):
    F = rng.normal(size=(30, 3))
    q = rng.normal(size=(10, 3))
    base = kde_score(kde_fit(F, kernel, 1.5), q)
    shuffled = kde_score(kde_fit(F[rng.permutation(30)], kernel, 1.5), q)
    doubled = kde_score(kde_fit(np.vstack([F, F]), kernel, 1.5), q)
    np.testing.assert_allclose(shuffled, base, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(doubled, base, rtol=1e-12, atol=1e-15)


def _full_alpha(model, X):
    # recover the dense dual vector from the support vectors
    alpha = np.zeros(X.shape[0])
    Z = standardize_apply(model.standardizer, X)
    for sv, a in zip(model.support_vectors, model.alpha):
        alpha[np.flatnonzero(np.all(Z == sv, axis=1))[0]] = a
    return alpha


def test_identical_points_share_dual_weight():
    for kernel in OCSVM_KERNELS:
        model = ocsvm_fit([[1.0, 2.0], [1.0, 2.0]], kernel, 0.5, standardize=False)
        np.testing.assert_allclose(model.alpha, [0.5, 0.5], atol=1e-12)


def test_four_points_matchqp_oracle():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.5], [2.0, 2.0]])
    model = ocsvm_fit(X, "rbf", 0.5, gamma=1.0, standardize=False, tol=1e-10)
    Q = kernel_matrix("rbf", X, X, 1.0)
    oracle = qp_oracle(Q, 1.0 / (0.5 * 4))
    np.testing.assert_allclose(_full_alpha(model, X), oracle, atol=1e-4)


def test_nu_one_forces_uniform_duals(rng):
    X = rng.normal(size=(12, 3))
    model = ocsvm_fit(X, "rbf", 1.0)
    np.testing.assert_allclose(model.alpha, np.full(12, 1 / 12), atol=1e-15)


@settings(max_examples=30)
@given(st.integers(2, 8), st.sampled_from(OCSVM_KERNELS), st.floats(0.15, 1.0), st.integers(0, 2**31 - 1))
def test_objective_matchesqp_oracle(n, kernel, nu, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    model = ocsvm_fit(X, kernel, nu, tol=1e-10)
    Z = standardize_apply(model.standardizer, X)
    Q = kernel_matrix(kernel, Z, Z, model.gamma, model.degree, model.coef0)
    alpha = _full_alpha(model, X)
    oracle = qp_oracle(Q, 1.0 / (nu * n))
    assert 0.5 * alpha @ Q @ alpha == pytest.approx(0.5 * oracle @ Q @ oracle, abs=1e-6)


@given(st.sampled_from(OCSVM_KERNELS), st.floats(0.05, 1.0), st.integers(0, 2**31 - 1))
def test_dual_feasibility(kernel, nu, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 3))
    model = ocsvm_fit(X, kernel, nu)
    cap = 1.0 / (nu * 40)
    assert np.all(model.alpha >= 0) and np.all(model.alpha <= cap * (1 + 1e-12))
    assert abs(model.alpha.sum() - 1.0) <= 1e-8
    assert model.alpha.size >= 1


@pytest.mark.parametrize("nu", [0.1, 0.3, 0.5, 0.7, 0.9])
def test_nu_property(nu):
    rng = np.random.default_rng(int(nu * 10))
    X = rng.normal(size=(200, 4))
    model = ocsvm_fit(X, "rbf", nu)
    outliers = float(np.mean(ocsvm_score(model, X) > 0))
    support = model.alpha.size / 200
    assert outliers <= nu + 0.05
    assert support >= nu - 0.05


def test_far_query_scores_rho(rng):
    model = ocsvm_fit(rng.normal(size=(30, 2)), "rbf", 0.3)
    assert ocsvm_score(model, [1e3, 1e3]) == pytest.approx(model.rho, abs=1e-12)


def test_margin_support_vector_scores_zero(rng):
    X = rng.normal(size=(50, 2))
    model = ocsvm_fit(X, "rbf", 0.4, tol=1e-8)
    cap = 1.0 / (0.4 * 50)
    free = (model.alpha > 1e-10) & (model.alpha < cap - 1e-10)
    assert free.any()
    K = kernel_matrix("rbf", model.support_vectors[free], model.support_vectors, model.gamma)
    np.testing.assert_allclose(K @ model.alpha - model.rho, 0.0, atol=1e-6)


def test_cluster_centre_scores_below_outlier(rng):
    X = rng.normal(size=(100, 2)) * 0.2
    for kind, param in (("ocsvm", 0.2), ("kde", 1.0)):
        det = fit_detector(kind, X, "rbf" if kind == "ocsvm" else "gaussian", param)
        assert score(det, [0.0, 0.0]) < score(det, [3.0, 3.0])


def test_solver_reports_nonconvergence(rng):
    with pytest.raises(ConvergenceError) as info:
        ocsvm_fit(rng.normal(size=(80, 3)), "rbf", 0.2, max_iter=2)
    assert info.value.iterations == 2


def test_ocsvm_contract_errors(rng):
    X = rng.normal(size=(10, 2))
    with pytest.raises(ContractError):
        ocsvm_fit(X, "rbf", 0.0)
    with pytest.raises(ContractError):
        ocsvm_fit(X, "rbf", 0.5, gamma=-1.0)
    with pytest.raises(ValueError, match="rbf"):
        ocsvm_fit(X, "laplace", 0.5)


def test_decision_is_negated_score(rng):
    X = rng.normal(size=(30, 2))
    model = ocsvm_fit(X, "rbf", 0.5)
    np.testing.assert_array_equal(ocsvm_decision(model, X), -ocsvm_score(model, X))


@pytest.mark.parametrize("kind,kernel", [("kde", "gaussian"), ("ocsvm", "rbf")])
def test_affine_rescaling_leaves_ranking(rng, kind, kernel):
    F = rng.normal(size=(60, 3))
    q = rng.normal(size=(25, 3)) * 1.5
    a, b = np.array([3.0, 0.2, 40.0]), np.array([-5.0, 1.0, 7.0])
    base = score(fit_detector(kind, F, kernel, 0.5), q)
    moved = score(fit_detector(kind, F * a + b, kernel, 0.5), q * a + b)
    np.testing.assert_allclose(moved, base, rtol=1e-9, atol=1e-12)
    np.testing.assert_array_equal(np.argsort(moved, kind="stable"), np.argsort(base, kind="stable"))


def _sweep_data(rng):
    train = rng.normal(size=(80, 3))
    benign = rng.normal(size=(30, 3))
    adv = {"a": rng.normal(size=(20, 3)) + 1.5, "b": rng.normal(size=(25, 3)) * 2}
    return train, benign, adv


def test_kde_sweep_covers_grid(rng):
    table = hyperparameter_sweep(*_sweep_data(rng), "kde")
    assert len(table.rows) == len(KDE_KERNELS) * len(DEFAULT_BANDWIDTHS) == 125
    assert sum(r.best for r in table.rows) == 1


def test_ocsvm_sweep_covers_grid(rng):
    table = hyperparameter_sweep(*_sweep_data(rng), "ocsvm")
    assert len(table.rows) == len(OCSVM_KERNELS) * len(DEFAULT_NUS) == 36


def test_single_config_sweep_equals_direct_evaluation(rng):
    train, benign, adv = _sweep_data(rng)
    table = hyperparameter_sweep(train, benign, adv, "kde", {"epanechnikov": (2.0,)})
    det = kde_fit(train, "epanechnikov", 2.0)
    sb = kde_score(det, benign)
    row = table.rows[0]
    assert len(table.rows) == 1
    assert row.auc_per_attack["a"] == auc_score(sb, kde_score(det, adv["a"]))
    pooled = np.concatenate([kde_score(det, adv["a"]), kde_score(det, adv["b"])])
    assert row.auc_overall == auc_score(sb, pooled)


def test_sweep_csv(tmp_path, rng):
    table = hyperparameter_sweep(*_sweep_data(rng), "kde", {"gaussian": (1.0, 2.0)})
    table.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "kernel,hyperparameter,auc_overall,auc_a,auc_b,best,note"
    assert len(lines) == 3


def test_empty_grid_rejected(rng):
    with pytest.raises(ContractError):
        hyperparameter_sweep(*_sweep_data(rng), "kde", {})


@pytest.mark.parametrize("kind,kernel,param", [("kde", "linear", 2.0), ("ocsvm", "poly", 0.3), ("ocsvm", "rbf", 0.5)])
def test_detector_round_trip(tmp_path, rng, kind, kernel, param):
    F = rng.normal(size=(40, 4))
    det = fit_detector(kind, F, kernel, param)
    save_detector(det, tmp_path / "d.bin")
    loaded = load_detector(tmp_path / "d.bin")
    q = rng.normal(size=(10, 4))
    np.testing.assert_array_equal(score(loaded, q), score(det, q))


def test_detector_file_errors(tmp_path, rng):
    path = tmp_path / "d.bin"
    save_detector(fit_detector("kde", rng.normal(size=(5, 2)), "gaussian", 1.0), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        load_detector(path)
    path.write_bytes(b"HEADXXX1" + raw[8:])
    with pytest.raises(FormatError, match="magic"):
        load_detector(path)
