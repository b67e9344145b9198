import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import dense_model, random_model
from headdet.curvature import (
    curvature_benchmark,
    fd_hessian,
    ggn,
    head_feature,
    hessian_feature,
    load_features_bin,
    load_features_csv,
    modulus,
    modulus_l1,
    save_features_bin,
    save_features_csv,
    softmax_ce_hessian,
    write_benchmark_csv,
)
from headdet.errors import FormatError
from headdet.metrics import auc_score
from headdet.smallnet import NetworkSpec, forward, init_model, loss_ce
from headdet.spectral import fit_basis


def test_ce_hessian_two_classes():
    np.testing.assert_allclose(softmax_ce_hessian([0.0, 0.0]), [[0.25, -0.25], [-0.25, 0.25]], atol=1e-16)


def test_ce_hessian_three_classes():
    H = softmax_ce_hessian([0.0, 0.0, 0.0])
    np.testing.assert_allclose(np.diag(H), np.full(3, 2 / 9), atol=1e-16)
    np.testing.assert_allclose(H[~np.eye(3, dtype=bool)], np.full(6, -1 / 9), atol=1e-16)


def _fd_logit_hessian(z, label, h=1e-4):
    n = z.size
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            ei, ej = np.eye(n)[i] * h, np.eye(n)[j] * h
            H[i, j] = (
                loss_ce(z + ei + ej, label) - loss_ce(z + ei - ej, label)
                - loss_ce(z - ei + ej, label) + loss_ce(z - ei - ej, label)
            ) / (4 * h * h)
    return H


@given(st.integers(0, 2**31 - 1))
def test_ce_hessian_matches_second_differences_for_every_label(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=4) * 2
    H = softmax_ce_hessian(z)
    for label in range(4):
        np.testing.assert_allclose(_fd_logit_hessian(z, label), H, atol=1e-5)


def test_ggn_of_identity_layer():
    model = dense_model([np.eye(2)])
    G = ggn(model, forward(model, [0.0, 0.0]), 0)
    np.testing.assert_allclose(G.entries, [[0.25, -0.25], [-0.25, 0.25]], atol=1e-16)


def test_ggn_vanishes_when_all_units_are_off():
    model = dense_model([np.eye(3), np.ones((2, 3))], [-np.ones(3), np.zeros(2)])
    G = ggn(model, forward(model, [0.2, 0.5, 0.1]), 0)
    np.testing.assert_array_equal(G.entries, np.zeros((3, 3)))


def _kink_free_input(model, rng, margin=1e-3, tries=1000):
    for _ in range(tries):
        x = rng.normal(size=model.spec.n_inputs)
        h, ok = x, True
        for w, b in zip(model.weights[:-1], model.biases[:-1]):
            z = h @ w.T + b
            ok &= bool(np.min(np.abs(z)) >= margin)
            h = np.maximum(z, 0.0)
        if ok:
            return x
    raise RuntimeError("no kink-free input found")


@given(st.integers(0, 2**31 - 1))
def test_ggn_equals_fd_hessian_away_from_kinks(seed):
    rng = np.random.default_rng(seed)
    dims = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 4)))] + [int(rng.integers(2, 5))]
    model = random_model(rng, dims)
    x = _kink_free_input(model, rng)
    trace = forward(model, x)
    for layer in range(model.spec.n_relu + 1):
        G = ggn(model, trace, layer).entries
        H = fd_hessian(model, x, layer, 0)
        err = np.linalg.norm(G - H) / max(np.linalg.norm(H), 1e-12)
        assert err <= 1e-4


@given(st.integers(0, 2**31 - 1))
def test_ggn_is_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    model = random_model(rng, (int(rng.integers(2, 17)), 12, 5), scale=2.0)
    trace = forward(model, rng.normal(size=model.spec.n_inputs))
    G = ggn(model, trace, 0).entries
    assert np.max(np.abs(G - G.T)) <= 1e-10
    assert np.linalg.eigvalsh(G).min() >= -1e-8


def test_feature_does_not_depend_on_labels(rng):
    # no label argument exists; the logit curvature ignores the label entirely
    model = random_model(rng, (6, 8, 4))
    x = rng.normal(size=6)
    first = hessian_feature(model, x).moduli
    np.testing.assert_array_equal(first, hessian_feature(model, x).moduli)
    H = fd_hessian(model, x, 0, 0)
    for label in range(1, 4):
        np.testing.assert_allclose(fd_hessian(model, x, 0, label), H, atol=1e-6)


def test_modulus_examples(rng):
    assert modulus_l1(np.array([[0.25, -0.25], [-0.25, 0.25]])) == 1.0
    assert modulus_l1(np.zeros((3, 3))) == 0.0
    M = rng.normal(size=(5, 5))
    total = 0.0
    for i in range(5):
        for j in range(5):
            total += abs(M[i, j])
    assert modulus_l1(M) == pytest.approx(total, rel=1e-15)


@given(st.integers(-8, 8), st.sampled_from([-1.0, 1.0]), st.integers(0, 2**31 - 1))
def test_modulus_scale_covariance_exact(exponent, sign, seed):
    M = np.random.default_rng(seed).normal(size=(4, 4))
    # powers of two scale every entry without rounding
    alpha = sign * 2.0**exponent
    assert modulus_l1(alpha * M) == abs(alpha) * modulus_l1(M)


@given(st.floats(-1e3, 1e3, allow_subnormal=False), st.integers(0, 2**31 - 1))
def test_modulus_scale_covariance_general(alpha, seed):
    M = np.random.default_rng(seed).normal(size=(4, 4))
    assert modulus_l1(alpha * M) == pytest.approx(abs(alpha) * modulus_l1(M), rel=1e-14, abs=1e-300)


def test_modulus_l2_and_unknown_norm(rng):
    M = rng.normal(size=(3, 3))
    assert modulus(M, "l2") == pytest.approx(np.linalg.norm(M), rel=1e-15)
    with pytest.raises(ValueError):
        modulus(M, "max")


def test_no_hidden_layers_gives_one_modulus(rng):
    model = random_model(rng, (5, 3))
    assert hessian_feature(model, rng.normal(size=5)).moduli.shape == (1,)


def test_zero_weights_give_zero_moduli():
    model = init_model(NetworkSpec((4, 6, 3)))
    model = dense_model([0 * w for w in model.weights])
    np.testing.assert_array_equal(hessian_feature(model, np.ones(4)).moduli, [0.0, 0.0])


def test_feature_matches_recomputed_sandwich(rng):
    model = random_model(rng, (6, 9, 7, 4))
    x = rng.normal(size=6)
    trace = forward(model, x)
    z = trace.logits
    Hz = np.diag(np.exp(z) / np.exp(z).sum()) - np.outer(np.exp(z), np.exp(z)) / np.exp(z).sum() ** 2
    expected = []
    for layer in range(3):
        J = model.weights[2]
        for k in range(2, layer, -1):
            J = (J * trace.relu_active_masks[k - 1]) @ model.weights[k - 1]
        expected.append(np.abs(J.T @ Hz @ J).sum())
    np.testing.assert_allclose(hessian_feature(model, x).moduli, expected, rtol=1e-12)


def test_batch_feature_matches_rows(rng):
    model = random_model(rng, (6, 9, 4))
    x = rng.normal(size=(300, 6))
    batch = hessian_feature(model, x, threads=2).moduli
    single = np.stack([hessian_feature(model, row).moduli for row in x])
    np.testing.assert_allclose(batch, single, rtol=1e-13)
    assert hessian_feature(model, np.zeros((0, 6))).moduli.shape == (0, 2)


def test_head_feature_lengths(rng):
    dims = (40,) + (10,) * 12 + (3,)
    model = random_model(rng, dims)
    basis = fit_basis(rng.normal(size=(50, 40)))
    f = head_feature(rng.normal(size=40), basis, 32, model)
    assert f.values.shape == (45,)
    assert f.lscf.shape == (32,) and f.hessian.shape == (13,)

    tiny = random_model(rng, (3, 2))
    f = head_feature(np.ones(3), fit_basis(rng.normal(size=(5, 3))), 1, tiny)
    assert f.values.shape == (2,)


def test_fd_on_logit_layer_reproduces_closed_form(rng):
    # one dense layer with W = I makes the input the logit vector
    model = dense_model([np.eye(4)], [np.zeros(4)])
    z = rng.normal(size=4)
    np.testing.assert_allclose(fd_hessian(model, z, 0, 2), softmax_ce_hessian(z), atol=1e-5)


def test_fd_step_robustness(rng):
    model = random_model(rng, (5, 7, 3))
    x = _kink_free_input(model, rng, margin=1e-2)
    np.testing.assert_allclose(fd_hessian(model, x, 0, 1, 1e-3), fd_hessian(model, x, 0, 1, 1e-4), atol=1e-4)


def test_fd_zero_weights():
    model = dense_model([np.zeros((4, 3)), np.zeros((2, 4))])
    np.testing.assert_array_equal(fd_hessian(model, np.ones(3), 0, 0), np.zeros((3, 3)))


def test_fd_rejects_bad_step(rng):
    with pytest.raises(ValueError):
        fd_hessian(random_model(rng, (3, 2)), np.zeros(3), 0, 0, h=0.0)


def test_benchmark_table_shapes(tmp_path):
    assert curvature_benchmark([8], repeats=0) == []
    rows = curvature_benchmark([8], repeats=1, hidden=(4,))
    assert len(rows) == 1 and rows[0].dim == 8
    write_benchmark_csv(rows, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "dim,ggn_seconds,fd_seconds,ratio"
    with pytest.raises(ValueError):
        curvature_benchmark([], repeats=1)


def test_feature_files_round_trip(tmp_path, rng):
    F = rng.normal(size=(6, 5))
    save_features_bin(tmp_path / "f.bin", F)
    np.testing.assert_array_equal(load_features_bin(tmp_path / "f.bin"), F)
    save_features_csv(tmp_path / "f.csv", F, 3)
    assert (tmp_path / "f.csv").read_text().splitlines()[0] == "sample_id,lscf_0,lscf_1,lscf_2,hf_0,hf_1"
    G, d = load_features_csv(tmp_path / "f.csv")
    assert d == 3
    np.testing.assert_array_equal(G, F)


def test_feature_file_errors(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"HEADFEA1" + b"\x02\x00\x00\x00\x02\x00\x00\x00" + b"\x00" * 8)
    with pytest.raises(FormatError):
        load_features_bin(tmp_path / "bad.bin")
    (tmp_path / "bad.csv").write_text("id,lscf_0\n0,1\n")
    with pytest.raises(FormatError):
        load_features_csv(tmp_path / "bad.csv")


@pytest.mark.slow
def test_input_curvature_separates_fgsm(reference_run):
    cfg, report = reference_run
    st_ = report.state
    d = cfg.features.lscf_dim
    assert auc_score(st_.features["benign"][:, d], st_.features["fgsm"][:, d]) >= 0.7
