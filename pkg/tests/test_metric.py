import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cdml import tensor as T
from cdml.metric import (
    MetricLayer,
    batch_distance,
    constraint_gradient,
    constraint_penalty,
    distance,
    mahalanobis,
    metric_matrix,
    pair_loss,
    pairwise_distances,
    spectrum,
    write_spectrum_csv,
)
from cdml.tensor import DimensionError, Tensor, numeric_gradient, relative_error


def layer(W, lam=1e-2):
    return MetricLayer(Tensor(np.asarray(W, dtype=float)), lam)


def test_identity_w_is_euclidean():
    x1 = np.zeros(64)
    x1[0] = 1.0
    x2 = np.zeros(64)
    assert distance(x1, x2, MetricLayer.identity()) == pytest.approx(1.0)
    r = np.random.default_rng(0)
    a, b = r.normal(size=64), r.normal(size=64)
    assert distance(a, b, MetricLayer.identity()) == pytest.approx(np.linalg.norm(a - b), abs=1e-12)


def test_self_distance_zero():
    x = np.random.default_rng(1).normal(size=64)
    assert distance(x, x, MetricLayer.identity()) == 0.0


def test_two_dim_hand_value():
    L = layer([[2.0, 0.0], [0.0, 1.0]])
    assert distance(np.array([1.0, 1.0]), np.zeros(2), L) == pytest.approx(np.sqrt(5.0), abs=1e-15)
    assert mahalanobis([1.0, 1.0], [0.0, 0.0], metric_matrix(L)) == pytest.approx(np.sqrt(5.0), abs=1e-15)


def test_distance_dimension_error():
    with pytest.raises(DimensionError):
        distance(np.zeros(3), np.zeros(64), MetricLayer.identity())


def test_bias_is_zero():
    assert np.array_equal(MetricLayer.identity().b, np.zeros(64))


def test_pair_loss_values():
    assert pair_loss(0.4, 0.4) == 0.0
    assert pair_loss(0.5, 1.2) == pytest.approx(-0.7)
    assert pair_loss(0.5, 1.2, margin=1.0) == pytest.approx(0.3)
    assert pair_loss(0.1, 1.2, margin=1.0) == 0.0


def test_penalty_examples():
    assert constraint_penalty(np.eye(3), 5.0) == 0.0
    assert constraint_penalty(np.zeros((2, 2)), 1e-2) == pytest.approx(0.01)
    assert constraint_penalty(np.diag([np.sqrt(2.0), 1.0]), 1.0) == pytest.approx(0.5)


def test_constraint_gradient_examples():
    assert np.array_equal(constraint_gradient(np.eye(4), 3.0), np.zeros((4, 4)))
    # exact derivative of (lam/2)||WW^T - I||^2 carries a factor 2:
    # 2 * diag(3, 0) @ diag(2, 1) = diag(12, 0)
    np.testing.assert_allclose(constraint_gradient(np.diag([2.0, 1.0]), 1.0), np.diag([12.0, 0.0]))


def penalty_fd(W, lam, eps=1e-6):
    g = np.zeros_like(W)
    for idx in np.ndindex(W.shape):
        Wp, Wm = W.copy(), W.copy()
        Wp[idx] += eps
        Wm[idx] -= eps
        g[idx] = (constraint_penalty(Wp, lam) - constraint_penalty(Wm, lam)) / (2 * eps)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_constraint_gradient_vs_finite_differences(seed):
    r = np.random.default_rng(seed)
    W = r.normal(size=(6, 6))
    lam = 10 ** r.uniform(-2, 1)
    assert relative_error(constraint_gradient(W, lam), penalty_fd(W, lam)) <= 1e-6


def test_pair_loss_gradient_through_w_and_features():
    r = np.random.default_rng(3)
    a, p, n = (Tensor(r.normal(size=(2, 8)), requires_grad=True) for _ in range(3))
    L = layer(r.normal(size=(8, 8)))

    def loss():
        return T.mean(T.sub(batch_distance(a, p, L), batch_distance(a, n, L)))

    assert T.parameters_grad_check(loss, [L.W, a, p, n]) <= 1e-4


def test_batch_distance_zero_subgradient():
    x = Tensor(np.ones((1, 4)), requires_grad=True)
    L = MetricLayer.identity(4)
    d = batch_distance(x, Tensor(np.ones((1, 4))), L)
    T.total(d).backward()
    assert d.data[0] == 0.0
    assert np.array_equal(x.grad, np.zeros((1, 4)))
    assert np.array_equal(L.W.grad, np.zeros((4, 4)))


def test_pairwise_matches_scalar_distance():
    r = np.random.default_rng(4)
    L = layer(r.normal(size=(5, 5)))
    A, B = r.normal(size=(3, 5)), r.normal(size=(4, 5))
    D = pairwise_distances(A, B, L)
    for i in range(3):
        for j in range(4):
            assert D[i, j] == pytest.approx(distance(A[i], B[j], L), abs=1e-12)


def test_spectrum_examples(tmp_path):
    assert np.allclose(spectrum(MetricLayer.identity(5)), 1.0)
    vals = spectrum(layer(np.diag([2.0, 1.0])))
    np.testing.assert_allclose(vals, [4.0, 1.0], atol=1e-10)
    W = np.random.default_rng(5).normal(size=(6, 6))
    vals = spectrum(layer(W))
    np.testing.assert_allclose(vals, np.linalg.svd(W, compute_uv=False) ** 2, rtol=1e-9)
    assert np.all(vals >= 0) and np.all(np.diff(vals) <= 0)
    path = tmp_path / "s.csv"
    write_spectrum_csv(vals, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["index", "singular_value"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 7))
    np.testing.assert_array_equal([float(r[1]) for r in rows[1:]], vals)


def test_metric_matrix_symmetric_psd():
    r = np.random.default_rng(6)
    for _ in range(20):
        M = metric_matrix(layer(r.normal(size=(8, 8))))
        assert np.array_equal(M, M.T)
        assert np.linalg.eigvalsh(M).min() >= -1e-8


def test_lambda_must_be_non_negative():
    with pytest.raises(ValueError):
        MetricLayer.identity(4, lam=-1.0)


vecs = hnp.arrays(np.float64, 6, elements=st.floats(-3, 3, allow_nan=False, width=64))


@settings(max_examples=200, deadline=None)
@given(a=vecs, b=vecs, seed=st.integers(0, 10_000))
def test_property_symmetry_and_forms_agree(a, b, seed):
    L = layer(np.random.default_rng(seed).normal(size=(6, 6)))
    d = distance(a, b, L)
    assert d == distance(b, a, L)
    assert d >= 0.0
    assert distance(a, a, L) == 0.0
    assert abs(mahalanobis(a, b, metric_matrix(L)) - d) <= 1e-9 * max(1.0, d)
