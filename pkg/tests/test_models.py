import math

import numpy as np
import pytest
from toys import dense_split, mf_split

from recipro.datamodel import Dataset, DenseSchema, Example, SparseSchema
from recipro.models import (
    BatchData,
    FactorCounts,
    ModelKind,
    ModelSpec,
    Parameters,
    batch_losses,
    dataset_rmse,
    dense_grad,
    grad_block,
    init_params,
    loss_example,
    predict,
    train_index,
)

FD_STEP = 1e-5


def _dense_params(weights, bias):
    return Parameters(np.append(np.asarray(weights, dtype=float), bias), ModelKind.LINEAR, (len(weights),))


def _mf_params(P, Q):
    P, Q = np.asarray(P, dtype=float), np.asarray(Q, dtype=float)
    return Parameters(np.concatenate([P.ravel(), Q.ravel()]), ModelKind.MF, (P.shape[0], Q.shape[0], P.shape[1]))


# --- initialization ---------------------------------------------------------

def test_linear_init_predicts_mean_label():
    d = Dataset.from_arrays([0, 1], np.zeros((2, 3)), [2, 4], DenseSchema(3))
    w = init_params(ModelSpec("linear"), d.schema, d, 0)
    assert w.bias == 3.0
    assert np.all(w.weights == 0)


def test_logistic_init_balanced_labels():
    d = Dataset.from_arrays([0, 1], np.zeros((2, 2)), [0, 1], DenseSchema(2))
    assert init_params(ModelSpec("logistic"), d.schema, d, 0).bias == 0.0


def test_logistic_init_single_class_warns():
    d = Dataset.from_arrays([0, 1], np.zeros((2, 2)), [1, 1], DenseSchema(2))
    with pytest.warns(RuntimeWarning, match="single class"):
        w = init_params(ModelSpec("logistic"), d.schema, d, 0)
    assert math.isfinite(w.bias) and w.bias > 10


def test_mf_init_deterministic():
    split = mf_split(np.random.default_rng(0))
    spec = ModelSpec("mf", embedding_dim=16)
    a = init_params(spec, split.train.schema, split.train, 42)
    b = init_params(spec, split.train.schema, split.train, 42)
    np.testing.assert_array_equal(a.flat, b.flat)
    assert a.P.shape == (4, 16)


# --- hand-computed losses, predictions and gradients -------------------------

def test_mf_loss_examples():
    spec0 = ModelSpec("mf", embedding_dim=2, reg=0.0)
    w = _mf_params([[0, 0]], [[0, 0]])
    assert loss_example(spec0, w, Example(0, (0, 0), 2.0)) == 2.0
    spec1 = ModelSpec("mf", embedding_dim=2, reg=1.0)
    w = _mf_params([[1, 0]], [[1, 0]])
    counts = FactorCounts(np.array([1]), np.array([1]))
    assert loss_example(spec1, w, Example(0, (0, 0), 1.0), counts) == 1.0


def test_linear_loss_zero_at_label():
    assert loss_example(ModelSpec("linear"), _dense_params([0, 0], 3.0), Example(0, np.ones(2), 3.0)) == 0.0


def test_linear_gradient_by_hand():
    g = dense_grad(ModelSpec("linear"), _dense_params([0, 0], 0.0), Example(0, np.array([1.0, 0.0]), 1.0))
    np.testing.assert_array_equal(g, [-1, 0, -1])


def test_mf_gradient_zero_residual():
    w = _mf_params([[1, 0]], [[0, 1]])
    g = dense_grad(ModelSpec("mf", embedding_dim=2, reg=0.0), w, Example(0, (0, 0), 0.0))
    np.testing.assert_array_equal(g, 0)


def test_predictions():
    assert predict(ModelSpec("mf", embedding_dim=2), _mf_params([[1, 2]], [[3, 4]]), (0, 0)) == 11.0
    wl = Parameters(np.zeros(3), ModelKind.LOGISTIC, (2,))
    assert predict(ModelSpec("logistic"), wl, np.array([5.0, -1.0])) == 0.5
    for x in (np.zeros(2), np.array([3.0, -7.0])):
        assert predict(ModelSpec("linear"), _dense_params([0, 0], 2.5), x) == 2.5


def test_rmse_examples():
    d = Dataset.from_arrays([0, 1], np.zeros((2, 1)), [2, 4], DenseSchema(1))
    assert dataset_rmse(ModelSpec("linear"), _dense_params([0], 3.0), d) == 1.0
    d2 = Dataset.from_arrays([0, 1], np.zeros((2, 1)), [3, 3], DenseSchema(1))
    assert dataset_rmse(ModelSpec("linear"), _dense_params([0], 3.0), d2) == 0.0


def test_rmse_rejects_logistic():
    d = Dataset.from_arrays([0], np.zeros((1, 1)), [1], DenseSchema(1))
    with pytest.raises(ValueError):
        dataset_rmse(ModelSpec("logistic"), Parameters(np.zeros(2), ModelKind.LOGISTIC, (1,)), d)


def test_logistic_loss_is_stable_for_large_scores():
    w = Parameters(np.array([1000.0, 0.0]), ModelKind.LOGISTIC, (1,))
    z = Example(0, np.array([1.0]), 0.0)
    assert loss_example(ModelSpec("logistic"), w, z) == pytest.approx(1000.0)


# --- finite differences over randomized parameters/examples -----------------

def _fd_grad(spec, w, z, counts):
    g = np.zeros(w.p)
    for k in range(w.p):
        plus, minus = w.flat.copy(), w.flat.copy()
        plus[k] += FD_STEP
        minus[k] -= FD_STEP
        g[k] = (loss_example(spec, w.like(plus), z, counts) - loss_example(spec, w.like(minus), z, counts)) \
            / (2 * FD_STEP)
    return g


def _random_case(rng, kind):
    if kind == "mf":
        spec = ModelSpec("mf", embedding_dim=3, reg=float(rng.uniform(0, 2)))
        split = mf_split(rng)
        w = init_params(spec, split.train.schema, split.train, int(rng.integers(1 << 30)))
        w = w.like(rng.normal(size=w.p))
        return spec, w, split.train, train_index(spec, split.train)
    spec = ModelSpec(kind)
    split = dense_split(rng, ModelKind(kind))
    w = Parameters(rng.normal(size=split.train.schema.dim + 1), spec.kind, (split.train.schema.dim,))
    return spec, w, split.train, None


@pytest.mark.parametrize("kind", ["linear", "logistic", "mf"])
def test_gradient_matches_central_differences(kind):
    rng = np.random.default_rng({"linear": 1, "logistic": 2, "mf": 3}[kind])
    worst = 0.0
    for _ in range(20):
        spec, w, data, counts = _random_case(rng, kind)
        for z in data.examples[:5]:
            analytic = dense_grad(spec, w, z, counts)
            numeric = _fd_grad(spec, w, z, counts)
            scale = max(np.max(np.abs(analytic)), 1e-8)
            worst = max(worst, np.max(np.abs(analytic - numeric)) / scale)
    assert worst < 1e-4


@pytest.mark.parametrize("kind", ["linear", "logistic", "mf"])
def test_batched_route_matches_per_example_route(kind):
    rng = np.random.default_rng(10)
    for _ in range(10):
        spec, w, data, counts = _random_case(rng, kind)
        batch = BatchData(data, rng.integers(0, len(data), size=7))
        block, losses = grad_block(spec, w, batch, counts)
        rows = np.array([dense_grad(spec, w, data[p], counts) for p in batch.positions])
        np.testing.assert_allclose(block.to_dense(), rows, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(block.total(batch.summers(w)), rows.sum(axis=0), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(block.sq_norms(), (rows * rows).sum(axis=1), rtol=1e-12, atol=1e-12)
        v = rng.normal(size=w.p)
        np.testing.assert_allclose(block.dot(v), rows @ v, rtol=1e-10, atol=1e-12)
        expect = [loss_example(spec, w, data[p], counts) for p in batch.positions]
        np.testing.assert_allclose(losses, expect, rtol=1e-12)
        np.testing.assert_allclose(batch_losses(spec, w, batch, counts), expect, rtol=1e-12)


def test_incompatible_schema_rejected():
    d = Dataset.from_arrays([0], [[0, 0]], [1.0], SparseSchema(1, 1))
    with pytest.raises(ValueError, match="incompatible"):
        init_params(ModelSpec("linear"), d.schema, d, 0)
