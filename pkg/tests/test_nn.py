import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gialab.nn import (
    Batch,
    CrossEntropy,
    DenseModel,
    GatingNotFixedError,
    GradientReport,
    Layer,
    NumericError,
    ShapeError,
    SquaredError,
    batch_gradient,
    batch_loss,
    downstream_gates,
    forward,
    forward_rows,
    loss_from_name,
    path_gain,
    per_sample_output_grad,
    propagate_box,
)
from gialab.selftest import finite_difference_error, kink_margin, random_model


def chain_eval(weights, biases, x):
    """Independent forward pass, one sample at a time with explicit loops."""
    h = list(x)
    for k, (w, b) in enumerate(zip(weights, biases)):
        nxt = []
        for i in range(w.shape[0]):
            a = b[i] + sum(w[i, j] * h[j] for j in range(len(h)))
            nxt.append(a if k == len(weights) - 1 else max(a, 0.0))
        h = nxt
    return np.array(h)


def test_forward_matches_chain_evaluator(rng):
    model = random_model(rng, 5, (7, 4), out=3)
    x = rng.uniform(-1, 1, (6, 5))
    out, pre, post = forward_rows(model, x)
    ws = [l.weight for l in model.layers]
    bs = [l.bias for l in model.layers]
    for i in range(6):
        np.testing.assert_allclose(out[i], chain_eval(ws, bs, x[i]), rtol=0, atol=1e-13)
    assert len(pre) == 3 and len(post) == 4
    z, _, _ = forward(model, x[0])
    np.testing.assert_allclose(z, out[0], rtol=1e-14, atol=1e-15)


def test_relu_at_exact_zero_is_inactive():
    model = DenseModel.from_arrays([np.array([[1.0]]), np.array([[1.0]])], [np.array([-1.0]), np.array([0.0])])
    out, pre, _ = forward_rows(model, np.array([[1.0]]))
    assert pre[0][0, 0] == 0.0 and out[0, 0] == 0.0
    g = batch_gradient(model, Batch([[1.0]], [5.0]), SquaredError())
    assert g.attack_weight[0, 0] == 0.0 and g.attack_bias[0] == 0.0


def test_model_validation():
    with pytest.raises(ShapeError):
        DenseModel(())
    with pytest.raises(ShapeError):
        DenseModel.from_arrays([np.ones((3, 2)), np.ones((1, 4))], [np.ones(3), np.ones(1)])
    with pytest.raises(ShapeError):
        DenseModel((Layer(np.ones((1, 2)), np.ones(1), True),))
    model = DenseModel.from_arrays([np.ones((3, 2)), np.ones((1, 3))], [np.ones(3), np.ones(1)])
    with pytest.raises(ShapeError):
        forward_rows(model, np.ones((2, 5)))
    with pytest.raises(ShapeError):
        model.with_params(model.params()[:-1])
    with pytest.raises(ValueError):
        model.layers[0].weight[0, 0] = 5.0


def test_batch_validation():
    with pytest.raises(ShapeError):
        Batch(np.ones((3, 2)), np.ones(2))
    with pytest.raises(ValueError):
        Batch(np.array([[np.nan, 1.0]]), [0.0])
    with pytest.raises(ValueError):
        Batch(np.ones((2, 2)), [0, 3], n_classes=3)
    b = Batch(np.arange(6.0).reshape(3, 2), [0, 1, 2], n_classes=3)
    assert b.targets.dtype == np.int64 and b.subset([2]).size == 1


@pytest.mark.parametrize("loss", [SquaredError(), CrossEntropy()])
def test_gradient_matches_finite_differences(rng, loss):
    out = 1 if isinstance(loss, SquaredError) else 3
    for _ in range(3):
        model = random_model(rng, 4, (5, 3), out=out)
        x = rng.uniform(-1, 1, (5, 4))
        if kink_margin(model, x) < 1e-2:
            continue
        y = rng.normal(size=5) if out == 1 else rng.integers(0, 3, 5)
        batch = Batch(x, y, None if out == 1 else 3)
        assert finite_difference_error(model, batch, loss) < 1e-6


def test_batch_gradient_is_mean_of_per_sample(rng):
    model = random_model(rng, 4, (6,), out=1)
    x = rng.uniform(0, 1, (7, 4))
    y = rng.normal(size=7)
    full = batch_gradient(model, Batch(x, y), SquaredError())
    parts = [batch_gradient(model, Batch(x[i : i + 1], y[i : i + 1]), SquaredError()) for i in range(7)]
    for k, p in enumerate(full.params()):
        np.testing.assert_allclose(p, np.mean([q.params()[k] for q in parts], axis=0), atol=1e-14)


def test_per_sample_output_grad_and_losses():
    model = DenseModel.from_arrays([np.array([[2.0]]), np.array([[1.0]])], [np.array([0.0]), np.array([0.0])])
    np.testing.assert_allclose(per_sample_output_grad(model, [1.5], 1.0, SquaredError()), [2 * (3.0 - 1.0)])
    ce = CrossEntropy()
    z = np.array([[0.0, 0.0]])
    np.testing.assert_allclose(ce.output_grad(z, np.array([1])), [[0.5, -0.5]])
    np.testing.assert_allclose(ce.value(z, np.array([0])), [np.log(2)])
    assert loss_from_name("cross-entropy") == CrossEntropy()
    with pytest.raises(ValueError):
        loss_from_name("hinge")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_activation_raises():
    model = DenseModel.from_arrays([np.array([[1e308]]), np.array([[1e308]])], [np.array([0.0]), np.array([0.0])])
    with pytest.raises(NumericError):
        batch_gradient(model, Batch([[10.0]], [0.0]), SquaredError())


def test_gradient_report_roundtrip(rng):
    model = random_model(rng, 3, (4,))
    g = batch_gradient(model, Batch(rng.uniform(size=(2, 3)), [0.0, 1.0]), SquaredError())
    again = GradientReport.from_params(g.params())
    assert again.max_abs_diff(g) == 0.0
    assert g.scaled(2.0).max_abs_diff(g) == pytest.approx(np.max(np.abs(np.concatenate([p.ravel() for p in g.params()]))))


def test_propagate_box_encloses_samples(rng):
    model = random_model(rng, 4, (6, 5))
    lo, hi = np.zeros(4), np.ones(4)
    bounds = propagate_box(model, lo, hi)
    _, pre, _ = forward_rows(model, rng.uniform(0, 1, (200, 4)))
    for (a_lo, a_hi), a in zip(bounds, pre):
        assert np.all(a >= a_lo - 1e-12) and np.all(a <= a_hi + 1e-12)


def _gated_model(rng, d=3, n=5, h=4):
    w1 = rng.normal(0, 1, (n, d))
    w2 = rng.uniform(0.5, 1.0, (h, n))
    b2 = np.full(h, 1.0)
    w3 = rng.uniform(0.5, 1.0, (1, h))
    return DenseModel.from_arrays([w1, w2, w3], [rng.normal(0, 0.1, n), b2, np.zeros(1)])


def test_path_gain_equals_numerical_jacobian(rng):
    model = _gated_model(rng)
    lo, hi = np.zeros(3), np.ones(3)
    g = path_gain(model, lo, hi)
    # perturb the attack pre-activation by shifting each unit's bias
    x = rng.uniform(0, 1, (1, 3))
    base = forward_rows(model, x)[0][0, 0]
    _, pre, _ = forward_rows(model, x)
    for i in range(model.n_attack):
        if pre[0][0, i] <= 0:
            continue
        params = [np.array(p) for p in model.params()]
        params[1][i] += 1e-6
        bumped = forward_rows(model.with_params(params), x)[0][0, 0]
        assert (bumped - base) / 1e-6 == pytest.approx(g[i], rel=1e-6)


def test_gating_that_can_flip_is_rejected():
    w2 = np.array([[1.0, -1.0]])
    model = DenseModel.from_arrays([np.eye(2), w2, np.ones((1, 1))], [np.zeros(2), np.zeros(1), np.zeros(1)])
    with pytest.raises(GatingNotFixedError):
        downstream_gates(model, np.zeros(2), np.ones(2))
    with pytest.raises(GatingNotFixedError):
        path_gain(model, np.zeros(2), np.ones(2))


def test_rank_one_head_gain(rng):
    model = _gated_model(rng)
    c = np.array([0.5, -1.0, 2.0])
    u = model.layers[-1].weight[0]
    layers = model.layers[:-1] + (Layer(np.outer(c, u), np.zeros(3), False),)
    ranked = DenseModel(layers)
    np.testing.assert_allclose(path_gain(ranked, np.zeros(3), np.ones(3), head=c), path_gain(model, np.zeros(3), np.ones(3)))
    with pytest.raises(ShapeError):
        path_gain(ranked, np.zeros(3), np.ones(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_gradient_scales_with_output_residual(seed, scale):
    """Squared-error gradients are linear in the residual: scaling targets and head together scales the gradient."""
    rng = np.random.default_rng(seed)
    model = random_model(rng, 3, (4,))
    x = rng.uniform(0, 1, (4, 3))
    y = rng.normal(size=4)
    g1 = batch_gradient(model, Batch(x, y), SquaredError())
    params = [np.array(p) for p in model.params()]
    params[-2] = params[-2] * scale
    params[-1] = params[-1] * scale
    g2 = batch_gradient(model.with_params(params), Batch(x, scale * y), SquaredError())
    np.testing.assert_allclose(g2.attack_weight, scale**2 * g1.attack_weight, rtol=1e-9, atol=1e-14)
