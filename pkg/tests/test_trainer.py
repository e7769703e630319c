import math

import numpy as np
import pytest

from evograd.dsl import ShapeEnv, check_feasible, parse_equation
from evograd.tasks import TaskSpec, generate
from evograd.trainer import (
    MlpModel,
    Optimizer,
    Schedule,
    TrainConfig,
    backward_reference,
    backward_with_equation,
    builtin_equations,
    central_difference,
    finite_difference_grad,
    forward,
    lr_at,
    train_and_evaluate,
)


def _model(widths, activation="tanh", seed=0):
    return MlpModel.init(widths, activation, np.random.default_rng(seed))


def _batch(model, n=8, seed=1):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, model.widths[0])), rng.integers(0, model.widths[-1], n)


def _max_rel(a, b):
    return max(np.max(np.abs(x - y)) / max(np.max(np.abs(y)), 1e-300) for x, y in zip(a, b))


def test_identity_weights_pass_input_through():
    m = MlpModel((2, 2), [np.eye(2)], [np.zeros(2)], [np.eye(2)], [np.eye(2)], [None])
    cache = forward(m, np.array([[1.0, 2.0]]), np.array([0]))
    np.testing.assert_array_equal(cache.logits, [[1.0, 2.0]])


def test_relu_negative_preactivations_give_zero():
    m = _model((2, 3, 2), "relu")
    m.weights[0][:] = -1.0
    cache = forward(m, np.array([[1.0, 1.0]]), np.array([1]))
    np.testing.assert_array_equal(cache.post[0], 0.0)


def test_loss_matches_scalar_loop():
    m = _model((3, 5, 4, 3))
    x, y = _batch(m, 6)
    cache = forward(m, x, y)
    total = 0.0
    for row, label in zip(cache.logits, y):
        top = max(row)
        log_z = top + math.log(sum(math.exp(v - top) for v in row))
        total += log_z - row[label]
    assert cache.loss == pytest.approx(total / len(y), rel=1e-12, abs=1e-15)


def test_single_layer_closed_form():
    m = _model((3, 4))
    x = np.array([[0.5, -1.0, 2.0]])
    y = np.array([2])
    cache = forward(m, x, y)
    onehot = np.eye(4)[y]
    expected = x.T @ (cache.probs - onehot)
    np.testing.assert_allclose(backward_reference(m, cache).weights[0], expected, rtol=1e-14)


def test_reference_matches_finite_differences():
    m = _model((3, 6, 5, 3))
    x, y = _batch(m)
    ref = backward_reference(m, forward(m, x, y))
    fd = finite_difference_grad(m, x, y)
    assert _max_rel(ref.arrays(), fd.arrays()) <= 1e-5


def test_duplicated_batch_leaves_deltas_unchanged():
    m = _model((3, 6, 3))
    x, y = _batch(m)
    one = backward_reference(m, forward(m, x, y))
    two = backward_reference(m, forward(m, np.concatenate([x, x]), np.concatenate([y, y])))
    assert _max_rel(two.arrays(), one.arrays()) <= 1e-12


def test_central_difference_scalar():
    w = np.array([3.0])
    assert central_difference(lambda: float(w[0] ** 2), w)[0] == pytest.approx(6.0, abs=1e-7)


def test_finite_differences_refuse_large_models():
    m = _model((50, 100, 2))
    with pytest.raises(ValueError):
        finite_difference_grad(m, *_batch(m))


@pytest.mark.parametrize("seed", range(3))
def test_backprop_equation_matches_reference(seed):
    m = _model((2, 16, 16, 2), seed=seed)
    x, y = _batch(m, seed=seed + 10)
    cache = forward(m, x, y)
    got = backward_with_equation(m, cache, builtin_equations()["backprop"])
    assert _max_rel(got.arrays(), backward_reference(m, cache).arrays()) <= 1e-12


def test_zero_equation_freezes_hidden_layers_only():
    m = _model((2, 8, 8, 3))
    cache = forward(m, *_batch(m))
    got = backward_with_equation(m, cache, parse_equation("sub(ident(g), ident(g))"))
    ref = backward_reference(m, cache)
    for d in (*got.weights[:-1], *got.biases[:-1]):
        np.testing.assert_array_equal(d, 0.0)
    np.testing.assert_array_equal(got.weights[-1], ref.weights[-1])
    np.testing.assert_array_equal(got.biases[-1], ref.biases[-1])


def test_dfa_equation_matches_direct_pipeline():
    m = _model((2, 5, 4, 3))
    x, y = _batch(m)
    cache = forward(m, x, y)
    got = backward_with_equation(m, cache, builtin_equations()["dfa"])
    b_l = cache.probs.copy()
    b_l[np.arange(len(y)), y] -= 1.0
    inputs = [x, cache.post[0]]
    for j in range(2):
        signal = (b_l @ m.feedback_rl[j]) * (1 - np.tanh(cache.pre[j]) ** 2)
        np.testing.assert_allclose(got.weights[j], inputs[j].T @ signal / len(y), rtol=1e-12)


def test_momentum_velocity_geometric_series():
    p = [np.zeros(1)]
    opt = Optimizer(0.9)
    seen = []
    for _ in range(3):
        opt.step(p, [np.ones(1)], 1.0)
        seen.append(opt.velocity[0][0])
    assert seen == pytest.approx([1.0, 1.9, 2.71], abs=1e-12)


def test_zero_momentum_is_plain_sgd():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(4), None
    b = a.copy()
    opt = Optimizer(0.0)
    for _ in range(5):
        d = rng.standard_normal(4)
        opt.step([a], [d], 0.1)
        b -= 0.1 * d
    np.testing.assert_array_equal(a, b)


def test_zero_lr_keeps_weights_bitwise():
    w = np.random.default_rng(0).standard_normal((3, 3))
    before = w.copy()
    Optimizer(0.9).step([w], [np.ones((3, 3))], 0.0)
    np.testing.assert_array_equal(w, before)


def test_lr_schedule_endpoints():
    total, peak = 1000, 0.3
    assert lr_at(Schedule.COSINE_WARMUP, 0, total, peak) == 0.0
    assert lr_at(Schedule.COSINE_WARMUP, 100, total, peak) == pytest.approx(peak, abs=1e-12)
    assert abs(lr_at(Schedule.COSINE_WARMUP, total, total, peak)) <= 1e-12
    assert lr_at(Schedule.CONSTANT, 500, total, peak) == peak


def test_lr_schedule_shape():
    lrs = [lr_at(Schedule.COSINE_WARMUP, s, 200, 1.0) for s in range(201)]
    assert lrs[:21] == sorted(lrs[:21])
    assert lrs[20:] == sorted(lrs[20:], reverse=True)


def test_training_is_deterministic():
    data = generate(TaskSpec("blobs", n_train=128, n_val=64, n_test=64))
    cfg = TrainConfig(epochs=3, hidden=(8,), seed=4)
    a = train_and_evaluate("keep_left(ident(g), ident(g))", data, cfg)
    b = train_and_evaluate("keep_left(ident(g), ident(g))", data, cfg)
    assert a == b


def test_full_train_reports_test_accuracy():
    data = generate(TaskSpec("blobs", n_train=128, n_val=64, n_test=64))
    rec = train_and_evaluate("keep_left(ident(g), ident(g))", data, TrainConfig(epochs=3, hidden=(8,)),
                             full_train=True)
    assert rec.test_acc is not None and 0.0 <= rec.test_acc <= 1.0


def test_diverging_equation_is_marked_failed():
    data = generate(TaskSpec("blobs", n_train=128, n_val=64, n_test=64))
    rec = train_and_evaluate("keep_left(recip(h), ident(h)) |> mul_elem(cube(prev), cube(h_pre))", data,
                             TrainConfig(epochs=5, lr=0.5, hidden=(16, 16), early_stop=False))
    assert rec.failed
    assert "non-finite" in rec.reason


def test_infeasible_equation_rejected_before_training():
    data = generate(TaskSpec("blobs", n_train=64, n_val=32, n_test=32))
    with pytest.raises(ValueError):
        train_and_evaluate("add(ident(g), ident(b_next))", data, TrainConfig(epochs=1))


def test_builtins():
    eqs = builtin_equations()
    assert str(eqs["backprop"]) == "keep_left(ident(g), ident(g))"
    for e in eqs.values():
        for dims in [(1, 1, 1, 1, 1), (3, 7, 2, 9, 4), (5, 5, 5, 5, 5)]:
            assert check_feasible(e, ShapeEnv(*dims)) == (dims[0], dims[2])
