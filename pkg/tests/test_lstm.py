import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asymload import lstm
from asymload.losses import LossSpec, batch_loss, loss_grad
from oracles import numeric_param_grads, relative_error


def _toy(seed=0, dropout=0.0, activation="identity"):
    m = lstm.init_model(6, 3, 2, dropout_rate=dropout, activation=activation, rng_seed=seed)
    rng = np.random.default_rng(seed + 100)
    for v in m.params.values():
        v += rng.normal(0, 0.3, v.shape)  # break the zero-bias symmetry
    return m


def _windows(n, seed=0, w=4, f=6):
    return np.random.default_rng(seed).normal(size=(n, w, f))


def test_zero_model_predicts_zero():
    m = lstm.zero_model(hidden1=8, hidden2=4)
    pred, _ = lstm.lstm_forward(m, _windows(1)[0], "eval")
    assert pred == 0.0
    np.testing.assert_array_equal(lstm.predict(m, _windows(5)), np.zeros(5))


def test_eval_is_deterministic():
    m = lstm.init_model(hidden1=8, hidden2=4, rng_seed=1)
    x = _windows(1)[0]
    assert lstm.lstm_forward(m, x, "eval")[0] == lstm.lstm_forward(m, x, "eval")[0]


def test_no_dropout_train_equals_eval():
    m = lstm.init_model(hidden1=8, hidden2=4, dropout_rate=0.0, rng_seed=2)
    x = _windows(1)[0]
    assert lstm.lstm_forward(m, x, "train")[0] == lstm.lstm_forward(m, x, "eval")[0]


def test_shape_mismatch_raises():
    m = lstm.init_model(hidden1=8, hidden2=4)
    with pytest.raises(ValueError):
        lstm.lstm_forward(m, np.zeros((4, 5)))
    with pytest.raises(ValueError):
        lstm.lstm_forward(m, np.zeros(6))


def test_cache_model_mismatch_raises():
    _, cache = lstm.lstm_forward(lstm.init_model(hidden1=8, hidden2=4), _windows(1)[0])
    with pytest.raises(ValueError):
        lstm.lstm_backward(lstm.init_model(hidden1=5, hidden2=4), cache, 1.0)


@pytest.mark.parametrize("kind", ["mse", "al1", "al2"])
def test_gradients_match_finite_differences(kind):
    spec = LossSpec(kind)
    m = _toy(seed={"mse": 0, "al1": 1, "al2": 2}[kind])
    x = _windows(10, seed=3)
    base = lstm.predict(m, x)
    rng = np.random.default_rng(4)
    # keep every error well inside one branch so the loss is smooth locally
    offsets = rng.choice([-1, 1], 10) * rng.uniform(0.2, 0.8, 10)
    if kind == "al2":
        offsets[:3] = rng.uniform(0.006, 0.009, 3)
        offsets[3:5] = rng.uniform(0.001, 0.004, 2)
    if kind == "al1":
        offsets[:2] = -rng.uniform(1.2, 2.0, 2)
        offsets[2:4] = rng.uniform(1.2, 2.0, 2)
    y = base - offsets

    def total():
        return batch_loss(lstm.predict(m, x) - y, spec)

    pred, cache = lstm.forward_batch(m, x, train=True, rng=np.random.default_rng(0))
    analytic = lstm.backward_batch(m, cache, loss_grad(pred - y, spec) / len(y))
    numeric = numeric_param_grads(total, m.params, h=1e-5)
    for name in lstm.PARAM_ORDER:
        err = relative_error(analytic[name], numeric[name], floor=1e-6)
        assert err.max() <= 1e-4, f"{name}: {err.max():.2e}"


def test_gradients_with_dropout_masks_and_relu():
    m = _toy(seed=5, dropout=0.3, activation="relu")
    m.params["head.b"][:] = 2.0  # keep the relu active
    x = _windows(6, seed=6)
    pred, cache = lstm.forward_batch(m, x, train=True, rng=np.random.default_rng(9))
    y = pred - 0.5
    grads = lstm.backward_batch(m, cache, loss_grad(pred - y, LossSpec()) / len(y))

    def total():
        p, _ = lstm.forward_batch(m, x, train=True, rng=np.random.default_rng(9))
        return batch_loss(p - y, LossSpec())

    numeric = numeric_param_grads(total, m.params, h=1e-5)
    for name in lstm.PARAM_ORDER:
        assert relative_error(grads[name], numeric[name], floor=1e-6).max() <= 1e-4, name


def test_zero_upstream_gives_zero_gradients():
    m = _toy()
    _, cache = lstm.lstm_forward(m, _windows(1)[0], "train")
    for g in lstm.lstm_backward(m, cache, 0.0).values():
        assert not np.any(g)


def test_backward_is_pure():
    m = _toy()
    _, cache = lstm.lstm_forward(m, _windows(1)[0], "train")
    a = lstm.lstm_backward(m, cache, 0.7)
    b = lstm.lstm_backward(m, cache, 0.7)
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = lstm.AdamState()
    lstm.adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_moves_by_learning_rate():
    p = {"w": np.array([0.5])}
    lstm.adam_step(p, {"w": np.array([1.0])}, lstm.AdamState(learning_rate=0.001))
    assert p["w"][0] == pytest.approx(0.5 - 0.001, abs=1e-10)


@given(st.floats(-10, 10).filter(lambda g: abs(g) > 1e-3))
@settings(max_examples=30)
def test_adam_constant_gradient_is_monotone(g):
    p = {"w": np.array([0.0])}
    state = lstm.AdamState()
    history = [0.0]
    for _ in range(20):
        lstm.adam_step(p, {"w": np.array([g])}, state)
        history.append(p["w"][0])
    steps = np.diff(history)
    assert np.all(np.sign(steps) == -np.sign(g))


def test_adam_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="l1.W"):
        lstm.adam_step({"l1.W": np.zeros(2)}, {"l1.W": np.array([np.nan, 0.0])}, lstm.AdamState())


def test_zero_learning_rate_leaves_model_unchanged():
    m = lstm.init_model(hidden1=8, hidden2=4, dropout_rate=0.0, rng_seed=3)
    x = _windows(16)
    y = np.random.default_rng(1).normal(size=16)
    trained, trace = lstm.train(m, x, y, lstm.TrainConfig(epochs=1, batch_size=16, learning_rate=0.0))
    for name in lstm.PARAM_ORDER:
        np.testing.assert_array_equal(trained.params[name], m.params[name])
    assert len(trace) == 1
    assert trace[0] == pytest.approx(batch_loss(lstm.predict(m, x) - y, LossSpec()), rel=1e-12)


def _trend(n=64, w=4, seed=0):
    rng = np.random.default_rng(seed)
    t0 = rng.uniform(-1, 1, n)
    slope = rng.uniform(-0.2, 0.2, n)
    x = np.zeros((n, w, 6))
    x[:, :, 0] = t0[:, None] + slope[:, None] * np.arange(w)
    return x, t0 + slope * w


def test_training_reduces_loss_on_linear_trend():
    x, y = _trend()
    m = lstm.init_model(hidden1=8, hidden2=4, rng_seed=0)
    _, trace = lstm.train(m, x, y, lstm.TrainConfig(epochs=200, batch_size=16))
    assert len(trace) == 200
    assert trace[-1] < trace[0]


def test_overfits_tiny_set():
    x, y = _trend(32, seed=1)
    m = lstm.init_model(dropout_rate=0.0, rng_seed=0)
    _, trace = lstm.train(m, x, y, lstm.TrainConfig(epochs=300, batch_size=32, learning_rate=0.01))
    assert trace[-1] < 1e-3


def test_training_is_deterministic():
    x, y = _trend(40)
    m = lstm.init_model(hidden1=8, hidden2=4, rng_seed=4)
    cfg = lstm.TrainConfig(epochs=5, batch_size=8, shuffle_seed=2)
    a, ta = lstm.train(m, x, y, cfg)
    b, tb = lstm.train(m, x, y, cfg)
    assert ta == tb
    assert lstm.params_digest(a) == lstm.params_digest(b)


def test_training_error_on_divergence():
    x, y = _trend(8)
    y[0] = np.inf
    with pytest.raises(lstm.TrainingError, match="epoch 1"):
        lstm.train(lstm.init_model(hidden1=4, hidden2=2), x, y, lstm.TrainConfig(epochs=1))


def test_clip_gradients():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    c = lstm.clip_gradients(g, 1.0)
    assert np.sqrt(c["a"][0] ** 2 + c["b"][0] ** 2) == pytest.approx(1.0)
    assert lstm.clip_gradients(g, 10.0) is g


def test_dropout_masks_are_unbiased():
    m = lstm.init_model(hidden1=8, hidden2=4, dropout_rate=0.2, rng_seed=0)
    x = np.repeat(_windows(1), 10_000, axis=0)
    _, cache = lstm.forward_batch(m, x, train=True, rng=np.random.default_rng(0))
    assert abs(cache.mask1.mean() - 1.0) <= 0.02
    assert abs(cache.mask2.mean() - 1.0) <= 0.02
    assert set(np.unique(cache.mask1)) == {0.0, 1.25}


def test_dropout_expectation_of_single_unit():
    # unit-level check within 2%: average the masked output of one layer-1 unit
    m = lstm.init_model(hidden1=8, hidden2=4, dropout_rate=0.2, rng_seed=0)
    x = np.repeat(_windows(1, seed=11), 20_000, axis=0)
    _, cache = lstm.forward_batch(m, x, train=True, rng=np.random.default_rng(1))
    unit = np.argmax(np.abs(cache.h1[0, -1]))
    eval_value = cache.h1[0, -1, unit]
    assert abs(cache.x2[:, -1, unit].mean() - eval_value) <= 0.02 * abs(eval_value)


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    m = lstm.init_model(hidden1=8, hidden2=4, dropout_rate=0.1, activation="relu", rng_seed=7)
    path = tmp_path / "m.ckpt"
    lstm.save_checkpoint(path, m, {"season": "S2"})
    loaded, meta = lstm.load_checkpoint(path)
    assert meta == {"season": "S2"}
    assert loaded.config() == m.config()
    x = _windows(20)
    assert lstm.predict(loaded, x).tobytes() == lstm.predict(m, x).tobytes()
    lstm.save_checkpoint(tmp_path / "again.ckpt", loaded, {"season": "S2"})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"hello")
    with pytest.raises(ValueError):
        lstm.load_checkpoint(p)


def test_predict_empty_and_order_invariant():
    m = lstm.init_model(hidden1=8, hidden2=4, rng_seed=1)
    assert lstm.predict(m, np.zeros((0, 4, 6))).shape == (0,)
    x = _windows(30)
    perm = np.random.default_rng(0).permutation(30)
    np.testing.assert_allclose(lstm.predict(m, x)[perm], lstm.predict(m, x[perm]), rtol=0, atol=1e-14)
    np.testing.assert_allclose(lstm.predict(m, x, chunk=7), lstm.predict(m, x), rtol=0, atol=1e-14)


def test_relu_output_is_non_negative():
    m = lstm.init_model(hidden1=8, hidden2=4, activation="relu", rng_seed=1)
    m.params["head.b"][:] = -0.1
    assert np.all(lstm.predict(m, _windows(50)) >= 0)


def test_init_conventions():
    m = lstm.init_model(hidden1=8, hidden2=4)
    np.testing.assert_array_equal(m.params["l1.b"][8:16], 1.0)
    np.testing.assert_array_equal(m.params["l1.b"][:8], 0.0)
    np.testing.assert_array_equal(m.params["l2.b"][4:8], 1.0)
    limit = np.sqrt(6 / (6 + 32))
    assert np.abs(m.params["l1.W"]).max() <= limit
    with pytest.raises(ValueError):
        lstm.init_model(dropout_rate=1.0)
