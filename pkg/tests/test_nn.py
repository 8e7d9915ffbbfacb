import numpy as np
import pytest

from respsnn import nn


def finite_difference_check(model, x, labels, rel_tol=1e-4, step=1e-5):
    """Central-difference oracle over every parameter of the model."""
    _, grads = nn.loss_and_gradients(model, x, labels)
    grads = [g.copy() for g in grads]
    params = [p for _, p in model.parameters()]
    worst = 0.0
    for p, g in zip(params, grads):
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for i in range(flat_p.size):
            orig = flat_p[i]
            flat_p[i] = orig + step
            lo_plus, _ = nn.loss_and_gradients(model, x, labels)
            flat_p[i] = orig - step
            lo_minus, _ = nn.loss_and_gradients(model, x, labels)
            flat_p[i] = orig
            numeric = (lo_plus - lo_minus) / (2 * step)
            denom = max(abs(numeric), abs(flat_g[i]), 1e-8)
            worst = max(worst, abs(numeric - flat_g[i]) / denom)
    assert worst < rel_tol, f"worst relative gradient error {worst}"


def small_model(layers, input_shape):
    return nn.CnnModel(layers, input_shape=input_shape)


def test_softmax_handles_extreme_logits():
    p = nn.softmax(np.array([[50.0, -50.0]]))
    assert np.isfinite(p).all()
    assert p.sum() == pytest.approx(1.0, abs=1e-6)


def test_forward_probabilities_sum_to_one(rng):
    model = nn.build_default_model(input_len=6, conv_filters=4,
                                   hidden=(5, 4), seed=0)
    x = rng.normal(size=(7, 6, 2))
    probs = model.forward(x)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)


def test_identity_kernel_conv():
    conv = nn.Conv1D(1, 1, kernel=1, activation=None,
                     rng=np.random.default_rng(0))
    conv.W[...] = 1.0
    conv.b[...] = 0.0
    x = np.array([[[1.0], [2.0], [3.0]]])
    out = conv.forward(x)
    assert np.array_equal(out, x)


def test_unit_maxpool_is_identity(rng):
    pool = nn.MaxPool1D(pool=1, stride=1)
    x = rng.normal(size=(3, 9, 4))
    assert np.array_equal(pool.forward(x), x)


def test_maxpool_picks_maxima(rng):
    pool = nn.MaxPool1D(pool=2, stride=2)
    x = np.array([[[1.0], [5.0], [2.0], [3.0]]])
    out = pool.forward(x)
    assert np.array_equal(out, [[[5.0], [3.0]]])


def test_dropout_inference_is_identity(rng):
    drop = nn.Dropout(0.5)
    x = rng.normal(size=(4, 10))
    assert np.array_equal(drop.forward(x, train=False), x)
    masked = drop.forward(x, train=True, rng=np.random.default_rng(0))
    assert not np.array_equal(masked, x)


def test_inference_is_deterministic(trained_model, small_dataset):
    x = np.stack([w.samples for w in small_dataset.test[:8]])
    a = trained_model.forward(x)
    b = trained_model.forward(x)
    assert np.array_equal(a, b)


def test_perfect_prediction_loss_near_zero():
    model = small_model([nn.Dense(2, 2, activation="softmax",
                                  rng=np.random.default_rng(0))], (2,))
    layer = model.layers[0]
    layer.W[...] = np.array([[40.0, -40.0], [-40.0, 40.0]])
    layer.b[...] = 0.0
    loss, _ = nn.loss_and_gradients(model, np.eye(2), np.array([0, 1]))
    assert loss < 1e-8


def test_label_out_of_range_raises():
    model = small_model([nn.Dense(2, 2, activation="softmax",
                                  rng=np.random.default_rng(0))], (2,))
    with pytest.raises(ValueError):
        nn.loss_and_gradients(model, np.eye(2), np.array([0, 2]))


def test_duplicated_example_doubles_gradient(rng):
    model = small_model([nn.Dense(3, 2, activation="softmax",
                                  rng=np.random.default_rng(1))], (3,))
    x = rng.normal(size=(1, 3))
    _, single = nn.loss_and_gradients(model, x, np.array([1]))
    single = [g.copy() for g in single]
    _, double = nn.loss_and_gradients(model, np.vstack([x, x]),
                                      np.array([1, 1]))
    for g1, g2 in zip(single, double):
        assert np.allclose(g2, 2 * g1, rtol=1e-12)


def test_gradients_dense_stack(rng):
    model = small_model([
        nn.Dense(4, 6, activation="relu", rng=np.random.default_rng(0)),
        nn.Dense(6, 3, activation="relu", rng=np.random.default_rng(1)),
        nn.Dense(3, 2, activation="softmax", rng=np.random.default_rng(2)),
    ], (4,))
    x = rng.normal(size=(5, 4))
    finite_difference_check(model, x, rng.integers(0, 2, 5))


def test_gradients_conv_pipeline(rng):
    model = small_model([
        nn.Conv1D(2, 3, kernel=2, activation="relu",
                  rng=np.random.default_rng(0)),
        nn.MaxPool1D(pool=1, stride=1),
        nn.Flatten(),
        nn.Dense(15, 4, activation="relu", rng=np.random.default_rng(1)),
        nn.Dense(4, 2, activation="softmax", rng=np.random.default_rng(2)),
    ], (6, 2))
    x = rng.normal(size=(4, 6, 2))
    finite_difference_check(model, x, rng.integers(0, 2, 4))


def test_gradients_residual_and_concat(rng):
    branch_a = [nn.Dense(4, 4, activation="relu",
                         rng=np.random.default_rng(3))]
    model = small_model([
        nn.ResidualBlock(branch_a),
        nn.Concatenate([
            [nn.Dense(4, 3, activation="relu", rng=np.random.default_rng(4))],
            [nn.Dense(4, 2, activation="relu", rng=np.random.default_rng(5))],
        ]),
        nn.Dense(5, 2, activation="softmax", rng=np.random.default_rng(6)),
    ], (4,))
    x = rng.normal(size=(3, 4))
    finite_difference_check(model, x, rng.integers(0, 2, 3))


def test_gradients_with_weight_decay(rng):
    model = small_model([nn.Dense(3, 2, activation="softmax",
                                  rng=np.random.default_rng(7))], (3,))
    x = rng.normal(size=(4, 3))
    labels = rng.integers(0, 2, 4)
    _, grads = nn.loss_and_gradients(model, x, labels, weight_decay=0.1)
    grads = [g.copy() for g in grads]
    _, plain = nn.loss_and_gradients(model, x, labels)
    w = model.layers[0].W
    assert np.allclose(grads[0], plain[0] + 0.1 * w)
    assert np.allclose(grads[1], plain[1])  # bias is not decayed


def test_adam_zero_gradient_keeps_parameters():
    opt = nn.Adam(lr=0.1)
    p = np.array([1.0, -2.0])
    opt.step([p], [np.zeros(2)])
    assert np.array_equal(p, [1.0, -2.0])


def test_adam_first_step_magnitude():
    # bias-corrected first step moves by ~lr in the gradient sign direction
    opt = nn.Adam(lr=0.01)
    p = np.zeros(3)
    g = np.array([0.5, -2.0, 1e-3])
    opt.step([p], [g])
    assert np.allclose(p, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_is_deterministic():
    results = []
    for _ in range(2):
        opt = nn.Adam(lr=0.05)
        p = np.array([0.3, -0.7])
        for step in range(5):
            opt.step([p], [np.array([0.1 * (step + 1), -0.2])])
        results.append(p.copy())
    assert np.array_equal(results[0], results[1])


def test_checkpoint_round_trip(tmp_path, trained_model, small_dataset):
    path = tmp_path / "model.json"
    nn.save_checkpoint(trained_model, path)
    back = nn.load_checkpoint(path)
    x = np.stack([w.samples for w in small_dataset.test[:10]])
    assert np.array_equal(trained_model.forward(x), back.forward(x))
    assert back.parameter_count() == trained_model.parameter_count()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        nn.load_checkpoint(path)
