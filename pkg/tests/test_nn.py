import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfmia import nn
from conftest import blobs
from oracles import fd_gradients, random_small_net, relative_error


def hand_net():
    cfg = nn.MlpConfig(input_dim=1, num_classes=2, layer_widths=(1,))
    params = [np.array([[2.0]]), np.array([-1.0]), np.array([[1.0, -1.0]]), np.array([0.5, 0.0])]
    return nn.MlpModel(cfg, params)


def test_zero_weights_uniform_posterior():
    cfg = nn.MlpConfig(input_dim=3, num_classes=4, layer_widths=(5,))
    model = nn.MlpModel(cfg, [np.zeros_like(p) for p in nn.init_model(cfg).params])
    np.testing.assert_allclose(model.predict_proba(np.ones(3)), 0.25)


def test_hand_forward_pass():
    # h = relu(2*1.5 - 1) = 2; logits = (2 + 0.5, -2)
    p = hand_net().predict_proba(np.array([1.5]))
    z = np.array([2.5, -2.0])
    np.testing.assert_allclose(p, np.exp(z) / np.exp(z).sum(), atol=1e-9)


def test_wrong_input_length():
    with pytest.raises((nn.ShapeError, nn.InputError, ValueError)):
        hand_net().predict_proba(np.ones(3))


def test_cross_entropy_limits():
    model = hand_net()
    model.params[2][:] = 0.0
    model.params[3][:] = 0.0
    loss, _ = nn.loss_and_grads(model, (np.array([[1.0]]), np.array([0])))
    assert loss == pytest.approx(np.log(2), abs=1e-9)
    model.params[3][:] = [60.0, -60.0]
    loss, _ = nn.loss_and_grads(model, (np.array([[1.0]]), np.array([0])))
    assert loss < 1e-12


def test_gradient_check_four_unit_net():
    rng = np.random.default_rng(1)
    cfg = nn.MlpConfig(input_dim=2, num_classes=2, layer_widths=(4,), seed=3)
    model = nn.init_model(cfg)
    X, y = rng.normal(size=(5, 2)), rng.integers(0, 2, 5)
    _, grads = nn.loss_and_grads(model, (X, y))
    assert relative_error(grads, fd_gradients(model, X, y)) <= 1e-3


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_gradient_check_random_nets(seed):
    model, X, y = random_small_net(np.random.default_rng(seed))
    _, grads = nn.loss_and_grads(model, (X, y))
    assert relative_error(grads, fd_gradients(model, X, y)) <= 1e-3


def test_per_example_mean_equivalence():
    rng = np.random.default_rng(0)
    model = nn.init_model(nn.MlpConfig(input_dim=3, layer_widths=(6, 5)))
    X, y = rng.normal(size=(8, 3)), rng.integers(0, 2, 8)
    _, grads = nn.loss_and_grads(model, (X, y))
    per = nn.per_example_grads(model, (X, y))
    for g, p in zip(grads, per):
        assert np.max(np.abs(p.mean(axis=0) - g)) <= 1e-9


def test_per_example_batch_of_one_and_duplicates():
    model = nn.init_model(nn.MlpConfig(input_dim=2, layer_widths=(3,)))
    x = np.array([[0.3, -1.2]])
    _, grads = nn.loss_and_grads(model, (x, np.array([1])))
    per = nn.unstack(nn.per_example_grads(model, (x, np.array([1]))))
    assert len(per) == 1
    for a, b in zip(per[0], grads):
        np.testing.assert_allclose(a, b, atol=1e-12)
    two = nn.unstack(nn.per_example_grads(model, (np.vstack([x, x]), np.array([1, 1]))))
    for a, b in zip(*two):
        np.testing.assert_array_equal(a, b)


def test_adam_zero_gradient_fixed_point():
    model = nn.init_model(nn.MlpConfig(input_dim=2, layer_widths=(3,)))
    before = [p.copy() for p in model.params]
    nn.adam_step(model, [np.zeros_like(p) for p in model.params], 1)
    for a, b in zip(before, model.params):
        np.testing.assert_array_equal(a, b)


def test_adam_first_step_closed_form():
    cfg = nn.MlpConfig(input_dim=1, layer_widths=(1,), learning_rate=0.01)
    model = nn.init_model(cfg)
    before = [p.copy() for p in model.params]
    nn.adam_step(model, [np.ones_like(p) for p in model.params], 1)
    for a, b in zip(before, model.params):
        np.testing.assert_allclose(b - a, -0.01, atol=1e-9)


def test_training_is_deterministic():
    ds = blobs(120, seed=4)
    cfg = nn.MlpConfig(input_dim=2, layer_widths=(8,), epochs=3, seed=5)
    a, _ = nn.train(cfg, ds, ds)
    b, _ = nn.train(cfg, ds, ds)
    assert json.dumps(nn.checkpoint_dict(a)) == json.dumps(nn.checkpoint_dict(b))


def test_zero_epochs_returns_init():
    ds = blobs(50)
    cfg = nn.MlpConfig(input_dim=2, layer_widths=(4,), epochs=0)
    model, _ = nn.train(cfg, ds, ds)
    for a, b in zip(model.params, nn.init_model(cfg).params):
        np.testing.assert_array_equal(a, b)


def test_separable_blobs_reach_95():
    train, valid = blobs(200, seed=0), blobs(200, seed=1)
    model, hist = nn.train(nn.eeg_preset(2, seed=0), train, valid)
    assert nn.accuracy(model, valid) >= 0.95
    assert len(hist["valid_acc"]) == 50


def test_classification_metrics_hand_case():
    m = nn.classification_metrics([0, 0, 0, 1, 1, 1], [0, 1, 1, 1, 1, 0])
    # class 0: tp=1, predicted 2, actual 3; class 1: tp=2, predicted 4, actual 3
    assert m["accuracy"] == pytest.approx(0.5)
    assert m["macro_precision"] == pytest.approx((1 / 2 + 2 / 4) / 2)
    assert m["macro_recall"] == pytest.approx((1 / 3 + 2 / 3) / 2)


def test_metrics_perfect_and_constant():
    y = [0, 1, 0, 1]
    assert nn.classification_metrics(y, y) == {"accuracy": 1.0, "macro_precision": 1.0, "macro_recall": 1.0}
    assert nn.classification_metrics(y, [1, 1, 1, 1])["accuracy"] == 0.5


def test_checkpoint_round_trip(tmp_path):
    model = nn.init_model(nn.MlpConfig(input_dim=3, layer_widths=(4, 2), seed=9))
    nn.save_checkpoint(model, tmp_path / "m.json", "scaler.json")
    back, ref = nn.load_checkpoint(tmp_path / "m.json")
    assert ref == "scaler.json"
    x = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(back.predict_proba(x), model.predict_proba(x))


def test_inlocation_preset_has_dropout():
    cfg = nn.inlocation_preset()
    assert cfg.dims == [529, 600, 700, 600, 300, 600, 300, 128, 3]
    assert cfg.dropout_layer == 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), scale=st.floats(1e-3, 1e3))
def test_softmax_is_distribution(seed, scale):
    rng = np.random.default_rng(seed)
    model, X, _ = random_small_net(rng)
    p = model.predict_proba(X * scale)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)
