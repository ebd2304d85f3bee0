import math

import numpy as np
import pytest

from spinepatch.classifier import (EDGE_BINS, GRID, N_FEATURES, Model, TrainConfig, augment,
                                   class_weights_for, evaluate, extract_features, loss_and_grad,
                                   metrics_from_predictions, occlusion_saliency, train)
from spinepatch.errors import InvalidArgumentError, TrainingError
from spinepatch.raster import rotate

HIST = slice(GRID * GRID, GRID * GRID + EDGE_BINS)
STRIPS = slice(GRID * GRID + EDGE_BINS, N_FEATURES)


def test_feature_length_and_range(rng):
    f = extract_features(rng.integers(0, 256, (50, 70), dtype=np.uint8))
    assert f.shape == (288,)
    assert 0 <= f[:GRID * GRID].min() and f[:GRID * GRID].max() <= 1


def test_constant_image_features():
    f = extract_features(np.full((224, 224), 128, np.uint8))
    assert np.allclose(f[:GRID * GRID], 128 / 255)
    assert f[HIST][0] == 1.0 and f[HIST][1:].sum() == 0


def test_step_edge_in_high_bins():
    img = np.zeros((224, 224), np.uint8)
    img[:, 112:] = 255
    hist = extract_features(img)[HIST]
    # central difference across a 0 -> 1 step is 0.5 on the two columns beside it
    edge_fraction = 2 * 224 / 224 ** 2
    assert math.isclose(hist[-1], edge_fraction)
    assert math.isclose(hist[0], 1 - edge_fraction)


def test_zero_rotation_features_equal(rng):
    img = rng.integers(0, 256, (224, 224), dtype=np.uint8)
    assert np.array_equal(extract_features(rotate(img, 0)), extract_features(img))


def test_augment_identity(rng):
    img = rng.integers(0, 256, (30, 30), dtype=np.uint8)
    cfg = TrainConfig(rotation_max_deg=0, equalize_prob=0)
    assert np.array_equal(augment(img, cfg, rng), img)


def test_augment_replay(rng):
    img = rng.integers(0, 256, (30, 30), dtype=np.uint8)
    a = augment(img, TrainConfig(), np.random.default_rng(5))
    b = augment(img, TrainConfig(), np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_augment_equalize_rate():
    img = np.array([[10, 200], [200, 200]], np.uint8)
    cfg = TrainConfig(rotation_max_deg=0)
    rng = np.random.default_rng(0)
    hits = sum(not np.array_equal(augment(img, cfg, rng), img) for _ in range(10000))
    assert abs(hits - 5000) <= 150


def test_cross_entropy_ln2():
    loss, _ = loss_and_grad(Model(np.zeros(3), 0.0), (np.ones((1, 3)), np.array([1])), TrainConfig())
    assert math.isclose(loss, math.log(2))


def numeric_grad(model, batch, cfg, cw, h=1e-6):
    theta = model.params
    out = np.zeros_like(theta)
    for k in range(len(theta)):
        up, dn = theta.copy(), theta.copy()
        up[k] += h
        dn[k] -= h
        out[k] = (loss_and_grad(Model.from_params(up), batch, cfg, cw)[0]
                  - loss_and_grad(Model.from_params(dn), batch, cfg, cw)[0]) / (2 * h)
    return out


@pytest.mark.parametrize("loss", ["cross_entropy", "weighted_cross_entropy", "focal"])
def test_gradient_matches_finite_differences(loss, rng):
    cfg = TrainConfig(loss=loss, focal_gamma=2.0)
    worst = 0.0
    for _ in range(50):
        d, n = 6, int(rng.integers(4, 12))
        X = rng.normal(size=(n, d))
        y = np.arange(n) % 2
        rng.shuffle(y)
        model = Model.from_params(rng.normal(scale=0.5, size=d + 1))
        cw = class_weights_for(y)
        _, g = loss_and_grad(model, (X, y), cfg, cw)
        fd = numeric_grad(model, (X, y), cfg, cw)
        worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12))
    assert worst < 1e-4


def test_focal_gamma_zero_is_cross_entropy(rng):
    X, y = rng.normal(size=(10, 4)), np.array([0, 1] * 5)
    m = Model.from_params(rng.normal(size=5))
    lf, gf = loss_and_grad(m, (X, y), TrainConfig(loss="focal", focal_gamma=0))
    lc, gc = loss_and_grad(m, (X, y), TrainConfig())
    assert lf == pytest.approx(lc, rel=1e-14)
    assert np.allclose(gf, gc, rtol=1e-14, atol=0)


def test_weighted_equal_classes_is_cross_entropy(rng):
    X, y = rng.normal(size=(8, 4)), np.array([0, 1] * 4)
    m = Model.from_params(rng.normal(size=5))
    cw = class_weights_for(y)
    assert np.array_equal(cw, [1.0, 1.0])
    lw, gw = loss_and_grad(m, (X, y), TrainConfig(loss="weighted_cross_entropy"), cw)
    lc, gc = loss_and_grad(m, (X, y), TrainConfig())
    assert lw == lc and np.array_equal(gw, gc)


def test_class_weights_inverse_frequency():
    assert np.allclose(class_weights_for([0, 0, 0, 1]), [4 / 6, 2.0])


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(1) == cfg.lr_at(7) == 0.002
    assert math.isclose(cfg.lr_at(8), 0.002 * 0.1)
    assert math.isclose(cfg.lr_at(15), 0.002 * 0.01)


def toy_set(rng, n=40):
    """Two informative features embedded in the 288-vector, classes split by a line."""
    F = np.zeros((n, N_FEATURES))
    F[:, :2] = rng.normal(size=(n, 2))
    y = (F[:, 0] + 0.5 * F[:, 1] > 0).astype(int)
    F[:, 0] += np.where(y == 1, 0.3, -0.3)
    images = [np.zeros((2, 2), np.uint8)] * n
    return images, y, F


def test_separable_toy_set(rng):
    images, y, F = toy_set(rng)
    cfg = TrainConfig(rotation_max_deg=0, equalize_prob=0, learning_rate=0.05, scheduler_step=50)
    model, history = train(images, y, cfg, features=F)
    assert history[-1].train_acc == 1.0
    assert evaluate(model, F, y)["accuracy"] == 1.0
    assert [h.lr for h in history[6:8]] == [0.05, 0.05]


def test_history_follows_schedule(rng):
    images, y, F = toy_set(rng)
    _, history = train(images, y, TrainConfig(rotation_max_deg=0, equalize_prob=0, epochs=15), features=F)
    assert len(history) == 15
    assert math.isclose(history[7].lr, 0.0002) and math.isclose(history[14].lr, 0.00002)


def test_training_deterministic(rng):
    imgs = [rng.integers(0, 256, (40, 40), dtype=np.uint8) for _ in range(12)]
    y = np.array([0, 1] * 6)
    cfg = TrainConfig(epochs=3, seed=4)
    a, _ = train(imgs, y, cfg)
    b, _ = train(imgs, y, cfg)
    assert a.dumps() == b.dumps()


def test_single_class_rejected():
    with pytest.raises(TrainingError):
        train([np.zeros((4, 4), np.uint8)] * 3, [1, 1, 1], TrainConfig())


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(momentum=1.0)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(loss="hinge")


def test_metrics_examples():
    y = np.array([1, 0, 1, 0])
    perfect = metrics_from_predictions(y, y)
    assert perfect["accuracy"] == 1.0 and perfect["specificity"] == 1.0
    neg = metrics_from_predictions(np.zeros(4), y)
    assert (neg["accuracy"], neg["specificity"], neg["sensitivity"]) == (0.5, 1.0, 0.0)


def test_metrics_hand_counted():
    y    = [1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]
    pred = [1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0]
    m = metrics_from_predictions(pred, y)
    # by hand: tp 5, fn 3, fp 2, tn 10
    assert m["confusion"] == {"tp": 5, "fp": 2, "tn": 10, "fn": 3}
    assert m["accuracy"] == 15 / 20
    assert m["sensitivity"] == 5 / 8 and m["specificity"] == 10 / 12


def test_saliency_zero_model(rng):
    sal = occlusion_saliency(Model(), rng.integers(0, 256, (60, 60), dtype=np.uint8), 56, 56)
    assert sal.shape == (4, 4) and not sal.any()


def test_saliency_dimensions():
    assert occlusion_saliency(Model(), np.zeros((10, 10), np.uint8), 32, 16).shape == (13, 13)
    with pytest.raises(InvalidArgumentError):
        occlusion_saliency(Model(), np.zeros((10, 10), np.uint8), 300, 16)


def test_saliency_border_strip_model():
    # weight only on the first top-strip segment (rows 0-27, cols 0-55)
    w = np.zeros(N_FEATURES)
    w[STRIPS.start] = 8.0
    img = np.zeros((224, 224), np.uint8)
    img[:28, :56] = 255
    sal = occlusion_saliency(Model(w, -4.0), img, 28, 28)
    i, j = np.unravel_index(np.argmax(np.abs(sal)), sal.shape)
    assert i == 0 and j <= 1


def test_model_round_trip(tmp_path, rng):
    m = Model(rng.normal(size=N_FEATURES), 0.123456789)
    m.save(tmp_path / "m.model")
    back = Model.load(tmp_path / "m.model")
    assert np.array_equal(back.weights, m.weights) and back.bias == m.bias
    with pytest.raises(InvalidArgumentError):
        Model.loads("garbage\n")
