import math

import numpy as np
import pytest

from persona import nn
from persona import model as mt
from persona.features import FeatureType

RNG = np.random.default_rng(99)


def fcn_params(feature_type=FeatureType.MFCC, seed=0):
    return mt.build_model(mt.ModelConfig(arch="fcn", feature_type=feature_type, seed=seed))


def cnn_params(feature_type=FeatureType.MFCC, seed=0):
    return mt.build_model(mt.ModelConfig(arch="cnn", feature_type=feature_type, seed=seed))


class TestBuildModel:
    def test_same_seed_bit_identical(self):
        a = cnn_params(FeatureType.XVECTOR, seed=11)
        b = cnn_params(FeatureType.XVECTOR, seed=11)
        assert a.weights.keys() == b.weights.keys()
        for name in a.weights:
            assert np.array_equal(a.weights[name], b.weights[name])

    def test_different_seed_differs(self):
        a = fcn_params(seed=1)
        b = fcn_params(seed=2)
        assert not np.array_equal(a.weights["fc1.weight"], b.weights["fc1.weight"])

    def test_fcn_trunk_shapes(self):
        params = fcn_params(FeatureType.XVECTOR)
        assert params.weights["fc1.weight"].shape == (200, 512)
        assert params.weights["fc2.weight"].shape == (128, 200)
        assert params.weights["fc3.weight"].shape == (56, 128)
        assert params.weights["head_emotion.weight"].shape == (6, 56)
        assert params.weights["head_gender.weight"].shape == (2, 56)
        assert params.weights["head_age.weight"].shape == (1, 56)

    def test_cnn_flatten_width_512(self):
        # 512 -> conv 510 -> pool 255 -> conv 253 -> pool 126 -> 126 * 64 = 8064
        cfg = mt.ModelConfig(arch="cnn", feature_type=FeatureType.XVECTOR)
        assert cfg.cnn_flat_width() == 8064
        params = mt.build_model(cfg)
        assert params.weights["fc1.weight"].shape == (200, 8064)

    def test_cnn_flatten_width_40(self):
        cfg = mt.ModelConfig(arch="cnn", feature_type=FeatureType.MFCC)
        # 40 -> 38 -> 19 -> 17 -> 8 -> 8 * 64
        assert cfg.cnn_flat_width() == 512

    def test_bad_arch(self):
        with pytest.raises(mt.ModelConfigError, match="architecture"):
            mt.build_model(mt.ModelConfig(arch="rnn", feature_type=FeatureType.MFCC))

    def test_fixed_trunk_widths(self):
        with pytest.raises(mt.ModelConfigError, match="fixed"):
            mt.build_model(
                mt.ModelConfig(arch="fcn", feature_type=FeatureType.MFCC, fcn_widths=(10, 10, 10))
            )


class TestForward:
    def test_probabilities_sum_to_one(self):
        params = cnn_params()
        out, _ = mt.forward(params, RNG.normal(size=(8, 40)))
        assert np.all(np.abs(out.emotion_probs.sum(axis=1) - 1.0) < 1e-9)
        assert np.all(np.abs(out.gender_probs.sum(axis=1) - 1.0) < 1e-9)

    def test_head_isolation(self):
        params = fcn_params()
        x = RNG.normal(size=40)
        before, _ = mt.forward(params, x)
        params.weights["head_emotion.weight"][:] = 0.0
        params.weights["head_emotion.bias"][:] = 0.0
        after, _ = mt.forward(params, x)
        assert np.allclose(after.emotion_probs[0], np.full(6, 1 / 6), atol=1e-15)
        assert np.array_equal(after.gender_probs, before.gender_probs)
        assert np.array_equal(after.age_z, before.age_z)

    def test_deterministic(self):
        params = cnn_params()
        x = RNG.normal(size=40)
        a, _ = mt.forward(params, x)
        b, _ = mt.forward(params, x)
        assert np.array_equal(a.emotion_probs, b.emotion_probs)
        assert np.array_equal(a.age_years, b.age_years)

    def test_dim_mismatch(self):
        with pytest.raises(nn.ShapeError, match="dims"):
            mt.forward(fcn_params(), np.zeros(41))

    def test_age_destandardization(self):
        params = fcn_params()
        params.age_mean = 40.0
        params.age_std = 10.0
        out, _ = mt.forward(params, RNG.normal(size=40))
        assert out.age_years[0] == pytest.approx(out.age_z[0] * 10.0 + 40.0, abs=1e-12)


class TestTotalLoss:
    def test_uniform_closed_form(self):
        outputs = mt.TaskOutputs(
            emotion_probs=np.full((1, 6), 1 / 6),
            gender_probs=np.full((1, 2), 1 / 2),
            age_z=np.array([0.3]),
            age_years=np.array([0.0]),
        )
        parts = mt.total_loss(outputs, [2], [1], np.array([0.3]))
        assert parts.total == pytest.approx(math.log(6) + math.log(2), abs=1e-12)

    def test_perfect_predictions(self):
        outputs = mt.TaskOutputs(
            emotion_probs=np.eye(6)[[3]],
            gender_probs=np.eye(2)[[0]],
            age_z=np.array([1.25]),
            age_years=np.array([0.0]),
        )
        parts = mt.total_loss(outputs, [3], [0], np.array([1.25]))
        assert parts.total < 1e-9

    def test_components_sum_to_total(self):
        params = cnn_params()
        out, _ = mt.forward(params, RNG.normal(size=(4, 40)))
        parts = mt.total_loss(out, [0, 1, 2, 3], [0, 1, 0, 1], RNG.normal(size=4))
        assert abs(parts.total - (parts.emotion + parts.gender + parts.age)) < 1e-12
        assert parts.total >= 0.0


class TestTrainStep:
    def test_loss_decreases_on_fixed_batch(self):
        decreased = 0
        for trial in range(100):
            rng = np.random.default_rng(trial)
            params = fcn_params(seed=trial)
            x = rng.normal(size=(8, 40))
            ye = rng.integers(0, 6, 8)
            yg = rng.integers(0, 2, 8)
            age = rng.uniform(20, 70, 8)
            before = mt.train_step(params, nn.Adam(lr=1e-3), x, ye, yg, age)
            out, _ = mt.forward(params, x)
            after = mt.total_loss(out, ye, yg, (age - params.age_mean) / params.age_std)
            decreased += after.total < before.total
        assert decreased >= 95

    @pytest.mark.parametrize("arch", ["fcn", "cnn"])
    def test_full_model_gradient_check(self, arch):
        params = mt.build_model(mt.ModelConfig(arch=arch, feature_type=FeatureType.MFCC, seed=5))
        rng = np.random.default_rng(0)
        x = rng.normal(size=(4, 40))
        ye = rng.integers(0, 6, 4)
        yg = rng.integers(0, 2, 4)
        age_z = rng.normal(size=4)

        def loss_fn(w):
            out, _ = mt.forward(params, x)
            return mt.total_loss(out, ye, yg, age_z).total

        def grad_fn(w):
            out, cache = mt.forward(params, x)
            return mt.backward(params, cache, out, ye, yg, age_z)

        assert nn.grad_check(loss_fn, grad_fn, params.weights, max_coords=300, seed=2) < 1e-4

    def test_zero_weighted_heads_receive_zero_gradient(self):
        params = fcn_params(seed=4)
        rng = np.random.default_rng(1)
        x = rng.normal(size=(6, 40))
        ye = rng.integers(0, 6, 6)
        yg = rng.integers(0, 2, 6)
        gender_before = params.weights["head_gender.weight"].copy()
        age_before = params.weights["head_age.weight"].copy()
        emotion_before = params.weights["head_emotion.weight"].copy()
        mt.train_step(
            params, nn.Adam(lr=1e-3), x, ye, yg, rng.uniform(20, 60, 6),
            loss_weights=(1.0, 0.0, 0.0),
        )
        assert np.array_equal(params.weights["head_gender.weight"], gender_before)
        assert np.array_equal(params.weights["head_age.weight"], age_before)
        assert not np.array_equal(params.weights["head_emotion.weight"], emotion_before)

    def test_nonfinite_loss_aborts(self):
        params = fcn_params()
        params.weights["fc1.weight"][:] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises((mt.TrainingAbort, nn.GradientError)):
            mt.train_step(params, nn.Adam(), np.ones((2, 40)), [0, 1], [0, 1], [30.0, 40.0])


class TestPredict:
    def test_peaked_emotion_maps_to_happy(self):
        params = fcn_params()
        params.weights["head_emotion.weight"][:] = 0.0
        params.weights["head_emotion.bias"][:] = np.array([0, 0, 0, 10.0, 0, 0])
        pred = mt.predict(params, RNG.normal(size=40))
        assert pred.emotion_label == "happy"
        assert max(pred.emotion_probs, key=pred.emotion_probs.get) == "happy"

    def test_zero_age_head_predicts_mean_age(self):
        params = fcn_params()
        params.weights["head_age.weight"][:] = 0.0
        params.weights["head_age.bias"][:] = 0.0
        params.age_mean = 37.5
        params.age_std = 9.0
        pred = mt.predict(params, RNG.normal(size=40))
        assert pred.age_years == 37.5

    def test_logit_shift_preserves_label(self):
        params = fcn_params(seed=8)
        x = RNG.normal(size=40)
        label = mt.predict(params, x).emotion_label
        params.weights["head_emotion.bias"][:] += 123.0
        assert mt.predict(params, x).emotion_label == label

    def test_age_clamped_to_range(self):
        params = fcn_params()
        params.weights["head_age.weight"][:] = 0.0
        params.weights["head_age.bias"][:] = 0.0
        params.age_mean = 400.0
        pred = mt.predict(params, RNG.normal(size=40))
        assert pred.age_years == 100.0

    def test_probability_dicts_ordered_by_vocab(self):
        pred = mt.predict(fcn_params(), RNG.normal(size=40))
        assert tuple(pred.emotion_probs) == mt.EMOTIONS
        assert tuple(pred.gender_probs) == mt.GENDERS


class TestEvaluate:
    def test_gender_accuracy_arithmetic(self):
        m = mt.metrics_from_predictions(
            pred_emotion=[0, 0, 0, 0],
            pred_gender=[1, 1, 0, 0],
            pred_age_years=[30, 30, 30, 30],
            y_emotion=[0, 0, 0, 0],
            y_gender=[1, 0, 0, 0],
            age_years=[30, 30, 30, 30],
        )
        assert m.gender_acc == 75.0

    def test_rmse_arithmetic(self):
        m = mt.metrics_from_predictions([0, 0], [0, 0], [60.0, 50.0], [0, 0], [0, 0], [58.0, 54.0])
        assert m.age_rmse == pytest.approx(math.sqrt(10.0), abs=1e-12)

    def test_confusion_row_sums_are_support(self):
        y = RNG.integers(0, 6, 60)
        pred = RNG.integers(0, 6, 60)
        m = mt.metrics_from_predictions(pred, np.zeros(60, int), np.zeros(60), y, np.zeros(60, int), np.zeros(60))
        for cls in range(6):
            assert m.emotion_confusion[cls].sum() == np.sum(y == cls)

    def test_identical_predictions_score_perfectly(self):
        y_e = RNG.integers(0, 6, 20)
        y_g = RNG.integers(0, 2, 20)
        age = RNG.uniform(18, 80, 20)
        m = mt.metrics_from_predictions(y_e, y_g, age, y_e, y_g, age)
        assert m.emotion_acc == 100.0
        assert m.gender_acc == 100.0
        assert m.age_rmse == 0.0

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            mt.evaluate(fcn_params(), np.zeros((0, 40)), [], [], [])

    def test_end_to_end_shapes(self):
        params = fcn_params()
        m = mt.evaluate(
            params,
            RNG.normal(size=(10, 40)),
            RNG.integers(0, 6, 10),
            RNG.integers(0, 2, 10),
            RNG.uniform(20, 60, 10),
        )
        assert m.emotion_confusion.shape == (6, 6)
        assert m.emotion_confusion.sum() == 10


class TestSharedTrunkProperty:
    def test_age_head_perturbation_never_leaks(self):
        params = cnn_params(seed=21)
        x = RNG.normal(size=(5, 40))
        before, _ = mt.forward(params, x)
        params.weights["head_age.weight"][:] += RNG.normal(size=(1, 56))
        params.weights["head_age.bias"][:] += 3.0
        after, _ = mt.forward(params, x)
        assert np.array_equal(before.emotion_probs, after.emotion_probs)
        assert np.array_equal(before.gender_probs, after.gender_probs)
        assert not np.array_equal(before.age_z, after.age_z)
