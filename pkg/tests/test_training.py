"""Training tests: loss terms, gradient routing, SGD, schedules, the
training loop, temperature calibration, and the finite-difference checker."""
import copy
import math

import numpy as np
import pytest

from cape.backbone import LayerSpec
from cape.heads import (
    batch_cape_forward,
    batch_shifted_maps,
    batch_vanilla_forward,
)
from cape.model import batch_features, init_model
from cape.synth import SynthSpec, generate
from cape.tensor import softmax_axis
from cape.training import (
    EPOCH_LOG_COLUMNS,
    EpochStats,
    Schedule,
    TrainConfig,
    apply_gradients,
    bootstrap_loss,
    calibrate_cape_temperature,
    cross_entropy,
    grad_check,
    kld,
    model_accuracies,
    read_epoch_log,
    sgd_step,
    train,
    write_epoch_log,
)

POINT_LAYERS = (LayerSpec(3, 4, 2), LayerSpec(4, 2, 2))  # 4x4 input -> 1x1x2
SMALL_LAYERS = (LayerSpec(3, 4, 2), LayerSpec(4, 6, 2))  # 24x24 input -> 6x6x6


def small_model(seed=0, classes=3):
    return init_model(seed, classes, layers=SMALL_LAYERS, input_size=24)


def point_model(seed=0):
    return init_model(seed, 2, layers=POINT_LAYERS, input_size=4)


def random_batch(rng, n=8, size=24):
    images = rng.uniform(0.0, 1.0, size=(n, size, size, 3))
    labels = rng.integers(0, 3, size=n)
    return images, labels


class TestCrossEntropy:
    def test_full_mass_on_target_is_zero(self):
        assert cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == 0.0

    def test_uniform_gives_log_class_count(self):
        assert cross_entropy(np.full(5, 0.2), 3) == pytest.approx(math.log(5), abs=1e-12)

    def test_quarter_mass_gives_log_four(self):
        assert cross_entropy(np.array([0.25, 0.75]), 0) == pytest.approx(
            math.log(4), abs=1e-4
        )

    def test_one_hot_vector_target(self):
        probs = np.array([0.1, 0.2, 0.7])
        assert cross_entropy(probs, np.array([0.0, 0.0, 1.0])) == pytest.approx(
            -math.log(0.7), abs=1e-12
        )

    def test_zero_probability_clamped(self):
        out = cross_entropy(np.array([1.0, 0.0]), 1)
        assert out == pytest.approx(-math.log(1e-12), abs=1e-6)

    def test_malformed_targets_rejected(self):
        probs = np.array([0.5, 0.5])
        with pytest.raises(ValueError, match="one-hot"):
            cross_entropy(probs, np.array([0.5, 0.5]))
        with pytest.raises(ValueError, match="range"):
            cross_entropy(probs, 2)
        with pytest.raises(ValueError, match="shape"):
            cross_entropy(probs, np.array([1.0, 0.0, 0.0]))


class TestKld:
    def test_identical_distributions_give_zero(self):
        p = np.array([0.3, 0.2, 0.5])
        assert kld(p, p) == 0.0

    def test_point_mass_versus_even_split_gives_log_two(self):
        assert kld(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(
            math.log(2), abs=1e-12
        )

    def test_nonnegative_over_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            a = softmax_axis(rng.standard_normal(4) * 3.0, 0)
            b = softmax_axis(rng.standard_normal(4) * 3.0, 0)
            assert kld(a, b) >= 0.0

    def test_zero_target_entries_contribute_nothing(self):
        assert kld(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            kld(np.array([1.0, 0.0]), np.array([0.5, 0.25, 0.25]))


class TestSchedule:
    def test_step_decays_every_period(self):
        sched = Schedule.step(decay=0.1, period=2)
        scales = [sched.scale_at(e, 6) for e in range(6)]
        np.testing.assert_allclose(scales, [1, 1, 0.1, 0.1, 0.01, 0.01], atol=1e-15)

    def test_linear_ramps_to_final_fraction(self):
        sched = Schedule.linear(final_fraction=0.1)
        assert sched.scale_at(0, 11) == pytest.approx(1.0, abs=1e-15)
        assert sched.scale_at(5, 11) == pytest.approx(0.55, abs=1e-12)
        assert sched.scale_at(10, 11) == pytest.approx(0.1, abs=1e-12)

    def test_single_epoch_linear_is_flat(self):
        assert Schedule.linear(0.1).scale_at(0, 1) == 1.0

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            Schedule("cosine")
        with pytest.raises(ValueError, match="positive"):
            Schedule("step", period=0)


class TestTrainConfig:
    def test_scratch_mode_defaults(self):
        config = TrainConfig.ts()
        assert (config.alpha, config.beta) == (1.0, 1.0)
        assert config.teacher_temperature == 2.0
        assert config.selective_kld

    def test_post_fit_mode_defaults(self):
        config = TrainConfig.pf()
        assert (config.alpha, config.beta) == (0.0, 1.0)

    def test_mode_is_case_insensitive(self):
        assert TrainConfig("TS", 1.0, 1.0, 1e-3, 1).mode == "ts"

    def test_scratch_mode_pins_loss_weights(self):
        with pytest.raises(ValueError, match="alpha"):
            TrainConfig.ts(alpha=0.5)
        with pytest.raises(ValueError, match="beta"):
            TrainConfig.ts(beta=0.0)

    def test_post_fit_mode_pins_loss_weights(self):
        with pytest.raises(ValueError, match="alpha"):
            TrainConfig.pf(alpha=1.0)
        with pytest.raises(ValueError, match="beta"):
            TrainConfig.pf(beta=0.5)

    def test_post_fit_zero_beta_warns(self):
        with pytest.warns(UserWarning, match="zero gradients"):
            TrainConfig.pf(beta=0.0)

    def test_scratch_ce_on_ensemble_allows_beta_zero(self):
        config = TrainConfig.ts(ce_on_cape=True, beta=0.0)
        assert config.beta == 0.0

    def test_basic_validation(self):
        with pytest.raises(ValueError, match="mode"):
            TrainConfig("sgd", 1.0, 1.0, 1e-3, 1)
        with pytest.raises(ValueError, match="learning rate"):
            TrainConfig.ts(learning_rate=0.0)
        with pytest.raises(ValueError, match="epochs"):
            TrainConfig.ts(epochs=-1)
        with pytest.raises(ValueError, match="teacher"):
            TrainConfig.ts(teacher_temperature=0.0)


class TestBootstrapLoss:
    def setup_method(self):
        self.rng = np.random.default_rng(1)
        self.model = small_model(seed=1)
        self.images, self.labels = random_batch(self.rng)

    def manual_terms(self, model, config):
        features = batch_features(model, self.images)
        logits = features.mean(axis=(1, 2)) @ model.vanilla.weights + model.vanilla.bias
        vanilla = softmax_axis(logits, axes=1, temperature=model.vanilla.temperature)
        teacher = softmax_axis(logits, axes=1, temperature=config.teacher_temperature)
        student = batch_cape_forward(
            batch_shifted_maps(features, model.cape), model.cape.temperature
        )
        return vanilla, teacher, student

    def test_total_combines_terms_exactly(self):
        for config in (TrainConfig.ts(), TrainConfig.pf()):
            breakdown, _ = bootstrap_loss(self.model, self.images, self.labels, config)
            assert breakdown.total == pytest.approx(
                config.alpha * breakdown.ce_term + config.beta * breakdown.kld_term,
                abs=1e-12,
            )

    def test_terms_match_per_sample_oracles(self):
        config = TrainConfig.ts(selective_kld=False)
        breakdown, _ = bootstrap_loss(self.model, self.images, self.labels, config)
        vanilla, teacher, student = self.manual_terms(self.model, config)
        expected_ce = np.mean(
            [cross_entropy(vanilla[i], int(self.labels[i])) for i in range(len(self.labels))]
        )
        expected_kld = np.mean(
            [kld(teacher[i], student[i]) for i in range(len(self.labels))]
        )
        assert breakdown.ce_term == pytest.approx(expected_ce, abs=1e-12)
        assert breakdown.kld_term == pytest.approx(expected_kld, abs=1e-12)

    def test_reversed_divergence_swaps_arguments(self):
        config = TrainConfig.ts(selective_kld=False, kld_reverse=True)
        breakdown, _ = bootstrap_loss(self.model, self.images, self.labels, config)
        _, teacher, student = self.manual_terms(self.model, config)
        expected = np.mean([kld(student[i], teacher[i]) for i in range(len(self.labels))])
        assert breakdown.kld_term == pytest.approx(expected, abs=1e-12)

    def test_squared_temperature_rescale(self):
        plain = TrainConfig.ts(selective_kld=False)
        scaled = TrainConfig.ts(selective_kld=False, kld_t2_rescale=True)
        a, _ = bootstrap_loss(self.model, self.images, self.labels, plain)
        b, _ = bootstrap_loss(self.model, self.images, self.labels, scaled)
        assert b.kld_term == pytest.approx(4.0 * a.kld_term, abs=1e-12)
        assert b.ce_term == pytest.approx(a.ce_term, abs=1e-12)

    def test_matching_teacher_zeroes_divergence(self):
        config = TrainConfig.ts(selective_kld=False)
        _, _, student = self.manual_terms(self.model, config)
        breakdown, _ = bootstrap_loss(
            self.model,
            None,
            self.labels,
            config,
            features=batch_features(self.model, self.images),
            teacher_probs=student,
        )
        assert breakdown.kld_term == pytest.approx(0.0, abs=1e-12)

    def test_all_agreeing_batch_disables_divergence(self):
        model = small_model(seed=2)
        model.cape.log_temperature = math.log(1e6)
        config = TrainConfig.ts()
        vanilla, _, student = self.manual_terms(model, config)
        assert (student.argmax(axis=1) == vanilla.argmax(axis=1)).all()
        breakdown, grads = bootstrap_loss(model, self.images, self.labels, config)
        assert breakdown.kld_active_fraction == 0.0
        assert breakdown.kld_term == 0.0
        np.testing.assert_array_equal(grads.cape_weights, 0.0)
        np.testing.assert_array_equal(grads.cape_bias, 0.0)
        assert grads.cape_log_temperature == 0.0
        before = copy.deepcopy(model.cape)
        apply_gradients(model, grads, lr=0.1)
        np.testing.assert_array_equal(model.cape.weights, before.weights)
        np.testing.assert_array_equal(model.cape.bias, before.bias)
        assert model.cape.log_temperature == before.log_temperature
        assert grads.vanilla_weights is not None
        assert np.abs(grads.vanilla_weights).max() > 0.0

    def test_all_disagreeing_batch_matches_plain_divergence(self):
        model = small_model(seed=3)
        model.cape.weights = np.roll(model.cape.weights, 1, axis=1)
        model.cape.log_temperature = math.log(1e6)
        selective, _ = bootstrap_loss(
            model, self.images, self.labels, TrainConfig.ts()
        )
        plain, _ = bootstrap_loss(
            model, self.images, self.labels, TrainConfig.ts(selective_kld=False)
        )
        assert selective.kld_active_fraction == 1.0
        assert selective.kld_term == pytest.approx(plain.kld_term, abs=1e-12)

    def test_post_fit_gradients_reach_only_ensemble_head(self):
        config = TrainConfig.pf(selective_kld=False)
        _, grads = bootstrap_loss(self.model, self.images, self.labels, config)
        assert grads.vanilla_weights is None
        assert grads.vanilla_bias is None
        assert grads.backbone is None
        assert np.abs(grads.cape_weights).max() > 0.0

    def test_scratch_gradients_reach_backbone(self):
        _, grads = bootstrap_loss(self.model, self.images, self.labels, TrainConfig.ts())
        assert grads.backbone is not None
        assert len(grads.backbone) == len(self.model.backbone.weights)
        assert grads.vanilla_weights is not None

    def test_zero_beta_post_fit_gives_zero_gradients(self):
        with pytest.warns(UserWarning):
            config = TrainConfig.pf(beta=0.0)
        _, grads = bootstrap_loss(self.model, self.images, self.labels, config)
        np.testing.assert_array_equal(grads.cape_weights, 0.0)
        np.testing.assert_array_equal(grads.cape_bias, 0.0)
        assert grads.cape_log_temperature == 0.0
        assert grads.vanilla_weights is None
        assert grads.backbone is None

    def test_precomputed_features_match_backbone_pass(self):
        config = TrainConfig.pf()
        features = batch_features(self.model, self.images)
        direct, _ = bootstrap_loss(self.model, self.images, self.labels, config)
        cached, _ = bootstrap_loss(
            self.model, None, self.labels, config, features=features
        )
        assert direct.total == pytest.approx(cached.total, abs=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            bootstrap_loss(
                self.model, self.images[:0], self.labels[:0], TrainConfig.ts()
            )


class TestClosedFormGradients:
    """Single-cell feature model: every head gradient has a hand formula."""

    def setup_method(self):
        rng = np.random.default_rng(4)
        self.model = point_model(seed=4)
        self.images = rng.uniform(0.0, 1.0, size=(6, 4, 4, 3))
        self.labels = rng.integers(0, 2, size=6)
        self.features = batch_features(self.model, self.images)
        assert self.features.shape[1:] == (1, 1, 2)

    def test_divergence_gradient_matches_softmax_formula(self):
        config = TrainConfig.pf(selective_kld=False)
        _, grads = bootstrap_loss(self.model, self.images, self.labels, config)
        f = self.features[:, 0, 0, :]
        logits = f @ self.model.vanilla.weights + self.model.vanilla.bias
        teacher = softmax_axis(logits, axes=1, temperature=config.teacher_temperature)
        t_prime = self.model.cape.temperature
        u = (f @ self.model.cape.weights + self.model.cape.bias) / t_prime
        student = softmax_axis(u, axes=1)
        n = len(self.labels)
        dlogits = (student - teacher) / (n * t_prime)
        np.testing.assert_allclose(
            grads.cape_weights, f.T @ dlogits, atol=1e-8, rtol=0
        )
        np.testing.assert_allclose(grads.cape_bias, dlogits.sum(axis=0), atol=1e-8)
        expected_dtheta = -float(np.sum((student - teacher) * u)) / n
        assert grads.cape_log_temperature == pytest.approx(expected_dtheta, abs=1e-8)

    def test_cross_entropy_gradient_matches_softmax_formula(self):
        config = TrainConfig.ts(selective_kld=False)
        _, grads = bootstrap_loss(self.model, self.images, self.labels, config)
        f = self.features[:, 0, 0, :]
        logits = f @ self.model.vanilla.weights + self.model.vanilla.bias
        probs = softmax_axis(logits, axes=1)
        n = len(self.labels)
        onehot = np.eye(2)[self.labels]
        dlogits = (probs - onehot) / n
        np.testing.assert_allclose(
            grads.vanilla_weights, f.T @ dlogits, atol=1e-8, rtol=0
        )
        np.testing.assert_allclose(grads.vanilla_bias, dlogits.sum(axis=0), atol=1e-8)


class TestSgdStep:
    def test_zero_rate_is_identity(self):
        param = np.array([1.0, -2.0])
        np.testing.assert_array_equal(sgd_step(param, np.array([3.0, 4.0]), 0.0), param)

    def test_plain_update(self):
        assert sgd_step(np.array(1.0), np.array(2.0), 0.1) == pytest.approx(0.8, abs=1e-15)

    def test_weight_decay_shrinks_parameter(self):
        assert sgd_step(np.array(1.0), np.array(0.0), 1.0, weight_decay=0.1) == (
            pytest.approx(0.9, abs=1e-15)
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="mismatch"):
            sgd_step(np.zeros(2), np.zeros(3), 0.1)


class TestApplyGradients:
    def test_temperature_parameter_never_decayed(self):
        # An all-agreeing batch yields zero ensemble-head gradients, so any
        # temperature movement under heavy weight decay would be decay alone.
        model = small_model(seed=5)
        model.cape.log_temperature = math.log(1e6)
        rng = np.random.default_rng(6)
        images, labels = random_batch(rng, n=4)
        breakdown, grads = bootstrap_loss(model, images, labels, TrainConfig.ts())
        assert breakdown.kld_active_fraction == 0.0
        weights_before = model.cape.weights.copy()
        apply_gradients(model, grads, lr=0.5, weight_decay=10.0)
        assert model.cape.log_temperature == math.log(1e6)
        assert np.abs(model.cape.weights - weights_before).max() > 0.0


def tiny_dataset(seed=7, count=90, classes=3):
    spec = SynthSpec(
        num_classes=classes, image_size=24, train_count=count, test_count=0, seed=seed
    )
    split = generate(spec).splits["train"]
    return split.images, split.labels


class TestTrain:
    def test_zero_epochs_returns_unchanged_model(self):
        model = small_model(seed=8)
        before = copy.deepcopy(model)
        result = train(model, tiny_dataset(count=12), TrainConfig.ts(epochs=0))
        assert result.log == []
        np.testing.assert_array_equal(result.model.cape.weights, before.cape.weights)
        np.testing.assert_array_equal(
            result.model.vanilla.weights, before.vanilla.weights
        )

    def test_empty_dataset_rejected(self):
        images, labels = tiny_dataset(count=0)
        with pytest.raises(ValueError, match="empty"):
            train(small_model(), (images, labels), TrainConfig.ts(epochs=1))

    def test_post_fit_requires_pretrained_model(self):
        model = small_model(seed=9)
        assert not model.pretrained
        with pytest.raises(ValueError, match="pretrained"):
            train(model, tiny_dataset(count=12), TrainConfig.pf(epochs=1))

    def test_post_fit_freezes_backbone_and_vanilla_head(self):
        model = small_model(seed=10)
        model.pretrained = True
        before = copy.deepcopy(model)
        train(model, tiny_dataset(count=30), TrainConfig.pf(epochs=2, batch_size=16))
        for got, want in zip(model.backbone.weights, before.backbone.weights):
            np.testing.assert_array_equal(got, want)
        for got, want in zip(model.backbone.biases, before.backbone.biases):
            np.testing.assert_array_equal(got, want)
        np.testing.assert_array_equal(model.vanilla.weights, before.vanilla.weights)
        np.testing.assert_array_equal(model.vanilla.bias, before.vanilla.bias)

    def test_scratch_mode_moves_backbone(self):
        model = small_model(seed=11)
        before = copy.deepcopy(model)
        train(model, tiny_dataset(count=30), TrainConfig.ts(epochs=1, batch_size=16))
        deltas = [
            np.abs(got - want).max()
            for got, want in zip(model.backbone.weights, before.backbone.weights)
        ]
        assert max(deltas) > 0.0

    def test_initialization_copies_vanilla_parameters(self):
        model = small_model(seed=12)
        model.pretrained = True
        model.cape.weights = np.zeros_like(model.cape.weights)
        with pytest.warns(UserWarning):
            config = TrainConfig.pf(beta=0.0, epochs=1, batch_size=16)
        images, labels = tiny_dataset(count=30)
        train(model, (images, labels), config)
        np.testing.assert_array_equal(model.cape.weights, model.vanilla.weights)
        np.testing.assert_array_equal(model.cape.bias, model.vanilla.bias)
        expected_t = calibrate_cape_temperature(
            model, batch_features(model, images)
        )
        assert model.cape.temperature == pytest.approx(expected_t, rel=1e-12)

    def test_initialization_can_be_disabled(self):
        model = small_model(seed=13)
        model.pretrained = True
        model.cape.log_temperature = 0.75
        frozen_weights = model.cape.weights.copy()
        with pytest.warns(UserWarning):
            config = TrainConfig.pf(
                beta=0.0, epochs=1, batch_size=16, init_cape_from_vanilla=False
            )
        train(model, tiny_dataset(count=30), config)
        np.testing.assert_array_equal(model.cape.weights, frozen_weights)
        assert model.cape.log_temperature == 0.75

    def test_fixed_seed_reproduces_parameters_bit_for_bit(self):
        data = tiny_dataset(count=48)
        runs = []
        for _ in range(2):
            model = small_model(seed=14)
            config = TrainConfig.ts(epochs=2, batch_size=16, seed=3)
            train(model, data, config)
            runs.append(model)
        a, b = runs
        np.testing.assert_array_equal(a.cape.weights, b.cape.weights)
        np.testing.assert_array_equal(a.vanilla.weights, b.vanilla.weights)
        assert a.cape.log_temperature == b.cape.log_temperature
        for wa, wb in zip(a.backbone.weights, b.backbone.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_post_fit_improves_ensemble_accuracy_on_frozen_random_backbone(self):
        model = small_model(seed=15)
        model.pretrained = True
        result = train(
            model,
            tiny_dataset(count=90),
            TrainConfig.pf(epochs=5, batch_size=16, learning_rate=1e-3),
        )
        assert len(result.log) == 5
        assert result.log[-1].cape_train_acc >= result.log[0].cape_train_acc

    def test_epoch_log_tracks_schedule_and_validation(self):
        model = small_model(seed=16)
        config = TrainConfig.ts(
            epochs=3, batch_size=16, schedule=Schedule.step(decay=0.1, period=2)
        )
        train_012 = tiny_dataset(count=32)
        val = tiny_dataset(seed=8, count=16)
        result = train(model, train_012, config, val_data=val)
        rates = [row.lr for row in result.log]
        np.testing.assert_allclose(
            rates, [1e-3, 1e-3, 1e-4], rtol=1e-12
        )
        for row in result.log:
            assert 0.0 <= row.cape_train_acc <= 1.0
            assert 0.0 <= row.cape_val_acc <= 1.0
            assert 0.0 <= row.kld_active_fraction <= 1.0


class TestEpochLog:
    def test_csv_round_trip(self, tmp_path):
        log = [
            EpochStats(0, 1e-3, 1.1, 0.2, 0.5, 0.7, 0.6),
            EpochStats(1, 1e-4, 0.9, 0.1, 0.25, 0.8, 0.75, 0.81, 0.79),
        ]
        path = tmp_path / "log.csv"
        write_epoch_log(path, log)
        header = path.read_text().splitlines()[0]
        assert header == ",".join(EPOCH_LOG_COLUMNS)
        loaded = read_epoch_log(path)
        assert len(loaded) == 2
        for got, want in zip(loaded, log):
            for name in EPOCH_LOG_COLUMNS:
                a, b = getattr(got, name), getattr(want, name)
                if isinstance(a, float) and math.isnan(b):
                    assert math.isnan(a)
                else:
                    assert a == b


class TestCalibration:
    def test_returns_smallest_agreement_maximizer(self):
        model = small_model(seed=17)
        rng = np.random.default_rng(18)
        images, _ = random_batch(rng, n=32)
        features = batch_features(model, images)
        chosen = calibrate_cape_temperature(model, features)
        vanilla = batch_vanilla_forward(features, model.vanilla).argmax(axis=1)
        maps = batch_shifted_maps(features, model.cape)

        def agreement(t):
            return float((batch_cape_forward(maps, t).argmax(axis=1) == vanilla).mean())

        cells = features.shape[1] * features.shape[2]
        grid = np.geomspace(1.0, 4.0 * cells, 49)
        curve = [agreement(float(t)) for t in grid]
        best = max(curve)
        assert agreement(chosen) == best
        assert all(value < best for t, value in zip(grid, curve) if t < chosen)

    def test_respects_custom_grid(self):
        model = small_model(seed=19)
        rng = np.random.default_rng(20)
        images, _ = random_batch(rng, n=8)
        features = batch_features(model, images)
        assert calibrate_cape_temperature(model, features, grid=[2.5]) == 2.5

    def test_input_validation(self):
        model = small_model(seed=21)
        with pytest.raises(ValueError, match="nonempty"):
            calibrate_cape_temperature(model, np.zeros((0, 6, 6, 6)))
        with pytest.raises(ValueError, match="nonempty"):
            calibrate_cape_temperature(model, np.zeros((6, 6, 6)))
        features = np.zeros((1, 6, 6, 6))
        with pytest.raises(ValueError, match="grid"):
            calibrate_cape_temperature(model, features, grid=[])
        with pytest.raises(ValueError, match="grid"):
            calibrate_cape_temperature(model, features, grid=[1.0, -2.0])


class TestModelAccuracies:
    def test_matches_manual_argmax_counts(self):
        model = small_model(seed=22)
        images, labels = tiny_dataset(count=24)
        van_acc, cape_acc = model_accuracies(model, images, labels)
        features = batch_features(model, images)
        vanilla = batch_vanilla_forward(features, model.vanilla).argmax(axis=1)
        student = batch_cape_forward(
            batch_shifted_maps(features, model.cape), model.cape.temperature
        ).argmax(axis=1)
        assert van_acc == pytest.approx(float((vanilla == labels).mean()), abs=1e-15)
        assert cape_acc == pytest.approx(float((student == labels).mean()), abs=1e-15)


class TestGradCheck:
    def setup_method(self):
        rng = np.random.default_rng(23)
        self.images, self.labels = random_batch(rng, n=4)

    def test_scratch_mode_gradients_pass(self):
        model = small_model(seed=24)
        report = grad_check(model, self.images, self.labels, TrainConfig.ts())
        assert report.passed, f"max rel error {report.max_rel_error:.3e}"
        names = {entry.name for entry in report.entries}
        assert {"cape.weights", "cape.bias", "cape.log_temperature"} <= names
        assert "vanilla.weights" in names
        assert any(name.startswith("backbone.w") for name in names)

    def test_post_fit_mode_gradients_pass(self):
        model = small_model(seed=25)
        report = grad_check(model, self.images, self.labels, TrainConfig.pf())
        assert report.passed
        names = {entry.name for entry in report.entries}
        assert "vanilla.weights" not in names
        assert not any(name.startswith("backbone") for name in names)

    def test_ce_on_ensemble_gradients_pass(self):
        model = small_model(seed=26)
        config = TrainConfig.ts(ce_on_cape=True, beta=0.0)
        report = grad_check(model, self.images, self.labels, config)
        assert report.passed

    @pytest.mark.parametrize(
        "group", ["cape.weights", "cape.log_temperature", "backbone.w0"]
    )
    def test_corrupted_gradient_fails(self, group):
        model = small_model(seed=27)
        report = grad_check(
            model, self.images, self.labels, TrainConfig.ts(), corrupt=group
        )
        assert not report.passed
        assert report.max_rel_error > report.tolerance
