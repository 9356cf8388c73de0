import numpy as np
import pytest

from cmixer import engine
from cmixer.data import Split, synth_dataset
from cmixer.engine import Tape, Tensor, grad_check
from cmixer.errors import ContractError
from cmixer.model import CMixerConfig, CMixerModel, Toggles
from cmixer.train import (
    AdamWState,
    EmaState,
    LrSchedule,
    SgdMomentumState,
    TrainConfig,
    adamw_step,
    bce_with_logits,
    clip_global_norm,
    cross_entropy,
    ema_update,
    finetune,
    lr_at,
    pretrain,
    sgd_momentum_step,
    ssl_loss,
)


def scalar(t):
    return float(t.data.reshape(()))


class TestBceWithLogits:
    def test_zero_logit_true_target(self):
        loss = bce_with_logits(Tensor([[0.0]]), [[1.0]])
        assert scalar(loss) == pytest.approx(np.log(2.0), abs=1e-12)

    def test_saturated_no_overflow(self):
        loss = bce_with_logits(Tensor([[30.0]]), [[1.0]])
        assert scalar(loss) < 1e-9

    def test_softplus_value(self):
        # oracle: ln(1 + e^-1)
        loss = bce_with_logits(Tensor([[1.0]]), [[1.0]])
        assert scalar(loss) == pytest.approx(np.log1p(np.exp(-1.0)), abs=1e-12)

    def test_nonbinary_target_rejected(self):
        with pytest.raises(ContractError):
            bce_with_logits(Tensor([[0.0]]), [[0.5]])

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        z = rng.standard_normal((8, 3))
        y = rng.integers(0, 2, (8, 3)).astype(float)
        assert scalar(bce_with_logits(Tensor(z), y)) >= 0.0

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        y = rng.integers(0, 2, (4, 3)).astype(float)
        err = grad_check(
            lambda lv: bce_with_logits(lv["z"], y), {"z": rng.standard_normal((4, 3))}
        )
        assert err < 1e-4


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((2, 4))), [0, 3])
        assert scalar(loss) == pytest.approx(np.log(4.0), abs=1e-12)

    def test_confident_correct(self):
        z = np.full((1, 3), -30.0)
        z[0, 1] = 30.0
        assert scalar(cross_entropy(Tensor(z), [1])) < 1e-9

    def test_two_class_value(self):
        # oracle: -log(e / (e + 1))
        loss = cross_entropy(Tensor([[1.0, 0.0]]), [0])
        assert scalar(loss) == pytest.approx(-np.log(np.e / (np.e + 1.0)), abs=1e-12)

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_nonnegative_and_zero_only_at_onehot_limit(self):
        rng = np.random.default_rng(2)
        z = rng.standard_normal((5, 4))
        y = rng.integers(0, 4, 5)
        assert scalar(cross_entropy(Tensor(z), y)) > 0.0

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        y = rng.integers(0, 3, 5)
        err = grad_check(
            lambda lv: cross_entropy(lv["z"], y), {"z": rng.standard_normal((5, 3))}
        )
        assert err < 1e-4


class TestSslLoss:
    def test_equal_towers_gives_target_entropy(self):
        rng = np.random.default_rng(4)
        out = rng.standard_normal((3, 6))
        loss = scalar(ssl_loss(Tensor(out), out, temperature=1.0))
        q = np.exp(out - out.max(axis=1, keepdims=True))
        q /= q.sum(axis=1, keepdims=True)
        entropy = float(np.mean(-(q * np.log(q)).sum(axis=1)))
        assert loss == pytest.approx(entropy, abs=1e-10)

    def test_one_hot_limit(self):
        target = np.array([[50.0, -50.0]])
        anchor = np.array([[50.0, -50.0]])
        assert scalar(ssl_loss(Tensor(anchor), target, temperature=1.0)) < 1e-9

    def test_hand_evaluated_value(self):
        # independent numpy oracle for H(q, p) at anchor [1,0], target [0,1]
        q = np.exp([0.0, 1.0])
        q /= q.sum()
        p = np.exp([1.0, 0.0])
        p /= p.sum()
        expected = float(-(q * np.log(p)).sum())
        got = scalar(ssl_loss(Tensor([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 1.0))
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(1.0443203, abs=1e-6)

    def test_bad_temperature(self):
        with pytest.raises(ContractError):
            ssl_loss(Tensor([[0.0]]), np.array([[0.0]]), 0.0)

    def test_target_gradient_identically_zero(self):
        rng = np.random.default_rng(5)
        tape = Tape()
        anchor = tape.leaf("anchor", rng.standard_normal((2, 4)))
        target = tape.leaf("target", rng.standard_normal((2, 4)))
        loss = ssl_loss(anchor, target, temperature=0.5)
        grads = tape.backward(loss)
        assert np.abs(grads["anchor"]).max() > 0
        np.testing.assert_array_equal(grads["target"], np.zeros((2, 4)))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        target = rng.standard_normal((3, 4))
        err = grad_check(
            lambda lv: ssl_loss(lv["a"], target, 0.5), {"a": rng.standard_normal((3, 4))}
        )
        assert err < 1e-4


class TestEma:
    def test_decay_one_freezes_shadow(self):
        ema = EmaState.init({"w": np.zeros(3)}, 1.0)
        ema_update(ema, {"w": np.ones(3)})
        np.testing.assert_array_equal(ema.shadow["w"], np.zeros(3))

    def test_decay_zero_copies_model(self):
        ema = EmaState.init({"w": np.zeros(3)}, 0.0)
        ema_update(ema, {"w": np.ones(3)})
        np.testing.assert_array_equal(ema.shadow["w"], np.ones(3))

    def test_convex_combination(self):
        ema = EmaState.init({"w": np.zeros(1)}, 0.9)
        ema_update(ema, {"w": np.ones(1)})
        assert ema.shadow["w"][0] == pytest.approx(0.1, abs=1e-15)

    def test_shape_mismatch(self):
        ema = EmaState.init({"w": np.zeros(3)}, 0.9)
        with pytest.raises(ContractError):
            ema_update(ema, {"w": np.ones(4)})


class TestClip:
    def test_scales_down(self):
        grads, norm = clip_global_norm({"g": np.array([3.0, 4.0])}, 1.0)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(grads["g"], [0.6, 0.8])

    def test_below_threshold_untouched(self):
        g = {"g": np.array([0.3, 0.4])}
        clipped, norm = clip_global_norm(g, 1.0)
        assert norm == pytest.approx(0.5)
        np.testing.assert_array_equal(clipped["g"], g["g"])

    def test_post_clip_norm(self):
        rng = np.random.default_rng(7)
        grads = {"a": rng.standard_normal(5) * 10, "b": rng.standard_normal((2, 2)) * 10}
        clipped, norm = clip_global_norm(grads, 1.0)
        post = np.sqrt(sum(float((g**2).sum()) for g in clipped.values()))
        assert post == pytest.approx(min(norm, 1.0), abs=1e-9)


class TestOptimizers:
    def test_adamw_zero_grad_no_decay_is_identity(self):
        params = {"w": np.array([1.0, -2.0])}
        state = AdamWState.init(params, weight_decay=0.0)
        adamw_step(state, params, {"w": np.zeros(2)}, lr=0.1)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])

    def test_adamw_first_step_is_minus_lr(self):
        # bias-corrected mhat/sqrt(vhat) is exactly 1 at t=1 for unit gradient
        params = {"w": np.array([0.0])}
        state = AdamWState.init(params, weight_decay=0.0)
        adamw_step(state, params, {"w": np.ones(1)}, lr=1e-3)
        assert params["w"][0] == pytest.approx(-1e-3, rel=1e-6)

    def test_adamw_decay_shrinks_monotonically(self):
        params = {"w": np.array([5.0])}
        state = AdamWState.init(params, weight_decay=0.1)
        norms = [abs(params["w"][0])]
        for _ in range(5):
            adamw_step(state, params, {"w": np.zeros(1)}, lr=0.1)
            norms.append(abs(params["w"][0]))
        assert all(b < a for a, b in zip(norms, norms[1:]))

    def test_adamw_lr_zero_is_identity(self):
        params = {"w": np.array([1.0])}
        state = AdamWState.init(params, weight_decay=0.5)
        adamw_step(state, params, {"w": np.ones(1)}, lr=0.0)
        np.testing.assert_array_equal(params["w"], [1.0])

    def test_sgd_zero_momentum_is_vanilla(self):
        params = {"w": np.array([1.0])}
        state = SgdMomentumState.init(params, momentum=0.0)
        sgd_momentum_step(state, params, {"w": np.array([2.0])}, lr=0.1)
        assert params["w"][0] == pytest.approx(0.8)

    def test_sgd_momentum_accumulates(self):
        params = {"w": np.array([0.0])}
        state = SgdMomentumState.init(params, momentum=0.5)
        sgd_momentum_step(state, params, {"w": np.ones(1)}, lr=1.0)
        sgd_momentum_step(state, params, {"w": np.ones(1)}, lr=1.0)
        # v1=1, v2=1.5 -> p = -(1 + 1.5)
        assert params["w"][0] == pytest.approx(-2.5)


class TestSchedule:
    def test_endpoints(self):
        sched = LrSchedule("warmup-linear-decay", 1.0, 10, 100)
        assert lr_at(sched, 0) == 0.0
        assert lr_at(sched, 10) == pytest.approx(1.0)
        assert lr_at(sched, 100) == pytest.approx(0.0)

    def test_linear_midpoint(self):
        sched = LrSchedule("warmup-linear-decay", 2.0, 0, 100)
        assert lr_at(sched, 50) == pytest.approx(1.0)

    def test_cosine_midpoint(self):
        sched = LrSchedule("warmup-cosine", 2.0, 0, 100)
        assert lr_at(sched, 50) == pytest.approx(1.0)

    def test_continuous_at_warmup_boundary(self):
        for kind in ("warmup-linear-decay", "warmup-cosine"):
            sched = LrSchedule(kind, 0.7, 25, 100)
            before = lr_at(sched, 24)
            at = lr_at(sched, 25)
            assert abs(at - before) < 0.7 / 25 + 1e-12
            assert at == pytest.approx(0.7)

    def test_out_of_range_step(self):
        sched = LrSchedule("warmup-cosine", 1.0, 0, 10)
        with pytest.raises(ContractError):
            lr_at(sched, 11)
        with pytest.raises(ContractError):
            lr_at(sched, -1)

    def test_bad_warmup(self):
        with pytest.raises(ContractError):
            LrSchedule("warmup-cosine", 1.0, 20, 10)

    def test_nonnegative_everywhere(self):
        sched = LrSchedule("warmup-cosine", 0.3, 7, 53)
        assert all(lr_at(sched, s) >= 0.0 for s in range(54))


def small_setup(seed=0, toggles=None):
    bundle = synth_dataset(2, 40, 16, np.random.default_rng(seed))
    config = CMixerConfig.small(image_side=16, hidden=8, num_layers=1)
    model = CMixerModel(config, rng=np.random.default_rng(seed))
    train_config = TrainConfig(
        pretrain_epochs=2,
        pretrain_batch_size=28,
        pretrain_warmup_steps=2,
        epochs=3,
        batch_size=28,
        warmup_steps=2,
        seed=seed,
        toggles=toggles if toggles is not None else Toggles(),
    )
    return bundle, model, train_config


class TestPretrain:
    def test_no_ssl_toggle_keeps_weights(self):
        bundle, model, config = small_setup(toggles=Toggles(ssl=False))
        before = model.copy_params()
        result = pretrain(model, bundle, config, np.random.default_rng(0))
        assert result.losses == []
        for name in before:
            np.testing.assert_array_equal(result.model.params[name], before[name])

    def test_loss_logged_every_step(self):
        bundle, model, config = small_setup()
        n_train = len(bundle.indices(Split.TRAIN_LABELED))
        result = pretrain(model, bundle, config, np.random.default_rng(0))
        steps_per_epoch = int(np.ceil(n_train / config.pretrain_batch_size))
        assert len(result.losses) == config.pretrain_epochs * steps_per_epoch
        assert all(np.isfinite(v) for v in result.losses)

    def test_single_step_shadow_is_exact_convex_combination(self):
        bundle, model, config = small_setup()
        config.pretrain_epochs = 1
        config.pretrain_batch_size = 500  # one step total
        init = model.copy_params()
        result = pretrain(model, bundle, config, np.random.default_rng(0))
        d = config.ema_decay
        for name in init:
            expected = d * init[name] + (1.0 - d) * result.model.params[name]
            np.testing.assert_allclose(result.ema[name], expected, atol=1e-12)

    def test_ema_trajectory_matches_closed_form_and_stays_in_hull(self):
        # drive ema_update with a random live-weight trajectory and check the
        # shadow against an independently folded combination at every step
        rng = np.random.default_rng(8)
        init = {"w": rng.standard_normal((3, 2))}
        ema = EmaState.init(init, 0.9)
        reference = init["w"].copy()
        lows, highs = init["w"].copy(), init["w"].copy()
        for _ in range(25):
            live = {"w": rng.standard_normal((3, 2))}
            ema_update(ema, live)
            reference = 0.9 * reference + 0.1 * live["w"]
            np.testing.assert_allclose(ema.shadow["w"], reference, atol=1e-9)
            lows = np.minimum(lows, live["w"])
            highs = np.maximum(highs, live["w"])
            assert np.all(ema.shadow["w"] >= np.minimum(lows, init["w"]) - 1e-12)
            assert np.all(ema.shadow["w"] <= np.maximum(highs, init["w"]) + 1e-12)

    def test_empty_train_split_rejected(self):
        bundle, model, config = small_setup()
        empty = bundle.splits.copy()
        empty[:] = 3  # everything becomes test
        from dataclasses import replace

        with pytest.raises(ContractError):
            pretrain(model, replace(bundle, splits=empty), config, np.random.default_rng(0))

    def test_no_rm_differs_from_masked(self):
        bundle, model, config = small_setup()
        masked = pretrain(model, bundle, config, np.random.default_rng(0))
        bundle2, model2, config2 = small_setup(toggles=Toggles(rm=False))
        plain = pretrain(model2, bundle2, config2, np.random.default_rng(0))
        assert masked.losses != plain.losses


class TestFinetune:
    def test_loss_decreases_and_logs(self):
        bundle, model, config = small_setup()
        n_train = len(bundle.indices(Split.TRAIN_LABELED))
        result = finetune(model, bundle, config, np.random.default_rng(0))
        losses = [v for (_, _, s, m, v) in result.rows if m == "loss"]
        assert len(losses) == config.epochs * int(np.ceil(n_train / config.batch_size))
        assert losses[-1] < losses[0]

    def test_post_clip_grad_norm_bounded(self):
        bundle, model, config = small_setup()
        result = finetune(model, bundle, config, np.random.default_rng(0))
        norms = [v for (_, _, s, m, v) in result.rows if m == "grad_norm"]
        assert norms and all(v <= config.clip_norm + 1e-6 for v in norms)

    def test_bitwise_deterministic(self):
        bundle, model, config = small_setup()
        r1 = finetune(model, bundle, config, np.random.default_rng(3))
        bundle2, model2, config2 = small_setup()
        r2 = finetune(model2, bundle2, config2, np.random.default_rng(3))
        l1 = [v for (_, _, _, m, v) in r1.rows if m == "loss"]
        l2 = [v for (_, _, _, m, v) in r2.rows if m == "loss"]
        assert l1 == l2  # bitwise identical trajectories

    def test_val_metrics_logged_per_epoch(self):
        bundle, model, config = small_setup()
        result = finetune(model, bundle, config, np.random.default_rng(0))
        val_rows = [(e, m) for (_, e, s, m, _) in result.rows if s == "val"]
        assert len([m for _, m in val_rows if m == "acc"]) == config.epochs

    def test_no_labeled_samples_rejected(self):
        bundle, model, config = small_setup()
        tags = bundle.splits.copy()
        tags[:] = 3
        from dataclasses import replace

        with pytest.raises(ContractError):
            finetune(model, replace(bundle, splits=tags), config, np.random.default_rng(0))
