import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bsr_policy import BsrPlan, full_plan, resolve_plan
from errors import ContractError
from memory_model import estimate_total
from train_harness import (
    COMPARE_METHODS,
    Dataset,
    OptimizerState,
    TrainConfig,
    batch_gradients,
    compare,
    cross_entropy,
    evaluate,
    finetune,
    lr_at,
    make_synthetic,
    make_task,
    step,
    transfer_experiment,
)
from utils_store import SCHEMAS, read_table
from vit_model import ViTParams, init_params


class TestTrainConfig:
    @pytest.mark.parametrize("fields", [
        {"optimizer": "adam"},
        {"schedule": "linear"},
        {"batch": 0},
        {"base_lr": -1e-3},
        {"epochs": 0},
        {"max_steps": 0},
    ])
    def test_invalid(self, fields):
        with pytest.raises(ContractError):
            TrainConfig(**fields)

    def test_zero_learning_rate_allowed(self):
        assert TrainConfig(base_lr=0.0).base_lr == 0.0


class TestSchedule:
    def test_constant(self):
        cfg = TrainConfig(schedule="constant", base_lr=0.1)
        assert lr_at(cfg, 0, 10) == lr_at(cfg, 9, 10) == 0.1

    def test_cosine(self):
        cfg = TrainConfig(schedule="cosine", base_lr=0.1)
        assert lr_at(cfg, 0, 10) == pytest.approx(0.1)
        assert lr_at(cfg, 5, 10) == pytest.approx(0.05)
        assert lr_at(cfg, 10, 10) == pytest.approx(0.0, abs=1e-12)
        assert lr_at(cfg, 20, 10) == pytest.approx(0.0, abs=1e-12)


def _params():
    return ViTParams({"w": np.ones((2, 2)), "b": np.ones(2)}, trainable={"w", "b"})


class TestOptimizers:
    def test_adamw_first_step(self):
        params = _params()
        cfg = TrainConfig(optimizer="adamw", base_lr=0.1, schedule="constant", weight_decay=0.1)
        grads = {"w": np.full((2, 2), 0.5), "b": np.full(2, -0.5)}
        step(params, grads, OptimizerState(), cfg, 0, 10)
        # matrices decay, vectors do not; first Adam step moves by lr * sign(g)
        assert_allclose(params["w"], np.full((2, 2), 0.99 - 0.1), atol=1e-7)
        assert_allclose(params["b"], np.full(2, 1.1), atol=1e-7)

    def test_sgd_momentum(self):
        params = _params()
        cfg = TrainConfig(optimizer="sgd_momentum", base_lr=0.1, schedule="constant",
                          weight_decay=0.1, momentum=0.9)
        state = OptimizerState()
        grads = {"w": np.full((2, 2), 1.0), "b": np.full(2, 1.0)}
        step(params, grads, state, cfg, 0, 10)
        assert_allclose(params["w"], np.full((2, 2), 1 - 0.1 * 1.1))
        assert_allclose(params["b"], np.full(2, 0.9))
        step(params, {"b": np.zeros(2)}, state, cfg, 1, 10)
        assert_allclose(params["b"], np.full(2, 0.9 - 0.1 * 0.9))

    def test_frozen_gradient_rejected(self):
        params = ViTParams({"w": np.ones((2, 2))}, trainable=())
        with pytest.raises(ContractError):
            step(params, {"w": np.ones((2, 2))}, OptimizerState(), TrainConfig(), 0, 1)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss, grad = cross_entropy(np.zeros((1, 4)), 2)
        assert loss == pytest.approx(math.log(4))
        assert_allclose(grad, [0.25, 0.25, -0.75, 0.25])

    def test_large_logits_stay_finite(self):
        loss, grad = cross_entropy(np.array([1000.0, 0.0]), 1)
        assert loss == pytest.approx(1000.0)
        assert np.all(np.isfinite(grad))


class TestSyntheticData:
    def test_shapes_and_balance(self):
        data = make_synthetic(4, 16, n=64, seed=3)
        assert data.images.shape == (64, 3, 16, 16)
        assert np.bincount(data.labels).tolist() == [16, 16, 16, 16]

    def test_train_split_is_standardized(self):
        data = make_synthetic(3, 16, n=90, seed=1)
        assert_allclose(data.images.mean(axis=(0, 2, 3)), 0.0, atol=1e-12)
        assert_allclose(data.images.std(axis=(0, 2, 3)), 1.0, atol=1e-12)

    def test_deterministic(self):
        a = make_synthetic(4, 8, shift=0.4, n=16, seed=7)
        b = make_synthetic(4, 8, shift=0.4, n=16, seed=7)
        assert_array_equal(a.images, b.images)
        assert_array_equal(a.labels, b.labels)

    def test_splits_share_train_statistics(self):
        train, test = make_task(4, 16, seed=2, n_train=32, n_test=16)
        assert_array_equal(train.mean, test.mean)
        assert_array_equal(train.std, test.std)
        assert not np.array_equal(train.images[:16], test.images)

    @pytest.mark.parametrize("kwargs", [{"num_classes": 1}, {"shift": 1.5}])
    def test_invalid(self, kwargs):
        fields = {"num_classes": 4, "image_size": 8, **kwargs}
        with pytest.raises(ContractError):
            make_synthetic(**fields)

    def test_location_task_is_linearly_separable(self):
        data = make_synthetic(2, 8, n=40, seed=5, channels=1, noise=0.0, cell=4)
        cells = data.images.reshape(40, 1, 2, 4, 2, 4).mean(axis=(3, 5)).reshape(40, -1)
        features = np.hstack([cells, np.ones((40, 1))])
        target = np.where(data.labels == 0, 1.0, -1.0)
        w, *_ = np.linalg.lstsq(features, target, rcond=None)
        assert np.all(np.sign(features @ w) == target)

    def test_batches_cover_every_sample(self):
        data = make_synthetic(2, 8, n=10, seed=0)
        seen = np.concatenate(list(data.batches(4, seed=1)))
        assert sorted(seen.tolist()) == list(range(10))
        assert [len(b) for b in data.batches(4)] == [4, 4, 2]

    def test_bad_labels(self):
        with pytest.raises(ContractError):
            Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 3]), num_classes=2)


def _small_task(config, n_train=16, n_test=8, seed=0, shift=0.5):
    return make_task(config.num_classes, config.image_size, shift, seed, config.channels,
                     n_train=n_train, n_test=n_test, cell=config.patch_size)


class TestGradients:
    def test_thread_count_does_not_change_gradients(self, toy_config):
        plan = resolve_plan("toy", toy_config)
        params = init_params(toy_config, seed=0).set_trainable(plan)
        train, _ = _small_task(toy_config, n_train=6)
        one, loss1, _, bytes1, _ = batch_gradients(train, range(6), params, toy_config, plan, 1)
        many, loss3, _, bytes3, _ = batch_gradients(train, range(6), params, toy_config, plan, 3)
        assert loss1 == loss3 and bytes1 == bytes3
        assert set(one) == set(many)
        for name in one:
            assert_array_equal(one[name], many[name])

    def test_tape_bytes_match_exact_accounting(self, toy_config):
        plan = resolve_plan("toy", toy_config)
        params = init_params(toy_config, seed=0).set_trainable(plan)
        train, _ = _small_task(toy_config, n_train=3)
        _, _, _, tape_bytes, _ = batch_gradients(train, range(3), params, toy_config, plan)
        assert tape_bytes == estimate_total(toy_config, plan, batch=3, mode="exact").grand_total

    def test_chance_accuracy_on_shuffled_labels(self, toy_config):
        train, test = _small_task(toy_config, n_train=32, n_test=64, shift=0.0)
        rng = np.random.default_rng(11)
        shuffled = Dataset(test.images, rng.permutation(test.labels), test.num_classes, "test")
        params = init_params(toy_config, seed=1)
        accuracy, loss = evaluate(params, toy_config, shuffled)
        assert 0.0 <= accuracy <= 0.6
        assert loss == pytest.approx(math.log(4), rel=0.1)

    def test_batch_gradient_is_mean_of_samples(self, toy_config):
        plan = resolve_plan("toy", toy_config)
        params = init_params(toy_config, seed=0).set_trainable(plan)
        train, _ = _small_task(toy_config, n_train=4)
        both, loss, _, tape_bytes, _ = batch_gradients(train, [0, 1], params, toy_config, plan)
        first, loss0, _, bytes0, _ = batch_gradients(train, [0], params, toy_config, plan)
        second, loss1, _, bytes1, _ = batch_gradients(train, [1], params, toy_config, plan)
        assert loss == pytest.approx((loss0 + loss1) / 2, rel=1e-12)
        assert tape_bytes == bytes0 + bytes1
        for name in both:
            assert_allclose(both[name], (first[name] + second[name]) / 2, rtol=1e-12, atol=1e-15)

    def test_evaluate_is_repeatable(self, toy_config):
        _, test = _small_task(toy_config, n_test=12)
        params = init_params(toy_config, seed=2)
        plan = resolve_plan("toy", toy_config)
        assert evaluate(params, toy_config, test, plan) == evaluate(params, toy_config, test, plan)


class TestFinetune:
    def _run(self, config, plan, **overrides):
        fields = dict(optimizer="adamw", base_lr=1e-2, schedule="cosine", epochs=2, batch=4,
                      weight_decay=0.05)
        fields.update(overrides)
        train, test = _small_task(config)
        start = init_params(config, seed=0)
        result = finetune(start, config, train, test, plan, TrainConfig(**fields), verbose=False)
        return start, result

    def test_frozen_parameters_unchanged(self, toy_config):
        plan = resolve_plan("toy", toy_config)
        start, result = self._run(toy_config, plan)
        trained = result.params
        for name in trained.frozen_names():
            assert_array_equal(trained[name], start[name])
        changed = [n for n in trained.trainable_names()
                   if not np.array_equal(trained[n], start[n])]
        assert any(n.startswith("blocks.1.") for n in changed)
        assert any(n.startswith("blocks.3.") for n in changed)

    def test_head_only(self, toy_config):
        start, result = self._run(toy_config, None)
        for i in range(toy_config.depth):
            assert_array_equal(result.params[f"blocks.{i}.fc1.weight"],
                               start[f"blocks.{i}.fc1.weight"])
        assert not np.array_equal(result.params["head.weight"], start["head.weight"])

    def test_zero_learning_rate_is_a_no_op(self, toy_config):
        start, result = self._run(toy_config, resolve_plan("toy", toy_config), base_lr=0.0,
                                  weight_decay=0.0)
        for name in start.names():
            assert_array_equal(result.params[name], start[name])

    def test_trace_layout(self, toy_config, tmp_path):
        plan = resolve_plan("toy", toy_config)
        train, test = _small_task(toy_config)
        cfg = TrainConfig(epochs=2, batch=4)
        path = tmp_path / "trace.csv"
        result = finetune(init_params(toy_config), toy_config, train, test, plan, cfg,
                          trace_path=path, verbose=False)
        trace = result.trace
        assert list(trace.columns) == SCHEMAS["trace"]
        assert (trace["split"] == "train").sum() == 8
        assert (trace["split"] == "test").sum() == 2
        per_sample = estimate_total(toy_config, plan, batch=1, mode="exact").grand_total
        assert set(trace.loc[trace["split"] == "train", "tape_bytes"]) == {4 * per_sample}
        assert result.test_accuracy == trace["accuracy"].iloc[-1]
        saved = read_table(path, schema="trace")
        assert len(saved) == len(trace)

    def test_max_steps(self, toy_config):
        _, result = self._run(toy_config, resolve_plan("toy", toy_config), max_steps=3)
        trace = result.trace
        assert (trace["split"] == "train").sum() == 3
        assert trace["split"].iloc[-1] == "test"

    def test_debug_checks_pass(self, toy_config):
        _, result = self._run(toy_config, resolve_plan("toy", toy_config), epochs=1)
        assert result.test_accuracy >= 0.0
        train, test = _small_task(toy_config)
        finetune(init_params(toy_config), toy_config, train, test,
                 BsrPlan((2,), (2,), 0.5, strict=False), TrainConfig(epochs=1, batch=8),
                 debug=True, verbose=False)

    def test_sgd_runs(self, toy_config):
        _, result = self._run(toy_config, resolve_plan("toy", toy_config),
                              optimizer="sgd_momentum", base_lr=0.05, weight_decay=1e-4)
        assert np.all(np.isfinite(result.trace["loss"]))

    def test_same_seed_same_trace(self, toy_config):
        plan = resolve_plan("toy", toy_config)
        _, first = self._run(toy_config, plan, epochs=1)
        _, second = self._run(toy_config, plan, epochs=1)
        pd.testing.assert_frame_equal(first.trace, second.trace)

    @pytest.mark.parametrize("plan_name", ["last", "toy"])
    def test_train_loss_falls_across_seeds(self, toy_config, plan_name):
        plan = None if plan_name == "last" else resolve_plan(plan_name, toy_config)
        cfg = dict(optimizer="adamw", base_lr=5e-3, schedule="constant", epochs=3, batch=8,
                   weight_decay=0.0)
        falling = 0
        for seed in range(5):
            train, test = _small_task(toy_config, n_train=32, seed=seed, shift=0.0)
            result = finetune(init_params(toy_config, seed=seed), toy_config, train, test, plan,
                              TrainConfig(seed=seed, **cfg), verbose=False)
            losses = result.trace.loc[result.trace["split"] == "train", "loss"].to_numpy()
            # four steps per epoch
            falling += losses[-4:].mean() < losses[:4].mean()
        assert falling >= 3

    def test_invalid_plan_rejected(self, toy_config):
        from errors import PlanError

        with pytest.raises(PlanError):
            self._run(toy_config, BsrPlan((7,)))


class TestCompare:
    def test_three_methods_share_a_start(self, toy_config):
        train, test = _small_task(toy_config)
        cfg = TrainConfig(epochs=1, batch=8)
        df = compare(init_params(toy_config, seed=3), toy_config, train, test,
                     resolve_plan("toy", toy_config), cfg, verbose=False)
        assert list(df.columns) == SCHEMAS["compare"]
        assert df["method"].tolist() == list(COMPARE_METHODS)
        memory = dict(zip(df["method"], df["memory_mb"]))
        assert memory["FT-Full"] > memory["BSR"] > memory["FT-Last"]
        plans = {"FT-Full": full_plan(toy_config.depth), "FT-Last": None,
                 "BSR": resolve_plan("toy", toy_config)}
        for method, plan in plans.items():
            assert memory[method] == estimate_total(toy_config, plan, cfg.batch, "paper").total_mb

    def test_residual_plan(self, toy_config):
        train, test = _small_task(toy_config)
        df = compare(init_params(toy_config), toy_config, train, test,
                     resolve_plan("residual-toy", toy_config), TrainConfig(epochs=1, batch=8),
                     verbose=False)
        assert df["accuracy"].between(0, 1).all()


@pytest.mark.slow
class TestTransfer:
    def test_bsr_between_full_and_last(self, toy_config):
        df = transfer_experiment(toy_config, resolve_plan("toy", toy_config))
        mean = df.groupby("method")["accuracy"].mean()
        assert mean["FT-Full"] >= mean["BSR"] >= mean["FT-Last"]
        assert mean["BSR"] - mean["FT-Last"] >= 0.05
