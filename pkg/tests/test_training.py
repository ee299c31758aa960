"""Tests for the loss, the optimizers and the epoch loop"""

import math
import os

import numpy as np
import pandas as pd
import pytest

from conftest import make_examples
from core.errors import ConfigError, DataError, NumericError, ShapeError
from core.model import ModelConfig, ModelParams, init_params
from core.tensor import Tape, Tensor, add, matmul, scale, sigmoid
from core.text_pipeline import EncodedExample
from core.training import (
    OptimizerState,
    TrainConfig,
    adam_step,
    bce_loss,
    fit,
    sgd_step,
    split_validation,
    train,
    write_history,
)


class TestBceLoss:
    def test_symmetric_case(self):
        loss = bce_loss(Tensor(np.full(4, 0.5)), [1, 0, 0, 1])
        assert loss.item() == pytest.approx(math.log(2), abs=1e-15)

    def test_worked_example(self):
        loss = bce_loss(Tensor(np.array([0.8, 0.3])), [1, 0])
        assert loss.item() == pytest.approx(-(math.log(0.8) + math.log(0.7)) / 2, abs=1e-15)
        assert loss.item() == pytest.approx(0.28990, abs=1e-5)

    def test_clamped_perfect_prediction(self):
        eps = 1e-7
        loss = bce_loss(Tensor(np.array([1.0, 0.0])), [1, 0], eps)
        assert loss.item() == pytest.approx(-math.log(1 - eps), rel=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            bce_loss(Tensor(np.full(3, 0.5)), [1, 0])

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = int(rng.integers(1, 9))
            p = rng.uniform(0.01, 0.99, size=m)
            y = rng.integers(0, 2, size=m)
            expected = -math.fsum(
                yj * math.log(pj) + (1 - yj) * math.log(1 - pj) for pj, yj in zip(p, y)
            ) / m
            assert abs(bce_loss(Tensor(p), y).item() - expected) < 1e-12

    def test_logit_gradient_identity(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=5)
        y = rng.integers(0, 2, size=5)
        tape = Tape()
        logits = tape.variable(z)
        probs = sigmoid(logits)
        grads = tape.backward(bce_loss(probs, y))
        np.testing.assert_allclose(grads[logits.node_id], (probs.data - y) / 5, atol=1e-10)

    def test_bounds(self):
        eps = 1e-7
        rng = np.random.default_rng(2)
        for _ in range(50):
            value = bce_loss(Tensor(rng.uniform(size=(3, 4))), rng.integers(0, 2, size=(3, 4)), eps).item()
            assert 0 <= value <= -math.log(eps)


class TestOptimizers:
    def _params(self):
        return ModelParams({"x": np.array([1.0, -2.0]), "y": np.array([[0.5]])})

    def test_zero_gradient_leaves_params(self):
        params = self._params()
        state = OptimizerState.zeros(params)
        adam_step(params, {"x": np.zeros(2), "y": np.zeros((1, 1))}, state, 0.1)
        assert params.equals(self._params())
        assert state.t == 1

    def test_first_step_moves_by_lr(self):
        params = self._params()
        state = OptimizerState.zeros(params)
        adam_step(params, {"x": np.array([0.5, -3.0]), "y": np.array([[2.0]])}, state, 1e-3)
        np.testing.assert_allclose(params["x"], [1.0 - 1e-3, -2.0 + 1e-3], rtol=1e-6)
        np.testing.assert_allclose(params["y"], [[0.5 - 1e-3]], rtol=1e-6)

    def test_descends_a_parabola(self):
        params = ModelParams({"x": np.array([1.0])})
        state = OptimizerState.zeros(params)
        trace = [1.0]
        for _ in range(2):
            adam_step(params, {"x": 2 * params["x"]}, state, 0.1)
            trace.append(float(params["x"][0]))
        assert trace[0] > trace[1] > trace[2]

    def test_non_finite_gradient_names_parameter(self):
        params = self._params()
        with pytest.raises(NumericError, match="'y'"):
            adam_step(params, {"x": np.zeros(2), "y": np.array([[np.inf]])}, OptimizerState.zeros(params), 0.1)

    def test_sgd(self):
        params = self._params()
        sgd_step(params, {"x": np.array([1.0, 1.0]), "y": np.array([[0.0]])}, OptimizerState.zeros(params), 0.5)
        np.testing.assert_array_equal(params["x"], [0.5, -2.5])

    def test_train_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=0.0)
        with pytest.raises(ConfigError):
            TrainConfig(eps_clamp=0.5)
        with pytest.raises(ConfigError):
            TrainConfig(optimizer="rmsprop")


class DriftingModel:
    """Outputs sigmoid(k) on its k-th call so the loss on all-zero labels keeps rising"""

    name = "drift"

    def __init__(self, n_labels: int, offset: float = 0.0):
        self.n_labels = n_labels
        self.offset = offset
        self.calls = 0

    def init_params(self):
        return ModelParams({"w": np.zeros((1, self.n_labels))})

    def forward(self, examples, bound):
        self.calls += 1
        ones = Tensor(np.ones((len(examples), 1)))
        return sigmoid(add(matmul(ones, scale(bound["w"], 0.0)), self.offset + float(self.calls)))


def _zero_label_examples(count):
    return [EncodedExample((2, 3), (1, 1), (0, 0), f"z{i}") for i in range(count)]


class TestFit:
    def test_patience_one_stops_after_two_epochs(self):
        examples = _zero_label_examples(4)
        config = TrainConfig(learning_rate=0.1, batch_size=4, max_epochs=10, patience=1, seed=0)
        result = fit(DriftingModel(2), examples, examples, config)
        assert [r.epoch for r in result.history] == [1, 2]
        assert result.best.epoch == 1
        assert result.last.epoch == 2

    def test_patience_zero_runs_all_epochs(self):
        examples = _zero_label_examples(4)
        config = TrainConfig(learning_rate=0.1, batch_size=4, max_epochs=4, patience=0, seed=0)
        assert len(fit(DriftingModel(2), examples, examples, config).history) == 4

    def test_nan_loss_reports_epoch_and_batch(self):
        examples = _zero_label_examples(4)
        config = TrainConfig(learning_rate=0.1, batch_size=2, max_epochs=2, seed=0)
        with pytest.raises(NumericError, match="epoch 1, batch 0"):
            fit(DriftingModel(2, offset=math.nan), examples, examples, config)

    def test_empty_sets(self):
        with pytest.raises(DataError):
            fit(DriftingModel(2), [], _zero_label_examples(1), TrainConfig())

    def test_resume_keeps_earlier_best(self):
        examples = _zero_label_examples(4)
        model = DriftingModel(2)
        base = dict(learning_rate=0.1, batch_size=4, patience=0, seed=0)
        partial = fit(model, examples, examples, TrainConfig(max_epochs=2, **base))
        assert partial.last.stale_epochs == 1
        resumed = fit(model, examples, examples, TrainConfig(max_epochs=3, **base),
                      resume=partial.last, best=partial.best)
        assert [r.epoch for r in resumed.history] == [3]
        assert resumed.best.epoch == 1
        assert resumed.last.epoch == 3

    def test_stale_resume_without_best(self):
        examples = _zero_label_examples(4)
        model = DriftingModel(2)
        base = dict(learning_rate=0.1, batch_size=4, patience=0, seed=0)
        partial = fit(model, examples, examples, TrainConfig(max_epochs=2, **base))
        with pytest.raises(DataError, match="best checkpoint"):
            fit(model, examples, examples, TrainConfig(max_epochs=3, **base), resume=partial.last)

    def test_best_from_another_run_is_rejected(self):
        examples = _zero_label_examples(4)
        base = dict(learning_rate=0.1, batch_size=4, patience=0, seed=0)
        first = fit(DriftingModel(2), examples, examples, TrainConfig(max_epochs=2, **base))
        other = fit(DriftingModel(2, offset=5.0), examples, examples, TrainConfig(max_epochs=1, **base))
        with pytest.raises(DataError, match="does not belong"):
            fit(DriftingModel(2), examples, examples, TrainConfig(max_epochs=3, **base),
                resume=first.last, best=other.best)


class TestTrain:
    def test_split_is_ninety_ten(self, tiny_config):
        examples = make_examples(tiny_config, 20)
        train_set, val_set = split_validation(examples, seed=1)
        assert len(val_set) == 2 and len(train_set) == 18
        assert {ex.record_id for ex in train_set}.isdisjoint(ex.record_id for ex in val_set)

    def test_single_example_cannot_split(self, tiny_config):
        with pytest.raises(DataError):
            split_validation(make_examples(tiny_config, 1), seed=1)

    def test_empty_dataset(self, tiny_config, fast_train_config):
        with pytest.raises(DataError):
            train([], tiny_config, fast_train_config)

    def test_deterministic(self, tiny_config, tiny_examples, fast_train_config):
        first = train(tiny_examples, tiny_config, fast_train_config)
        second = train(tiny_examples, tiny_config, fast_train_config)
        assert first.checkpoint.equals(second.checkpoint)
        assert first.last.equals(second.last)

    def test_parameters_move(self, tiny_config, tiny_examples, fast_train_config):
        result = train(tiny_examples, tiny_config, fast_train_config)
        assert not result.last.params.equals(init_params(tiny_config))
        assert result.last.optimizer.t == 3 * 2

    def test_resume_matches_uninterrupted_run(self, tiny_config, tiny_examples):
        base = dict(learning_rate=1e-2, batch_size=2, patience=0, seed=8)
        validation = tiny_examples[:2]
        full = train(tiny_examples, tiny_config, TrainConfig(max_epochs=3, **base), validation=validation)
        partial = train(tiny_examples, tiny_config, TrainConfig(max_epochs=2, **base), validation=validation)
        resumed = train(tiny_examples, tiny_config, TrainConfig(max_epochs=3, **base),
                        validation=validation, resume=partial.last, resume_best=partial.checkpoint)
        assert resumed.last.equals(full.last)
        assert resumed.checkpoint.equals(full.checkpoint)
        assert [r.val_loss for r in resumed.history] == [full.history[-1].val_loss]

    def test_memorizes_eight_examples(self):
        config = ModelConfig(vocab_size=50, n_labels=4, d_model=16, n_heads=2, n_layers=1, d_ff=32,
                             max_len=10, seed=0)
        examples = make_examples(config, 8, seed=12, min_real=4)
        train_config = TrainConfig(learning_rate=1e-2, batch_size=8, max_epochs=300, patience=0, seed=0)
        result = train(examples, config, train_config, validation=examples)
        assert result.history[-1].train_loss < 0.05

    def test_history_csv(self, tmp_path, tiny_config, tiny_examples, fast_train_config):
        result = train(tiny_examples, tiny_config, fast_train_config)
        path = os.path.join(tmp_path, "history.csv")
        write_history(result.history, path)
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["epoch", "train_loss", "val_loss", "seconds"]
        assert frame["epoch"].tolist() == [1, 2, 3]
        assert (frame["seconds"] >= 0).all()
