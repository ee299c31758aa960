"""
Experiment harness: fixed train/validation/test partitions, the bag-of-words
baseline and the learning-rate, sample-size, noise and depth sweeps.
Sweep rows come back sorted by the swept value.
"""

import logging
import math
import os
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
from sklearn.preprocessing import MultiLabelBinarizer

from .config import SWEEP_CSV_HEADER
from .errors import ConfigError, DataError
from .metrics import MetricsReport, evaluate_predictions
from .model import ModelConfig, ModelParams, forward_batch, glorot_limit
from .synthetic import inject_noise
from .tensor import Tensor, add, matmul, sigmoid
from .text_pipeline import PAD_ID, EncodedExample, Vocabulary, encode
from .training import TrainConfig, fit, label_matrix, predict_probs, train
from utils.helpers import atomic_write_text, batch_count, format_number

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("accuracy", "precision", "recall")


@dataclass(frozen=True)
class ExperimentData:
    train: Tuple[EncodedExample, ...]
    validation: Tuple[EncodedExample, ...]
    test: Tuple[EncodedExample, ...]
    vocab: Optional[Vocabulary] = None
    label_space: Tuple[str, ...] = ()

    @property
    def n_labels(self) -> int:
        return len(self.train[0].label_vec)


@dataclass(frozen=True)
class RunConfigs:
    model: ModelConfig
    train: TrainConfig


@dataclass(frozen=True)
class SweepResult:
    sweep: str
    value: float
    accuracy: float
    precision: float
    recall: float
    train_seconds: float
    seed: int

    def __post_init__(self):
        for name in METRIC_COLUMNS:
            if not 0 <= getattr(self, name) <= 1:
                raise DataError(f"{name} must lie in [0, 1], got {getattr(self, name)}")
        if self.train_seconds < 0:
            raise DataError(f"train_seconds must be >= 0, got {self.train_seconds}")


def split_dataset(
    examples: Sequence[EncodedExample],
    test_fraction: float = 0.2,
    val_fraction: float = 0.1,
    seed: int = 42,
    vocab: Optional[Vocabulary] = None,
    label_space: Sequence[str] = (),
) -> ExperimentData:
    """One seeded permutation: test first, then validation, the rest trains"""
    if not 0 < test_fraction < 1 or not 0 < val_fraction < 1 or test_fraction + val_fraction >= 1:
        raise ConfigError(
            f"test_fraction {test_fraction} and val_fraction {val_fraction} must be in (0, 1) and sum below 1"
        )
    n = len(examples)
    n_test = max(1, int(round(test_fraction * n)))
    n_val = max(1, int(round(val_fraction * n)))
    if n - n_test - n_val < 1:
        raise DataError(f"{n} examples are too few for a train/validation/test split")
    order = np.random.default_rng(seed).permutation(n)
    pick = lambda idx: tuple(examples[i] for i in idx)  # noqa: E731
    return ExperimentData(
        train=pick(order[n_test + n_val:]),
        validation=pick(order[n_test:n_test + n_val]),
        test=pick(order[:n_test]),
        vocab=vocab,
        label_space=tuple(label_space),
    )


def evaluate_params(params: ModelParams, model_config: ModelConfig, examples: Sequence[EncodedExample],
                    threshold: float) -> MetricsReport:
    probs = forward_batch(examples, params, model_config)
    return evaluate_predictions(probs, label_matrix(examples), threshold)


def _run_point(sweep: str, value: float, train_set: Sequence[EncodedExample], data: ExperimentData,
               configs: RunConfigs) -> Tuple[SweepResult, ModelParams]:
    result = train(train_set, configs.model, configs.train, validation=data.validation)
    report = evaluate_params(result.checkpoint.params, configs.model, data.test, configs.train.threshold)
    row = SweepResult(
        sweep, float(value), report.accuracy, report.precision, report.recall,
        result.train_seconds, configs.train.seed,
    )
    logger.info("%s=%s: accuracy %.4f precision %.4f recall %.4f (%.1fs)",
                sweep, format_number(value), row.accuracy, row.precision, row.recall, row.train_seconds)
    return row, result.checkpoint.params


def _sorted_unique(values: Sequence[float], name: str) -> List[float]:
    if not values:
        raise ConfigError(f"{name} sweep needs at least one value")
    return sorted(set(float(v) for v in values))


def lr_sweep(rates: Sequence[float], data: ExperimentData, configs: RunConfigs) -> List[SweepResult]:
    results = []
    for rate in _sorted_unique(rates, "lr"):
        point = replace(configs, train=replace(configs.train, learning_rate=rate))
        results.append(_run_point("lr", rate, data.train, data, point)[0])
    return results


def subsample_size(fraction: float, n: int) -> int:
    """ceil(fraction * n), ignoring float noise such as 0.3 * 10 = 3.0000000000000004"""
    return int(math.ceil(round(fraction * n, 9)))


def sample_fraction_sweep(fractions: Sequence[float], data: ExperimentData,
                          configs: RunConfigs) -> List[SweepResult]:
    """Nested prefixes of one seeded permutation of the training set"""
    values = _sorted_unique(fractions, "samples")
    if any(not 0 < f <= 1 for f in values):
        raise ConfigError(f"sample fractions must lie in (0, 1], got {values}")
    n = len(data.train)
    batch_size = configs.train.batch_size
    for f in values:
        size = subsample_size(f, n)
        if batch_count(size, batch_size) < 2:
            raise DataError(
                f"fraction {f} keeps {size} examples, fewer than 2 batches of {batch_size}"
            )
    order = np.random.default_rng(configs.train.seed).permutation(n)
    results = []
    for f in values:
        subset = [data.train[i] for i in order[:subsample_size(f, n)]]
        results.append(_run_point("samples", f, subset, data, configs)[0])
    return results


def perturb_examples(examples: Sequence[EncodedExample], vocab: Vocabulary, level: float, kind: str,
                     seed: int) -> List[EncodedExample]:
    """Noise on the raw tokens, then the usual encoding at the same length"""
    vocabulary = vocab.content_tokens()
    perturbed = []
    for index, ex in enumerate(examples):
        if not ex.tokens:
            raise DataError(f"example {ex.record_id!r} carries no tokens to perturb")
        tokens = inject_noise(ex.tokens, level, kind, (seed, index), vocabulary)
        ids, mask = encode(tokens, vocab, len(ex.ids))
        perturbed.append(EncodedExample(tuple(ids), tuple(mask), ex.label_vec, ex.record_id, tuple(tokens)))
    return perturbed


def noise_sweep(levels: Sequence[float], kind: str, data: ExperimentData,
                configs: RunConfigs) -> List[SweepResult]:
    """Train once on clean data; evaluate on test sets perturbed per level"""
    values = _sorted_unique(levels, "noise")
    if any(not 0 <= v <= 1 for v in values):
        raise ConfigError(f"noise levels must lie in [0, 1], got {values}")
    if data.vocab is None:
        raise DataError("noise sweep needs the vocabulary of the encoded dataset")
    result = train(data.train, configs.model, configs.train, validation=data.validation)
    params = result.checkpoint.params
    results = []
    for level in values:
        test = perturb_examples(data.test, data.vocab, level, kind, configs.train.seed)
        report = evaluate_params(params, configs.model, test, configs.train.threshold)
        results.append(SweepResult(
            "noise", level, report.accuracy, report.precision, report.recall,
            result.train_seconds, configs.train.seed,
        ))
        logger.info("noise %s (%s): accuracy %.4f", format_number(level), kind, report.accuracy)
    return results


def depth_sweep(depths: Sequence[int], data: ExperimentData, configs: RunConfigs) -> List[SweepResult]:
    results = []
    for depth in _sorted_unique(depths, "depth"):
        if depth != int(depth) or depth < 1:
            raise ConfigError(f"encoder depth must be a positive integer, got {depth}")
        point = replace(configs, model=replace(configs.model, n_layers=int(depth)))
        results.append(_run_point("depth", depth, data.train, data, point)[0])
    return results


class BagOfWordsClassifier:
    """Independent logistic regression per label over binary token-presence features"""

    name = "bow"

    def __init__(self, vocab_size: int, n_labels: int, seed: int):
        self.vocab_size = vocab_size
        self.n_labels = n_labels
        self.seed = seed
        self.binarizer = MultiLabelBinarizer(classes=list(range(vocab_size)))
        self.binarizer.fit([])

    def init_params(self) -> ModelParams:
        rng = np.random.default_rng(self.seed)
        limit = glorot_limit(self.vocab_size, self.n_labels)
        return ModelParams({
            "bow.w": rng.uniform(-limit, limit, size=(self.vocab_size, self.n_labels)),
            "bow.b": np.zeros(self.n_labels),
        })

    def features(self, examples: Sequence[EncodedExample]) -> np.ndarray:
        present = [
            {i for i, keep in zip(ex.ids, ex.mask) if keep and i != PAD_ID}
            for ex in examples
        ]
        return self.binarizer.transform(present).astype(np.float64)

    def forward(self, examples: Sequence[EncodedExample], bound: Dict[str, Tensor]) -> Tensor:
        x = Tensor(self.features(examples))
        return sigmoid(add(matmul(x, bound["bow.w"]), bound["bow.b"]))


def bow_baseline(data: ExperimentData, configs: RunConfigs) -> MetricsReport:
    """Baseline trained with the same loop, loss and optimizer as the Transformer"""
    model = BagOfWordsClassifier(configs.model.vocab_size, data.n_labels, configs.train.seed)
    result = fit(model, data.train, data.validation, configs.train)
    probs = predict_probs(model, result.best.params, data.test)
    report = evaluate_predictions(probs, label_matrix(data.test), configs.train.threshold)
    logger.info("bag-of-words baseline: accuracy %.4f precision %.4f recall %.4f",
                report.accuracy, report.precision, report.recall)
    return report


def transformer_report(data: ExperimentData, configs: RunConfigs) -> MetricsReport:
    """Train on the fixed split and evaluate on its test part"""
    result = train(data.train, configs.model, configs.train, validation=data.validation)
    return evaluate_params(result.checkpoint.params, configs.model, data.test, configs.train.threshold)


def results_frame(results: Sequence[SweepResult]) -> pd.DataFrame:
    rows = [
        (r.sweep, format_number(r.value), format_number(r.accuracy), format_number(r.precision),
         format_number(r.recall), format_number(r.train_seconds), str(r.seed))
        for r in results
    ]
    return pd.DataFrame(rows, columns=SWEEP_CSV_HEADER)


def _plot(results: Sequence[SweepResult], svg_path: str) -> None:
    matplotlib.rcParams.update({"svg.hashsalt": "medattn", "font.family": "DejaVu Sans"})
    sweep = results[0].sweep
    xs = [r.value for r in results]
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    for metric in METRIC_COLUMNS:
        ax.plot(xs, [getattr(r, metric) for r in results], marker="o", label=metric)
    if sweep == "lr" and min(xs) > 0:
        ax.set_xscale("log")
    ax.set_xlabel({"lr": "learning rate", "samples": "training fraction",
                   "noise": "noise level", "depth": "encoder layers"}.get(sweep, sweep))
    ax.set_ylabel("metric")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def emit_results(results: Sequence[SweepResult], path: str) -> str:
    """Write the sweep CSV at path and an SVG chart with the same basename"""
    if not results:
        raise DataError("no sweep results to emit")
    svg_path = os.path.splitext(path)[0] + ".svg"
    try:
        atomic_write_text(path, results_frame(results).to_csv(index=False, lineterminator="\n"))
        _plot(results, svg_path)
    except OSError as e:
        raise DataError(f"cannot write results to {path}: {e}") from e
    logger.info("Wrote %d rows to %s and chart to %s", len(results), path, svg_path)
    return svg_path


def read_results(path: str) -> List[SweepResult]:
    if not os.path.exists(path):
        raise DataError(f"results file not found: {path}")
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(frame.columns) != SWEEP_CSV_HEADER:
        raise DataError(f"{path}: expected header {','.join(SWEEP_CSV_HEADER)}")
    return [
        SweepResult(
            row.sweep, float(row.value), float(row.accuracy), float(row.precision),
            float(row.recall), float(row.train_seconds), int(row.seed),
        )
        for row in frame.itertuples(index=False)
    ]
