"""
Multi-label cross-entropy, Adam/SGD updates and the epoch loop with early
stopping. The loop is deterministic: one seed fixes the validation split, the
per-epoch shuffles and the parameter initialization.
"""

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    CHECKPOINT_VERSION,
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPS_CLAMP,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MAX_EPOCHS,
    DEFAULT_PATIENCE,
    DEFAULT_SEED,
    DEFAULT_THRESHOLD,
    DEFAULT_VALIDATION_SHARE,
    HISTORY_CSV_HEADER,
    OPTIMIZERS,
)
from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import ModelConfig, ModelParams, TransformerClassifier, bind
from .tensor import Tape, Tensor, record_op
from .text_pipeline import EncodedExample
from utils.helpers import iter_batches

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    max_epochs: int = DEFAULT_MAX_EPOCHS
    patience: int = DEFAULT_PATIENCE  # 0 disables early stopping
    eps_clamp: float = DEFAULT_EPS_CLAMP
    seed: int = DEFAULT_SEED
    threshold: float = DEFAULT_THRESHOLD
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if not 0 < self.eps_clamp < 0.5:
            raise ConfigError(f"eps_clamp must be in (0, 0.5), got {self.eps_clamp}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "TrainConfig":
        return cls(**values)


@dataclass(eq=False)
class OptimizerState:
    """First/second moment accumulators mirroring the parameters, plus step t"""

    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        return cls(
            {name: np.zeros_like(arr) for name, arr in params.items()},
            {name: np.zeros_like(arr) for name, arr in params.items()},
            0,
        )

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.t,
        )

    def equals(self, other: "OptimizerState") -> bool:
        return (
            self.t == other.t
            and list(self.m) == list(other.m)
            and all(np.array_equal(self.m[k], other.m[k]) for k in self.m)
            and all(np.array_equal(self.v[k], other.v[k]) for k in self.v)
        )


@dataclass(eq=False)
class TrainingState:
    """Everything needed to continue training after an epoch"""

    params: ModelParams
    optimizer: OptimizerState
    epoch: int
    best_val_loss: float
    rng_state: Dict
    stale_epochs: int = 0


@dataclass(eq=False)
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    optimizer: OptimizerState
    epoch: int
    best_val_loss: float
    rng_state: Dict
    stale_epochs: int = 0
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_state(cls, state: TrainingState, model_config: ModelConfig, train_config: TrainConfig) -> "Checkpoint":
        return cls(
            model_config=model_config,
            train_config=train_config,
            params=state.params,
            optimizer=state.optimizer,
            epoch=state.epoch,
            best_val_loss=state.best_val_loss,
            rng_state=state.rng_state,
            stale_epochs=state.stale_epochs,
        )

    def to_state(self) -> TrainingState:
        return TrainingState(
            self.params.copy(), self.optimizer.copy(), self.epoch,
            self.best_val_loss, copy.deepcopy(self.rng_state), self.stale_epochs,
        )

    def equals(self, other: "Checkpoint") -> bool:
        """Bitwise equality of every field"""
        return (
            self.version == other.version
            and self.model_config == other.model_config
            and self.train_config == other.train_config
            and self.params.equals(other.params)
            and self.optimizer.equals(other.optimizer)
            and self.epoch == other.epoch
            and _same_float(self.best_val_loss, other.best_val_loss)
            and self.rng_state == other.rng_state
            and self.stale_epochs == other.stale_epochs
        )


def _same_float(a: float, b: float) -> bool:
    return np.array([a]).tobytes() == np.array([b]).tobytes()


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class FitResult:
    best: TrainingState
    last: TrainingState
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def train_seconds(self) -> float:
        return float(sum(r.seconds for r in self.history))


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    last: Checkpoint
    history: List[EpochRecord]

    @property
    def train_seconds(self) -> float:
        return float(sum(r.seconds for r in self.history))


class Classifier(Protocol):
    name: str

    def init_params(self) -> ModelParams: ...

    def forward(self, examples: Sequence[EncodedExample], bound: Dict[str, Tensor]) -> Tensor: ...


def bce_loss(probs: Tensor, targets, eps_clamp: float = DEFAULT_EPS_CLAMP) -> Tensor:
    """
    L = -(1/m) sum_j [y_j log p_j + (1 - y_j) log(1 - p_j)], averaged over rows
    for a [B x m] batch. Probabilities are clamped to [eps, 1 - eps] first; the
    clamp passes no gradient.
    """
    p = probs.data
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != p.shape:
        raise ShapeError(f"targets shape {list(y.shape)} does not match probs {list(p.shape)}")
    if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise NumericError("probabilities must lie in [0, 1]")
    clamped = np.clip(p, eps_clamp, 1.0 - eps_clamp)
    n = float(p.size)
    value = -np.mean(y * np.log(clamped) + (1.0 - y) * np.log1p(-clamped))
    inside = (p >= eps_clamp) & (p <= 1.0 - eps_clamp)

    def rule(g):
        local = -(y / clamped - (1.0 - y) / (1.0 - clamped)) / n
        return (np.where(inside, local, 0.0) * g[0],)

    return record_op(np.array([value]), (probs,), rule)


def _check_gradients(grads: Dict[str, np.ndarray]) -> None:
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")


def adam_step(
    params: ModelParams,
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPSILON,
) -> Tuple[ModelParams, OptimizerState]:
    """Bias-corrected Adam; parameters and accumulators are updated in place"""
    if not lr > 0:
        raise NumericError(f"learning rate must be > 0, got {lr}")
    _check_gradients(grads)
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, param in params.items():
        g = grads[name]
        if g.shape != param.shape:
            raise ShapeError(f"gradient for {name!r} has shape {list(g.shape)}, expected {list(param.shape)}")
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def sgd_step(
    params: ModelParams, grads: Dict[str, np.ndarray], state: OptimizerState, lr: float
) -> Tuple[ModelParams, OptimizerState]:
    if not lr > 0:
        raise NumericError(f"learning rate must be > 0, got {lr}")
    _check_gradients(grads)
    state.t += 1
    for name, param in params.items():
        param -= lr * grads[name]
    return params, state


def label_matrix(examples: Sequence[EncodedExample]) -> np.ndarray:
    return np.array([ex.label_vec for ex in examples], dtype=np.float64)


def predict_probs(model: Classifier, params: ModelParams, examples: Sequence[EncodedExample],
                  batch_size: int = 64) -> np.ndarray:
    """Inference probabilities [B x m] without a tape"""
    bound = bind(params)
    blocks = [model.forward(batch, bound).numpy() for batch in iter_batches(examples, batch_size)]
    return np.concatenate(blocks, axis=0)


def evaluate_loss(model: Classifier, params: ModelParams, examples: Sequence[EncodedExample],
                  eps_clamp: float) -> float:
    probs = predict_probs(model, params, examples)
    return bce_loss(Tensor(probs), label_matrix(examples), eps_clamp).item()


def _seed_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for the validation split and the epoch shuffles"""
    split_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(split_seq), np.random.default_rng(shuffle_seq)


def _restore_rng(state: Dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = copy.deepcopy(state)
    return rng


def split_validation(dataset: Sequence[EncodedExample], seed: int,
                     share: float = DEFAULT_VALIDATION_SHARE) -> Tuple[List[EncodedExample], List[EncodedExample]]:
    """Seeded 90/10 train/validation split; both sides nonempty"""
    if len(dataset) < 2:
        raise DataError(f"need at least 2 examples to split off validation, got {len(dataset)}")
    split_rng, _ = _seed_streams(seed)
    order = split_rng.permutation(len(dataset))
    n_val = min(len(dataset) - 1, max(1, int(round(share * len(dataset)))))
    val = [dataset[i] for i in order[:n_val]]
    train = [dataset[i] for i in order[n_val:]]
    return train, val


def _resume_best(resume: TrainingState, best: Optional[TrainingState]) -> TrainingState:
    if best is None:
        if resume.stale_epochs:
            raise DataError(
                f"resume point is {resume.stale_epochs} epoch(s) past its best; the best checkpoint is needed too"
            )
        return resume
    if best.epoch > resume.epoch or not _same_float(best.best_val_loss, resume.best_val_loss):
        raise DataError(
            f"best checkpoint (epoch {best.epoch}, val_loss {best.best_val_loss}) does not belong to "
            f"the resume point (epoch {resume.epoch}, best val_loss {resume.best_val_loss})"
        )
    return best


def fit(
    model: Classifier,
    train_set: Sequence[EncodedExample],
    val_set: Sequence[EncodedExample],
    config: TrainConfig,
    resume: Optional[TrainingState] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    best: Optional[TrainingState] = None,
) -> FitResult:
    """
    Shuffle -> mini-batches -> forward -> loss -> backward -> update, per epoch.
    Stops at max_epochs or after `patience` epochs without a lower validation
    loss. Returns the best-validation state and the last state.

    Resuming continues from `resume` (a last-epoch state). When that state is
    not itself the best one, `best` must carry the best state it refers to.
    """
    if not train_set:
        raise DataError("training set is empty")
    if not val_set:
        raise DataError("validation set is empty")

    if resume is not None:
        params = resume.params.copy()
        optimizer = resume.optimizer.copy()
        rng = _restore_rng(resume.rng_state)
        start_epoch, best_loss, stale = resume.epoch, resume.best_val_loss, resume.stale_epochs
        best_state = _resume_best(resume, best)
        last_state = resume
    else:
        params = model.init_params()
        optimizer = OptimizerState.zeros(params)
        _, rng = _seed_streams(config.seed)
        start_epoch, best_loss, stale = 0, math.inf, 0
        best_state = last_state = TrainingState(
            params.copy(), optimizer.copy(), 0, best_loss, copy.deepcopy(rng.bit_generator.state), 0
        )

    step = adam_step if config.optimizer == "adam" else sgd_step
    history: List[EpochRecord] = []

    for epoch in range(start_epoch + 1, config.max_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_set))
        weighted_loss = 0.0
        for batch_index, batch in enumerate(iter_batches(order, config.batch_size)):
            examples = [train_set[i] for i in batch]
            tape = Tape()
            bound = bind(params, tape)
            try:
                loss = bce_loss(model.forward(examples, bound), label_matrix(examples), config.eps_clamp)
            except NumericError as e:
                raise NumericError(f"epoch {epoch}, batch {batch_index}: {e}") from e
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {batch_index}")
            leaf_grads = tape.backward(loss)
            grads = {name: leaf_grads[t.node_id] for name, t in bound.items()}
            step(params, grads, optimizer, config.learning_rate)
            weighted_loss += value * len(examples)

        train_loss = weighted_loss / len(train_set)
        val_loss = evaluate_loss(model, params, val_set, config.eps_clamp)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        record = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - started)
        history.append(record)
        logger.info(
            "%s epoch %d: train_loss=%.5f val_loss=%.5f (%.2fs)",
            model.name, epoch, train_loss, val_loss, record.seconds,
        )
        if on_epoch is not None:
            on_epoch(record)

        improved = val_loss < best_loss
        if improved:
            best_loss, stale = val_loss, 0
        else:
            stale += 1
        last_state = TrainingState(
            params.copy(), optimizer.copy(), epoch, best_loss, copy.deepcopy(rng.bit_generator.state), stale
        )
        if improved:
            best_state = last_state
        if config.patience and stale >= config.patience:
            logger.info("Early stop after epoch %d (%d epochs without improvement)", epoch, stale)
            break

    return FitResult(best_state, last_state, history)


def train(
    dataset: Sequence[EncodedExample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    validation: Optional[Sequence[EncodedExample]] = None,
    resume: Optional[Checkpoint] = None,
    resume_best: Optional[Checkpoint] = None,
) -> TrainResult:
    """
    Train the Transformer; without an explicit validation set, split 90/10.
    To continue a run pass its last checkpoint as `resume` and its best
    checkpoint as `resume_best`.
    """
    if not dataset:
        raise DataError("dataset is empty")
    if validation is None:
        train_set, val_set = split_validation(dataset, train_config.seed)
    else:
        train_set, val_set = list(dataset), list(validation)
    logger.info(
        "Training on %d examples, validating on %d (lr=%g, batch=%d, epochs<=%d)",
        len(train_set), len(val_set), train_config.learning_rate,
        train_config.batch_size, train_config.max_epochs,
    )
    result = fit(
        TransformerClassifier(model_config), train_set, val_set, train_config,
        resume=resume.to_state() if resume is not None else None,
        best=resume_best.to_state() if resume is not None and resume_best is not None else None,
    )
    return TrainResult(
        Checkpoint.from_state(result.best, model_config, train_config),
        Checkpoint.from_state(result.last, model_config, train_config),
        result.history,
    )


def history_frame(history: Sequence[EpochRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in history], columns=HISTORY_CSV_HEADER)


def write_history(history: Sequence[EpochRecord], path: str) -> None:
    """CSV epoch,train_loss,val_loss,seconds"""
    history_frame(history).to_csv(path, index=False, lineterminator="\n")
