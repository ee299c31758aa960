import difflib
import logging
import os
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Mapping, Optional, Tuple, get_type_hints

from dotenv import dotenv_values, load_dotenv

from .errors import ConfigError

# Load environment variables (MEDATTN_THREADS and friends)
load_dotenv()

logger = logging.getLogger(__name__)

APP_NAME = "medattn"
THREADS_ENV = "MEDATTN_THREADS"

# Vocabulary specials
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# Encoded dataset format
ENCODED_FORMAT = "medattn-encoded"
ENCODED_VERSION = 1

# Checkpoint format
CHECKPOINT_VERSION = 1
CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.bin"

# Preprocessing defaults ("appropriate length" has no published numbers)
DEFAULT_MIN_TOKENS = 5
DEFAULT_MAX_LEN = 256
DEFAULT_MIN_FREQ = 2
DEFAULT_MAX_VOCAB = 20000

# Desk-scale model defaults (the model length is the positional table size)
DEFAULT_SEED = 42
DEFAULT_D_MODEL = 64
DEFAULT_N_HEADS = 4
DEFAULT_N_LAYERS = 2
DEFAULT_D_FF = 128
DEFAULT_MODEL_MAX_LEN = 128

# Training defaults
DEFAULT_LEARNING_RATE = 1e-4
DEFAULT_BATCH_SIZE = 16
DEFAULT_MAX_EPOCHS = 60
DEFAULT_PATIENCE = 5
DEFAULT_EPS_CLAMP = 1e-7
DEFAULT_THRESHOLD = 0.5
DEFAULT_VALIDATION_SHARE = 0.1
OPTIMIZERS = ("adam", "sgd")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Experiment defaults
DEFAULT_LR_RATES = (1e-5, 1e-4, 1e-3)
DEFAULT_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
DEFAULT_NOISE_LEVELS = (0.0, 0.05, 0.10, 0.15, 0.20)
DEFAULT_DEPTHS = (1, 2, 3)
NOISE_KINDS = ("delete", "substitute", "typo")
DEFAULT_NOISE_KIND = "substitute"

# Sweep CSV contract
SWEEP_CSV_HEADER = ["sweep", "value", "accuracy", "precision", "recall", "train_seconds", "seed"]
REPORT_CSV_HEADER = ["method", "accuracy", "precision", "recall"]
HISTORY_CSV_HEADER = ["epoch", "train_loss", "val_loss", "seconds"]

# ICD-style codes used by the synthetic corpus, in label order
SYNTH_LABEL_CODES = (
    "I10", "E11.9", "428.0", "N18.3", "J44.9", "F32.9", "I48.91", "E78.5",
    "K21.9", "D64.9", "E03.9", "G47.33",
)


@dataclass(frozen=True)
class AppConfig:
    """
    Every run setting in one flat namespace so a config file can stay a plain
    KEY=VALUE list. Section helpers build the typed per-module configs.
    """

    seed: int = DEFAULT_SEED

    # preprocessing
    min_tokens: int = DEFAULT_MIN_TOKENS
    max_len: int = DEFAULT_MAX_LEN
    min_freq: int = DEFAULT_MIN_FREQ
    max_vocab: int = DEFAULT_MAX_VOCAB
    min_age: Optional[float] = None

    # model
    d_model: int = DEFAULT_D_MODEL
    n_heads: int = DEFAULT_N_HEADS
    n_layers: int = DEFAULT_N_LAYERS
    d_ff: int = DEFAULT_D_FF

    # training
    learning_rate: float = DEFAULT_LEARNING_RATE
    batch_size: int = DEFAULT_BATCH_SIZE
    max_epochs: int = DEFAULT_MAX_EPOCHS
    patience: int = DEFAULT_PATIENCE
    eps_clamp: float = DEFAULT_EPS_CLAMP
    threshold: float = DEFAULT_THRESHOLD
    optimizer: str = "adam"

    # synthetic corpus
    n_docs: int = 2000
    n_labels: int = 8
    marginal: float = 0.2
    cooccur_boost: float = 1.5
    filler_vocab: int = 500
    doc_len_min: int = 8
    doc_len_max: int = 24

    # experiments
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    noise_kind: str = DEFAULT_NOISE_KIND
    lr_rates: Tuple[float, ...] = DEFAULT_LR_RATES
    fractions: Tuple[float, ...] = DEFAULT_FRACTIONS
    noise_levels: Tuple[float, ...] = DEFAULT_NOISE_LEVELS
    depths: Tuple[int, ...] = DEFAULT_DEPTHS

    # paths
    data: str = ""
    out: str = ""

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError(f"noise_kind must be one of {NOISE_KINDS}, got {self.noise_kind!r}")

    def train_config(self, **overrides):
        from .training import TrainConfig

        values = dict(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            eps_clamp=self.eps_clamp,
            seed=self.seed,
            threshold=self.threshold,
            optimizer=self.optimizer,
        )
        values.update(overrides)
        return TrainConfig(**values)

    def model_config(self, vocab_size: int, n_labels: int, **overrides):
        from .model import ModelConfig

        values = dict(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            d_ff=self.d_ff,
            max_len=self.max_len,
            n_labels=n_labels,
            seed=self.seed,
        )
        values.update(overrides)
        return ModelConfig(**values)

    def synth_config(self, **overrides):
        from .synthetic import SynthConfig

        values = dict(
            n_docs=self.n_docs,
            n_labels=self.n_labels,
            marginal=self.marginal,
            cooccur_boost=self.cooccur_boost,
            filler_vocab=self.filler_vocab,
            doc_len=(self.doc_len_min, self.doc_len_max),
            seed=self.seed,
        )
        values.update(overrides)
        return SynthConfig.uniform(**values)

    def preprocess_settings(self):
        from .text_pipeline import PreprocessSettings

        return PreprocessSettings(
            min_tokens=self.min_tokens,
            max_len=self.max_len,
            min_freq=self.min_freq,
            max_size=self.max_vocab,
            min_age=self.min_age,
        )

    def describe(self) -> List[str]:
        """Resolved settings as KEY=VALUE lines (provenance echo)"""
        return [f"{f.name}={_render(getattr(self, f.name))}" for f in fields(self)]


def _render(value) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(key: str, raw: str, kind):
    """Convert a config string to the annotated field type"""
    text = raw.strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
        if kind == Optional[float]:
            return float(text) if text and text.lower() != "none" else None
        if kind == Tuple[float, ...]:
            return tuple(float(v) for v in text.split(",") if v.strip())
        if kind == Tuple[int, ...]:
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {getattr(kind, '__name__', kind)}") from e
    raise ConfigError(f"config key {key!r} has an unsupported type {kind}")


def _field_types() -> Dict[str, object]:
    hints = get_type_hints(AppConfig)
    return {f.name: hints[f.name] for f in fields(AppConfig)}


def apply_overrides(config: AppConfig, values: Mapping[str, Optional[str]], source: str) -> AppConfig:
    types = _field_types()
    changes = {}
    for key, raw in values.items():
        name = key.strip().lower()
        if name not in types:
            nearest = difflib.get_close_matches(name, types.keys(), n=1)
            hint = f"; did you mean {nearest[0]!r}?" if nearest else ""
            raise ConfigError(f"unknown config key {key!r} in {source}{hint}")
        changes[name] = _coerce(name, raw if raw is not None else "", types[name])
    return replace(config, **changes)


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Optional[str]]] = None) -> AppConfig:
    """Defaults <- KEY=VALUE config file <- command-line overrides"""
    config = AppConfig()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        config = apply_overrides(config, dotenv_values(path), path)
    if overrides:
        config = apply_overrides(config, overrides, "command line")
    logger.debug("Resolved configuration: %s", ", ".join(config.describe()))
    return config
