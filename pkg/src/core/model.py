"""
Transformer encoder for multi-label note classification:
embedding + sinusoidal positions -> L post-LN encoder layers (multi-head
self-attention, ReLU FFN) -> masked mean pooling -> sigmoid label head.
"""

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .config import (
    DEFAULT_D_FF,
    DEFAULT_D_MODEL,
    DEFAULT_MODEL_MAX_LEN,
    DEFAULT_N_HEADS,
    DEFAULT_N_LAYERS,
    DEFAULT_SEED,
)
from .errors import ConfigError, NumericError, ShapeError
from .tensor import (
    Tape,
    Tensor,
    add,
    concat_last,
    concat_rows,
    layer_norm,
    mask_columns,
    matmul,
    mean_pool_masked,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    split_last,
    take_rows,
    transpose,
)
from .text_pipeline import EncodedExample

LAYER_WEIGHTS = (
    "w_q", "w_k", "w_v", "w_o",
    "w_1", "b_1", "w_2", "b_2",
    "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_labels: int
    d_model: int = DEFAULT_D_MODEL
    n_heads: int = DEFAULT_N_HEADS
    n_layers: int = DEFAULT_N_LAYERS
    d_ff: int = DEFAULT_D_FF
    max_len: int = DEFAULT_MODEL_MAX_LEN
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        for name in ("vocab_size", "n_labels", "d_model", "n_heads", "d_ff", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model {name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ConfigError(f"model n_layers must be >= 0, got {self.n_layers}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in values.items()})


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of scalar parameters for a config"""
    d, f = config.d_model, config.d_ff
    per_layer = 4 * d * d + (d * f + f) + (f * d + d) + 4 * d
    return config.vocab_size * d + config.n_layers * per_layer + d * config.n_labels + config.n_labels


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Parameter names and shapes in canonical (checkpoint) order"""
    d, f = config.d_model, config.d_ff
    shapes = [("embedding", (config.vocab_size, d))]
    for i in range(config.n_layers):
        layer = {
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "w_1": (d, f), "b_1": (f,), "w_2": (f, d), "b_2": (d,),
            "ln1_gamma": (d,), "ln1_beta": (d,), "ln2_gamma": (d,), "ln2_beta": (d,),
        }
        shapes.extend((f"layers.{i}.{name}", layer[name]) for name in LAYER_WEIGHTS)
    shapes.append(("head.w", (d, config.n_labels)))
    shapes.append(("head.b", (config.n_labels,)))
    return shapes


class ModelParams:
    """Named float64 arrays in canonical order"""

    def __init__(self, tensors: Dict[str, np.ndarray]):
        self.tensors = {name: np.asarray(arr, dtype=np.float64) for name, arr in tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(sum(arr.size for arr in self.tensors.values()))

    def copy(self) -> "ModelParams":
        return ModelParams({name: arr.copy() for name, arr in self.tensors.items()})

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality (same names, shapes and values)"""
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n], other[n]) for n in self.tensors)


def glorot_limit(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: ModelConfig) -> ModelParams:
    """Glorot-uniform weights from a seeded generator; biases/beta 0, gamma 1"""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("gamma"):
            tensors[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("beta"):
            tensors[name] = np.zeros(shape)
        else:
            limit = glorot_limit(shape[0], shape[1])
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(tensors)


def bind(params: ModelParams, tape: Optional[Tape] = None) -> Dict[str, Tensor]:
    """Tensors for a forward pass; tracked leaves when a tape is given"""
    if tape is None:
        return {name: Tensor(arr) for name, arr in params.items()}
    return {name: tape.variable(arr) for name, arr in params.items()}


class LayerWeights(NamedTuple):
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    ln1_gamma: Tensor
    ln1_beta: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor


def layer_weights(bound: Dict[str, Tensor], index: int) -> LayerWeights:
    return LayerWeights(*(bound[f"layers.{index}.{name}"] for name in LAYER_WEIGHTS))


@lru_cache(maxsize=32)
def _sinusoid_table(n: int, d: int) -> np.ndarray:
    positions = np.arange(n, dtype=np.float64)[:, None]
    rates = np.power(10000.0, np.arange(0, d, 2, dtype=np.float64) / d)
    table = np.empty((n, d))
    table[:, 0::2] = np.sin(positions / rates)
    table[:, 1::2] = np.cos(positions / rates)
    table.flags.writeable = False
    return table


def positional_encode(n: int, d: int) -> Tensor:
    """PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same)"""
    if d % 2:
        raise ShapeError(f"positional encoding needs an even width, got {d}")
    if n < 1:
        raise ShapeError(f"positional encoding needs n >= 1, got {n}")
    return Tensor(_sinusoid_table(n, d))


def embed(ids: Sequence[int], table: Tensor) -> Tensor:
    rows = take_rows(table, ids)
    return add(rows, positional_encode(len(ids), table.shape[1]))


def _check_mask(mask: Sequence[int]) -> None:
    if not any(mask):
        raise NumericError("attention mask has no unmasked position")


def attention_weights(q: Tensor, k: Tensor, mask: Sequence[int]) -> Tensor:
    """softmax(QK^T / sqrt(d_k)) with masked keys at exactly 0"""
    _check_mask(mask)
    scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(q.shape[1]))
    return softmax_rows(mask_columns(scores, mask))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Sequence[int]) -> Tensor:
    return matmul(attention_weights(q, k, mask), v)


def multi_head_attention(h: Tensor, layer: LayerWeights, mask: Sequence[int], n_heads: int) -> Tensor:
    queries = split_last(matmul(h, layer.w_q), n_heads)
    keys = split_last(matmul(h, layer.w_k), n_heads)
    values = split_last(matmul(h, layer.w_v), n_heads)
    heads = [scaled_dot_attention(q, k, v, mask) for q, k, v in zip(queries, keys, values)]
    return matmul(concat_last(heads), layer.w_o)


def feed_forward(x: Tensor, layer: LayerWeights) -> Tensor:
    hidden = relu(add(matmul(x, layer.w_1), layer.b_1))
    return add(matmul(hidden, layer.w_2), layer.b_2)


def encoder_layer(h: Tensor, layer: LayerWeights, mask: Sequence[int], n_heads: int) -> Tensor:
    """Post-LN block: LN(h + MHA(h)) then LN(x + FFN(x))"""
    x = layer_norm(add(h, multi_head_attention(h, layer, mask, n_heads)), layer.ln1_gamma, layer.ln1_beta)
    return layer_norm(add(x, feed_forward(x, layer)), layer.ln2_gamma, layer.ln2_beta)


def active_length(mask: Sequence[int]) -> int:
    """Positions up to and including the last real token"""
    for i in range(len(mask) - 1, -1, -1):
        if mask[i]:
            return i + 1
    raise NumericError("example has no real tokens")


def encode_sequence(example: EncodedExample, bound: Dict[str, Tensor], config: ModelConfig) -> Tensor:
    """Aggregate representation h of one note"""
    # trailing PAD rows are masked keys and never pooled, so they are dropped
    n = active_length(example.mask)
    ids, mask = example.ids[:n], example.mask[:n]
    h = embed(ids, bound["embedding"])
    for i in range(config.n_layers):
        h = encoder_layer(h, layer_weights(bound, i), mask, config.n_heads)
    return mean_pool_masked(h, mask)


def predict(h: Tensor, head_w: Tensor, head_b: Tensor) -> Tensor:
    """Per-label probabilities sigma(W_j . h + b_j), shape (m,)"""
    d = h.shape[0]
    if head_w.shape[0] != d or head_b.shape != (head_w.shape[1],):
        raise ShapeError(
            f"head shapes {list(head_w.shape)}/{list(head_b.shape)} do not fit h of width {d}"
        )
    logits = add(matmul(reshape(h, (1, d)), head_w), head_b)
    return reshape(sigmoid(logits), (head_w.shape[1],))


class TransformerClassifier:
    """The encoder + label head, in the shape the training loop expects"""

    name = "transformer"

    def __init__(self, config: ModelConfig):
        self.config = config

    def init_params(self) -> ModelParams:
        return init_params(self.config)

    def forward(self, examples: Sequence[EncodedExample], bound: Dict[str, Tensor]) -> Tensor:
        if not examples:
            raise ShapeError("forward needs a nonempty batch")
        rows = [
            predict(encode_sequence(ex, bound, self.config), bound["head.w"], bound["head.b"])
            for ex in examples
        ]
        return concat_rows(rows)


def forward_batch(examples: Sequence[EncodedExample], params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Probabilities [B x m]; each row depends only on its own example"""
    return TransformerClassifier(config).forward(examples, bind(params)).numpy()
