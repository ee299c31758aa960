"""
Dense float64 tensors (rank 1 or 2) with a reverse-mode differentiation tape.

Every op accepts plain tensors. When any input lives on a Tape the op is
recorded there together with its local gradient rule, and Tape.backward
replays the records in reverse order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NumericError, ShapeError

logger = logging.getLogger(__name__)

Scalar = Union[int, float]
GradRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

ELEMENTWISE_OPS = ("add", "sub", "mul", "scale")
DEFAULT_LAYER_NORM_EPS = 1e-5
RELATIVE_ERROR_FLOOR = 1e-8


class Tensor:
    """Immutable dense array; node_id is set when the tensor lives on a tape"""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        array = np.asarray(data, dtype=np.float64)
        if array.ndim not in (1, 2):
            raise ShapeError(f"tensors have rank 1 or 2, got shape {list(array.shape)}")
        if min(array.shape) < 1:
            raise ShapeError(f"every dimension must be >= 1, got shape {list(array.shape)}")
        view = array.view()
        view.flags.writeable = False
        self.data = view
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def tolist(self) -> list:
        return self.data.tolist()

    def __repr__(self) -> str:
        tracked = f", node_id={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={list(self.shape)}{tracked})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    parents: Tuple[Optional[int], ...]
    rule: Optional[GradRule]
    shape: Tuple[int, ...]


class Tape:
    """
    Ordered record of operations. Node ids are assigned in creation order, so
    every record's inputs precede it and the reverse id order is a valid
    reverse topological order.
    """

    def __init__(self):
        self._records: List[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def variable(self, value) -> Tensor:
        """Register a leaf (a parameter or an input we want gradients for)"""
        tensor = Tensor(value, self, len(self._records))
        self._records.append(_Record((), None, tensor.shape))
        return tensor

    def record(self, value: np.ndarray, parents: Sequence[Tensor], rule: GradRule) -> Tensor:
        tensor = Tensor(value, self, len(self._records))
        parent_ids = tuple(p.node_id if p.tape is self else None for p in parents)
        self._records.append(_Record(parent_ids, rule, tensor.shape))
        return tensor

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """dLoss/dLeaf for every leaf on this tape (zeros for unreached leaves)"""
        if loss.tape is not self or loss.node_id is None:
            raise NumericError("loss is not on this tape")
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {list(loss.shape)}")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
        for node_id in range(loss.node_id, -1, -1):
            grad = grads.get(node_id)
            record = self._records[node_id]
            if grad is None or record.rule is None:
                continue
            parent_grads = record.rule(grad)
            for parent_id, parent_grad in zip(record.parents, parent_grads):
                if parent_id is None or parent_grad is None:
                    continue
                if parent_id in grads:
                    grads[parent_id] = grads[parent_id] + parent_grad
                else:
                    grads[parent_id] = parent_grad
            del grads[node_id]

        return {
            node_id: grads.get(node_id, np.zeros(record.shape))
            for node_id, record in enumerate(self._records)
            if record.rule is None
        }


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    """Gradient map (leaf node_id -> gradient) for a scalar loss"""
    if loss.tape is None or loss.node_id is None:
        raise NumericError("loss is not on a tape")
    return loss.tape.backward(loss)


def record_op(value: np.ndarray, parents: Sequence[Tensor], rule: GradRule) -> Tensor:
    """
    Wrap a forward value as the output of an op. Recorded only when an input
    is tracked; all tracked inputs must share one tape.
    """
    tapes = {id(p.tape): p.tape for p in parents if p.tape is not None}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise NumericError("op inputs belong to different tapes")
    tape = next(iter(tapes.values()))
    return tape.record(value, parents, rule)


def tensor_new(shape: Sequence[int], data: Sequence[float]) -> Tensor:
    """Build a tensor from a shape and flat row-major data"""
    dims = tuple(int(d) for d in shape)
    if not dims or any(d < 1 for d in dims):
        raise ShapeError(f"every dimension must be >= 1, got shape {list(dims)}")
    values = np.asarray(data, dtype=np.float64).reshape(-1)
    expected = math.prod(dims)
    if values.size != expected:
        raise ShapeError(
            f"shape {list(dims)} holds {expected} values but data has {values.size}"
        )
    return Tensor(values.reshape(dims))


def _require_rank2(a: Tensor, op: str) -> None:
    if a.ndim != 2:
        raise ShapeError(f"{op} needs a rank-2 tensor, got shape {list(a.shape)}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {list(a.shape)} and {list(b.shape)} do not agree")
    x, y = a.data, b.data

    def rule(g):
        return g @ y.T, x.T @ g

    return record_op(x @ y, (a, b), rule)


def _row_broadcast(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]) -> bool:
    """True if b is a row vector broadcast over a's rows, False if shapes match"""
    if a_shape == b_shape:
        return False
    if len(a_shape) == 2 and b_shape in ((a_shape[1],), (1, a_shape[1])):
        return True
    raise ShapeError(f"cannot combine shapes {list(a_shape)} and {list(b_shape)}")


def elementwise(op: str, a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    """add | sub | mul with a tensor or scalar; scale with a scalar"""
    if op not in ELEMENTWISE_OPS:
        raise NumericError(f"unknown elementwise op {op!r}, expected one of {ELEMENTWISE_OPS}")

    if not isinstance(b, Tensor):
        c = float(b)
        if op == "add":
            return record_op(a.data + c, (a,), lambda g: (g,))
        if op == "sub":
            return record_op(a.data - c, (a,), lambda g: (g,))
        return record_op(a.data * c, (a,), lambda g: (g * c,))

    if op == "scale":
        raise ShapeError("scale expects a scalar factor, got a tensor")

    x, y = a.data, b.data
    broadcast = _row_broadcast(a.shape, b.shape)
    b_shape = b.shape

    def reduce(g):
        return g.sum(axis=0).reshape(b_shape) if broadcast else g

    yb = y.reshape(1, -1) if broadcast else y

    if op == "add":
        return record_op(x + yb, (a, b), lambda g: (g, reduce(g)))
    if op == "sub":
        return record_op(x - yb, (a, b), lambda g: (g, -reduce(g)))
    return record_op(x * yb, (a, b), lambda g: (g * yb, reduce(g * x)))


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, factor: Scalar) -> Tensor:
    return elementwise("scale", a, factor)


def transpose(a: Tensor) -> Tensor:
    _require_rank2(a, "transpose")
    return record_op(a.data.T, (a,), lambda g: (g.T,))


def mask_columns(a: Tensor, mask: Sequence[int]) -> Tensor:
    """Set columns whose mask entry is 0 to -inf (softmax sentinel)"""
    _require_rank2(a, "mask_columns")
    keep = np.asarray(mask, dtype=bool).reshape(-1)
    if keep.size != a.shape[1]:
        raise ShapeError(f"mask of length {keep.size} for {a.shape[1]} columns")
    value = np.where(keep[None, :], a.data, -np.inf)
    return record_op(value, (a,), lambda g: (np.where(keep[None, :], g, 0.0),))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; -inf entries get weight exactly 0"""
    _require_rank2(a, "softmax_rows")
    x = a.data
    if np.isnan(x).any():
        raise NumericError("softmax input contains NaN")
    if np.isposinf(x).any():
        raise NumericError("softmax input contains +inf")
    row_max = x.max(axis=1, keepdims=True)
    dead = np.flatnonzero(np.isneginf(row_max[:, 0]))
    if dead.size:
        raise NumericError(f"softmax row {int(dead[0])} is fully masked")
    e = np.exp(x - row_max)
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record_op(y, (a,), rule)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    return record_op(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    x = a.data
    active = x > 0
    return record_op(np.where(active, x, 0.0), (a,), lambda g: (np.where(active, g, 0.0),))


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = DEFAULT_LAYER_NORM_EPS) -> Tensor:
    """Per-row normalization (population variance), then gamma * x + beta"""
    _require_rank2(a, "layer_norm")
    d = a.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm over width {d} got gamma {list(gamma.shape)} and beta {list(beta.shape)}"
        )
    if eps <= 0:
        raise NumericError(f"layer_norm eps must be > 0, got {eps}")
    x, w = a.data, gamma.data
    centered = x - x.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def rule(g):
        dx_hat = g * w
        dx = inv_std * (
            dx_hat
            - dx_hat.mean(axis=1, keepdims=True)
            - x_hat * (dx_hat * x_hat).mean(axis=1, keepdims=True)
        )
        return dx, (g * x_hat).sum(axis=0), g.sum(axis=0)

    return record_op(x_hat * w + beta.data, (a, gamma, beta), rule)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Column-wise concatenation; part i occupies column block i"""
    if not parts:
        raise ShapeError("concat_last needs at least one part")
    for part in parts:
        _require_rank2(part, "concat_last")
    rows = {part.shape[0] for part in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat_last parts disagree on row count: {sorted(rows)}")
    bounds = np.cumsum([part.shape[1] for part in parts])[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=1))

    return record_op(np.concatenate([p.data for p in parts], axis=1), tuple(parts), rule)


def split_last(a: Tensor, n_parts: int) -> List[Tensor]:
    """Inverse of concat_last for equal-width blocks"""
    _require_rank2(a, "split_last")
    if n_parts < 1 or a.shape[1] % n_parts:
        raise ShapeError(f"cannot split width {a.shape[1]} into {n_parts} equal blocks")
    width = a.shape[1] // n_parts
    return [slice_cols(a, i * width, (i + 1) * width) for i in range(n_parts)]


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    _require_rank2(a, "slice_cols")
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"column slice [{start}:{stop}] outside width {a.shape[1]}")
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return record_op(a.data[:, start:stop], (a,), rule)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-1 vectors (or rank-2 blocks) on top of each other"""
    if not parts:
        raise ShapeError("concat_rows needs at least one part")
    blocks = [p.data.reshape(1, -1) if p.ndim == 1 else p.data for p in parts]
    widths = {block.shape[1] for block in blocks}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows parts disagree on width: {sorted(widths)}")
    shapes = [p.shape for p in parts]
    bounds = np.cumsum([block.shape[0] for block in blocks])[:-1]

    def rule(g):
        return tuple(piece.reshape(shape) for piece, shape in zip(np.split(g, bounds, axis=0), shapes))

    return record_op(np.concatenate(blocks, axis=0), tuple(parts), rule)


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather table rows; the gradient scatters back with accumulation"""
    _require_rank2(table, "take_rows")
    index = np.asarray(ids, dtype=np.int64).reshape(-1)
    if index.size == 0:
        raise ShapeError("take_rows needs at least one id")
    bad = index[(index < 0) | (index >= table.shape[0])]
    if bad.size:
        raise ShapeError(f"id {int(bad[0])} out of range for {table.shape[0]} rows")
    shape = table.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return record_op(table.data[index], (table,), rule)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    return record_op(a.data.reshape(tuple(shape)), (a,), lambda g: (g.reshape(original),))


def mean_pool_masked(a: Tensor, mask: Sequence[int]) -> Tensor:
    """Mean over the rows whose mask entry is 1; returns a rank-1 tensor"""
    _require_rank2(a, "mean_pool_masked")
    keep = np.asarray(mask).reshape(-1)
    if keep.size != a.shape[0]:
        raise ShapeError(f"mask of length {keep.size} for {a.shape[0]} rows")
    rows = np.flatnonzero(keep)
    if rows.size == 0:
        raise NumericError("mean_pool_masked needs at least one unmasked row")
    shape = a.shape
    count = float(rows.size)

    def rule(g):
        full = np.zeros(shape)
        full[rows] = g / count
        return (full,)

    return record_op(a.data[rows].mean(axis=0), (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record_op(np.array([a.data.sum()]), (a,), lambda g: (np.full(shape, g[0]),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, float(a.size)
    return record_op(np.array([a.data.mean()]), (a,), lambda g: (np.full(shape, g[0] / n),))


@dataclass(frozen=True)
class GradCheckResult:
    """Worst coordinate found by grad_check"""

    max_error: float
    param_index: int
    coord: Tuple[int, ...]
    analytic: float
    numeric: float

    def passed(self, tolerance: float) -> bool:
        return self.max_error < tolerance


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), RELATIVE_ERROR_FLOOR)
    return abs(analytic - numeric) / denom


def _scalar_value(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"checked function must return a scalar, got shape {list(out.shape)}")
    value = out.item()
    if not math.isfinite(value):
        raise NumericError(f"checked function returned a non-finite value ({value})")
    return value


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    step: float = 1e-5,
) -> GradCheckResult:
    """
    Compare backward() against central differences for every coordinate of
    every parameter. f maps parameter tensors to a scalar tensor and must be
    deterministic. The inputs are copied; callers' arrays are not touched.
    """
    if step <= 0:
        raise NumericError(f"finite-difference step must be > 0, got {step}")
    arrays = [np.array(p, dtype=np.float64) for p in params]

    tape = Tape()
    leaves = [tape.variable(arr) for arr in arrays]
    loss = f(leaves)
    _scalar_value(loss)
    grads = tape.backward(loss)

    def evaluate() -> float:
        return _scalar_value(f([Tensor(arr) for arr in arrays]))

    worst: Optional[GradCheckResult] = None
    for index, arr in enumerate(arrays):
        analytic = grads[leaves[index].node_id]
        # leaves share memory with arrays; snapshot before perturbing
        analytic = np.array(analytic)
        for coord in np.ndindex(arr.shape):
            original = arr[coord]
            arr[coord] = original + step
            plus = evaluate()
            arr[coord] = original - step
            minus = evaluate()
            arr[coord] = original
            numeric = (plus - minus) / (2.0 * step)
            error = relative_error(float(analytic[coord]), numeric)
            if worst is None or error > worst.max_error:
                worst = GradCheckResult(error, index, tuple(coord), float(analytic[coord]), numeric)

    if worst is None:
        raise ShapeError("grad_check needs at least one parameter")
    logger.debug(
        "grad_check worst error %.3e at param %d %s (analytic %.6e, numeric %.6e)",
        worst.max_error, worst.param_index, worst.coord, worst.analytic, worst.numeric,
    )
    return worst
