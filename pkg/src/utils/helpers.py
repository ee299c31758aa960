"""
Utility helper functions for medattn
Common functions to reduce code duplication
"""

import math
import os
import tempfile
from typing import Iterator, List, Optional, Sequence, TypeVar

from core.config import THREADS_ENV

T = TypeVar("T")


def worker_count(requested: Optional[int] = None) -> int:
    """Thread pool size: explicit request, then MEDATTN_THREADS, then core count"""
    if requested is not None and requested >= 1:
        return requested
    env = os.getenv(THREADS_ENV)
    if env:
        try:
            value = int(env)
            if value >= 1:
                return value
        except ValueError:
            pass
    return os.cpu_count() or 1


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write to a temp file in the same directory, then rename over path"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def batch_count(n_items: int, batch_size: int) -> int:
    return max(0, (n_items + batch_size - 1) // batch_size)


def iter_batches(items: Sequence[T], batch_size: int) -> Iterator[List[T]]:
    """Consecutive batches; the last one may be short"""
    for start in range(0, len(items), batch_size):
        yield list(items[start:start + batch_size])


def format_number(value: float) -> str:
    """
    Up to 6 significant digits. Small and huge magnitudes use a compact
    exponent without zero padding (1e-4, 2.5e-5), which float() reads back.
    """
    if value == 0 or not math.isfinite(value):
        return f"{value:g}"
    if abs(value) < 1e-3 or abs(value) >= 1e6:
        mantissa, exponent = f"{value:.5e}".split("e")
        mantissa = mantissa.rstrip("0").rstrip(".")
        return f"{mantissa}e{int(exponent)}"
    return f"{value:.6g}"
