"""
Planted-signal clinical corpus and token-level noise.

Each label owns three trigger tokens; a document carries label j exactly
when one of j's triggers appears in it. Label vectors are drawn with
pairwise co-occurrence boosts by Gibbs sampling, so labels are correlated
the way diagnoses are.
"""

import logging
import math
import string
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .config import NOISE_KINDS, SYNTH_LABEL_CODES
from .errors import ConfigError, DataError
from .text_pipeline import RawRecord, tokenize

logger = logging.getLogger(__name__)

GIBBS_SWEEPS = 10
TRIGGERS_PER_LABEL = 3
SENTENCE_LENGTH = 12
MIN_AGE, MAX_AGE = 16, 95

_HONORIFICS = ("Dr.", "Mr.", "Mrs.", "Ms.")
_SURNAMES = ("Smith", "Garcia", "Nguyen", "Okafor", "Kowalski", "Haddad", "Larsen", "Moreau")


def label_code(index: int) -> str:
    if index < len(SYNTH_LABEL_CODES):
        return SYNTH_LABEL_CODES[index]
    return f"Z{index:02d}.0"


def trigger_tokens(index: int) -> Tuple[str, ...]:
    return tuple(f"sx{index}{suffix}" for suffix in "abc"[:TRIGGERS_PER_LABEL])


def filler_token(index: int) -> str:
    return f"w{index:04d}"


@dataclass(frozen=True)
class SynthConfig:
    n_docs: int
    marginals: Tuple[float, ...]
    boosts: Tuple[Tuple[float, ...], ...]
    triggers: Tuple[Tuple[str, ...], ...]
    filler_vocab: int = 500
    doc_len: Tuple[int, int] = (20, 60)
    seed: int = 42
    phi_rate: float = 0.5  # share of notes opened by a header with a name, date and record number

    def __post_init__(self):
        m = len(self.marginals)
        if self.n_docs < 1:
            raise ConfigError(f"n_docs must be >= 1, got {self.n_docs}")
        if m < 1:
            raise ConfigError("need at least one label")
        if any(not 0 < p < 1 for p in self.marginals):
            raise ConfigError("label marginals must lie strictly between 0 and 1")
        boosts = np.asarray(self.boosts, dtype=np.float64)
        if boosts.shape != (m, m):
            raise ConfigError(f"boosts must be {m}x{m}, got {list(boosts.shape)}")
        if not np.array_equal(boosts, boosts.T):
            raise ConfigError("co-occurrence boosts must be symmetric")
        if len(self.triggers) != m:
            raise ConfigError(f"need one trigger set per label ({m}), got {len(self.triggers)}")
        seen = set()
        for index, group in enumerate(self.triggers):
            if len(group) != TRIGGERS_PER_LABEL or len(set(group)) != TRIGGERS_PER_LABEL:
                raise ConfigError(f"label {index} needs {TRIGGERS_PER_LABEL} distinct triggers")
            for token in group:
                if token in seen:
                    raise ConfigError(f"trigger {token!r} is shared between labels")
                if tokenize(token) != [token]:
                    raise ConfigError(f"trigger {token!r} is not a single lowercase token")
                seen.add(token)
        if self.filler_vocab < 1:
            raise ConfigError(f"filler_vocab must be >= 1, got {self.filler_vocab}")
        fillers = {filler_token(i) for i in range(self.filler_vocab)}
        if seen & fillers:
            raise ConfigError("trigger tokens overlap the filler vocabulary")
        low, high = self.doc_len
        if low < 3 or high < low:
            raise ConfigError(f"document length range must satisfy 3 <= min <= max, got {self.doc_len}")
        if not 0 <= self.phi_rate <= 1:
            raise ConfigError(f"phi_rate must be in [0, 1], got {self.phi_rate}")

    @property
    def n_labels(self) -> int:
        return len(self.marginals)

    @property
    def label_codes(self) -> Tuple[str, ...]:
        return tuple(label_code(j) for j in range(self.n_labels))

    @classmethod
    def uniform(
        cls,
        n_docs: int,
        n_labels: int,
        marginal: float = 0.2,
        cooccur_boost: float = 1.5,
        filler_vocab: int = 500,
        doc_len: Tuple[int, int] = (20, 60),
        seed: int = 42,
        phi_rate: float = 0.5,
    ) -> "SynthConfig":
        """Equal marginals; labels (0,1), (2,3), ... co-occur with the given boost"""
        if n_labels < 1:
            raise ConfigError(f"n_labels must be >= 1, got {n_labels}")
        boosts = np.zeros((n_labels, n_labels))
        for j in range(0, n_labels - 1, 2):
            boosts[j, j + 1] = boosts[j + 1, j] = cooccur_boost
        return cls(
            n_docs=n_docs,
            marginals=(float(marginal),) * n_labels,
            boosts=tuple(tuple(float(b) for b in row) for row in boosts),
            triggers=tuple(trigger_tokens(j) for j in range(n_labels)),
            filler_vocab=filler_vocab,
            doc_len=(int(doc_len[0]), int(doc_len[1])),
            seed=seed,
            phi_rate=phi_rate,
        )


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def sample_labels(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """One label vector by Gibbs sampling over the pairwise model"""
    bias = np.array([_logit(p) for p in cfg.marginals])
    boosts = np.asarray(cfg.boosts, dtype=np.float64)
    y = (rng.random(cfg.n_labels) < np.asarray(cfg.marginals)).astype(np.float64)
    for _ in range(GIBBS_SWEEPS):
        for j in range(cfg.n_labels):
            field = bias[j] + boosts[j] @ y - boosts[j, j] * y[j]
            y[j] = float(rng.random() < 1.0 / (1.0 + math.exp(-field)))
    return y.astype(np.int64)


def _phi_header(rng: np.random.Generator) -> str:
    honorific = _HONORIFICS[rng.integers(len(_HONORIFICS))]
    surname = _SURNAMES[rng.integers(len(_SURNAMES))]
    month, day, year = rng.integers(1, 13), rng.integers(1, 29), rng.integers(2005, 2023)
    mrn = rng.integers(10_000_000, 99_999_999)
    return f"Seen by {honorific} {surname} on {month}/{day}/{year}. MRN {mrn}.\n"


def _render(tokens: Sequence[str]) -> str:
    sentences = [
        " ".join(tokens[i:i + SENTENCE_LENGTH]) + "."
        for i in range(0, len(tokens), SENTENCE_LENGTH)
    ]
    return " ".join(sentences)


def generate_corpus(cfg: SynthConfig) -> List[RawRecord]:
    rng = np.random.default_rng(cfg.seed)
    codes = cfg.label_codes
    low, high = cfg.doc_len
    records = []
    for index in range(cfg.n_docs):
        labels = sample_labels(cfg, rng)
        length = int(rng.integers(low, high + 1))
        tokens = [filler_token(int(i)) for i in rng.integers(0, cfg.filler_vocab, size=length)]
        for j in np.flatnonzero(labels):
            count = int(rng.integers(1, 3))
            for pick in rng.choice(TRIGGERS_PER_LABEL, size=count, replace=False):
                tokens.insert(int(rng.integers(0, len(tokens) + 1)), cfg.triggers[j][int(pick)])
        text = _render(tokens)
        if rng.random() < cfg.phi_rate:
            text = _phi_header(rng) + text
        records.append(
            RawRecord(
                id=f"doc{index:05d}",
                text=text,
                labels=tuple(codes[j] for j in np.flatnonzero(labels)),
                age=float(rng.integers(MIN_AGE, MAX_AGE + 1)),
            )
        )
    logger.info("Generated %d synthetic notes over %d labels (seed %d)", cfg.n_docs, cfg.n_labels, cfg.seed)
    return records


def recover_labels(text: str, cfg: SynthConfig) -> Tuple[str, ...]:
    """Codes implied by the planted rule: label j iff some trigger of j occurs"""
    present = set(tokenize(text))
    return tuple(
        code for code, group in zip(cfg.label_codes, cfg.triggers) if present.intersection(group)
    )


def noise_count(level: float, n_tokens: int) -> int:
    """round(level * n) with halves rounded up"""
    return int(math.floor(level * n_tokens + 0.5))


def _typo(token: str, rng: np.random.Generator) -> str:
    if len(token) == 1:
        letters = [c for c in string.ascii_lowercase if c != token]
        return letters[int(rng.integers(len(letters)))]
    i = int(rng.integers(0, len(token) - 1))
    return token[:i] + token[i + 1] + token[i] + token[i + 2:]


def inject_noise(
    tokens: Sequence[str],
    level: float,
    kind: str,
    seed,
    vocabulary: Optional[Sequence[str]] = None,
) -> List[str]:
    """
    Perturb round(level * n) distinct positions chosen without replacement.
    delete drops them (keeping at least one token), substitute draws a
    uniform token from vocabulary, typo swaps two adjacent characters.
    """
    if not 0 <= level <= 1:
        raise DataError(f"noise level must be in [0, 1], got {level}")
    if kind not in NOISE_KINDS:
        raise ConfigError(f"noise kind must be one of {NOISE_KINDS}, got {kind!r}")
    result = list(tokens)
    k = noise_count(level, len(result))
    if k == 0:
        return result
    if kind == "substitute" and not vocabulary:
        raise DataError("substitute noise needs a nonempty vocabulary")

    rng = np.random.default_rng(seed)
    positions = rng.choice(len(result), size=k, replace=False)
    if kind == "delete":
        doomed = set(int(p) for p in positions[: len(result) - 1])
        return [tok for i, tok in enumerate(result) if i not in doomed]
    for p in positions:
        if kind == "substitute":
            result[p] = vocabulary[int(rng.integers(len(vocabulary)))]
        else:
            result[p] = _typo(result[p], rng)
    return result
