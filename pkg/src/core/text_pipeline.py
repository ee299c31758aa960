"""
Clinical-note preprocessing: deduplication, de-identification, code
normalization, sentence segmentation, tokenization, vocabulary and encoding.
"""

import json
import logging
import os
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from .config import (
    DEFAULT_MAX_LEN,
    DEFAULT_MAX_VOCAB,
    DEFAULT_MIN_FREQ,
    DEFAULT_MIN_TOKENS,
    ENCODED_FORMAT,
    ENCODED_VERSION,
    PAD_TOKEN,
    UNK_TOKEN,
)
from .errors import DataError
from utils.helpers import atomic_write_text, worker_count

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1

HONORIFICS = ("Dr", "Mr", "Mrs", "Ms")
ABBREVIATIONS = ("dr", "mr", "mrs", "ms", "vs")
MONTHS = (
    "January", "February", "March", "April", "May", "June", "July",
    "August", "September", "October", "November", "December",
)

# De-identification rules, applied in this order
_NUMERIC_DATE = re.compile(r"\b\d{1,2}/\d{1,2}/\d{2,4}\b")
_WRITTEN_DATE = re.compile(r"\b(?:%s)\s+\d{1,2},\s*\d{4}\b" % "|".join(MONTHS))
_LONG_DIGITS = re.compile(r"\d{6,}")
_NAME_AFTER_HONORIFIC = re.compile(r"\b(%s)\.(\s+)[A-Z][A-Za-z'\-]*" % "|".join(HONORIFICS))

_SENTENCE_BREAK = re.compile(r"[.!?;](?=\s|$)|\n")
_ABBREVIATION_TAIL = re.compile(r"(?:^|[^\w])(?:%s)$" % "|".join(ABBREVIATIONS), re.IGNORECASE)
_TOKEN = re.compile(r"[^\W_]+")
_WHITESPACE = re.compile(r"\s+")


@dataclass(frozen=True)
class RawRecord:
    """One clinical note with its raw diagnosis codes"""

    id: str
    text: str
    labels: Tuple[str, ...] = ()
    age: Optional[float] = None

    def __post_init__(self):
        if not self.id:
            raise DataError("record id must be nonempty")

    def to_json(self) -> Dict:
        payload = {"id": self.id, "text": self.text, "labels": list(self.labels)}
        if self.age is not None:
            payload["age"] = self.age
        return payload


@dataclass(frozen=True)
class Vocabulary:
    """Frozen token <-> id map; id 0 is PAD and id 1 is UNK"""

    tokens: Tuple[str, ...]
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise DataError("vocabulary must start with PAD and UNK")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary tokens must be unique")
        object.__setattr__(self, "index", {tok: i for i, tok in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def content_tokens(self) -> Tuple[str, ...]:
        """Every token except PAD and UNK"""
        return self.tokens[2:]

    def save(self, path: str) -> None:
        atomic_write_text(path, "".join(tok + "\n" for tok in self.tokens))

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            return cls(tuple(line.rstrip("\n") for line in f if line.rstrip("\n")))


@dataclass(frozen=True)
class EncodedExample:
    """Model input: padded ids, attention mask and the binary label vector"""

    ids: Tuple[int, ...]
    mask: Tuple[int, ...]
    label_vec: Tuple[int, ...]
    record_id: str = ""
    tokens: Tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.ids) != len(self.mask):
            raise DataError(f"ids ({len(self.ids)}) and mask ({len(self.mask)}) differ in length")
        if not any(self.mask):
            raise DataError(f"example {self.record_id!r} has no real tokens")

    @property
    def n_tokens(self) -> int:
        return sum(self.mask)


@dataclass(frozen=True)
class PreprocessSettings:
    min_tokens: int = DEFAULT_MIN_TOKENS
    max_len: int = DEFAULT_MAX_LEN
    min_freq: int = DEFAULT_MIN_FREQ
    max_size: int = DEFAULT_MAX_VOCAB
    min_age: Optional[float] = None
    workers: Optional[int] = None


class LabelVector(NamedTuple):
    vector: Tuple[int, ...]
    unknown: int


@dataclass
class PreprocessedCorpus:
    examples: List[EncodedExample]
    vocab: Vocabulary
    label_space: Tuple[str, ...]
    summary: Dict[str, int]


def normalize_text(text: str) -> str:
    """Comparison key used for deduplication"""
    return _WHITESPACE.sub(" ", text.lower()).strip()


def deduplicate(records: Sequence[RawRecord]) -> List[RawRecord]:
    """Keep the first record for each normalized text, preserving order"""
    seen = set()
    kept = []
    for record in records:
        key = normalize_text(record.text)
        if key in seen:
            continue
        seen.add(key)
        kept.append(record)
    return kept


def deidentify(text: str) -> str:
    """Replace dates, long digit runs and names after honorifics with tags"""
    text = _NUMERIC_DATE.sub("[DATE]", text)
    text = _WRITTEN_DATE.sub("[DATE]", text)
    text = _LONG_DIGITS.sub("[ID]", text)
    return _NAME_AFTER_HONORIFIC.sub(r"\1.\2[NAME]", text)


def normalize_codes(codes: Iterable[str]) -> List[str]:
    """Uppercase, strip, drop dots and empties, dedupe preserving order"""
    normalized = []
    for code in codes:
        value = code.strip().upper().replace(".", "")
        if value and value not in normalized:
            normalized.append(value)
    return normalized


def segment_sentences(text: str) -> List[str]:
    segments = []
    start = 0
    for match in _SENTENCE_BREAK.finditer(text):
        if match.group() == "." and _ABBREVIATION_TAIL.search(text, 0, match.start()):
            continue
        piece = text[start:match.start()].strip()
        if piece:
            segments.append(piece)
        start = match.end()
    tail = text[start:].strip()
    if tail:
        segments.append(tail)
    return segments


def tokenize(text: str) -> List[str]:
    """Lowercased alphanumeric runs; everything else separates tokens"""
    return _TOKEN.findall(text.lower())


def build_vocab(
    corpus: Iterable[Sequence[str]],
    min_freq: int = DEFAULT_MIN_FREQ,
    max_size: int = DEFAULT_MAX_VOCAB,
) -> Vocabulary:
    """Tokens with frequency >= min_freq ranked by (count desc, token asc)"""
    if min_freq < 1:
        raise DataError(f"min_freq must be >= 1, got {min_freq}")
    if max_size < 3:
        raise DataError(f"max_size must be >= 3, got {max_size}")
    counts = Counter()
    for tokens in corpus:
        counts.update(tokens)
    ranked = sorted(
        (tok for tok, n in counts.items() if n >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary((PAD_TOKEN, UNK_TOKEN) + tuple(ranked[: max_size - 2]))


def encode(tokens: Sequence[str], vocab: Vocabulary, max_len: int) -> Tuple[List[int], List[int]]:
    """Map to ids, truncate to max_len and right-pad; returns (ids, mask)"""
    if max_len < 1:
        raise DataError(f"max_len must be >= 1, got {max_len}")
    if not tokens:
        raise DataError("cannot encode an empty token list")
    ids = [vocab.id_of(tok) for tok in tokens[:max_len]]
    n_real = len(ids)
    pad = max_len - n_real
    return ids + [PAD_ID] * pad, [1] * n_real + [0] * pad


def vectorize_labels(codes: Iterable[str], label_space: Sequence[str]) -> LabelVector:
    """Binary indicator over label_space; codes outside it are counted"""
    if not label_space:
        raise DataError("label space is empty")
    if len(set(label_space)) != len(label_space):
        raise DataError("label space has duplicates")
    present = set(codes)
    vector = tuple(1 if label in present else 0 for label in label_space)
    unknown = len(present.difference(label_space))
    return LabelVector(vector, unknown)


def clean_note(text: str) -> List[str]:
    """deidentify -> segment -> rejoin -> tokenize for one note"""
    return tokenize(" ".join(segment_sentences(deidentify(text))))


def encode_note(text: str, vocab: Vocabulary, label_space: Sequence[str], max_len: int,
                record_id: str = "", codes: Sequence[str] = ()) -> EncodedExample:
    """Encode a single note the same way preprocess_corpus encodes a record"""
    tokens = clean_note(text)
    ids, mask = encode(tokens, vocab, max_len)
    labels = vectorize_labels(normalize_codes(codes), label_space)
    if labels.unknown:
        logger.warning("note %r: %d code(s) outside the label space ignored", record_id, labels.unknown)
    return EncodedExample(tuple(ids), tuple(mask), labels.vector, record_id, tuple(tokens))


def preprocess_corpus(records: Sequence[RawRecord], settings: PreprocessSettings) -> PreprocessedCorpus:
    """
    dedup -> deid -> segment+rejoin -> tokenize -> filter -> vocab -> encode.
    The summary counts retained records and drops per reason.
    """
    summary = {
        "input": len(records),
        "duplicates": 0,
        "not_adult": 0,
        "too_short": 0,
        "no_labels": 0,
        "retained": 0,
    }
    unique = deduplicate(records)
    summary["duplicates"] = len(records) - len(unique)

    # per-record stages are independent; map() keeps input order
    with ThreadPoolExecutor(max_workers=worker_count(settings.workers)) as pool:
        token_lists = list(pool.map(clean_note, (r.text for r in unique)))

    kept: List[Tuple[RawRecord, List[str], List[str]]] = []
    for record, tokens in zip(unique, token_lists):
        if settings.min_age is not None and record.age is not None and record.age < settings.min_age:
            summary["not_adult"] += 1
            continue
        if len(tokens) < settings.min_tokens:
            summary["too_short"] += 1
            continue
        codes = normalize_codes(record.labels)
        if not codes:
            summary["no_labels"] += 1
            continue
        kept.append((record, tokens, codes))

    if not kept:
        raise DataError(f"no records survived preprocessing: {summary}")
    summary["retained"] = len(kept)

    vocab = build_vocab((tokens for _, tokens, _ in kept), settings.min_freq, settings.max_size)
    label_space = tuple(sorted({code for _, _, codes in kept for code in codes}))

    examples = []
    for record, tokens, codes in kept:
        ids, mask = encode(tokens, vocab, settings.max_len)
        labels = vectorize_labels(codes, label_space).vector
        examples.append(EncodedExample(tuple(ids), tuple(mask), labels, record.id, tuple(tokens)))

    logger.info(
        "Preprocessed %d records: %d retained, vocab %d, %d labels, drops %s",
        summary["input"], summary["retained"], vocab.size, len(label_space),
        {k: v for k, v in summary.items() if k not in ("input", "retained")},
    )
    return PreprocessedCorpus(examples, vocab, label_space, summary)


def _json_object(line: str, where: str) -> Dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"{where}: malformed JSON ({e})") from e
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected a JSON object, got {type(obj).__name__}")
    return obj


def read_records(path: str) -> List[RawRecord]:
    """Load RawRecords from JSONL ({"id", "text", "labels"[, "age"]} per line)"""
    if not os.path.exists(path):
        raise DataError(f"input file not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = _json_object(line, f"{path}:{line_no}")
            try:
                labels = obj.get("labels") or []
                if not isinstance(labels, list):
                    raise TypeError("labels must be a list")
                age = obj.get("age")
                records.append(
                    RawRecord(
                        id=str(obj["id"]),
                        text=str(obj.get("text") or ""),
                        labels=tuple(str(code) for code in labels),
                        age=float(age) if age is not None else None,
                    )
                )
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{line_no}: bad record ({e})") from e
    return records


def write_records(records: Iterable[RawRecord], path: Optional[str] = None) -> str:
    """JSONL text for records; written atomically when a path is given"""
    text = "".join(json.dumps(r.to_json(), ensure_ascii=False) + "\n" for r in records)
    if path is not None:
        atomic_write_text(path, text)
    return text


def save_encoded(corpus: PreprocessedCorpus, out_dir: str, max_len: int) -> None:
    """dataset.jsonl (versioned header + one example per line), vocab.txt, labels.txt, summary.json"""
    os.makedirs(out_dir, exist_ok=True)
    header = {
        "format": ENCODED_FORMAT,
        "version": ENCODED_VERSION,
        "max_len": max_len,
        "n_labels": len(corpus.label_space),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for ex in corpus.examples:
        lines.append(
            json.dumps(
                {
                    "id": ex.record_id,
                    "tokens": list(ex.tokens),
                    "ids": list(ex.ids),
                    "mask": list(ex.mask),
                    "labels": list(ex.label_vec),
                },
                ensure_ascii=False,
            )
        )
    atomic_write_text(os.path.join(out_dir, "dataset.jsonl"), "\n".join(lines) + "\n")
    corpus.vocab.save(os.path.join(out_dir, "vocab.txt"))
    save_label_space(corpus.label_space, os.path.join(out_dir, "labels.txt"))
    atomic_write_text(
        os.path.join(out_dir, "summary.json"), json.dumps(corpus.summary, indent=2, sort_keys=True) + "\n"
    )


def save_label_space(label_space: Sequence[str], path: str) -> None:
    atomic_write_text(path, "".join(label + "\n" for label in label_space))


def load_label_space(path: str) -> Tuple[str, ...]:
    with open(path, "r", encoding="utf-8") as f:
        return tuple(line.strip() for line in f if line.strip())


def load_encoded(data_dir: str) -> PreprocessedCorpus:
    dataset_path = os.path.join(data_dir, "dataset.jsonl")
    for required in (dataset_path, os.path.join(data_dir, "vocab.txt"), os.path.join(data_dir, "labels.txt")):
        if not os.path.exists(required):
            raise DataError(f"encoded dataset is missing {required}")
    vocab = Vocabulary.load(os.path.join(data_dir, "vocab.txt"))
    label_space = load_label_space(os.path.join(data_dir, "labels.txt"))

    examples = []
    with open(dataset_path, "r", encoding="utf-8") as f:
        header = _json_object(f.readline() or "{}", f"{dataset_path}:1")
        if header.get("format") != ENCODED_FORMAT or header.get("version") != ENCODED_VERSION:
            raise DataError(
                f"{dataset_path}: unsupported encoded format {header.get('format')!r} "
                f"version {header.get('version')!r} (expected {ENCODED_FORMAT!r} v{ENCODED_VERSION})"
            )
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            where = f"{dataset_path}:{line_no}"
            obj = _json_object(line, where)
            try:
                example = EncodedExample(
                    tuple(obj["ids"]), tuple(obj["mask"]), tuple(obj["labels"]),
                    str(obj.get("id", "")), tuple(obj.get("tokens", ())),
                )
            except (KeyError, TypeError, ValueError) as e:
                raise DataError(f"{where}: bad example ({type(e).__name__}: {e})") from e
            if len(example.label_vec) != len(label_space):
                raise DataError(f"{where}: label vector length does not match labels.txt")
            examples.append(example)
    summary_path = os.path.join(data_dir, "summary.json")
    summary = {}
    if os.path.exists(summary_path):
        with open(summary_path, "r", encoding="utf-8") as f:
            summary = _json_object(f.read(), summary_path)
    return PreprocessedCorpus(examples, vocab, label_space, summary)
