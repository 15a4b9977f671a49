"""Readers and writers for every on-disk format the toolkit touches.

* GLUE-style dataset TSVs (sentiment: one sentence; paraphrase/NLI: two).
* The tagged-corpus TSV consumed and produced by the augmenter.
* Text-format pretrained embeddings ("word v1 ... vd" lines).
* The transfer-set JSONL that carries teacher logits to the student.
* A by-id logits JSONL for merging externally produced teacher scores.

Readers reject malformed input with the offending line number; nothing is
silently skipped. Writers write to a temp name and rename on success, so a
failed run never leaves a half-written artifact behind.

Tokenization is lowercased whitespace splitting, shared by training and
inference (one function, no skew).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .augment import (
    PROVENANCE_ORIGINAL,
    PROVENANCE_SYNTHETIC,
    UNKNOWN_TAG,
    FallbackTagger,
    TaggedExample,
    TaggedSentence,
)


class DataError(ValueError):
    """Malformed file content; the message carries the line number."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace."""
    return text.lower().split()


# ---------------------------------------------------------------------------
# task schemas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSchema:
    name: str
    arity: str  # "single" or "pair"
    k: int
    label_names: tuple[str, ...]
    text_columns: tuple[tuple[str, ...], ...]  # acceptable header names per text field

    @property
    def kind(self) -> str:
        return f"{self.arity}_k{self.k}"

    def parse_label(self, raw: str) -> int:
        """Accept a label name from the fixed map, or an in-range index."""
        raw = raw.strip()
        if raw in self.label_names:
            return self.label_names.index(raw)
        if raw.lstrip("-").isdigit():
            idx = int(raw)
            if 0 <= idx < self.k:
                return idx
        raise ValueError(f"label {raw!r} is not in the {self.name} label set {self.label_names}")


TASKS: dict[str, TaskSchema] = {
    "sst2": TaskSchema(
        name="sst2", arity="single", k=2,
        label_names=("negative", "positive"),
        text_columns=(("sentence",),),
    ),
    "qqp": TaskSchema(
        name="qqp", arity="pair", k=2,
        label_names=("not_duplicate", "duplicate"),
        text_columns=(("sentence1", "question1"), ("sentence2", "question2")),
    ),
    "mnli": TaskSchema(
        name="mnli", arity="pair", k=3,
        label_names=("entailment", "neutral", "contradiction"),
        text_columns=(("sentence1", "premise"), ("sentence2", "hypothesis")),
    ),
}


def get_task(name: str) -> TaskSchema:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; expected one of {sorted(TASKS)}")


@dataclass
class DatasetSplit:
    name: str  # train / dev / test
    task: TaskSchema
    examples: list[TaggedExample] = field(default_factory=list)


def _atomic_write_text(path: str, content: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(content)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# dataset TSV
# ---------------------------------------------------------------------------


def read_dataset(path: str, task: TaskSchema, split: str = "train") -> DatasetSplit:
    """Parse a headered TSV into a DatasetSplit.

    The header must contain the task's text column(s); a `label` column is
    required for train/dev and optional for test. Extra columns (GLUE files
    carry ids and such) are ignored. Every malformed row is an error with
    its line number, never a skip.
    """
    require_labels = split != "test"
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file (missing header)")
    header = lines[0].split("\t")
    col_idx = {name: i for i, name in enumerate(header)}

    text_cols = []
    for alternatives in task.text_columns:
        found = next((c for c in alternatives if c in col_idx), None)
        if found is None:
            raise DataError(f"{path}: header is missing a {'/'.join(alternatives)} column")
        text_cols.append(col_idx[found])
    label_col = col_idx.get("label")
    if require_labels and label_col is None:
        raise DataError(f"{path}: {split} split requires a label column")
    id_col = next((col_idx[c] for c in ("id", "index", "idx") if c in col_idx), None)

    examples: list[TaggedExample] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "":
            raise DataError(f"{path}:{lineno}: blank line")
        cells = line.split("\t")
        if len(cells) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
        sentences = []
        for col in text_cols:
            tokens = tokenize(cells[col])
            if not tokens:
                raise DataError(f"{path}:{lineno}: empty sentence")
            sentences.append(TaggedSentence(tuple(tokens), (UNKNOWN_TAG,) * len(tokens)))
        label = None
        if label_col is not None and cells[label_col].strip() not in ("", "-"):
            try:
                label = task.parse_label(cells[label_col])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
        if require_labels and label is None:
            raise DataError(f"{path}:{lineno}: missing gold label in {split} split")
        example_id = cells[id_col] if id_col is not None else str(lineno - 1)
        examples.append(TaggedExample(
            example_id=example_id,
            sentence_a=sentences[0],
            sentence_b=sentences[1] if task.arity == "pair" else None,
            gold_label=label,
        ))
    return DatasetSplit(name=split, task=task, examples=examples)


def write_dataset(split: DatasetSplit, path: str) -> None:
    """Write the canonical TSV form of a split (labels by name)."""
    task = split.task
    cols = ["sentence"] if task.arity == "single" else ["sentence1", "sentence2"]
    has_labels = any(ex.gold_label is not None for ex in split.examples)
    header = cols + (["label"] if has_labels else [])
    rows = ["\t".join(header)]
    for ex in split.examples:
        cells = [" ".join(ex.sentence_a.tokens)]
        if task.arity == "pair":
            cells.append(" ".join(ex.sentence_b.tokens))
        if has_labels:
            cells.append(task.label_names[ex.gold_label] if ex.gold_label is not None else "-")
        rows.append("\t".join(cells))
    _atomic_write_text(path, "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# tagged-corpus TSV (augmenter input/output)
# ---------------------------------------------------------------------------

_TAGGED_SINGLE = ["id", "tokens_a", "tags_a", "label"]
_TAGGED_PAIR = ["id", "tokens_a", "tags_a", "tokens_b", "tags_b", "label"]


def read_tagged_corpus(path: str) -> list[TaggedExample]:
    """Read a tagged corpus TSV (single or pair, provenance optional)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file (missing header)")
    header = lines[0].split("\t")
    base = header[:-1] if header and header[-1] == "provenance" else header
    if base == _TAGGED_SINGLE:
        is_pair = False
    elif base == _TAGGED_PAIR:
        is_pair = True
    else:
        raise DataError(
            f"{path}: unrecognized tagged-corpus header {header!r}; expected "
            f"{_TAGGED_SINGLE} or {_TAGGED_PAIR} (optionally + ['provenance'])")
    has_provenance = len(base) != len(header)

    def parse_sentence(tokens_cell: str, tags_cell: str, lineno: int) -> TaggedSentence:
        tokens = tokens_cell.split(" ")
        tags = tags_cell.split(" ")
        if tokens == [""] or tags == [""]:
            raise DataError(f"{path}:{lineno}: empty sentence or tag list")
        if len(tokens) != len(tags):
            raise DataError(f"{path}:{lineno}: {len(tokens)} tokens but {len(tags)} tags")
        return TaggedSentence(tuple(tokens), tuple(tags))

    examples: list[TaggedExample] = []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)}")
        sentence_a = parse_sentence(cells[1], cells[2], lineno)
        sentence_b = parse_sentence(cells[3], cells[4], lineno) if is_pair else None
        label_cell = cells[5 if is_pair else 3].strip()
        if label_cell == "-" or label_cell == "":
            label = None
        elif label_cell.lstrip("-").isdigit():
            label = int(label_cell)
            if label < 0:
                raise DataError(f"{path}:{lineno}: negative label index {label}")
        else:
            raise DataError(f"{path}:{lineno}: label must be an index or '-', got {label_cell!r}")
        provenance = cells[-1] if has_provenance else PROVENANCE_ORIGINAL
        if provenance not in (PROVENANCE_ORIGINAL, PROVENANCE_SYNTHETIC):
            raise DataError(f"{path}:{lineno}: bad provenance {provenance!r}")
        examples.append(TaggedExample(
            example_id=cells[0],
            sentence_a=sentence_a,
            sentence_b=sentence_b,
            gold_label=label,
            provenance=provenance,
        ))
    return examples


def write_tagged_corpus(examples: Sequence[TaggedExample], path: str) -> None:
    """Write a tagged corpus TSV with the provenance column appended."""
    if not examples:
        raise DataError("refusing to write an empty tagged corpus")
    is_pair = examples[0].is_pair
    if any(ex.is_pair != is_pair for ex in examples):
        raise DataError("cannot mix single and pair examples in one corpus file")
    header = (_TAGGED_PAIR if is_pair else _TAGGED_SINGLE) + ["provenance"]
    rows = ["\t".join(header)]
    for ex in examples:
        cells = [ex.example_id, " ".join(ex.sentence_a.tokens), " ".join(ex.sentence_a.tags)]
        if is_pair:
            cells += [" ".join(ex.sentence_b.tokens), " ".join(ex.sentence_b.tags)]
        cells.append(str(ex.gold_label) if ex.gold_label is not None else "-")
        cells.append(ex.provenance)
        rows.append("\t".join(cells))
    _atomic_write_text(path, "\n".join(rows) + "\n")


def to_tagged_examples(split: DatasetSplit, tagger: FallbackTagger | None = None) -> list[TaggedExample]:
    """Attach POS tags to a dataset split (unknown tags when no tagger)."""
    out = []
    for ex in split.examples:
        def retag(s: TaggedSentence) -> TaggedSentence:
            tags = tagger.tag(s.tokens) if tagger is not None else (UNKNOWN_TAG,) * len(s.tokens)
            return TaggedSentence(s.tokens, tags)

        out.append(TaggedExample(
            example_id=ex.example_id,
            sentence_a=retag(ex.sentence_a),
            sentence_b=retag(ex.sentence_b) if ex.is_pair else None,
            gold_label=ex.gold_label,
            provenance=ex.provenance,
        ))
    return out


# ---------------------------------------------------------------------------
# pretrained embeddings (text word2vec format)
# ---------------------------------------------------------------------------


def load_embeddings(path: str, vocab, d_emb: int, mode: str = "static", seed: int = 0):
    """Copy pretrained vectors for in-vocabulary words into a fresh table.

    The file is the textual format: an optional "count dim" first line,
    then "word v1 ... vd" lines. Words missing from the file keep a
    uniform(-0.25, 0.25) row drawn from `seed`; the PAD row is zeroed.
    Returns (EmbeddingTable, coverage) where coverage = found / |vocab|.
    """
    from .models import PAD_INDEX, EmbeddingTable, Vocabulary  # local import avoids a cycle

    assert isinstance(vocab, Vocabulary)
    rng = np.random.default_rng(seed)
    values = rng.uniform(-0.25, 0.25, size=(len(vocab), d_emb)).astype(np.float32)
    values[PAD_INDEX] = 0.0

    found: set[int] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if lineno == 1 and len(parts) == 2 and parts[0].isdigit() and parts[1].isdigit():
                # optional "count dim" header
                if int(parts[1]) != d_emb:
                    raise DataError(f"{path}:1: file dimension {parts[1]} != requested {d_emb}")
                continue
            if len(parts) < 2:
                raise DataError(f"{path}:{lineno}: unparseable embedding line")
            word, vec = parts[0], parts[1:]
            if len(vec) != d_emb:
                raise DataError(f"{path}:{lineno}: expected {d_emb} values, got {len(vec)}")
            if word not in vocab:
                continue
            try:
                row = np.array([float(v) for v in vec], dtype=np.float32)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            idx = vocab.lookup(word)
            values[idx] = row  # later duplicates overwrite earlier ones
            found.add(idx)
    values[PAD_INDEX] = 0.0
    coverage = len(found) / len(vocab)
    from .autodiff import Tensor

    return EmbeddingTable(Tensor(values), mode), coverage


# ---------------------------------------------------------------------------
# transfer-set JSONL
# ---------------------------------------------------------------------------


@dataclass
class TransferRecord:
    """One teacher-scored example: text, logits, and the argmax label."""

    text_a: str
    text_b: str | None
    logits: np.ndarray
    label: int
    provenance: str
    gold: int | None = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.ndim != 1 or self.logits.shape[0] < 2:
            raise ValueError(f"logits must be a vector of length >= 2, got shape {self.logits.shape}")
        if not np.isfinite(self.logits).all():
            raise ValueError("logits must be finite")
        expected = int(np.argmax(self.logits))
        if self.label != expected:
            raise ValueError(f"label {self.label} != argmax(logits) = {expected}")
        if self.provenance not in (PROVENANCE_ORIGINAL, PROVENANCE_SYNTHETIC):
            raise ValueError(f"bad provenance {self.provenance!r}")

    @property
    def is_pair(self) -> bool:
        return self.text_b is not None

    def student_input(self, vocab):
        """Token ids (or an id pair) for the student model."""
        ids_a = vocab.encode(tokenize(self.text_a))
        if self.text_b is None:
            return ids_a
        return (ids_a, vocab.encode(tokenize(self.text_b)))


def write_transfer_set(records: Sequence[TransferRecord], path: str) -> None:
    """One JSON object per line; float repr round-trips logits bit-exactly."""
    lines = []
    for rec in records:
        lines.append(json.dumps({
            "text_a": rec.text_a,
            "text_b": rec.text_b,
            "logits": [float(v) for v in rec.logits],
            "label": int(rec.label),
            "provenance": rec.provenance,
            "gold": int(rec.gold) if rec.gold is not None else None,
        }, ensure_ascii=False))
    _atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_transfer_set(path: str) -> list[TransferRecord]:
    """Parse and validate a transfer-set JSONL; fails on the first bad line."""
    records: list[TransferRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                raise DataError(f"{path}:{lineno}: blank line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            required = {"text_a", "text_b", "logits", "label", "provenance", "gold"}
            missing = required - obj.keys()
            if missing:
                raise DataError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            try:
                rec = TransferRecord(
                    text_a=obj["text_a"],
                    text_b=obj["text_b"],
                    logits=np.asarray(obj["logits"], dtype=np.float64),
                    label=obj["label"],
                    provenance=obj["provenance"],
                    gold=obj["gold"],
                )
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if records and rec.logits.shape != records[0].logits.shape:
                raise DataError(f"{path}:{lineno}: inconsistent logits length")
            if records and rec.is_pair != records[0].is_pair:
                raise DataError(f"{path}:{lineno}: mixed single and pair records")
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# by-id logits JSONL (external teacher merge)
# ---------------------------------------------------------------------------


def read_logits_by_id(path: str) -> dict[str, np.ndarray]:
    """Read {"id": ..., "logits": [...]} lines into an id -> logits map."""
    table: dict[str, np.ndarray] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                raise DataError(f"{path}:{lineno}: blank line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "id" not in obj or "logits" not in obj:
                raise DataError(f"{path}:{lineno}: need 'id' and 'logits' fields")
            key = str(obj["id"])
            if key in table:
                raise DataError(f"{path}:{lineno}: duplicate id {key!r}")
            logits = np.asarray(obj["logits"], dtype=np.float64)
            if logits.ndim != 1 or logits.shape[0] < 2 or not np.isfinite(logits).all():
                raise DataError(f"{path}:{lineno}: bad logits for id {key!r}")
            table[key] = logits
    return table


def build_vocabulary(examples: Iterable[TaggedExample], min_count: int = 1):
    """Vocabulary over every sentence (both sides of pairs)."""
    from .models import Vocabulary

    def streams():
        for ex in examples:
            yield ex.sentence_a.tokens
            if ex.sentence_b is not None:
                yield ex.sentence_b.tokens

    return Vocabulary.build(streams(), min_count=min_count)
