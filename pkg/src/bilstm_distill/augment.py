"""Rule-based synthesis of an unlabeled transfer corpus.

Three perturbations applied to copies of training sentences:

* masking: a token becomes the mask symbol (the models' unknown token);
* POS-guided replacement: a token is swapped for a word drawn from the
  corpus unigram distribution restricted to the same POS tag;
* n-gram sampling: with some probability the sentence is cut down to a
  random contiguous window of 1 to 5 tokens.

Per token one uniform draw X decides: X < p_mask masks, otherwise
X < p_mask + p_pos swaps (the two rules are mutually exclusive by
construction), otherwise the token stays. n-gram sampling then applies to
the whole sentence. Each (source example, iteration) pair gets its own
deterministically derived RNG stream, so augmentation is a pure function
of (corpus, config): re-running with the same seed reproduces every byte.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .models import MASK_TOKEN

UNKNOWN_TAG = "UNK-TAG"

PAIR_MODES = ("first_only", "second_only", "both")

PROVENANCE_ORIGINAL = "original"
PROVENANCE_SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class TaggedSentence:
    """Tokens with one POS tag per token."""

    tokens: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "tags", tuple(self.tags))
        if len(self.tokens) != len(self.tags):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.tags)} tags")
        if len(self.tokens) == 0:
            raise ValueError("empty sentence")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class TaggedExample:
    """One or two tagged sentences plus an optional gold label."""

    example_id: str
    sentence_a: TaggedSentence
    sentence_b: TaggedSentence | None = None
    gold_label: int | None = None
    provenance: str = PROVENANCE_ORIGINAL

    @property
    def is_pair(self) -> bool:
        return self.sentence_b is not None

    def token_key(self) -> tuple:
        """Equality key for duplicate removal: token sequences only."""
        b = self.sentence_b.tokens if self.sentence_b is not None else None
        return (self.sentence_a.tokens, b)


@dataclass
class AugConfig:
    """Perturbation probabilities, iteration count, and RNG seed."""

    p_mask: float = 0.1
    p_pos: float = 0.1
    p_ng: float = 0.25
    n_iter: int = 20
    seed: int = 0

    def __post_init__(self):
        for name in ("p_mask", "p_pos", "p_ng"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.p_mask + self.p_pos > 1.0:
            raise ValueError(f"p_mask + p_pos must not exceed 1, got {self.p_mask + self.p_pos}")
        if self.n_iter < 1:
            raise ValueError(f"n_iter must be positive, got {self.n_iter}")


@dataclass
class AugmentStats:
    """Instrumented counters for rule-rate reporting and sanity checks.

    The identity masked + pos_swapped + kept == tokens_processed holds
    exactly: each processed token falls in exactly one bucket.
    """

    tokens_processed: int = 0
    masked: int = 0
    pos_swapped: int = 0
    kept: int = 0
    ngram_opportunities: int = 0
    ngram_triggered: int = 0
    originals: int = 0
    synthetics: int = 0
    duplicates_discarded: int = 0

    @property
    def mask_rate(self) -> float:
        return self.masked / self.tokens_processed if self.tokens_processed else 0.0

    @property
    def pos_swap_rate(self) -> float:
        return self.pos_swapped / self.tokens_processed if self.tokens_processed else 0.0

    @property
    def ngram_rate(self) -> float:
        return self.ngram_triggered / self.ngram_opportunities if self.ngram_opportunities else 0.0

    def as_dict(self) -> dict:
        return {
            "tokens_processed": self.tokens_processed,
            "masked": self.masked,
            "pos_swapped": self.pos_swapped,
            "kept": self.kept,
            "mask_rate": self.mask_rate,
            "pos_swap_rate": self.pos_swap_rate,
            "ngram_opportunities": self.ngram_opportunities,
            "ngram_triggered": self.ngram_triggered,
            "ngram_rate": self.ngram_rate,
            "originals": self.originals,
            "synthetics": self.synthetics,
            "duplicates_discarded": self.duplicates_discarded,
        }


class PosLexicon:
    """Unigram word distributions grouped (re-normalized) by POS tag."""

    def __init__(self, counts: dict[str, dict[str, int]]):
        if not counts:
            raise ValueError("empty lexicon")
        self._counts = counts
        self._samplers: dict[str, tuple[list[str], np.ndarray]] = {}
        for tag, words in counts.items():
            ordered = sorted(words)  # fixed order makes sampling reproducible
            weights = np.array([words[w] for w in ordered], dtype=np.float64)
            cumulative = np.cumsum(weights / weights.sum())
            self._samplers[tag] = (ordered, cumulative)

    @classmethod
    def build(cls, corpus: Sequence[TaggedExample]) -> "PosLexicon":
        if not corpus:
            raise ValueError("cannot build a POS lexicon from an empty corpus")
        counts: dict[str, dict[str, int]] = {}
        for ex in corpus:
            sentences = [ex.sentence_a] + ([ex.sentence_b] if ex.sentence_b is not None else [])
            for sentence in sentences:
                for token, tag in zip(sentence.tokens, sentence.tags):
                    by_tag = counts.setdefault(tag, {})
                    by_tag[token] = by_tag.get(token, 0) + 1
        return cls(counts)

    def has_tag(self, tag: str) -> bool:
        return tag in self._samplers

    def tags(self) -> list[str]:
        return sorted(self._samplers)

    def distribution(self, tag: str) -> dict[str, float]:
        words, cumulative = self._samplers[tag]
        probs = np.diff(cumulative, prepend=0.0)
        return {w: float(p) for w, p in zip(words, probs)}

    def sample(self, tag: str, rng) -> str:
        """Draw a word for `tag` by inverse CDF on one uniform draw."""
        words, cumulative = self._samplers[tag]
        idx = int(np.searchsorted(cumulative, rng.random(), side="right"))
        return words[min(idx, len(words) - 1)]


def build_pos_lexicon(corpus: Sequence[TaggedExample]) -> PosLexicon:
    return PosLexicon.build(corpus)


def perturb_tokens(sentence: TaggedSentence, lexicon: PosLexicon, cfg: AugConfig,
                   rng, stats: AugmentStats | None = None) -> TaggedSentence:
    """Apply masking / POS-guided replacement per token; tags are kept.

    One uniform draw per token picks at most one rule. A POS swap whose tag
    is absent from the lexicon (or is the unknown tag) keeps the original
    token. The replacement distribution is the lexicon's own, so a word may
    be resampled as itself; downstream duplicate removal handles that.
    """
    new_tokens = []
    masked = swapped = kept = 0
    for token, tag in zip(sentence.tokens, sentence.tags):
        x = rng.random()
        if x < cfg.p_mask:
            new_tokens.append(MASK_TOKEN)
            masked += 1
        elif x < cfg.p_mask + cfg.p_pos and tag != UNKNOWN_TAG and lexicon.has_tag(tag):
            new_tokens.append(lexicon.sample(tag, rng))
            swapped += 1
        else:
            new_tokens.append(token)
            kept += 1
    if stats is not None:
        stats.tokens_processed += len(sentence)
        stats.masked += masked
        stats.pos_swapped += swapped
        stats.kept += kept
    return TaggedSentence(tuple(new_tokens), sentence.tags)


def ngram_sample(seq: Sequence, cfg: AugConfig, rng, stats: AugmentStats | None = None) -> list:
    """With probability p_ng keep only a random n-gram window, n in {1..5}.

    n is drawn uniformly from {1..5} and then clamped to the sequence
    length; the window start is uniform over valid positions. Returns the
    (possibly unchanged) sequence as a list.
    """
    items = list(seq)
    if not items:
        raise ValueError("ngram_sample on an empty sequence")
    if stats is not None:
        stats.ngram_opportunities += 1
    if rng.random() >= cfg.p_ng:
        return items
    if stats is not None:
        stats.ngram_triggered += 1
    n = min(int(rng.integers(1, 6)), len(items))
    start = int(rng.integers(0, len(items) - n + 1))
    return items[start:start + n]


def _stream_seed(seed: int, example_id: str, iteration: int) -> np.random.SeedSequence:
    id_hash = int.from_bytes(hashlib.blake2b(example_id.encode("utf-8"), digest_size=8).digest(), "little")
    return np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, id_hash, iteration])


def _synthesize_sentence(sentence: TaggedSentence, lexicon: PosLexicon, cfg: AugConfig,
                         rng, stats: AugmentStats | None) -> TaggedSentence:
    perturbed = perturb_tokens(sentence, lexicon, cfg, rng, stats)
    window = ngram_sample(list(zip(perturbed.tokens, perturbed.tags)), cfg, rng, stats)
    tokens, tags = zip(*window)
    return TaggedSentence(tokens, tags)


def synthesize_example(example: TaggedExample, lexicon: PosLexicon, cfg: AugConfig,
                       iteration: int, pair_mode: str = "both",
                       stats: AugmentStats | None = None) -> TaggedExample:
    """One synthetic copy of `example`, unlabeled, with its own RNG stream.

    The stream is seeded from (cfg.seed, example id, iteration), so the
    same triple always yields the same synthetic example regardless of
    processing order. For pairs, `pair_mode` picks which side is perturbed;
    the held-fixed side is copied verbatim. In mode "both" the first
    sentence is processed before the second on the shared stream.
    """
    if example.is_pair and pair_mode not in PAIR_MODES:
        raise ValueError(f"pair_mode must be one of {PAIR_MODES}, got {pair_mode!r}")
    rng = np.random.default_rng(_stream_seed(cfg.seed, example.example_id, iteration))

    sentence_a, sentence_b = example.sentence_a, example.sentence_b
    if not example.is_pair:
        sentence_a = _synthesize_sentence(sentence_a, lexicon, cfg, rng, stats)
    else:
        if pair_mode in ("first_only", "both"):
            sentence_a = _synthesize_sentence(sentence_a, lexicon, cfg, rng, stats)
        if pair_mode in ("second_only", "both"):
            sentence_b = _synthesize_sentence(sentence_b, lexicon, cfg, rng, stats)

    return TaggedExample(
        example_id=f"{example.example_id}.s{iteration}",
        sentence_a=sentence_a,
        sentence_b=sentence_b,
        gold_label=None,  # synthetic examples stay unlabeled until a teacher scores them
        provenance=PROVENANCE_SYNTHETIC,
    )


def augment_corpus(corpus: Sequence[TaggedExample], cfg: AugConfig,
                   lexicon: PosLexicon | None = None) -> tuple[list[TaggedExample], AugmentStats]:
    """Originals plus up to n_iter deduplicated synthetics per example.

    Pair examples cycle the perturbed side first_only, second_only, both.
    A synthetic equal (by token sequences) to its source or to an earlier
    synthetic of the same source is discarded. Output order is: all
    originals in corpus order, then synthetics grouped by source.
    """
    if not corpus:
        raise ValueError("cannot augment an empty corpus")
    if lexicon is None:
        lexicon = PosLexicon.build(corpus)
    stats = AugmentStats(originals=len(corpus))

    synthetics: list[TaggedExample] = []
    for example in corpus:
        seen = {example.token_key()}
        for iteration in range(cfg.n_iter):
            pair_mode = PAIR_MODES[iteration % len(PAIR_MODES)]
            candidate = synthesize_example(example, lexicon, cfg, iteration, pair_mode, stats)
            key = candidate.token_key()
            if key in seen:
                stats.duplicates_discarded += 1
                continue
            seen.add(key)
            synthetics.append(candidate)

    stats.synthetics = len(synthetics)
    originals = [replace(ex, provenance=PROVENANCE_ORIGINAL) for ex in corpus]
    return originals + synthetics, stats


class FallbackTagger:
    """Tags each word with its most frequent tag in a reference corpus.

    Words never seen get the unknown tag, which the perturbation rules
    refuse to POS-swap. Ties between tags break lexicographically.
    """

    def __init__(self, word_tags: dict[str, str]):
        self._word_tags = dict(word_tags)

    @classmethod
    def build(cls, corpus: Sequence[TaggedExample]) -> "FallbackTagger":
        counts: dict[str, dict[str, int]] = {}
        for ex in corpus:
            sentences = [ex.sentence_a] + ([ex.sentence_b] if ex.sentence_b is not None else [])
            for sentence in sentences:
                for token, tag in zip(sentence.tokens, sentence.tags):
                    by_word = counts.setdefault(token, {})
                    by_word[tag] = by_word.get(tag, 0) + 1
        word_tags = {
            word: min(tags, key=lambda t: (-tags[t], t))
            for word, tags in counts.items()
        }
        return cls(word_tags)

    def tag(self, tokens: Sequence[str]) -> tuple[str, ...]:
        return tuple(self._word_tags.get(tok, UNKNOWN_TAG) for tok in tokens)
