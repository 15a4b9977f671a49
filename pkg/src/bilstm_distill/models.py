"""Single-sentence BiLSTM classifier and its siamese sentence-pair variant.

The encoder is a single bidirectional LSTM layer. A sentence is encoded as
the concatenation of the final forward-direction hidden state and the
final backward-direction hidden state (2h values). The pair model runs one
shared encoder over both sentences and combines them with the
concatenate-compare map [h1, h2, h1*h2, |h1-h2|] before the classifier.

Variable lengths are handled with per-step masks, so a sentence encodes to
exactly the same vector no matter how much padding follows it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_INDEX = 0
UNK_INDEX = 1
# The mask symbol used by the augmenter; models treat it as the unknown token.
MASK_TOKEN = "[MASK]"

CHECKPOINT_MAGIC = b"BILSTM-DISTILL-CKPT v1\n"

# LSTM gate order within the fused 4h-wide parameter blocks.
_GATES = ("input", "forget", "cell", "output")


class Vocabulary:
    """Token-to-index map with fixed PAD=0 and UNK=1 slots.

    Unseen tokens (including the augmenter's mask symbol) resolve to UNK.
    """

    def __init__(self, tokens: Sequence[str]):
        if len(tokens) < 2 or tokens[0] != PAD_TOKEN or tokens[1] != UNK_TOKEN:
            raise ValueError("vocabulary must start with the PAD and UNK tokens")
        self._tokens = list(tokens)
        self._index = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._index) != len(self._tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    @classmethod
    def build(cls, token_streams: Iterable[Sequence[str]], min_count: int = 1) -> "Vocabulary":
        """Build from tokenized sentences, most frequent tokens first."""
        counts: dict[str, int] = {}
        for tokens in token_streams:
            for tok in tokens:
                if tok in (PAD_TOKEN, UNK_TOKEN, MASK_TOKEN):
                    continue
                counts[tok] = counts.get(tok, 0) + 1
        kept = sorted(
            (tok for tok, c in counts.items() if c >= min_count),
            key=lambda tok: (-counts[tok], tok),
        )
        return cls([PAD_TOKEN, UNK_TOKEN] + kept)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def lookup(self, token: str) -> int:
        if token == MASK_TOKEN:
            return UNK_INDEX
        return self._index.get(token, UNK_INDEX)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.lookup(tok) for tok in tokens]


@dataclass
class EmbeddingTable:
    """|V| x d_emb embedding matrix. Row PAD_INDEX stays all-zero."""

    table: Tensor
    mode: str  # "static" (frozen) or "nonstatic" (trainable)

    def __post_init__(self):
        if self.mode not in ("static", "nonstatic"):
            raise ValueError(f"embedding mode must be static or nonstatic, got {self.mode!r}")
        self.table.requires_grad = self.mode == "nonstatic"

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @classmethod
    def random_init(cls, vocab_size: int, d_emb: int, rng: np.random.Generator,
                    mode: str = "nonstatic", dtype=np.float32) -> "EmbeddingTable":
        if d_emb <= 0:
            raise ValueError("d_emb must be positive")
        values = rng.uniform(-0.25, 0.25, size=(vocab_size, d_emb)).astype(dtype)
        values[PAD_INDEX] = 0.0
        return cls(Tensor(values), mode)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class LSTMDirection:
    """Parameters and step function for one LSTM direction.

    Weights are stored fused across the four gates, columns ordered
    input | forget | cell | output. The forget-gate bias starts at 1.
    """

    def __init__(self, w_x: Tensor, w_h: Tensor, b: Tensor):
        self.w_x = w_x
        self.w_h = w_h
        self.b = b
        self.hidden = w_h.shape[0]
        if w_x.shape[1] != 4 * self.hidden or w_h.shape[1] != 4 * self.hidden or b.shape != (4 * self.hidden,):
            raise ValueError("inconsistent LSTM parameter shapes")

    @classmethod
    def init(cls, d_in: int, hidden: int, rng: np.random.Generator, dtype=np.float32) -> "LSTMDirection":
        w_x = Tensor(_xavier(rng, d_in, hidden, (d_in, 4 * hidden), dtype), requires_grad=True)
        w_h = Tensor(_xavier(rng, hidden, hidden, (hidden, 4 * hidden), dtype), requires_grad=True)
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden:2 * hidden] = 1.0  # forget gate
        b = Tensor(bias, requires_grad=True)
        return cls(w_x, w_h, b)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrence step on a [B, d] input slice."""
        batch = x.shape[0]
        pre = ad.add(ad.add(ad.matmul(x, self.w_x), ad.matmul(h, self.w_h)),
                     ad.tile_rows(self.b, batch))
        n = self.hidden
        gate_i = ad.sigmoid(ad.slice_cols(pre, 0, n))
        gate_f = ad.sigmoid(ad.slice_cols(pre, n, 2 * n))
        gate_g = ad.tanh(ad.slice_cols(pre, 2 * n, 3 * n))
        gate_o = ad.sigmoid(ad.slice_cols(pre, 3 * n, 4 * n))
        c_new = ad.add(ad.mul(gate_f, c), ad.mul(gate_i, gate_g))
        h_new = ad.mul(gate_o, ad.tanh(c_new))
        return h_new, c_new

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w_x", self.w_x), (f"{prefix}.w_h", self.w_h), (f"{prefix}.b", self.b)]


class ClassifierHead:
    """ReLU hidden layer followed by a linear logit layer."""

    def __init__(self, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, in_dim: int, fc: int, k: int, rng: np.random.Generator, dtype=np.float32) -> "ClassifierHead":
        w1 = Tensor(_xavier(rng, in_dim, fc, (in_dim, fc), dtype), requires_grad=True)
        b1 = Tensor(np.zeros(fc, dtype=dtype), requires_grad=True)
        w2 = Tensor(_xavier(rng, fc, k, (fc, k), dtype), requires_grad=True)
        b2 = Tensor(np.zeros(k, dtype=dtype), requires_grad=True)
        return cls(w1, b1, w2, b2)

    @property
    def k(self) -> int:
        return self.w2.shape[1]

    def forward(self, features: Tensor) -> Tensor:
        batch = features.shape[0]
        hidden = ad.relu(ad.add(ad.matmul(features, self.w1), ad.tile_rows(self.b1, batch)))
        return ad.add(ad.matmul(hidden, self.w2), ad.tile_rows(self.b2, batch))

    def parameters(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(f"{prefix}.w1", self.w1), (f"{prefix}.b1", self.b1),
                (f"{prefix}.w2", self.w2), (f"{prefix}.b2", self.b2)]


@dataclass
class ModelConfig:
    d_emb: int = 300
    hidden: int = 150
    fc: int = 200
    k: int = 2
    arity: str = "single"  # "single" or "pair"
    embedding_mode: str = "nonstatic"

    def __post_init__(self):
        if self.arity not in ("single", "pair"):
            raise ValueError(f"arity must be single or pair, got {self.arity!r}")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        for name in ("d_emb", "hidden", "fc"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class StudentModel:
    """BiLSTM classifier over one sentence or a shared-encoder pair.

    For pair arity the same two LSTMDirection objects encode both
    sentences; there is one physical parameter set (siamese sharing).
    """

    def __init__(self, config: ModelConfig, vocab: Vocabulary, embedding: EmbeddingTable,
                 forward_lstm: LSTMDirection, backward_lstm: LSTMDirection, head: ClassifierHead):
        expected_in = 8 * config.hidden if config.arity == "pair" else 2 * config.hidden
        if head.w1.shape[0] != expected_in:
            raise ValueError(
                f"classifier input dim {head.w1.shape[0]} does not match arity {config.arity!r}"
                f" (expected {expected_in})")
        if embedding.dim != config.d_emb:
            raise ValueError("embedding dim does not match config")
        self.config = config
        self.vocab = vocab
        self.embedding = embedding
        self.forward_lstm = forward_lstm
        self.backward_lstm = backward_lstm
        self.head = head

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, vocab: Vocabulary, rng: np.random.Generator,
             embedding: EmbeddingTable | None = None, dtype=np.float32) -> "StudentModel":
        if embedding is None:
            embedding = EmbeddingTable.random_init(len(vocab), config.d_emb, rng,
                                                   mode=config.embedding_mode, dtype=dtype)
        fwd = LSTMDirection.init(config.d_emb, config.hidden, rng, dtype)
        bwd = LSTMDirection.init(config.d_emb, config.hidden, rng, dtype)
        in_dim = 8 * config.hidden if config.arity == "pair" else 2 * config.hidden
        head = ClassifierHead.init(in_dim, config.fc, config.k, rng, dtype)
        return cls(config, vocab, embedding, fwd, bwd, head)

    @property
    def dtype(self):
        return self.embedding.table.dtype

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All parameters in a fixed order, embeddings included."""
        params = [("embedding.table", self.embedding.table)]
        params += self.forward_lstm.parameters("lstm_fwd")
        params += self.backward_lstm.parameters("lstm_bwd")
        params += self.head.parameters("head")
        return params

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def constrain_grads(self) -> None:
        """Zero the PAD row of the embedding gradient so it never trains."""
        table = self.embedding.table
        if table.requires_grad and table.grad is not None:
            table.grad[PAD_INDEX] = 0.0

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def count_parameters(self, include_embeddings: bool) -> int:
        total = 0
        for name, p in self.named_parameters():
            if name == "embedding.table" and not include_embeddings:
                continue
            total += p.values.size
        return total

    # -- encoding -----------------------------------------------------------

    def _encode_padded(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Encode a padded id matrix [B, T] into sentence vectors [B, 2h].

        Per-step masks freeze each sequence's state outside [0, length), so
        padding cannot influence the result: forward states stop updating
        at the true last token and backward states only start there.
        """
        batch, max_len = ids.shape
        hidden = self.config.hidden
        dtype = self.dtype

        embedded = [ad.embedding_lookup(self.embedding.table, ids[:, t]) for t in range(max_len)]
        masks = []
        for t in range(max_len):
            col = (lengths > t).astype(dtype)
            masks.append(ad.constant(np.repeat(col[:, None], hidden, axis=1), dtype=dtype))

        def run(direction: LSTMDirection, time_order: Iterable[int]) -> Tensor:
            h = ad.zeros((batch, hidden), dtype=dtype)
            c = ad.zeros((batch, hidden), dtype=dtype)
            one = ad.constant(np.ones((batch, hidden)), dtype=dtype)
            for t in time_order:
                h_new, c_new = direction.step(embedded[t], h, c)
                keep = ad.sub(one, masks[t])
                h = ad.add(ad.mul(h_new, masks[t]), ad.mul(h, keep))
                c = ad.add(ad.mul(c_new, masks[t]), ad.mul(c, keep))
            return h

        h_fwd = run(self.forward_lstm, range(max_len))
        h_bwd = run(self.backward_lstm, range(max_len - 1, -1, -1))
        return ad.concat_cols([h_fwd, h_bwd])

    def encode_sentence(self, token_ids: Sequence[int], length: int) -> Tensor:
        """Encode one sentence (ids padded with PAD beyond `length`) to [2h]."""
        token_ids = list(token_ids)
        if length < 1:
            raise ValueError(f"length must be positive, got {length}")
        if length > len(token_ids):
            raise ValueError(f"length {length} exceeds token count {len(token_ids)}")
        if any(t != PAD_INDEX for t in token_ids[length:]):
            raise ValueError("positions at or beyond `length` must be PAD")
        ids = np.asarray([token_ids], dtype=np.int64)
        out = self._encode_padded(ids, np.asarray([length], dtype=np.int64))
        return ad.reshape(out, (2 * self.config.hidden,))

    # -- logits -------------------------------------------------------------

    def forward_logits(self, example) -> Tensor:
        """Logits for one example: an id sequence, or a pair of them."""
        batch = self.forward_logits_batch([example])
        return ad.reshape(batch, (self.config.k,))

    def forward_logits_batch(self, examples: Sequence) -> Tensor:
        """Logits [B, k] for a batch of id sequences (or id-sequence pairs)."""
        if not examples:
            raise ValueError("empty batch")
        if self.config.arity == "single":
            for ex in examples:
                if _is_pair(ex):
                    raise ValueError("single-sentence model got a sentence pair")
            ids, lengths = pad_batch(examples)
            return self.head.forward(self._encode_padded(ids, lengths))
        for ex in examples:
            if not _is_pair(ex):
                raise ValueError("pair model needs (ids_a, ids_b) examples")
        ids_a, len_a = pad_batch([ex[0] for ex in examples])
        ids_b, len_b = pad_batch([ex[1] for ex in examples])
        h1 = self._encode_padded(ids_a, len_a)
        h2 = self._encode_padded(ids_b, len_b)
        return self.head.forward(concat_compare_batch(h1, h2))

    # -- checkpoint ---------------------------------------------------------

    def save(self, path: str) -> None:
        """Write a single self-describing checkpoint file (atomically)."""
        arrays = [(name, p.values) for name, p in self.named_parameters()]
        header = {
            "config": {
                "d_emb": self.config.d_emb,
                "hidden": self.config.hidden,
                "fc": self.config.fc,
                "k": self.config.k,
                "arity": self.config.arity,
                "embedding_mode": self.config.embedding_mode,
            },
            "vocab": self.vocab.tokens,
            "arrays": [
                {"name": name, "shape": list(values.shape), "dtype": str(values.dtype)}
                for name, values in arrays
            ],
        }
        header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(len(header_bytes).to_bytes(8, "little"))
            fh.write(header_bytes)
            for _, values in arrays:
                fh.write(np.ascontiguousarray(values).astype(values.dtype.newbyteorder("<")).tobytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "StudentModel":
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a model checkpoint (bad magic)")
            header_len = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(header_len).decode("utf-8"))
            cfg = ModelConfig(**header["config"])
            vocab = Vocabulary(header["vocab"])
            tensors: dict[str, Tensor] = {}
            for spec in header["arrays"]:
                dtype = np.dtype(spec["dtype"])
                shape = tuple(spec["shape"])
                count = int(np.prod(shape, dtype=np.int64))
                raw = fh.read(count * dtype.itemsize)
                if len(raw) != count * dtype.itemsize:
                    raise ValueError(f"{path}: truncated checkpoint")
                values = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype).reshape(shape)
                tensors[spec["name"]] = Tensor(values.copy(), requires_grad=True)
        embedding = EmbeddingTable(tensors["embedding.table"], cfg.embedding_mode)
        fwd = LSTMDirection(tensors["lstm_fwd.w_x"], tensors["lstm_fwd.w_h"], tensors["lstm_fwd.b"])
        bwd = LSTMDirection(tensors["lstm_bwd.w_x"], tensors["lstm_bwd.w_h"], tensors["lstm_bwd.b"])
        head = ClassifierHead(tensors["head.w1"], tensors["head.b1"], tensors["head.w2"], tensors["head.b2"])
        return cls(cfg, vocab, embedding, fwd, bwd, head)

    def copy_parameter_values(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.named_parameters()}

    def load_parameter_values(self, snapshot: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            p.values[...] = snapshot[name]


def _is_pair(example) -> bool:
    return (
        isinstance(example, tuple)
        and len(example) == 2
        and not isinstance(example[0], (int, np.integer))
    )


def pad_batch(id_sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences with PAD into a [B, T] matrix plus lengths."""
    lengths = np.asarray([len(seq) for seq in id_sequences], dtype=np.int64)
    if (lengths < 1).any():
        raise ValueError("cannot encode an empty sentence")
    max_len = int(lengths.max())
    ids = np.full((len(id_sequences), max_len), PAD_INDEX, dtype=np.int64)
    for row, seq in enumerate(id_sequences):
        ids[row, : len(seq)] = seq
    return ids, lengths


def concat_compare(h1: Tensor, h2: Tensor) -> Tensor:
    """[h1, h2, h1*h2, |h1-h2|] over two rank-1 sentence vectors."""
    if h1.shape != h2.shape:
        raise ad.ShapeError(f"concat_compare: shapes differ, {h1.shape} vs {h2.shape}")
    return ad.concat([h1, h2, ad.mul(h1, h2), ad.abs_diff(h1, h2)])


def concat_compare_batch(h1: Tensor, h2: Tensor) -> Tensor:
    if h1.shape != h2.shape:
        raise ad.ShapeError(f"concat_compare: shapes differ, {h1.shape} vs {h2.shape}")
    return ad.concat_cols([h1, h2, ad.mul(h1, h2), ad.abs_diff(h1, h2)])


def count_parameters(model: StudentModel, include_embeddings: bool) -> int:
    """Exact scalar parameter count; embeddings counted iff the flag is set."""
    return model.count_parameters(include_embeddings)
