"""AdaDelta optimization, the training loops, metrics, and early stopping.

Two training modes share one loop:

* baseline: cross-entropy against gold labels;
* distill: the blended objective against teacher logits, where the one-hot
  target comes from the gold label for original examples and from the
  teacher's predicted label for synthetic ones (their gold labels, if any
  survived, are deliberately never read).

Model selection is dev accuracy with patience-based early stopping; the
returned model always carries the best observed dev-accuracy parameters.
The loop is single-threaded and seeded, so a (seed, data, config) triple
reproduces its loss history exactly.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .augment import PROVENANCE_SYNTHETIC, TaggedExample
from .autodiff import NumericError
from .data_io import TransferRecord, tokenize
from .distill import DistillConfig, TeacherSignal, per_example_losses
from .models import ModelConfig, StudentModel, Vocabulary


# ---------------------------------------------------------------------------
# AdaDelta
# ---------------------------------------------------------------------------


@dataclass
class AdaDeltaState:
    """Decayed accumulators for one parameter: E[g^2] and E[dx^2]."""

    eg2: np.ndarray
    edx2: np.ndarray


class AdaDelta:
    """Per-parameter adaptive steps from decayed squared-gradient stats.

    Per scalar and step, with gradient g:

        Eg2  <- rho * Eg2 + (1 - rho) * g^2
        dx   <- -(sqrt(Edx2 + eps) / sqrt(Eg2 + eps)) * g
        Edx2 <- rho * Edx2 + (1 - rho) * dx^2
        p    <- p + lr * dx

    Gradient buffers are cleared after a successful step. A NaN gradient
    anywhere aborts the whole step (no parameter is touched) and the error
    names the offending parameter.
    """

    def __init__(self, named_params: Sequence[tuple[str, ad.Tensor]],
                 rho: float = 0.95, eps: float = 1e-6, lr: float = 1.0):
        if not (0.0 <= rho < 1.0):
            raise ValueError(f"rho must lie in [0, 1), got {rho}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.rho = rho
        self.eps = eps
        self.lr = lr
        self.named_params = list(named_params)
        self.state = {
            name: AdaDeltaState(eg2=np.zeros_like(p.values), edx2=np.zeros_like(p.values))
            for name, p in self.named_params
        }

    def step(self) -> None:
        grads = []
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient in parameter {name!r}; step aborted")
            grads.append(g)
        for (name, p), g in zip(self.named_params, grads):
            st = self.state[name]
            st.eg2 *= self.rho
            st.eg2 += (1.0 - self.rho) * g * g
            dx = -(np.sqrt(st.edx2 + self.eps) / np.sqrt(st.eg2 + self.eps)) * g
            st.edx2 *= self.rho
            st.edx2 += (1.0 - self.rho) * dx * dx
            p.values += self.lr * dx
            p.zero_grad()


# ---------------------------------------------------------------------------
# configuration and reports
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    mode: str = "distill"  # "baseline" or "distill"
    alpha: float = 0.0
    batch_size: int = 50
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    shuffle: bool = True
    eval_batch_size: int = 256
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0

    def __post_init__(self):
        if self.mode not in ("baseline", "distill"):
            raise ValueError(f"mode must be baseline or distill, got {self.mode!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


@dataclass
class EvalReport:
    accuracy: float
    loss: float
    count: int
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_accuracy: float
    dev_f1: float | None


# ---------------------------------------------------------------------------
# training items
# ---------------------------------------------------------------------------


@dataclass
class TrainItem:
    """One training unit: student input ids, one-hot target, teacher logits."""

    student_input: object  # list[int] or (list[int], list[int])
    target: np.ndarray
    teacher_logits: np.ndarray | None


def items_from_transfer(records: Sequence[TransferRecord], vocab: Vocabulary, k: int) -> list[TrainItem]:
    """Distill-mode items. Synthetic records use the teacher's label; gold
    labels are only consulted for original records."""
    items = []
    for rec in records:
        if rec.logits.shape[0] != k:
            raise ValueError(f"record logits length {rec.logits.shape[0]} != task k {k}")
        if rec.provenance == PROVENANCE_SYNTHETIC or rec.gold is None:
            label = rec.label  # teacher-predicted
        else:
            label = rec.gold
        target = np.zeros(k)
        target[label] = 1.0
        items.append(TrainItem(rec.student_input(vocab), target, rec.logits))
    return items


def items_from_gold(examples: Sequence[TaggedExample], vocab: Vocabulary, k: int) -> list[TrainItem]:
    """Baseline-mode items from gold-labeled examples; logits are ignored."""
    items = []
    for ex in examples:
        if ex.gold_label is None:
            raise ValueError(f"example {ex.example_id!r} lacks a gold label (baseline mode needs one)")
        if not (0 <= ex.gold_label < k):
            raise ValueError(f"example {ex.example_id!r}: label {ex.gold_label} outside [0, {k})")
        target = np.zeros(k)
        target[ex.gold_label] = 1.0
        items.append(TrainItem(_example_input(ex, vocab), target, None))
    return items


def _example_input(ex: TaggedExample, vocab: Vocabulary):
    ids_a = vocab.encode(ex.sentence_a.tokens)
    if ex.sentence_b is None:
        return ids_a
    return (ids_a, vocab.encode(ex.sentence_b.tokens))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(model: StudentModel, examples: Sequence[TaggedExample], batch_size: int = 256) -> EvalReport:
    """Accuracy (and positive-class P/R/F1 for k=2) over gold-labeled data."""
    if not examples:
        raise ValueError("cannot evaluate on empty data")
    k = model.config.k
    golds = []
    preds = []
    total_ce = 0.0
    with ad.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start:start + batch_size]
            for ex in chunk:
                if ex.gold_label is None:
                    raise ValueError(f"example {ex.example_id!r} lacks a gold label")
            inputs = [_example_input(ex, model.vocab) for ex in chunk]
            z = model.forward_logits_batch(inputs).values
            m = z.max(axis=1, keepdims=True)
            lse = (np.log(np.exp(z - m).sum(axis=1, keepdims=True)) + m)[:, 0]
            for row, ex in enumerate(chunk):
                golds.append(ex.gold_label)
                preds.append(int(np.argmax(z[row])))
                total_ce += float(lse[row] - z[row, ex.gold_label])
    golds_arr = np.asarray(golds)
    preds_arr = np.asarray(preds)
    accuracy = float((golds_arr == preds_arr).mean())
    report = EvalReport(accuracy=accuracy, loss=total_ce / len(examples), count=len(examples))
    if k == 2:
        tp = int(((preds_arr == 1) & (golds_arr == 1)).sum())
        fp = int(((preds_arr == 1) & (golds_arr == 0)).sum())
        fn = int(((preds_arr == 0) & (golds_arr == 1)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        report.precision, report.recall, report.f1 = precision, recall, f1
    return report


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def train(model: StudentModel, items: Sequence[TrainItem], dev_examples: Sequence[TaggedExample],
          cfg: TrainConfig) -> tuple[StudentModel, list[EpochStats]]:
    """Epoch loop with seeded shuffling, AdaDelta, and early stopping.

    Returns the model loaded with its best-dev-accuracy parameters, plus
    per-epoch history. Baseline items must not carry teacher logits and
    distill items must (the adapters above enforce the data side).
    """
    if not items:
        raise ValueError("no training items")
    if cfg.mode == "distill":
        if any(it.teacher_logits is None for it in items):
            raise ValueError("distill mode requires teacher logits on every record")
        loss_cfg = DistillConfig(alpha=cfg.alpha)
    else:
        if any(it.teacher_logits is not None for it in items):
            raise ValueError("baseline mode must not receive teacher logits")
        loss_cfg = DistillConfig(alpha=1.0)  # pure cross-entropy on gold

    optimizer = AdaDelta(model.trainable_parameters(), rho=cfg.rho, eps=cfg.eps, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history: list[EpochStats] = []
    best_accuracy = -1.0
    best_snapshot = model.copy_parameter_values()
    epochs_since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(items)) if cfg.shuffle else np.arange(len(items))
        epoch_loss_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [items[i] for i in order[start:start + cfg.batch_size]]
            z = model.forward_logits_batch([it.student_input for it in batch])
            targets = np.stack([it.target for it in batch])
            teacher = (np.stack([it.teacher_logits for it in batch])
                       if cfg.mode == "distill" else None)
            per_example = per_example_losses(z, targets, teacher, loss_cfg)
            loss = ad.scale(ad.sum_all(per_example), 1.0 / len(batch))
            ad.backward(loss)
            model.constrain_grads()
            optimizer.step()
            epoch_loss_sum += float(per_example.values.sum())
        train_loss = epoch_loss_sum / len(items)

        report = evaluate(model, dev_examples, batch_size=cfg.eval_batch_size)
        history.append(EpochStats(epoch=epoch, train_loss=train_loss,
                                  dev_accuracy=report.accuracy, dev_f1=report.f1))
        if report.accuracy > best_accuracy:
            best_accuracy = report.accuracy
            best_snapshot = model.copy_parameter_values()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break

    model.load_parameter_values(best_snapshot)
    return model, history


def write_history_csv(history: Sequence[EpochStats], path: str) -> None:
    """epoch,train_loss,dev_acc,dev_f1 rows; f1 empty for 3-class tasks."""
    import os

    rows = ["epoch,train_loss,dev_acc,dev_f1"]
    for h in history:
        f1 = repr(h.dev_f1) if h.dev_f1 is not None else ""
        rows.append(f"{h.epoch},{h.train_loss!r},{h.dev_accuracy!r},{f1}")
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# reference teacher
# ---------------------------------------------------------------------------


@dataclass
class TeacherConfig:
    """An oversized student-architecture model trained on gold labels."""

    hidden: int = 300
    fc: int = 400
    d_emb: int = 300
    embedding_mode: str = "nonstatic"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(mode="baseline"))
    init_seed: int = 0


def train_reference_teacher(
    train_examples: Sequence[TaggedExample],
    dev_examples: Sequence[TaggedExample],
    k: int,
    arity: str,
    cfg: TeacherConfig,
) -> tuple[StudentModel, Callable[[TaggedExample], TeacherSignal], list[EpochStats]]:
    """Train the stand-in teacher and expose its labeling function.

    The returned function maps any tagged example to a TeacherSignal
    (logits plus their argmax label), for building transfer sets.
    """
    from .data_io import build_vocabulary

    vocab = build_vocabulary(train_examples)
    model_cfg = ModelConfig(d_emb=cfg.d_emb, hidden=cfg.hidden, fc=cfg.fc, k=k,
                            arity=arity, embedding_mode=cfg.embedding_mode)
    model = StudentModel.init(model_cfg, vocab, np.random.default_rng(cfg.init_seed))
    items = items_from_gold(train_examples, vocab, k)
    model, history = train(model, items, dev_examples, cfg.train)

    def signal(example: TaggedExample) -> TeacherSignal:
        with ad.no_grad():
            logits = model.forward_logits(_example_input(example, vocab)).values
        return TeacherSignal.from_logits(np.asarray(logits, dtype=np.float64))

    return model, signal, history


def label_corpus(model: StudentModel, corpus: Sequence[TaggedExample],
                 batch_size: int = 256) -> list[TransferRecord]:
    """Score a corpus with a (teacher) model into transfer records.

    Original examples keep their gold labels in the `gold` field; synthetic
    ones carry null. The record label is always the teacher's argmax.
    """
    records: list[TransferRecord] = []
    with ad.no_grad():
        for start in range(0, len(corpus), batch_size):
            chunk = corpus[start:start + batch_size]
            inputs = [_example_input(ex, model.vocab) for ex in chunk]
            z = model.forward_logits_batch(inputs).values.astype(np.float64)
            for row, ex in enumerate(chunk):
                logits = z[row]
                records.append(TransferRecord(
                    text_a=" ".join(ex.sentence_a.tokens),
                    text_b=" ".join(ex.sentence_b.tokens) if ex.is_pair else None,
                    logits=logits,
                    label=int(np.argmax(logits)),
                    provenance=ex.provenance,
                    gold=ex.gold_label if ex.provenance != PROVENANCE_SYNTHETIC else None,
                ))
    return records
