"""Sequence/token classification heads and random hyperparameter search."""

from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import truncate_keep_first, truncate_keep_last
from .distill import IGNORE_INDEX, pad_batch
from .model import INIT_STD, EncoderModel
from .optim import AdamW, clip_grad_norm, linear_schedule
from .tokenizer import BOS, EOS, Tokenizer

Z95 = 1.96


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # "sequence" or "token"
    num_labels: int
    truncation: str = "keep-first"
    metric: str = "accuracy"
    outside_label: int = 0

    def __post_init__(self):
        if self.kind not in ("sequence", "token"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        if self.truncation not in ("keep-first", "keep-last"):
            raise ValueError(f"unknown truncation {self.truncation!r}")
        if self.metric not in ("accuracy", "micro-f1"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass(frozen=True)
class HyperparameterSample:
    learning_rate: float
    weight_decay: float
    gradient_accumulation_steps: int
    num_train_epochs: int = 3
    per_device_train_batch_size: int = 8
    per_device_eval_batch_size: int = 8
    max_sequence_length: int = 512
    seed: int = 1
    adam_epsilon: float = 1e-8
    warmup_steps: int = 0
    max_grad_norm: float = 1.0


LR_RANGE = (1e-6, 1e-4)
WEIGHT_DECAY_RANGE = (0.0, 0.1)
ACCUMULATION_CHOICES = (2, 4, 8, 16)


def sample_hyperparameters(n: int = 5, seed: int = 0) -> list[HyperparameterSample]:
    """i.i.d. draws: log-uniform LR, uniform weight decay, accumulation from {2,4,8,16}."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    lo, hi = math.log(LR_RANGE[0]), math.log(LR_RANGE[1])
    return [
        HyperparameterSample(
            learning_rate=math.exp(rng.uniform(lo, hi)),
            weight_decay=rng.uniform(*WEIGHT_DECAY_RANGE),
            gradient_accumulation_steps=rng.choice(ACCUMULATION_CHOICES),
        )
        for _ in range(n)
    ]


# -- data ----------------------------------------------------------------------------


@dataclass
class SequenceExample:
    label: int
    text: str


@dataclass
class TokenExample:
    words: list[str]
    tags: list[int]


def load_sequence_task(path: str | Path, label_names: Sequence[str] | None = None) -> list[SequenceExample]:
    """``label<TAB>text`` per line; labels may be integers or names."""
    out = []
    lookup = {name: i for i, name in enumerate(label_names or [])}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected label<TAB>text")
            label, text = line.split("\t", 1)
            out.append(SequenceExample(_parse_label(label, lookup, path, lineno), text))
    return out


def load_token_task(path: str | Path, tag_names: Sequence[str] | None = None) -> list[TokenExample]:
    """CoNLL-style ``token tag`` lines, blank line between sentences."""
    lookup = {name: i for i, name in enumerate(tag_names or [])}
    out, words, tags = [], [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                if words:
                    out.append(TokenExample(words, tags))
                    words, tags = [], []
                continue
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'token tag'")
            words.append(parts[0])
            tags.append(_parse_label(parts[1], lookup, path, lineno))
    if words:
        out.append(TokenExample(words, tags))
    return out


def _parse_label(raw: str, lookup: dict[str, int], path, lineno) -> int:
    if raw in lookup:
        return lookup[raw]
    try:
        return int(raw)
    except ValueError:
        raise DataError(f"{path}:{lineno}: unknown label {raw!r}") from None


# -- model ---------------------------------------------------------------------------


class TaskModel:
    """Encoder plus a linear classification head.

    Sequence tasks classify the final hidden state at the BOS position;
    token tasks classify every position.
    """

    def __init__(self, encoder: EncoderModel, task: TaskSpec, weight: Tensor, bias: Tensor):
        self.encoder = encoder
        self.task = task
        self.weight = weight
        self.bias = bias

    def parameters(self) -> list[Tensor]:
        return self.encoder.parameters() + [self.weight, self.bias]

    def forward(self, ids, attention_mask=None) -> Tensor:
        hidden = self.encoder.forward(ids, attention_mask).last_hidden
        if self.task.kind == "sequence":
            hidden = ad.take(hidden, (slice(None), 0))
        return ad.linear(hidden, self.weight, self.bias)

    def predict(self, ids, attention_mask=None) -> np.ndarray:
        was = self.encoder.training
        self.encoder.training = False
        try:
            with ad.no_grad():
                return self.forward(ids, attention_mask).data.argmax(axis=-1)
        finally:
            self.encoder.training = was


def attach_head(model: EncoderModel, task: TaskSpec, seed: int = 0) -> TaskModel:
    """Wrap ``model`` (shared, not copied) with a freshly initialised head."""
    rng = np.random.default_rng(seed)
    H = model.config.hidden
    weight = Tensor(rng.normal(0.0, INIT_STD, size=(H, task.num_labels)).astype(np.float32), requires_grad=True)
    bias = Tensor(np.zeros(task.num_labels, dtype=np.float32), requires_grad=True)
    return TaskModel(model, task, weight, bias)


def encode_examples(examples: Sequence, task: TaskSpec, tokenizer: Tokenizer, max_len: int):
    """Token id lists and label targets (int per sequence or list per token)."""
    truncate = truncate_keep_last if task.truncation == "keep-last" else truncate_keep_first
    ids_out, labels_out = [], []
    for ex in examples:
        if task.kind == "sequence":
            if not 0 <= ex.label < task.num_labels:
                raise DataError(f"label {ex.label} outside [0, {task.num_labels})")
            ids_out.append(truncate(tokenizer.encode(ex.text), max_len))
            labels_out.append(ex.label)
        else:
            ids, labels = [BOS], [IGNORE_INDEX]
            for word, tag in zip(ex.words, ex.tags):
                if not 0 <= tag < task.num_labels:
                    raise DataError(f"tag {tag} outside [0, {task.num_labels})")
                pieces = tokenizer.encode_word(word)
                ids.extend(pieces)
                labels.extend([tag] + [IGNORE_INDEX] * (len(pieces) - 1))
            ids.append(EOS)
            labels.append(IGNORE_INDEX)
            if len(ids) > max_len:
                keep = truncate(list(range(len(ids))), max_len)
                ids = [ids[k] for k in keep]
                labels = [labels[k] if 0 < k < len(labels) - 1 else IGNORE_INDEX for k in keep]
            ids_out.append(ids)
            labels_out.append(labels)
    return ids_out, labels_out


def _label_array(labels, width: int | None = None) -> np.ndarray:
    if width is None:
        return np.asarray(labels, dtype=np.int64)
    arr = np.full((len(labels), width), IGNORE_INDEX, dtype=np.int64)
    for r, row in enumerate(labels):
        arr[r, : len(row)] = row
    return arr


# -- metrics -------------------------------------------------------------------------


@dataclass
class EvalResult:
    value: float
    ci: float | None
    n: int


def accuracy_with_ci(predictions, targets) -> EvalResult:
    """Accuracy with a normal-approximation 95% half-width."""
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    n = len(targets)
    if n == 0:
        raise ValueError("cannot score an empty split")
    p = float((predictions == targets).mean())
    return EvalResult(p, Z95 * math.sqrt(p * (1.0 - p) / n), n)


def micro_f1(predictions, targets, outside_label: int = 0) -> float:
    """Token-level micro F1 over the non-outside labels."""
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    pred_pos = predictions != outside_label
    gold_pos = targets != outside_label
    tp = int((pred_pos & (predictions == targets)).sum())
    fp = int((pred_pos & (predictions != targets)).sum())
    fn = int((gold_pos & (predictions != targets)).sum())
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def evaluate(task_model: TaskModel, examples: Sequence, tokenizer: Tokenizer, max_len: int = 512,
             batch_size: int = 8) -> EvalResult:
    if not examples:
        raise ValueError("cannot evaluate on an empty split")
    task = task_model.task
    ids, labels = encode_examples(examples, task, tokenizer, max_len)
    preds, golds = [], []
    for start in range(0, len(ids), batch_size):
        batch_ids, mask = pad_batch(ids[start:start + batch_size])
        pred = task_model.predict(batch_ids, mask)
        if task.kind == "sequence":
            preds.append(pred)
            golds.append(_label_array(labels[start:start + batch_size]))
        else:
            gold = _label_array(labels[start:start + batch_size], batch_ids.shape[1])
            keep = gold != IGNORE_INDEX
            preds.append(pred[keep])
            golds.append(gold[keep])
    preds, golds = np.concatenate(preds), np.concatenate(golds)
    if task.metric == "accuracy":
        return accuracy_with_ci(preds, golds)
    return EvalResult(micro_f1(preds, golds, task.outside_label), None, len(golds))


# -- training ------------------------------------------------------------------------


@dataclass
class RunEntry:
    sample: HyperparameterSample
    validation: float
    validation_ci: float | None
    train_losses: list[float] = field(default_factory=list)


def _classification_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    keep = np.nonzero(labels != IGNORE_INDEX)
    logp = ad.log_softmax(logits)
    picked = ad.take(logp, (*keep, labels[keep]))
    return ad.scale(ad.sum_(picked), -1.0 / len(keep[0]))


def finetune_run(task_model: TaskModel, train: Sequence, validation: Sequence,
                 sample: HyperparameterSample, tokenizer: Tokenizer) -> RunEntry:
    """Train with cross-entropy under ``sample``; score on validation only."""
    if not train or not validation:
        raise ValueError("train and validation splits must be non-empty")
    task = task_model.task
    max_len = min(sample.max_sequence_length, task_model.encoder.config.max_positions)
    ids, labels = encode_examples(train, task, tokenizer, max_len)
    rng = np.random.default_rng(sample.seed)
    task_model.encoder.rng = np.random.default_rng(sample.seed + 1)
    params = task_model.parameters()
    opt = AdamW(params, lr=sample.learning_rate, eps=sample.adam_epsilon, weight_decay=sample.weight_decay)
    bs, accum = sample.per_device_train_batch_size, sample.gradient_accumulation_steps
    micro_per_epoch = math.ceil(len(ids) / bs)
    total_updates = max(1, (micro_per_epoch * sample.num_train_epochs) // accum)
    schedule = linear_schedule(sample.learning_rate, total_updates, sample.warmup_steps)
    task_model.encoder.train()
    losses, micro, updates = [], 0, 0
    for _ in range(sample.num_train_epochs):
        order = rng.permutation(len(ids))
        for start in range(0, len(order), bs):
            rows = order[start:start + bs]
            batch_ids, mask = pad_batch([ids[r] for r in rows])
            if task.kind == "sequence":
                target = _label_array([labels[r] for r in rows])
            else:
                target = _label_array([labels[r] for r in rows], batch_ids.shape[1])
            loss = _classification_loss(task_model.forward(batch_ids, mask), target)
            ad.backward(ad.scale(loss, 1.0 / accum))
            losses.append(loss.item())
            micro += 1
            if micro % accum == 0 and updates < total_updates:
                clip_grad_norm(params, sample.max_grad_norm)
                opt.lr = schedule(updates)
                opt.step()
                updates += 1
                ad.zero_grad(params)
    ad.zero_grad(params)
    task_model.encoder.eval()
    val = evaluate(task_model, validation, tokenizer, max_len, sample.per_device_eval_batch_size)
    return RunEntry(sample, val.value, val.ci, losses)


@dataclass
class FinetuneResult:
    entries: list[RunEntry]
    selected: int
    test: EvalResult

    def to_json(self) -> str:
        return json.dumps(
            {
                "runs": [
                    {"sample": asdict(e.sample), "validation": e.validation, "validation_ci": e.validation_ci}
                    for e in self.entries
                ],
                "selected": self.selected,
                "test": asdict(self.test),
            },
            indent=2,
        )


def select_best(entries: Sequence[RunEntry]) -> int:
    """Index of the highest validation score; ties go to the lowest index."""
    best = 0
    for i, e in enumerate(entries):
        if e.validation > entries[best].validation:
            best = i
    return best


def random_search(encoder: EncoderModel, task: TaskSpec, tokenizer: Tokenizer, train: Sequence,
                  validation: Sequence, test: Sequence, n: int = 5, seed: int = 0,
                  samples: Sequence[HyperparameterSample] | None = None) -> FinetuneResult:
    """Fine-tune one copy of ``encoder`` per sample, pick the best on
    validation, then score that single model on the test split."""
    if not test:
        raise ValueError("test split must be non-empty")
    samples = list(samples) if samples is not None else sample_hyperparameters(n, seed)
    entries, models = [], []
    for k, sample in enumerate(samples):
        task_model = attach_head(encoder.copy(), task, seed=seed + k)
        entries.append(finetune_run(task_model, train, validation, sample, tokenizer))
        models.append(task_model)
    chosen = select_best(entries)
    best = models[chosen]
    max_len = min(samples[chosen].max_sequence_length, encoder.config.max_positions)
    test_result = evaluate(best, test, tokenizer, max_len, samples[chosen].per_device_eval_batch_size)
    return FinetuneResult(entries, chosen, test_result)
