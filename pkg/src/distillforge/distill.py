"""Soft-target distillation of a masked LM into a smaller student.

The student is trained on a weighted sum of three terms evaluated on the
same masked batch:

* cross-entropy between teacher and student distributions softened by a
  temperature ``T`` (scaled by ``T**2``), at masked positions only;
* the ordinary MLM negative log-likelihood of the true tokens;
* ``1 - cos`` between final-layer teacher and student hidden vectors at all
  non-padding positions.

Gradients are accumulated over ``accumulation_steps`` micro-batches before
each optimizer update.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import IO, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import EncoderModel
from .optim import AdamW, clip_grad_norm, constant_schedule, linear_schedule
from .tokenizer import MASK, PAD, SPECIAL_TOKENS

log = logging.getLogger(__name__)

IGNORE_INDEX = -100
N_SPECIAL = len(SPECIAL_TOKENS)


@dataclass(frozen=True)
class MaskingPolicy:
    mask_rate: float = 0.15
    mask_token_prob: float = 0.8
    random_token_prob: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        if self.mask_token_prob < 0 or self.random_token_prob < 0 or self.mask_token_prob + self.random_token_prob > 1:
            raise ValueError("mask/random replacement probabilities must be non-negative and sum to at most 1")


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 2.0
    alpha_ce: float = 5.0
    alpha_mlm: float = 2.0
    alpha_cos: float = 1.0
    mask_rate: float = 0.15
    mask_token_prob: float = 0.8
    random_token_prob: float = 0.1
    micro_batch: int = 5
    accumulation_steps: int = 128
    epochs: int = 1
    learning_rate: float = 5e-4
    lr_schedule: str = "linear"
    warmup_steps: int = 0
    adam_epsilon: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        alphas = (self.alpha_ce, self.alpha_mlm, self.alpha_cos)
        if min(alphas) < 0 or max(alphas) <= 0:
            raise ValueError("loss weights must be non-negative with at least one positive")
        if self.micro_batch < 1 or self.accumulation_steps < 1 or self.epochs < 0:
            raise ValueError("micro_batch and accumulation_steps must be >= 1, epochs >= 0")
        if self.lr_schedule not in ("linear", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        self.masking  # validates the masking fields

    @property
    def masking(self) -> MaskingPolicy:
        return MaskingPolicy(self.mask_rate, self.mask_token_prob, self.random_token_prob)

    @property
    def effective_batch_size(self) -> int:
        return self.micro_batch * self.accumulation_steps

    @classmethod
    def from_dict(cls, obj: dict) -> DistillConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown distill config keys: {sorted(unknown)}")
        return cls(**obj)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    labels: np.ndarray
    attention_mask: np.ndarray

    @property
    def masked_positions(self) -> tuple[np.ndarray, np.ndarray]:
        return np.nonzero(self.labels != IGNORE_INDEX)

    @property
    def num_masked(self) -> int:
        return int((self.labels != IGNORE_INDEX).sum())


@dataclass
class LossBreakdown:
    l_ce: float
    l_mlm: float
    l_cos: float
    total: float


def pad_batch(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns ids and a boolean mask."""
    if not sequences:
        raise ValueError("cannot pad an empty batch")
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), PAD, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for r, s in enumerate(sequences):
        ids[r, : len(s)] = s
        mask[r, : len(s)] = True
    return ids, mask


def apply_masking(ids, policy: MaskingPolicy, seed, vocab_size: int, attention_mask=None) -> MaskedBatch:
    """Select non-special tokens at ``mask_rate`` and corrupt them 80/10/10.

    If no position is selected the draw is repeated; after 100 empty draws a
    single eligible position is chosen uniformly instead.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(ids, np.ndarray) and ids.ndim == 2:
        ids = ids.astype(np.int64)
        attention_mask = (ids != PAD) if attention_mask is None else np.asarray(attention_mask, dtype=bool)
    else:
        ids, attention_mask = pad_batch(ids)
    eligible = (ids >= N_SPECIAL) & attention_mask
    n_eligible = int(eligible.sum())
    if n_eligible == 0:
        raise ValueError("batch contains only special tokens; nothing to mask")

    for _ in range(100):
        selected = eligible & (rng.random(ids.shape) < policy.mask_rate)
        if selected.any():
            break
    else:
        selected = np.zeros_like(eligible)
        flat = np.flatnonzero(eligible)
        selected.flat[flat[rng.integers(len(flat))]] = True

    labels = np.where(selected, ids, IGNORE_INDEX)
    corrupted = ids.copy()
    u = rng.random(ids.shape)
    to_mask = selected & (u < policy.mask_token_prob)
    to_random = selected & (u >= policy.mask_token_prob) & (u < policy.mask_token_prob + policy.random_token_prob)
    corrupted[to_mask] = MASK
    if to_random.any():
        corrupted[to_random] = rng.integers(N_SPECIAL, vocab_size, size=int(to_random.sum()))
    return MaskedBatch(corrupted, labels, attention_mask)


# -- losses --------------------------------------------------------------------------


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def distillation_ce_loss(teacher_logits, student_logits: Tensor, T: float = 2.0, scale_by_t2: bool = True) -> Tensor:
    """Mean over positions of ``-sum_i p(t_i, T) log p(s_i, T)``.

    Teacher logits are treated as constants.  With ``scale_by_t2`` the value
    (and so the gradient) is multiplied by ``T**2``.
    """
    t = _const(teacher_logits)
    student_logits = ad.as_tensor(student_logits)
    if t.shape != student_logits.shape:
        raise ad.ShapeError("distillation_ce_loss", t.shape, student_logits.shape)
    p_t = ad.softmax_with_temperature(Tensor(t.astype(student_logits.dtype)), T).data
    log_p_s = ad.log_softmax(student_logits, T)
    positions = int(np.prod(t.shape[:-1])) if t.ndim > 1 else 1
    loss = ad.scale(ad.sum_(ad.mul(Tensor(p_t), log_p_s)), -1.0 / positions)
    return ad.scale(loss, T * T) if scale_by_t2 else loss


def mlm_loss(student_logits: Tensor, labels) -> Tensor:
    """Mean NLL of the true tokens; positions labelled ``IGNORE_INDEX`` are skipped."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != student_logits.shape[:-1]:
        raise ad.ShapeError("mlm_loss", student_logits.shape, labels.shape)
    keep = np.nonzero(labels != IGNORE_INDEX)
    if len(keep[0]) == 0:
        raise ValueError("mlm_loss needs at least one labelled position")
    logp = ad.log_softmax(student_logits)
    picked = ad.take(logp, (*keep, labels[keep]))
    return ad.scale(ad.sum_(picked), -1.0 / len(keep[0]))


def cosine_alignment_loss(teacher_hidden, student_hidden: Tensor, attention_mask=None) -> Tensor:
    """Mean ``1 - cos(teacher, student)`` over non-padding positions."""
    t = _const(teacher_hidden)
    student_hidden = ad.as_tensor(student_hidden)
    if t.shape != student_hidden.shape:
        raise ad.ShapeError("cosine_alignment_loss", t.shape, student_hidden.shape)
    if attention_mask is None:
        attention_mask = np.ones(t.shape[:-1], dtype=bool)
    keep = np.nonzero(np.asarray(attention_mask, dtype=bool))
    if len(keep[0]) == 0:
        raise ValueError("cosine_alignment_loss needs at least one non-padding position")
    s = ad.take(student_hidden, keep)
    cos = ad.cosine_similarity(Tensor(t[keep].astype(student_hidden.dtype)), s)
    return ad.scale(ad.sum_(ad.scale(cos, -1.0) + 1.0), 1.0 / len(keep[0]))


# -- training ----------------------------------------------------------------------


class Distiller:
    """Owns the student's optimizer state and the accumulation counter."""

    def __init__(self, teacher: EncoderModel, student: EncoderModel, config: DistillConfig,
                 total_updates: int | None = None, log_file: IO[str] | None = None):
        if teacher.config.vocab_size != student.config.vocab_size:
            raise ValueError("teacher and student vocabularies differ")
        if teacher.config.hidden != student.config.hidden:
            raise ValueError("cosine alignment needs equal hidden sizes")
        self.teacher = teacher.eval()
        self.student = student
        self.config = config
        self.optimizer = AdamW(student.parameters(), lr=config.learning_rate, eps=config.adam_epsilon,
                               weight_decay=config.weight_decay)
        if config.lr_schedule == "linear" and total_updates:
            self.schedule = linear_schedule(config.learning_rate, total_updates, config.warmup_steps)
        else:
            self.schedule = constant_schedule(config.learning_rate)
        self.micro_steps = 0
        self.updates = 0
        self.log_file = log_file
        self.history: list[dict] = []
        self._window: list[LossBreakdown] = []

    def losses(self, batch: MaskedBatch) -> tuple[Tensor, LossBreakdown]:
        cfg = self.config
        pos = batch.masked_positions
        if len(pos[0]) == 0:
            raise ValueError("batch has no masked positions")
        with ad.no_grad():
            t_out = self.teacher.forward(batch.input_ids, batch.attention_mask)
            t_logits = self.teacher.mlm_logits(t_out.last_hidden, pos).data
        s_out = self.student.forward(batch.input_ids, batch.attention_mask)
        s_logits = self.student.mlm_logits(s_out.last_hidden, pos)
        l_ce = distillation_ce_loss(t_logits, s_logits, cfg.temperature)
        l_mlm = mlm_loss(s_logits, batch.labels[pos])
        l_cos = cosine_alignment_loss(t_out.last_hidden.data, s_out.last_hidden, batch.attention_mask)
        total = ad.scale(l_ce, cfg.alpha_ce) + ad.scale(l_mlm, cfg.alpha_mlm) + ad.scale(l_cos, cfg.alpha_cos)
        parts = LossBreakdown(l_ce.item(), l_mlm.item(), l_cos.item(), total.item())
        return total, parts

    def distill_step(self, batch: MaskedBatch) -> LossBreakdown:
        """Forward both models, accumulate ``total / accumulation_steps``.

        The optimizer steps once every ``accumulation_steps`` calls.
        """
        self.student.train()
        total, parts = self.losses(batch)
        ad.backward(ad.scale(total, 1.0 / self.config.accumulation_steps))
        self.micro_steps += 1
        self._window.append(parts)
        if self.micro_steps % self.config.accumulation_steps == 0:
            self.apply_update()
        return parts

    def apply_update(self) -> None:
        if not self._window:
            return
        if self.config.max_grad_norm:
            clip_grad_norm(self.student.parameters(), self.config.max_grad_norm)
        lr = self.schedule(self.updates)
        self.optimizer.lr = lr
        self.optimizer.step()
        self.optimizer.zero_grad()
        self.updates += 1
        n = len(self._window)
        record = {
            "step": self.updates,
            "l_ce": sum(p.l_ce for p in self._window) / n,
            "l_mlm": sum(p.l_mlm for p in self._window) / n,
            "l_cos": sum(p.l_cos for p in self._window) / n,
            "total": sum(p.total for p in self._window) / n,
            "lr": lr,
        }
        self._window = []
        self.history.append(record)
        if self.log_file is not None:
            self.log_file.write(json.dumps(record) + "\n")


@dataclass
class DistillResult:
    student: EncoderModel
    epoch_losses: list[LossBreakdown]
    step_losses: list[LossBreakdown] = field(default_factory=list)
    update_log: list[dict] = field(default_factory=list)


def _mean_breakdown(parts: Sequence[LossBreakdown]) -> LossBreakdown:
    n = len(parts)
    return LossBreakdown(*(sum(getattr(p, k) for p in parts) / n for k in ("l_ce", "l_mlm", "l_cos", "total")))


def iterate_batches(corpus: Sequence[Sequence[int]], batch_size: int, rng: np.random.Generator, shuffle: bool = True):
    order = rng.permutation(len(corpus)) if shuffle else np.arange(len(corpus))
    for start in range(0, len(order), batch_size):
        yield [corpus[i] for i in order[start:start + batch_size]]


def distill_run(teacher: EncoderModel, student: EncoderModel, corpus: Sequence[Sequence[int]],
                config: DistillConfig, log_file: IO[str] | None = None) -> DistillResult:
    """Distil over ``config.epochs`` shuffled passes of a tokenized corpus."""
    if not corpus:
        raise ValueError("distillation corpus is empty")
    rng = np.random.default_rng(config.seed)
    student.rng = np.random.default_rng(config.seed + 1)
    micro_per_epoch = math.ceil(len(corpus) / config.micro_batch)
    total_updates = math.ceil(micro_per_epoch * config.epochs / config.accumulation_steps)
    trainer = Distiller(teacher, student, config, total_updates=total_updates, log_file=log_file)
    epoch_losses, step_losses = [], []
    for epoch in range(config.epochs):
        parts = []
        for seqs in iterate_batches(corpus, config.micro_batch, rng):
            batch = apply_masking(seqs, config.masking, rng, student.config.vocab_size)
            parts.append(trainer.distill_step(batch))
        step_losses.extend(parts)
        epoch_losses.append(_mean_breakdown(parts))
        log.info("epoch %d: %s", epoch + 1, epoch_losses[-1])
    trainer.apply_update()  # flush a partial accumulation window
    student.eval()
    return DistillResult(student, epoch_losses, step_losses, trainer.history)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 40
    batch_size: int = 16
    learning_rate: float = 1e-3
    lr_schedule: str = "linear"
    warmup_steps: int = 0
    weight_decay: float = 0.0
    adam_epsilon: float = 1e-8
    max_grad_norm: float | None = 1.0
    mask_rate: float = 0.15
    mask_token_prob: float = 0.8
    random_token_prob: float = 0.1
    seed: int = 0

    @classmethod
    def from_dict(cls, obj: dict) -> PretrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**obj)


def pretrain_mlm(model: EncoderModel, corpus: Sequence[Sequence[int]], config: PretrainConfig,
                 log_file: IO[str] | None = None) -> list[float]:
    """Plain MLM training; returns the mean loss per epoch."""
    if not corpus:
        raise ValueError("pre-training corpus is empty")
    rng = np.random.default_rng(config.seed)
    model.rng = np.random.default_rng(config.seed + 1)
    policy = MaskingPolicy(config.mask_rate, config.mask_token_prob, config.random_token_prob)
    opt = AdamW(model.parameters(), lr=config.learning_rate, eps=config.adam_epsilon,
                weight_decay=config.weight_decay)
    total = math.ceil(len(corpus) / config.batch_size) * config.epochs
    schedule = (linear_schedule(config.learning_rate, total, config.warmup_steps)
                if config.lr_schedule == "linear" else constant_schedule(config.learning_rate))
    model.train()
    history, step = [], 0
    for epoch in range(config.epochs):
        losses = []
        for seqs in iterate_batches(corpus, config.batch_size, rng):
            batch = apply_masking(seqs, policy, rng, model.config.vocab_size)
            pos = batch.masked_positions
            out = model.forward(batch.input_ids, batch.attention_mask)
            loss = mlm_loss(model.mlm_logits(out.last_hidden, pos), batch.labels[pos])
            ad.backward(loss)
            if config.max_grad_norm:
                clip_grad_norm(model.parameters(), config.max_grad_norm)
            opt.lr = schedule(step)
            opt.step()
            opt.zero_grad()
            step += 1
            losses.append(loss.item())
            if log_file is not None:
                log_file.write(json.dumps({"step": step, "l_mlm": losses[-1], "lr": opt.lr}) + "\n")
        history.append(float(np.mean(losses)))
        log.info("pretrain epoch %d: mlm %.4f", epoch + 1, history[-1])
    model.eval()
    return history
