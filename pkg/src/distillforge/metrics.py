"""Pseudo-perplexity and the log-probability bias score for masked LMs.

Both functions accept any object with a ``predict_logits(ids, attention_mask,
positions)`` method returning an array of vocabulary logits for the
requested ``(row, col)`` positions.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .distill import pad_batch
from .tokenizer import BOS, EOS, MASK, N_SPECIAL_IDS, Tokenizer

log = logging.getLogger(__name__)

PRIOR_EPS = 1e-12


class MaskedLM(Protocol):
    def predict_logits(self, ids, attention_mask=None, positions=None) -> np.ndarray: ...


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class PpplResult:
    pppl: float
    num_sequences: int
    num_predictions: int
    total_nll: float
    per_sequence: list[float] = field(default_factory=list)


def pseudo_perplexity(model: MaskedLM, sequences: Sequence, tokenizer: Tokenizer | None = None,
                      batch_size: int = 64, max_positions: int | None = None) -> PpplResult:
    """``exp(total NLL / number of scored tokens)``.

    Every non-special position of each sequence is masked on its own and the
    true token scored.  ``sequences`` holds strings (needs ``tokenizer``) or
    already-encoded id lists including BOS/EOS.
    """
    if len(sequences) == 0:
        raise ValueError("pseudo_perplexity needs at least one sequence")
    encoded = [tokenizer.encode(s) if isinstance(s, str) else list(s) for s in sequences]
    if max_positions is None:
        max_positions = getattr(getattr(model, "config", None), "max_positions", None)

    # one row per (sequence, masked position)
    rows: list[tuple[int, int, list[int], int]] = []
    for si, ids in enumerate(encoded):
        if max_positions is not None and len(ids) > max_positions:
            raise ValueError(f"sequence {si} has {len(ids)} tokens, model accepts {max_positions}")
        for pos, tok in enumerate(ids):
            if tok < N_SPECIAL_IDS:
                continue
            masked = list(ids)
            masked[pos] = MASK
            rows.append((si, pos, masked, tok))

    nll = np.zeros(len(encoded))
    counts = np.zeros(len(encoded), dtype=np.int64)
    for start in range(0, len(rows), batch_size):
        chunk = rows[start:start + batch_size]
        ids, mask = pad_batch([r[2] for r in chunk])
        positions = (np.arange(len(chunk)), np.array([r[1] for r in chunk]))
        logp = _log_softmax(model.predict_logits(ids, mask, positions))
        for k, (si, _, _, tok) in enumerate(chunk):
            nll[si] -= logp[k, tok]
            counts[si] += 1
    total = int(counts.sum())
    if total == 0:
        raise ValueError("no scorable (non-special) tokens in the input")
    per_seq = [math.exp(n / c) if c else float("nan") for n, c in zip(nll, counts)]
    total_nll = float(nll.sum())
    return PpplResult(math.exp(total_nll / total), len(encoded), total, total_nll, per_seq)


# -- bias score -------------------------------------------------------------------

_ATTR = re.compile(r"\[\[(.+?)\]\]")


@dataclass(frozen=True)
class BiasTemplate:
    """Whitespace-split words with one target slot and marked attribute words."""

    text: str
    words: tuple[str, ...]
    slot: int
    attributes: tuple[int, ...]


def parse_template(line: str) -> BiasTemplate:
    """Parse ``<mask> is a [[nurse]] .``; ``[[ ]]`` may span several words."""
    text = " ".join(line.split())
    words: list[str] = []
    attributes: list[int] = []
    pos = 0
    for m in _ATTR.finditer(text):
        words += text[pos:m.start()].split()
        for w in m.group(1).split():
            attributes.append(len(words))
            words.append(w)
        pos = m.end()
    words += text[pos:].split()
    slots = [i for i, w in enumerate(words) if w == "<mask>"]
    if len(slots) != 1:
        raise ValueError(f"template needs exactly one <mask> slot: {line!r}")
    if not attributes:
        raise ValueError(f"template needs at least one [[attribute]] span: {line!r}")
    if slots[0] in attributes:
        raise ValueError(f"the target slot cannot be an attribute: {line!r}")
    return BiasTemplate(text, tuple(words), slots[0], tuple(attributes))


def load_templates(path) -> list[BiasTemplate]:
    with open(path, encoding="utf-8") as f:
        return [parse_template(line) for line in f if line.strip()]


def _encode_template(template: BiasTemplate, tokenizer: Tokenizer, mask_attributes: bool) -> tuple[list[int], int]:
    ids = [BOS]
    slot_pos = -1
    for i, word in enumerate(template.words):
        if i == template.slot:
            slot_pos = len(ids)
            ids.append(MASK)
            continue
        pieces = tokenizer.encode_word(word)
        if mask_attributes and i in template.attributes:
            pieces = (MASK,) * len(pieces)
        ids.extend(pieces)
    ids.append(EOS)
    return ids, slot_pos


def target_id(tokenizer: Tokenizer, target: str) -> int:
    pieces = tokenizer.encode_word(target)
    if len(pieces) != 1 or pieces[0] < N_SPECIAL_IDS:
        raise ValueError(f"target {target!r} does not encode to a single known token ({len(pieces)} pieces)")
    return pieces[0]


def _slot_log_probs(model: MaskedLM, template: BiasTemplate, tokenizer: Tokenizer) -> tuple[np.ndarray, np.ndarray]:
    plain, slot = _encode_template(template, tokenizer, mask_attributes=False)
    prior, slot2 = _encode_template(template, tokenizer, mask_attributes=True)
    assert slot == slot2
    ids, mask = pad_batch([plain, prior])
    logits = model.predict_logits(ids, mask, (np.array([0, 1]), np.array([slot, slot])))
    logp = _log_softmax(logits)
    return logp[0], logp[1]


@dataclass
class Association:
    value: float
    p_target: float
    p_prior: float
    clamped: bool = False


def _association(logp_tgt: np.ndarray, logp_prior: np.ndarray, tid: int) -> Association:
    p_t = float(np.exp(logp_tgt[tid]))
    p_p = float(np.exp(logp_prior[tid]))
    clamped = p_p < PRIOR_EPS
    lp_prior = math.log(PRIOR_EPS) if clamped else float(logp_prior[tid])
    lp_tgt = max(float(logp_tgt[tid]), math.log(PRIOR_EPS))
    return Association(lp_tgt - lp_prior, p_t, p_p, clamped)


def log_prob_association(model: MaskedLM, template: BiasTemplate | str, target: str, tokenizer: Tokenizer) -> float:
    """``log(p_tgt / p_prior)`` for one target in one template.

    ``p_prior`` masks the attribute words as well as the target slot.
    Probabilities below 1e-12 are clamped and a warning is logged.
    """
    if isinstance(template, str):
        template = parse_template(template)
    tid = target_id(tokenizer, target)
    assoc = _association(*_slot_log_probs(model, template, tokenizer), tid)
    if assoc.clamped:
        log.warning("p_prior for %r in %r underflowed; clamped to %g", target, template.text, PRIOR_EPS)
    return assoc.value


@dataclass
class BiasScoreReport:
    templates: list[str]
    assoc_t1: list[float]
    assoc_t2: list[float]
    scores: list[float]
    aggregate: float
    clamped: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["template", "assoc_t1", "assoc_t2", "score"])
        for row in zip(self.templates, self.assoc_t1, self.assoc_t2, self.scores):
            w.writerow([row[0], *(f"{v:.6f}" for v in row[1:])])
        w.writerow(["aggregate", "", "", f"{self.aggregate:.6f}"])
        return buf.getvalue()


def bias_score(model: MaskedLM, templates: Sequence[BiasTemplate | str], t1: str, t2: str,
               tokenizer: Tokenizer) -> BiasScoreReport:
    """Per-template ``assoc(t1) - assoc(t2)`` and their mean."""
    if not templates:
        raise ValueError("bias_score needs at least one template")
    id1, id2 = target_id(tokenizer, t1), target_id(tokenizer, t2)
    texts, a1, a2, clamped = [], [], [], 0
    for tpl in templates:
        if isinstance(tpl, str):
            tpl = parse_template(tpl)
        lp_t, lp_p = _slot_log_probs(model, tpl, tokenizer)
        r1, r2 = _association(lp_t, lp_p, id1), _association(lp_t, lp_p, id2)
        clamped += r1.clamped + r2.clamped
        texts.append(tpl.text)
        a1.append(r1.value)
        a2.append(r2.value)
    scores = [x - y for x, y in zip(a1, a2)]
    if clamped:
        log.warning("%d prior probabilities were clamped to %g", clamped, PRIOR_EPS)
    return BiasScoreReport(texts, a1, a2, scores, float(np.mean(scores)), clamped)
