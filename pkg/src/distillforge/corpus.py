"""Transfer-corpus preparation: documents, merging, shuffling, sharding."""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .tokenizer import BOS

JOINER = " "


class CorpusDecodeError(ValueError):
    def __init__(self, path, offset: int, reason: str):
        super().__init__(f"{path}: invalid UTF-8 at byte offset {offset} ({reason})")
        self.offset = offset


@dataclass(frozen=True)
class Document:
    doc_id: int
    lines: tuple[str, ...]


@dataclass(frozen=True)
class SequenceRecord:
    text: str
    source_doc: int
    merged_from: int = 1


@dataclass(frozen=True)
class MergePolicy:
    p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"merge probability must lie in [0, 1], got {self.p}")


@dataclass
class LengthHistogram:
    edges: list[int]
    counts: list[int]
    total: int
    cutoff: int
    over_cutoff: int
    length_sum: int = 0

    @property
    def fraction_over_cutoff(self) -> float:
        return self.over_cutoff / self.total if self.total else 0.0

    @property
    def mean_length(self) -> float:
        return self.length_sum / self.total if self.total else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_start", "bin_end", "count"])
        for lo, hi, c in zip(self.edges, self.edges[1:], self.counts):
            w.writerow([lo, hi, c])
        return buf.getvalue()

    def summary(self) -> str:
        return (
            f"sequences={self.total} mean_tokens={self.mean_length:.2f} "
            f"over_{self.cutoff}={self.fraction_over_cutoff:.6f}"
        )


def parse_documents(text: str) -> list[Document]:
    """Blank-line separated blocks become documents, other lines sequences."""
    docs: list[Document] = []
    block: list[str] = []
    for raw in text.splitlines():
        line = raw.strip()
        if line:
            block.append(line)
        elif block:
            docs.append(Document(len(docs), tuple(block)))
            block = []
    if block:
        docs.append(Document(len(docs), tuple(block)))
    return docs


def load_documents(path: str | Path) -> list[Document]:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise CorpusDecodeError(path, e.start, e.reason) from None
    return parse_documents(text)


def merge_sequences(docs: Sequence[Document], policy: MergePolicy) -> list[SequenceRecord]:
    """Probabilistically glue each line onto its predecessor within a document.

    After every line a Bernoulli(p) draw decides whether the next line of the
    same document joins the open record; records may absorb several lines.
    """
    rng = np.random.default_rng(policy.seed)
    out: list[SequenceRecord] = []
    for doc in docs:
        if not doc.lines:
            continue
        draws = rng.random(len(doc.lines) - 1) < policy.p
        current = [doc.lines[0]]
        for line, join in zip(doc.lines[1:], draws):
            if join:
                current.append(line)
            else:
                out.append(SequenceRecord(JOINER.join(current), doc.doc_id, len(current)))
                current = [line]
        out.append(SequenceRecord(JOINER.join(current), doc.doc_id, len(current)))
    return out


def expected_merged_count(line_counts: Sequence[int], p: float) -> float:
    return float(sum(1 + (n - 1) * (1 - p) for n in line_counts if n > 0))


def shuffle_records(records: Sequence, seed: int) -> list:
    out = list(records)
    random.Random(seed).shuffle(out)
    return out


def length_histogram(records: Sequence, tokenizer, bin_width: int = 40, cutoff: int = 512) -> LengthHistogram:
    """Histogram of encoded lengths (specials included).

    ``records`` may hold :class:`SequenceRecord` objects or plain strings.
    """
    if bin_width < 1:
        raise ValueError("bin_width must be positive")
    lengths = [len(tokenizer.encode(r.text if isinstance(r, SequenceRecord) else r)) for r in records]
    top = max(lengths, default=0)
    nbins = top // bin_width + 1 if lengths else 1
    counts = [0] * nbins
    for n in lengths:
        counts[n // bin_width] += 1
    return LengthHistogram(
        edges=[i * bin_width for i in range(nbins + 1)],
        counts=counts,
        total=len(lengths),
        cutoff=cutoff,
        over_cutoff=sum(n > cutoff for n in lengths),
        length_sum=sum(lengths),
    )


def truncate_keep_last(ids: Sequence[int], max_len: int) -> list[int]:
    """Keep the leading BOS plus the final ``max_len - 1`` tokens."""
    if max_len < 2:
        raise ValueError(f"max_len must be at least 2, got {max_len}")
    ids = list(ids)
    if len(ids) <= max_len:
        return ids
    head = ids[0] if ids[0] == BOS else BOS
    return [head, *ids[len(ids) - (max_len - 1):]]


def truncate_keep_first(ids: Sequence[int], max_len: int) -> list[int]:
    if max_len < 2:
        raise ValueError(f"max_len must be at least 2, got {max_len}")
    ids = list(ids)
    if len(ids) <= max_len:
        return ids
    return [*ids[: max_len - 1], ids[-1]]


def split_shards(records: Sequence, n_shards: int) -> list[list]:
    if n_shards < 1:
        raise ValueError("n_shards must be at least 1")
    if n_shards > len(records):
        raise ValueError(f"cannot split {len(records)} records into {n_shards} shards")
    base, extra = divmod(len(records), n_shards)
    shards, start = [], 0
    for k in range(n_shards):
        size = base + (k < extra)
        shards.append(list(records[start:start + size]))
        start += size
    return shards


def take_last_shard(records: Sequence, n: int) -> list:
    if n < 0:
        raise ValueError("n must be non-negative")
    return list(records[len(records) - min(n, len(records)):])


def write_records(records: Sequence[SequenceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(r.text + "\n")


def read_lines(path: str | Path, keep: Callable[[str], bool] = bool) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if keep(line.strip())]
