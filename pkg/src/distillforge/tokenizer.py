"""Word-level pre-tokenized BPE with fixed special ids.

Text is split on whitespace; each word becomes a ``WORD_START`` symbol
followed by its characters, and merges are learned greedily by pair
frequency.  Decoding turns ``WORD_START`` back into a single space, so the
round trip holds up to whitespace collapsing and stripping.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>", "<mask>")
N_SPECIAL_IDS = len(SPECIAL_TOKENS)
WORD_START = "▁"


class TokenizerError(ValueError):
    pass


def normalize(text: str) -> str:
    """Collapse whitespace runs to single spaces and strip the ends."""
    return " ".join(text.split())


def _word_symbols(word: str) -> list[str]:
    return [WORD_START, *word]


@dataclass
class Vocabulary:
    tokens: list[str]
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise TokenizerError("vocabulary must start with the special tokens " + " ".join(SPECIAL_TOKENS))
        # ordinary pieces live after the specials, even if a piece spells "<s>"
        self._index = {}
        for i, tok in enumerate(self.tokens[len(SPECIAL_TOKENS):], start=len(SPECIAL_TOKENS)):
            self._index.setdefault(tok, i)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id_of(self, token: str) -> int:
        return self._index.get(token, UNK)

    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    unk_id = UNK
    mask_id = MASK

    @property
    def special_ids(self) -> tuple[int, ...]:
        return tuple(range(len(SPECIAL_TOKENS)))


class Tokenizer:
    def __init__(self, vocab: Vocabulary, merges: Sequence[tuple[str, str]]):
        self.vocab = vocab
        self.merges = [tuple(m) for m in merges]
        if len(set(self.merges)) != len(self.merges):
            raise TokenizerError("merge table contains duplicate pairs")
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._cache: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    # -- encoding ----------------------------------------------------------
    def _bpe(self, word: str) -> list[str]:
        symbols = _word_symbols(word)
        while len(symbols) > 1:
            best = None
            best_rank = None
            for pair in zip(symbols, symbols[1:]):
                r = self._ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            symbols = _apply_merge(symbols, best)
        return symbols

    def encode_word(self, word: str) -> tuple[int, ...]:
        cached = self._cache.get(word)
        if cached is None:
            cached = tuple(self.vocab.id_of(s) for s in self._bpe(word))
            self._cache[word] = cached
        return cached

    def encode(self, text: str, add_special: bool = True) -> list[int]:
        ids = [i for w in text.split() for i in self.encode_word(w)]
        return [BOS, *ids, EOS] if add_special else ids

    # -- decoding ----------------------------------------------------------
    def decode(self, ids: Iterable[int]) -> str:
        pieces = []
        n = len(self.vocab)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise TokenizerError(f"token id {i} outside vocabulary of size {n}")
            if i < len(SPECIAL_TOKENS):
                continue
            pieces.append(self.vocab.tokens[i])
        return normalize("".join(pieces).replace(WORD_START, " "))

    # -- persistence -------------------------------------------------------
    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "vocab.txt").write_text("\n".join(self.vocab.tokens) + "\n", encoding="utf-8")
        (directory / "merges.txt").write_text(
            "".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8"
        )

    @classmethod
    def load(cls, directory: str | Path) -> Tokenizer:
        directory = Path(directory)
        tokens = (directory / "vocab.txt").read_text(encoding="utf-8").split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        merges = []
        for line in (directory / "merges.txt").read_text(encoding="utf-8").splitlines():
            parts = line.split(" ")
            if len(parts) != 2:
                raise TokenizerError(f"bad merge line: {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(Vocabulary(tokens), merges)


def _apply_merge(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def train_bpe(corpus: Iterable[str], target_vocab_size: int) -> Tokenizer:
    """Learn merges greedily by pair frequency until the target size is reached.

    Stops early once no adjacent pair occurs at least twice.  Ties are
    broken by first occurrence so training is deterministic.
    """
    word_counts: Counter[str] = Counter()
    for line in corpus:
        word_counts.update(line.split())
    if not word_counts:
        raise TokenizerError("cannot train a tokenizer on an empty corpus")

    alphabet = sorted({WORD_START} | {ch for w in word_counts for ch in w})
    base = len(SPECIAL_TOKENS) + len(alphabet)
    if target_vocab_size <= base:
        raise TokenizerError(
            f"target_vocab_size {target_vocab_size} must exceed {base} "
            f"({len(SPECIAL_TOKENS)} specials + {len(alphabet)} base symbols)"
        )

    tokens = list(SPECIAL_TOKENS) + alphabet
    known = set(alphabet)
    words = [(_word_symbols(w), c) for w, c in word_counts.items()]
    merges: list[tuple[str, str]] = []

    while len(tokens) < target_vocab_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for symbols, c in words:
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += c
        if not pairs:
            break
        # Counter preserves insertion order, so max() picks the earliest on ties
        pair, freq = max(pairs.items(), key=lambda kv: kv[1])
        if freq < 2:
            break
        merges.append(pair)
        merged = pair[0] + pair[1]
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
        words = [(_apply_merge(s, pair), c) for s, c in words]
    return Tokenizer(Vocabulary(tokens), merges)
