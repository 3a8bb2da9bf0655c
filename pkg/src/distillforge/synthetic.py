"""Small generative corpora for desk-scale experiments.

The grammar has enough structure (noun class -> verb -> object) that a
trained masked LM reaches low pseudo-perplexity, while content words keep
some irreducible entropy.
"""

from __future__ import annotations

import random
from pathlib import Path

ANIMALS = ["cat", "dog", "bird", "horse"]
PEOPLE = ["man", "woman", "child", "farmer"]
ADJECTIVES = ["big", "small", "old", "young"]
VERBS = {
    "animal": ["eats", "chases", "sees"],
    "person": ["reads", "writes", "sees", "eats"],
}
OBJECTS = {
    "eats": ["fish", "bread", "apple"],
    "chases": ["ball", "mouse"],
    "sees": ["tree", "house", "river"],
    "reads": ["book", "letter"],
    "writes": ["letter", "poem"],
}
PLACES = ["in the garden", "near the river", "at home"]

TARGETS = ("he", "she")
GROUP_A = ["doctor", "pilot", "engineer"]
GROUP_B = ["nurse", "dancer", "secretary"]

POSITIVE = ["good", "great", "nice", "fine"]
NEGATIVE = ["bad", "awful", "poor", "dull"]


def grammar_sentence(rng: random.Random) -> str:
    if rng.random() < 0.5:
        noun, verbs = rng.choice(ANIMALS), VERBS["animal"]
    else:
        noun, verbs = rng.choice(PEOPLE), VERBS["person"]
    verb = rng.choice(verbs)
    words = ["the"]
    if rng.random() < 0.5:
        words.append(rng.choice(ADJECTIVES))
    words += [noun, verb, "the", rng.choice(OBJECTS[verb])]
    if rng.random() < 0.3:
        words.append(rng.choice(PLACES))
    words.append(".")
    return " ".join(words)


def grammar_sentences(n: int, seed: int = 0) -> list[str]:
    rng = random.Random(seed)
    return [grammar_sentence(rng) for _ in range(n)]


def synthetic_documents_text(n_docs: int, lines_per_doc: int, seed: int = 0, bias_rate: float = 0.0) -> str:
    """Corpus file contents: documents separated by blank lines.

    With ``bias_rate > 0`` that fraction of lines is drawn from
    :func:`skewed_bias_sentences` instead of the grammar.
    """
    rng = random.Random(seed)
    bias = iter(skewed_bias_sentences(n_docs * lines_per_doc, seed=seed + 1))

    def line() -> str:
        return next(bias) if rng.random() < bias_rate else grammar_sentence(rng)

    blocks = ["\n".join(line() for _ in range(lines_per_doc)) for _ in range(n_docs)]
    return "\n\n".join(blocks) + "\n"


def skewed_bias_sentences(n: int, skew: float = 0.9, seed: int = 0) -> list[str]:
    """``he`` co-occurs with GROUP_A and ``she`` with GROUP_B at rate ``skew``."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        if rng.random() < 0.5:
            job = rng.choice(GROUP_A)
            pronoun = TARGETS[0] if rng.random() < skew else TARGETS[1]
        else:
            job = rng.choice(GROUP_B)
            pronoun = TARGETS[1] if rng.random() < skew else TARGETS[0]
        out.append(f"{pronoun} is a {job} .")
    return out


def bias_templates(group: list[str] | None = None) -> list[str]:
    group = GROUP_A if group is None else group
    return [f"<mask> is a [[{job}]] ." for job in group]


def sentiment_examples(n: int, seed: int = 0) -> list[tuple[int, str]]:
    """Binary task; the label is decided by a single sentiment word."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        label = rng.randrange(2)
        word = rng.choice(POSITIVE if label else NEGATIVE)
        out.append((label, f"{grammar_sentence(rng)[:-2]} and it was {word} ."))
    return out


TAGS = ["O", "NOUN", "VERB"]


def tagging_examples(n: int, seed: int = 0) -> list[tuple[list[str], list[int]]]:
    nouns = set(ANIMALS) | set(PEOPLE) | {o for objs in OBJECTS.values() for o in objs} | {"garden", "river", "home"}
    verbs = {v for vs in VERBS.values() for v in vs}
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        words = grammar_sentence(rng).split()
        tags = [1 if w in nouns else 2 if w in verbs else 0 for w in words]
        out.append((words, tags))
    return out


def write_lines(lines, path: str | Path) -> None:
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
