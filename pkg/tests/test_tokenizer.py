from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillforge import synthetic
from distillforge.tokenizer import (
    BOS, EOS, MASK, PAD, SPECIAL_TOKENS, UNK, WORD_START,
    Tokenizer, TokenizerError, Vocabulary, normalize, train_bpe,
)


def _reference_bpe(corpus, n_merges):
    """Textbook BPE on space-separated symbol strings, written independently."""
    words = Counter()
    for line in corpus:
        for w in line.split():
            words[" ".join([WORD_START, *w])] += 1
    merges = []
    for _ in range(n_merges):
        pairs = {}
        for w, c in words.items():
            syms = w.split(" ")
            for a, b in zip(syms, syms[1:]):
                pairs[(a, b)] = pairs.get((a, b), 0) + c
        if not pairs:
            break
        best = max(pairs.values())
        if best < 2:
            break
        pair = next(p for p, c in pairs.items() if c == best)
        merges.append(pair)
        new = Counter()
        for w, c in words.items():
            syms, out, i = w.split(" "), [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == pair:
                    out.append(syms[i] + syms[i + 1])
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            new[" ".join(out)] += c
        words = new
    return merges


@pytest.fixture(scope="module")
def corpus():
    return synthetic.grammar_sentences(300, seed=4)


@pytest.fixture(scope="module")
def tok(corpus):
    return train_bpe(corpus, 150)


def test_special_ids_are_fixed(tok):
    assert (PAD, BOS, EOS, UNK, MASK) == (0, 1, 2, 3, 4)
    assert tuple(tok.vocab.tokens[:5]) == SPECIAL_TOKENS


def test_merges_match_reference_implementation(corpus, tok):
    assert tok.merges == _reference_bpe(corpus, len(tok.merges))


def test_first_merge_on_repeated_letter():
    t = train_bpe(["aaaa"], 9)
    assert t.merges[0] == ("a", "a")


def test_round_trip_on_training_corpus(corpus, tok):
    for line in corpus:
        assert tok.decode(tok.encode(line)) == normalize(line)


def test_encode_adds_bos_eos(tok):
    ids = tok.encode("the cat")
    assert ids[0] == BOS and ids[-1] == EOS
    assert tok.encode("the cat", add_special=False) == ids[1:-1]


def test_unknown_characters_map_to_unk(tok):
    assert UNK in tok.encode("zzqx", add_special=False)


def test_decode_rejects_out_of_range(tok):
    with pytest.raises(TokenizerError):
        tok.decode([tok.vocab_size])


def test_decode_skips_specials(tok):
    ids = tok.encode("the dog")
    assert tok.decode([PAD, MASK, *ids, PAD]) == "the dog"


def test_vocab_size_never_exceeds_target(corpus):
    for target in (60, 100, 400):
        assert train_bpe(corpus, target).vocab_size <= target


def test_training_is_deterministic(corpus):
    assert train_bpe(corpus, 120).merges == train_bpe(corpus, 120).merges


def test_bad_inputs():
    with pytest.raises(TokenizerError):
        train_bpe([], 100)
    with pytest.raises(TokenizerError):
        train_bpe(["abc"], 8)  # 5 specials + 4 base symbols already
    with pytest.raises(TokenizerError):
        Vocabulary(["a", "b"])
    with pytest.raises(TokenizerError):
        Tokenizer(Vocabulary(list(SPECIAL_TOKENS) + ["a"]), [("a", "b"), ("a", "b")])


def test_special_spelling_in_text_is_not_special():
    t = train_bpe(["<s> <s> <s> x"], 40)
    ids = t.encode("<s>", add_special=False)
    assert BOS not in ids


def test_save_load_round_trip(tmp_path, tok, corpus):
    tok.save(tmp_path)
    back = Tokenizer.load(tmp_path)
    assert back.vocab.tokens == tok.vocab.tokens and back.merges == tok.merges
    assert all(back.encode(s) == tok.encode(s) for s in corpus[:50])


words = st.text(alphabet="abcde", min_size=1, max_size=8)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(words, min_size=1, max_size=6).map(" ".join), min_size=1, max_size=15),
       st.integers(20, 80))
def test_round_trip_property(lines, target):
    try:
        t = train_bpe(lines, target)
    except TokenizerError:
        return
    for line in lines:
        assert t.decode(t.encode(line)) == normalize(line)
        assert all(0 <= i < t.vocab_size for i in t.encode(line))
