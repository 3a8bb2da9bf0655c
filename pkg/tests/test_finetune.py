import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distillforge import finetune as ft
from distillforge import synthetic
from distillforge.finetune import (
    ACCUMULATION_CHOICES, DataError, HyperparameterSample, RunEntry, SequenceExample, TaskSpec,
    TokenExample, accuracy_with_ci, attach_head, encode_examples, load_sequence_task, load_token_task,
    micro_f1, random_search, sample_hyperparameters, select_best,
)
from distillforge.model import EncoderConfig, init_random
from distillforge.tokenizer import BOS, EOS, train_bpe


def test_search_space_over_many_draws():
    draws = sample_hyperparameters(10_000, seed=0)
    lrs = np.array([d.learning_rate for d in draws])
    wds = np.array([d.weight_decay for d in draws])
    assert lrs.min() >= 1e-6 and lrs.max() <= 1e-4
    assert wds.min() >= 0 and wds.max() <= 0.1
    assert {d.gradient_accumulation_steps for d in draws} == set(ACCUMULATION_CHOICES)
    # log-uniform: the median sits near the geometric mean 1e-5
    assert abs(math.log10(np.median(lrs)) + 5) < 0.05
    assert all((d.num_train_epochs, d.per_device_train_batch_size, d.seed, d.max_grad_norm) == (3, 8, 1, 1.0)
               for d in draws[:50])


def test_default_search_draws_five_reproducibly():
    assert len(sample_hyperparameters()) == 5
    assert sample_hyperparameters(5, 3) == sample_hyperparameters(5, 3)
    assert sample_hyperparameters(5, 3) != sample_hyperparameters(5, 4)


def test_accuracy_ci_normal_approximation():
    res = accuracy_with_ci([1, 1, 0, 1, 0, 1, 1, 1], [1, 1, 1, 1, 0, 0, 1, 1])
    assert res.value == 0.75
    assert res.ci == pytest.approx(1.96 * math.sqrt(0.75 * 0.25 / 8))
    with pytest.raises(ValueError):
        accuracy_with_ci([], [])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_micro_f1_matches_sklearn(pairs):
    metrics = pytest.importorskip("sklearn.metrics")
    pred, gold = map(list, zip(*pairs))
    expected = metrics.f1_score(gold, pred, labels=[1, 2, 3], average="micro", zero_division=0)
    assert micro_f1(pred, gold, outside_label=0) == pytest.approx(expected, abs=1e-12)


def test_loaders(tmp_path):
    seq = tmp_path / "s.tsv"
    seq.write_text("1\tgood film\npos\tnice\n\n", encoding="utf-8")
    assert load_sequence_task(seq, ["neg", "pos"]) == [SequenceExample(1, "good film"), SequenceExample(1, "nice")]
    (tmp_path / "bad.tsv").write_text("no tab here\n", encoding="utf-8")
    with pytest.raises(DataError):
        load_sequence_task(tmp_path / "bad.tsv")
    tok = tmp_path / "t.conll"
    tok.write_text("the O\ncat NOUN\n\nruns VERB\n", encoding="utf-8")
    assert load_token_task(tok, synthetic.TAGS) == [TokenExample(["the", "cat"], [0, 1]), TokenExample(["runs"], [2])]


def test_token_labels_go_on_first_piece():
    tk = train_bpe(["aa bb", "aa bb"], 12)
    ids, labels = encode_examples([TokenExample(["aab", "bb"], [1, 2])], TaskSpec("token", 3), tk, 64)
    assert ids[0][0] == BOS and ids[0][-1] == EOS
    pieces = len(tk.encode_word("aab"))
    assert pieces > 1
    assert labels[0] == [-100, 1] + [-100] * (pieces - 1) + [2, -100]


def test_select_best_tie_breaks_to_lowest_index():
    s = HyperparameterSample(1e-5, 0.0, 2)
    entries = [RunEntry(s, v, None) for v in (0.5, 0.9, 0.9, 0.1)]
    assert select_best(entries) == 1


@pytest.fixture(scope="module")
def small_setup():
    sent = [SequenceExample(*x) for x in synthetic.sentiment_examples(120, seed=1)]
    tok = train_bpe([e.text for e in sent], 120)
    enc = init_random(EncoderConfig(1, 2, 16, 32, tok.vocab_size, 32, 0.0), seed=0)
    return tok, enc, sent[:60], sent[60:90], sent[90:]


def test_test_split_is_touched_only_after_selection(small_setup, monkeypatch):
    tok, enc, train, val, test = small_setup
    events = []
    real_run, real_eval = ft.finetune_run, ft.evaluate

    def spy_run(task_model, tr, va, sample, tokenizer):
        assert tr is train and va is val
        events.append("run")
        return real_run(task_model, tr, va, sample, tokenizer)

    def spy_eval(task_model, examples, *args, **kw):
        events.append("test" if examples is test else "val")
        return real_eval(task_model, examples, *args, **kw)

    monkeypatch.setattr(ft, "finetune_run", spy_run)
    monkeypatch.setattr(ft, "evaluate", spy_eval)
    res = random_search(enc, TaskSpec("sequence", 2), tok, train, val, test, n=3, seed=0)
    assert events.count("test") == 1 and events[-1] == "test"
    assert events.count("run") == 3
    assert len(res.entries) == 3 and 0 <= res.selected < 3


def test_random_search_leaves_encoder_untouched(small_setup):
    tok, enc, train, val, test = small_setup
    before = {n: p.data.copy() for n, p in enc.named_parameters()}
    random_search(enc, TaskSpec("sequence", 2), tok, train, val, test, n=1, seed=0)
    for n, p in enc.named_parameters():
        np.testing.assert_array_equal(p.data, before[n])


def test_selected_run_has_best_validation(small_setup):
    tok, enc, train, val, test = small_setup
    res = random_search(enc, TaskSpec("sequence", 2), tok, train, val, test, n=3, seed=2)
    assert res.entries[res.selected].validation == max(e.validation for e in res.entries)
    assert '"selected"' in res.to_json()


def test_token_task_runs_and_reports_f1():
    data = [TokenExample(*x) for x in synthetic.tagging_examples(60, seed=0)]
    tok = train_bpe([" ".join(e.words) for e in data], 100)
    enc = init_random(EncoderConfig(1, 2, 16, 32, tok.vocab_size, 32, 0.0), seed=0)
    task = TaskSpec("token", 3, metric="micro-f1")
    res = random_search(enc, task, tok, data[:40], data[40:50], data[50:],
                        samples=[HyperparameterSample(1e-4, 0.0, 2)])
    assert res.test.ci is None and 0.0 <= res.test.value <= 1.0


def test_head_shares_the_encoder():
    enc = init_random(EncoderConfig(1, 2, 16, 32, 30, 32, 0.0))
    tm = attach_head(enc, TaskSpec("sequence", 4))
    assert tm.encoder is enc
    assert tm.weight.shape == (16, 4)
    logits = tm.forward(np.array([[BOS, 7, 8, EOS]]), np.ones((1, 4), bool))
    assert logits.shape == (1, 4)


def test_bad_labels_raise():
    tk = train_bpe(["a b", "a b"], 12)
    with pytest.raises(DataError):
        encode_examples([SequenceExample(5, "a")], TaskSpec("sequence", 2), tk, 16)
