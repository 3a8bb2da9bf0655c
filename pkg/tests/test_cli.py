import hashlib
import json
from pathlib import Path

import pytest

from distillforge import synthetic
from distillforge.cli import main
from distillforge.corpus import parse_documents

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DATA = Path(__file__).resolve().parents[1] / "data"

TINY_RUN = {
    "tokenizer": {"vocab_size": 120},
    "model": {
        "teacher": {"d": 2, "a": 2, "h": 16, "i": 32, "max_positions": 48, "dropout": 0.0},
        "student": {"d": 1, "a": 2, "h": 16, "i": 32, "max_positions": 48, "dropout": 0.0},
    },
    "pretrain": {"epochs": 1, "batch_size": 16},
    "distill": {"micro_batch": 8, "accumulation_steps": 2, "epochs": 1},
    "finetune": {"n_samples": 1},
    "eval": {"last_n": 10},
}


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.mark.parametrize(
    "name,count,delta",
    [("robbert_v2", "116801344", "+0.69%"), ("distilbert", "74274112", "+0.37%"), ("bort", "45933376", "-0.14%")],
)
def test_params_reports_count_and_delta(capsys, name, count, delta):
    assert main(["params", "--config", str(CONFIGS / f"{name}.json")]) == 0
    out = capsys.readouterr().out
    assert f"params={count}" in out and delta in out


def test_exit_codes(tmp_path, capsys):
    assert main(["params"]) == 2
    assert main(["params", "--config", str(tmp_path / "nope.json")]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text('{"corpus": {"merge_q": 1}}', encoding="utf-8")
    assert main(["corpus-prep", "--config", str(bad), "--corpus", str(bad), "--out", str(tmp_path / "r")]) == 2
    assert main(["tokenizer-train", "--corpus", str(tmp_path / "missing.txt"), "--out", str(tmp_path / "r")]) == 3
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint at all")
    tokdir = tmp_path / "r" / "tokenizer"
    (tmp_path / "c.txt").write_text("a b c\na b c\n", encoding="utf-8")
    assert main(["tokenizer-train", "--corpus", str(tmp_path / "c.txt"), "--vocab-size", "20", "--out", str(tmp_path / "r")]) == 0
    assert main(["eval-pppl", "--model", str(junk), "--tokenizer", str(tokdir), "--data", str(tmp_path / "c.txt"),
                 "--out", str(tmp_path / "r")]) == 4
    undecodable = tmp_path / "u.txt"
    undecodable.write_bytes(b"ok\n\xfe\xff\n")
    assert main(["corpus-prep", "--corpus", str(undecodable), "--out", str(tmp_path / "r")]) == 5
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("distillforge: error:") for line in err)
    assert main(["no-such-command"]) == 2


def test_corpus_prep_identity_at_zero_merge(tmp_path):
    src = tmp_path / "docs.txt"
    src.write_text(synthetic.synthetic_documents_text(10, 4, seed=1), encoding="utf-8")
    digest = _sha(src)
    out = tmp_path / "run"
    assert main(["corpus-prep", "--corpus", str(src), "--merge-p", "0", "--out", str(out)]) == 0
    lines = (out / "corpus" / "sequences.txt").read_text(encoding="utf-8").splitlines()
    expected = [x for d in parse_documents(src.read_text(encoding="utf-8")) for x in d.lines]
    assert lines == expected
    assert _sha(src) == digest


def test_end_to_end_pipeline(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(TINY_RUN), encoding="utf-8")
    out = tmp_path / "run"
    common = ["--config", str(cfg), "--out", str(out)]
    assert main(["synth", "--out", str(out), "--docs", "12", "--lines", "5", "--heldout", "10", "--task-size", "60"]) == 0
    data = out / "data"
    inputs = {p: _sha(p) for p in data.iterdir()}
    assert main(["tokenizer-train", "--corpus", str(data / "corpus.txt"), *common]) == 0
    assert main(["corpus-prep", "--corpus", str(data / "corpus.txt"), "--tokenizer", str(out / "tokenizer"),
                 "--merge-p", "0.5", "--shuffle", "--shards", "2", *common]) == 0
    assert (out / "corpus" / "shard-001.txt").exists()
    assert (out / "reports" / "lengths.csv").read_text().startswith("bin_start,bin_end,count")
    seqs = str(out / "corpus" / "sequences.txt")
    assert main(["pretrain", "--corpus", seqs, "--tokenizer", str(out / "tokenizer"), *common]) == 0
    assert main(["distill", "--teacher", str(out / "checkpoints" / "teacher.ckpt"), "--corpus", seqs,
                 "--tokenizer", str(out / "tokenizer"), *common]) == 0
    student = str(out / "checkpoints" / "student.ckpt")
    assert main(["eval-pppl", "--model", student, "--tokenizer", str(out / "tokenizer"),
                 "--data", str(data / "heldout.txt"), *common]) == 0
    assert json.loads((out / "reports" / "pppl.json").read_text())["sequences"] == 10
    assert main(["eval-bias", "--model", student, "--tokenizer", str(out / "tokenizer"),
                 "--templates", str(data / "templates.txt"), *common]) == 0
    assert main(["finetune", "--model", student, "--tokenizer", str(out / "tokenizer"),
                 "--train", str(data / "sentiment.train.tsv"), "--val", str(data / "sentiment.val.tsv"),
                 "--test", str(data / "sentiment.test.tsv"), *common]) == 0
    assert main(["stats", "--corpus", seqs, "--tokenizer", str(out / "tokenizer"), *common]) == 0

    manifest = json.loads((out / "manifest.json").read_text())
    commands = [s["command"] for s in manifest["steps"]]
    assert commands == ["synth", "tokenizer-train", "corpus-prep", "pretrain", "distill", "eval-pppl",
                        "eval-bias", "finetune", "stats"]
    step = manifest["steps"][4]
    assert len(step["config_sha256"]) == 64 and step["inputs"]
    assert json.loads((out / "config.json").read_text())["tokenizer"]["vocab_size"] == 120
    log_lines = (out / "logs" / "distill.jsonl").read_text().splitlines()
    assert set(json.loads(log_lines[0])) == {"step", "l_ce", "l_mlm", "l_cos", "total", "lr"}
    for p, digest in inputs.items():
        assert _sha(p) == digest


def test_runs_are_reproducible(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps(TINY_RUN), encoding="utf-8")
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        common = ["--config", str(cfg), "--out", str(out), "--seed", "11"]
        assert main(["tokenizer-train", "--corpus", str(DATA / "heldout.txt"), *common]) == 0
        assert main(["pretrain", "--corpus", str(DATA / "heldout.txt"), "--tokenizer", str(out / "tokenizer"), *common]) == 0
        outputs.append((out / "checkpoints" / "teacher.ckpt").read_bytes())
    assert outputs[0] == outputs[1]


def test_bundled_smoke_pipeline(tmp_path):
    out = tmp_path / "run"
    common = ["--config", str(CONFIGS / "toy.json"), "--out", str(out)]
    tok = str(out / "tokenizer")
    seqs = str(out / "corpus" / "sequences.txt")
    assert main(["tokenizer-train", "--corpus", str(DATA / "corpus.txt"), *common]) == 0
    assert main(["corpus-prep", "--corpus", str(DATA / "corpus.txt"), "--tokenizer", tok, *common]) == 0
    assert main(["pretrain", "--corpus", seqs, "--tokenizer", tok, *common]) == 0
    assert main(["distill", "--teacher", str(out / "checkpoints" / "teacher.ckpt"), "--corpus", seqs,
                 "--tokenizer", tok, *common]) == 0
    assert main(["eval-pppl", "--model", str(out / "checkpoints" / "student.ckpt"), "--tokenizer", tok,
                 "--data", str(DATA / "heldout.txt"), *common]) == 0
    assert main(["eval-bias", "--model", str(out / "checkpoints" / "student.ckpt"), "--tokenizer", tok,
                 "--templates", str(DATA / "templates.txt"), *common]) == 0
