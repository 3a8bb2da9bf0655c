"""Command-line entry point: ``distillforge <subcommand> [flags]``.

Every subcommand writes under ``--out`` using the layout::

    config.json  manifest.json  checkpoints/  logs/  reports/

and appends a step (argv, config hash, seed, input digests, outputs) to
``manifest.json``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import corpus as corpus_mod
from . import synthetic
from .config import RunConfig
from .distill import distill_run, pretrain_mlm
from .finetune import (
    DataError,
    TaskSpec,
    load_sequence_task,
    load_token_task,
    random_search,
)
from .metrics import bias_score, load_templates, pseudo_perplexity
from .model import (
    CheckpointError,
    ConfigError,
    EncoderConfig,
    count_parameters,
    init_random,
    init_student_from_teacher,
    load_checkpoint,
    save_checkpoint,
)
from .tokenizer import Tokenizer, TokenizerError, train_bpe

log = logging.getLogger("distillforge")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_CHECKPOINT = 4
EXIT_DATA = 5

# Published reference sizes at V=40000, P=512, keyed by (D, A, H, I)
REFERENCE_PARAMS = {
    (12, 12, 768, 3072): ("12-layer base", 116e6),
    (6, 12, 768, 3072): ("6-layer student", 74e6),
    (4, 8, 768, 768): ("4-layer narrow student", 46e6),
}


class MissingInput(Exception):
    pass


# -- run directory helpers ------------------------------------------------------------


class RunDir:
    def __init__(self, root: str | Path, cfg: RunConfig, args: argparse.Namespace):
        self.root = Path(root)
        for sub in ("checkpoints", "logs", "reports"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        (self.root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(p.relative_to(self.root)))
        return p

    def record_input(self, path: str | Path) -> Path:
        path = Path(path)
        if not path.exists():
            raise MissingInput(f"input not found: {path}")
        if path.is_dir():
            h = hashlib.sha256()
            for f in sorted(path.iterdir()):
                if f.is_file():
                    h.update(f.name.encode())
                    h.update(f.read_bytes())
            self.inputs[str(path)] = h.hexdigest()
        else:
            self.inputs[str(path)] = hashlib.sha256(path.read_bytes()).hexdigest()
        return path

    def finish(self, command: str, summary: dict | None = None) -> None:
        manifest_path = self.root / "manifest.json"
        manifest = {"version": __version__, "steps": []}
        if manifest_path.exists():
            try:
                manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                pass
        manifest.setdefault("steps", []).append(
            {
                "command": command,
                "argv": self.args.argv,
                "config_sha256": self.cfg.digest(),
                "seed": self.args.seed,
                "inputs": self.inputs,
                "outputs": sorted(set(self.outputs)),
                "summary": summary or {},
                "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
            }
        )
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _load_tokenizer(run: RunDir, path) -> Tokenizer:
    path = run.record_input(path)
    try:
        return Tokenizer.load(path)
    except FileNotFoundError as e:
        raise MissingInput(str(e)) from None


def _load_model(run: RunDir, path):
    return load_checkpoint(run.record_input(path))


def _seeded(cfg_seed: int, override: int | None) -> int:
    return cfg_seed if override is None else override


def _read_sequences(run: RunDir, path) -> list[str]:
    path = run.record_input(path)
    try:
        return corpus_mod.read_lines(path)
    except UnicodeDecodeError as e:
        raise corpus_mod.CorpusDecodeError(path, e.start, e.reason) from None


# -- subcommands ---------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig, run: RunDir) -> dict:
    seed = _seeded(0, args.seed)
    data = run.root / "data"
    text = synthetic.synthetic_documents_text(args.docs, args.lines, seed, bias_rate=args.bias_rate)
    run.path("data", "corpus.txt").write_text(text, encoding="utf-8")
    synthetic.write_lines(synthetic.grammar_sentences(args.heldout, seed + 1), run.path("data", "heldout.txt"))
    synthetic.write_lines(synthetic.bias_templates(), run.path("data", "templates.txt"))
    sent = synthetic.sentiment_examples(args.task_size, seed + 2)
    n = len(sent)
    for name, part in (("train", sent[: n * 8 // 10]), ("val", sent[n * 8 // 10: n * 9 // 10]), ("test", sent[n * 9 // 10:])):
        synthetic.write_lines([f"{y}\t{t}" for y, t in part], run.path("data", f"sentiment.{name}.tsv"))
    return {"data_dir": str(data)}


def cmd_tokenizer_train(args, cfg: RunConfig, run: RunDir) -> dict:
    lines = _read_sequences(run, args.corpus)
    vocab_size = args.vocab_size or cfg.tokenizer.vocab_size
    tok = train_bpe(lines, vocab_size)
    out = run.root / "tokenizer"
    tok.save(out)
    run.outputs += ["tokenizer/vocab.txt", "tokenizer/merges.txt"]
    print(f"trained tokenizer: {tok.vocab_size} tokens, {len(tok.merges)} merges -> {out}")
    return {"vocab_size": tok.vocab_size, "merges": len(tok.merges)}


def cmd_corpus_prep(args, cfg: RunConfig, run: RunDir) -> dict:
    path = run.record_input(args.corpus)
    docs = corpus_mod.load_documents(path)
    c = cfg.corpus
    p = c.merge_p if args.merge_p is None else args.merge_p
    records = corpus_mod.merge_sequences(docs, corpus_mod.MergePolicy(p, _seeded(c.merge_seed, args.seed)))
    shuffle = c.shuffle if args.shuffle is None else args.shuffle
    if shuffle:
        records = corpus_mod.shuffle_records(records, _seeded(c.shuffle_seed, args.seed))
    corpus_mod.write_records(records, run.path("corpus", "sequences.txt"))
    shards = args.shards or c.shards
    if shards > 1:
        for k, shard in enumerate(corpus_mod.split_shards(records, shards)):
            corpus_mod.write_records(shard, run.path("corpus", f"shard-{k:03d}.txt"))
    summary = {"documents": len(docs), "records": len(records), "merge_p": p, "shuffled": shuffle}
    if args.tokenizer:
        tok = _load_tokenizer(run, args.tokenizer)
        hist = corpus_mod.length_histogram(records, tok, c.bin_width, c.cutoff)
        run.path("reports", "lengths.csv").write_text(hist.to_csv(), encoding="utf-8")
        run.path("reports", "lengths.txt").write_text(hist.summary() + "\n", encoding="utf-8")
        summary["histogram"] = hist.summary()
    print(f"{len(docs)} documents -> {len(records)} sequences (merge p={p}, shuffled={shuffle})")
    return summary


def cmd_stats(args, cfg: RunConfig, run: RunDir) -> dict:
    lines = _read_sequences(run, args.corpus)
    tok = _load_tokenizer(run, args.tokenizer)
    hist = corpus_mod.length_histogram(lines, tok, args.bin_width or cfg.corpus.bin_width, args.cutoff or cfg.corpus.cutoff)
    run.path("reports", "lengths.csv").write_text(hist.to_csv(), encoding="utf-8")
    sys.stdout.write(hist.to_csv())
    print(hist.summary())
    return {"histogram": hist.summary()}


def _encode_corpus(tok: Tokenizer, lines: list[str], max_positions: int) -> list[list[int]]:
    return [corpus_mod.truncate_keep_first(tok.encode(s), max_positions) for s in lines if s]


def cmd_pretrain(args, cfg: RunConfig, run: RunDir) -> dict:
    tok = _load_tokenizer(run, args.tokenizer)
    lines = _read_sequences(run, args.corpus)
    mcfg = cfg.encoder_config(args.role, tok.vocab_size)
    pcfg = replace(cfg.pretrain, seed=_seeded(cfg.pretrain.seed, args.seed))
    model = init_random(mcfg, pcfg.seed)
    with open(run.path("logs", f"pretrain-{args.role}.jsonl"), "w", encoding="utf-8") as logf:
        history = pretrain_mlm(model, _encode_corpus(tok, lines, mcfg.max_positions), pcfg, logf)
    ckpt = run.path("checkpoints", f"{args.role}.ckpt")
    save_checkpoint(model, ckpt)
    print(f"pre-trained {args.role}: final MLM loss {history[-1]:.4f} -> {ckpt}" if history else f"saved {ckpt}")
    return {"epoch_losses": history, "parameters": model.num_parameters()}


def cmd_distill(args, cfg: RunConfig, run: RunDir) -> dict:
    tok = _load_tokenizer(run, args.tokenizer)
    teacher = _load_model(run, args.teacher)
    lines = _read_sequences(run, args.corpus)
    scfg = cfg.encoder_config("student", teacher.config.vocab_size)
    dcfg = replace(cfg.distill, seed=_seeded(cfg.distill.seed, args.seed))
    if cfg.student_init == "teacher":
        student = init_student_from_teacher(teacher, scfg, dcfg.seed)
    else:
        student = init_random(scfg, dcfg.seed)
    corpus = _encode_corpus(tok, lines, min(scfg.max_positions, teacher.config.max_positions))
    with open(run.path("logs", "distill.jsonl"), "w", encoding="utf-8") as logf:
        result = distill_run(teacher, student, corpus, dcfg, logf)
    ckpt = run.path("checkpoints", "student.ckpt")
    save_checkpoint(result.student, ckpt)
    epochs = [vars(e) for e in result.epoch_losses]
    run.path("reports", "distill_epochs.json").write_text(json.dumps(epochs, indent=2) + "\n", encoding="utf-8")
    last = f"final total {epochs[-1]['total']:.4f}" if epochs else "no epochs"
    print(f"distilled student ({student.num_parameters()} params, {last}) -> {ckpt}")
    return {"epochs": epochs, "effective_batch_size": dcfg.effective_batch_size}


def cmd_eval_pppl(args, cfg: RunConfig, run: RunDir) -> dict:
    tok = _load_tokenizer(run, args.tokenizer)
    model = _load_model(run, args.model)
    lines = _read_sequences(run, args.data)
    last_n = args.last_n if args.last_n is not None else cfg.eval.last_n
    lines = corpus_mod.take_last_shard(lines, last_n)
    result = pseudo_perplexity(model, lines, tok, batch_size=cfg.eval.batch_size)
    report = {"pppl": result.pppl, "sequences": result.num_sequences, "predictions": result.num_predictions}
    run.path("reports", "pppl.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"PPPL {result.pppl:.4f} over {result.num_sequences} sequences ({result.num_predictions} predictions)")
    return report


def cmd_eval_bias(args, cfg: RunConfig, run: RunDir) -> dict:
    tok = _load_tokenizer(run, args.tokenizer)
    model = _load_model(run, args.model)
    templates = load_templates(run.record_input(args.templates))
    t1, t2 = args.t1 or cfg.eval.t1, args.t2 or cfg.eval.t2
    report = bias_score(model, templates, t1, t2, tok)
    run.path("reports", "bias.csv").write_text(report.to_csv(), encoding="utf-8")
    sys.stdout.write(report.to_csv())
    return {"aggregate": report.aggregate, "clamped": report.clamped}


def cmd_finetune(args, cfg: RunConfig, run: RunDir) -> dict:
    tok = _load_tokenizer(run, args.tokenizer)
    encoder = _load_model(run, args.model)
    f = cfg.finetune
    task = TaskSpec(f.kind, f.num_labels, f.truncation, f.metric)
    if task.kind == "sequence":
        splits = [load_sequence_task(run.record_input(p)) for p in (args.train, args.val, args.test)]
    else:
        splits = [load_token_task(run.record_input(p)) for p in (args.train, args.val, args.test)]
    result = random_search(encoder, task, tok, *splits, n=f.n_samples, seed=_seeded(f.seed, args.seed))
    run.path("reports", "finetune.json").write_text(result.to_json() + "\n", encoding="utf-8")
    for k, e in enumerate(result.entries):
        mark = "*" if k == result.selected else " "
        print(f"{mark} run {k}: lr={e.sample.learning_rate:.2e} accum={e.sample.gradient_accumulation_steps} "
              f"wd={e.sample.weight_decay:.3f} validation={e.validation:.4f}")
    ci = f" +/- {result.test.ci:.4f}" if result.test.ci is not None else ""
    print(f"test {task.metric}: {result.test.value:.4f}{ci}")
    return {"selected": result.selected, "test": result.test.value}


def _encoder_configs_from_file(path: Path) -> list[tuple[str, EncoderConfig]]:
    obj = json.loads(path.read_text(encoding="utf-8"))
    if "d" in obj:
        return [("model", EncoderConfig.from_json(obj))]
    cfg = RunConfig.from_dict(obj)
    out = []
    for role in ("teacher", "student"):
        shape = getattr(cfg, role)
        if "vocab_size" not in shape:
            raise ConfigError(f"model.{role}.vocab_size is required to count parameters")
        out.append((role, cfg.encoder_config(role, shape["vocab_size"])))
    return out


def cmd_params(args, cfg: RunConfig, run: RunDir | None) -> dict:
    path = Path(args.config)
    if not path.exists():
        raise MissingInput(f"input not found: {path}")
    try:
        configs = _encoder_configs_from_file(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None
    summary = {}
    for role, mc in configs:
        n = count_parameters(mc)
        line = f"{role}: D={mc.layers} A={mc.heads} H={mc.hidden} I={mc.intermediate} V={mc.vocab_size} P={mc.max_positions} params={n} ({n / 1e6:.2f} M)"
        ref = REFERENCE_PARAMS.get((mc.layers, mc.heads, mc.hidden, mc.intermediate))
        if ref is not None:
            name, value = ref
            line += f"; reference {name}: {value / 1e6:.0f} M, delta {100.0 * (n - value) / value:+.2f}%"
        print(line)
        summary[role] = n
    return summary


COMMANDS = {
    "synth": cmd_synth,
    "tokenizer-train": cmd_tokenizer_train,
    "corpus-prep": cmd_corpus_prep,
    "stats": cmd_stats,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "eval-pppl": cmd_eval_pppl,
    "eval-bias": cmd_eval_bias,
    "params": cmd_params,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default="run", help="run directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="distillforge", description="Desk-scale masked-LM distillation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic demo corpus, templates and task")
    p.add_argument("--docs", type=int, default=100)
    p.add_argument("--lines", type=int, default=8)
    p.add_argument("--heldout", type=int, default=100)
    p.add_argument("--task-size", type=int, default=5000)
    p.add_argument("--bias-rate", type=float, default=0.25, help="fraction of skewed pronoun lines")

    p = sub.add_parser("tokenizer-train", parents=[common], help="train a BPE tokenizer")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-size", type=int)

    p = sub.add_parser("corpus-prep", parents=[common], help="merge, shuffle and shard a document corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--merge-p", type=float)
    p.add_argument("--shuffle", dest="shuffle", action="store_true", default=None)
    p.add_argument("--no-shuffle", dest="shuffle", action="store_false")
    p.add_argument("--shards", type=int)
    p.add_argument("--tokenizer", help="tokenizer dir; enables the length histogram")

    p = sub.add_parser("stats", parents=[common], help="sequence-length histogram")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--bin-width", type=int)
    p.add_argument("--cutoff", type=int)

    p = sub.add_parser("pretrain", parents=[common], help="MLM pre-training of a teacher")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--role", choices=("teacher", "student"), default="teacher")

    p = sub.add_parser("distill", parents=[common], help="distil a student from a teacher checkpoint")
    p.add_argument("--teacher", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tokenizer", required=True)

    p = sub.add_parser("finetune", parents=[common], help="random-search fine-tuning on a labelled task")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)

    p = sub.add_parser("eval-pppl", parents=[common], help="pseudo-perplexity on a line corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--last-n", type=int, help="score only the final N sequences")

    p = sub.add_parser("eval-bias", parents=[common], help="log-probability bias score")
    p.add_argument("--model", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--templates", required=True)
    p.add_argument("--t1")
    p.add_argument("--t2")

    sub.add_parser("params", parents=[common], help="exact parameter count for an encoder config")
    return parser


def _limit_threads():
    n = os.environ.get("DISTILLFORGE_THREADS")
    if not n:
        return None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    limiter = _limit_threads()
    try:
        if args.command == "params":
            if not args.config:
                raise ConfigError("params needs --config")
            cmd_params(args, RunConfig(), None)
            return EXIT_OK
        if args.config and not Path(args.config).exists():
            raise MissingInput(f"config not found: {args.config}")
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        run = RunDir(args.out, cfg, args)
        summary = COMMANDS[args.command](args, cfg, run)
        run.finish(args.command, summary)
        return EXIT_OK
    except MissingInput as e:
        return _fail(EXIT_MISSING, e)
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING, e)
    except CheckpointError as e:
        return _fail(EXIT_CHECKPOINT, e)
    except (ConfigError, TokenizerError) as e:
        return _fail(EXIT_CONFIG, e)
    except (DataError, corpus_mod.CorpusDecodeError, UnicodeDecodeError) as e:
        return _fail(EXIT_DATA, e)
    except ValueError as e:
        return _fail(EXIT_CONFIG, e)
    finally:
        if limiter is not None:
            limiter.unregister()


def _fail(code: int, err: Exception) -> int:
    msg = " ".join(str(err).split())
    print(f"distillforge: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
