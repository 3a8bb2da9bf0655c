"""Run configuration: one JSON document, strict about unknown keys."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .distill import DistillConfig, PretrainConfig
from .model import ConfigError, EncoderConfig


def _strict(cls, obj: dict, section: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**obj)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from None


@dataclass(frozen=True)
class TokenizerSection:
    vocab_size: int = 200


@dataclass(frozen=True)
class CorpusSection:
    merge_p: float = 0.0
    merge_seed: int = 0
    shuffle: bool = False
    shuffle_seed: int = 0
    shards: int = 1
    bin_width: int = 40
    cutoff: int = 512


@dataclass(frozen=True)
class FinetuneSection:
    kind: str = "sequence"
    num_labels: int = 2
    truncation: str = "keep-first"
    metric: str = "accuracy"
    n_samples: int = 5
    seed: int = 0


@dataclass(frozen=True)
class EvalSection:
    last_n: int = 50000
    batch_size: int = 64
    t1: str = "he"
    t2: str = "she"


TOY_TEACHER = {"d": 4, "a": 4, "h": 64, "i": 256, "max_positions": 64, "dropout": 0.0}
TOY_STUDENT = {"d": 2, "a": 4, "h": 64, "i": 256, "max_positions": 64, "dropout": 0.0}


@dataclass
class RunConfig:
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    teacher: dict = field(default_factory=lambda: dict(TOY_TEACHER))
    student: dict = field(default_factory=lambda: dict(TOY_STUDENT))
    student_init: str = "teacher"
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    eval: EvalSection = field(default_factory=EvalSection)

    SECTIONS = ("tokenizer", "corpus", "model", "pretrain", "distill", "finetune", "eval")

    @classmethod
    def from_dict(cls, obj: dict) -> RunConfig:
        if not isinstance(obj, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(obj) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        if "tokenizer" in obj:
            cfg.tokenizer = _strict(TokenizerSection, obj["tokenizer"], "tokenizer")
        if "corpus" in obj:
            cfg.corpus = _strict(CorpusSection, obj["corpus"], "corpus")
        if "model" in obj:
            model = obj["model"]
            if not isinstance(model, dict) or set(model) - {"teacher", "student", "student_init"}:
                raise ConfigError("section 'model' accepts only teacher, student, student_init")
            for role in ("teacher", "student"):
                if role in model:
                    shape = dict(model[role])
                    # validate now; vocab_size may be filled from the tokenizer later
                    EncoderConfig.from_json({"vocab_size": 1, **shape})
                    setattr(cfg, role, shape)
            cfg.student_init = model.get("student_init", "teacher")
            if cfg.student_init not in ("teacher", "random"):
                raise ConfigError("model.student_init must be 'teacher' or 'random'")
        if "pretrain" in obj:
            cfg.pretrain = _strict(PretrainConfig, obj["pretrain"], "pretrain")
        if "distill" in obj:
            cfg.distill = _strict(DistillConfig, obj["distill"], "distill")
        if "finetune" in obj:
            cfg.finetune = _strict(FinetuneSection, obj["finetune"], "finetune")
        if "eval" in obj:
            cfg.eval = _strict(EvalSection, obj["eval"], "eval")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from None
        return cls.from_dict(obj)

    def to_dict(self) -> dict:
        return {
            "tokenizer": asdict(self.tokenizer),
            "corpus": asdict(self.corpus),
            "model": {"teacher": self.teacher, "student": self.student, "student_init": self.student_init},
            "pretrain": asdict(self.pretrain),
            "distill": asdict(self.distill),
            "finetune": asdict(self.finetune),
            "eval": asdict(self.eval),
        }

    def encoder_config(self, role: str, vocab_size: int) -> EncoderConfig:
        shape = {"vocab_size": vocab_size, **getattr(self, role)}
        return EncoderConfig.from_json(shape)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()
