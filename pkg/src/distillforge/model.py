"""BERT-like encoder with a tied MLM head, student construction and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

LN_EPS = 1e-5
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layers: int
    heads: int
    hidden: int
    intermediate: int
    vocab_size: int
    max_positions: int = 512
    dropout: float = 0.1

    def __post_init__(self):
        for name in ("layers", "heads", "hidden", "intermediate", "vocab_size", "max_positions"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_json(self) -> dict:
        return {
            "d": self.layers,
            "a": self.heads,
            "h": self.hidden,
            "i": self.intermediate,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "dropout": self.dropout,
        }

    @classmethod
    def from_json(cls, obj: dict) -> EncoderConfig:
        keys = {"d", "a", "h", "i", "vocab_size", "max_positions", "dropout"}
        unknown = set(obj) - keys
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        missing = {"d", "a", "h", "i", "vocab_size"} - set(obj)
        if missing:
            raise ConfigError(f"missing encoder config keys: {sorted(missing)}")
        return cls(
            layers=int(obj["d"]),
            heads=int(obj["a"]),
            hidden=int(obj["h"]),
            intermediate=int(obj["i"]),
            vocab_size=int(obj["vocab_size"]),
            max_positions=int(obj.get("max_positions", 512)),
            dropout=float(obj.get("dropout", 0.1)),
        )

    def replace(self, **changes) -> EncoderConfig:
        return EncoderConfig(**{**asdict(self), **changes})


def parameter_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable tensor."""
    H, I, V, P = config.hidden, config.intermediate, config.vocab_size, config.max_positions
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (V, H),
        "embeddings.position": (P, H),
        "embeddings.ln.gain": (H,),
        "embeddings.ln.bias": (H,),
    }
    for k in range(config.layers):
        p = f"layers.{k}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attn.{proj}.weight"] = (H, H)
            shapes[p + f"attn.{proj}.bias"] = (H,)
        shapes[p + "attn_ln.gain"] = (H,)
        shapes[p + "attn_ln.bias"] = (H,)
        shapes[p + "ffn.in.weight"] = (H, I)
        shapes[p + "ffn.in.bias"] = (I,)
        shapes[p + "ffn.out.weight"] = (I, H)
        shapes[p + "ffn.out.bias"] = (H,)
        shapes[p + "ffn_ln.gain"] = (H,)
        shapes[p + "ffn_ln.bias"] = (H,)
    shapes["head.dense.weight"] = (H, H)
    shapes["head.dense.bias"] = (H,)
    shapes["head.ln.gain"] = (H,)
    shapes["head.ln.bias"] = (H,)
    # projection to the vocabulary reuses embeddings.token
    shapes["head.output_bias"] = (V,)
    return shapes


def count_parameters(config: EncoderConfig) -> int:
    """Closed-form parameter count (tied output projection)."""
    H, I, V, P, D = config.hidden, config.intermediate, config.vocab_size, config.max_positions, config.layers
    embeddings = V * H + P * H + 2 * H
    per_layer = 4 * (H * H + H) + 2 * H + (H * I + I) + (I * H + H) + 2 * H
    head = H * H + H + 2 * H + V
    return embeddings + D * per_layer + head


def _init_array(name: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith("bias"):
        return np.zeros(shape, dtype=np.float32)
    return rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)


class EncoderOutput(NamedTuple):
    hidden_states: list[Tensor]
    last_hidden: Tensor
    attentions: list[Tensor] | None = None


class EncoderModel:
    """Post-LN transformer encoder; no token-type embeddings, no pooler."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor], seed: int = 0):
        expected = parameter_shapes(config)
        if list(params) != list(expected):
            raise ConfigError("parameter names do not match the config layout")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ad.ShapeError(name, params[name].shape, shape)
        self.config = config
        self.params = params
        self.training = False
        self.rng = np.random.default_rng(seed)
        self.fresh_parameters: list[str] = []

    # -- bookkeeping -----------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def train(self) -> EncoderModel:
        self.training = True
        return self

    def eval(self) -> EncoderModel:
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool) -> EncoderModel:
        for p in self.params.values():
            p.requires_grad = flag
        return self

    def copy(self) -> EncoderModel:
        params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n) for n, p in self.params.items()}
        clone = EncoderModel(self.config, params)
        clone.training = self.training
        return clone

    def astype(self, dtype) -> EncoderModel:
        clone = self.copy()
        for p in clone.params.values():
            p.data = p.data.astype(dtype)
        return clone

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}

    # -- computation -----------------------------------------------------
    def _check_inputs(self, ids: np.ndarray) -> None:
        if ids.ndim != 2:
            raise ValueError(f"token ids must be (batch, length), got shape {ids.shape}")
        if ids.shape[1] > self.config.max_positions:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max positions {self.config.max_positions}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")

    def forward(self, ids, attention_mask=None, return_attentions: bool = False) -> EncoderOutput:
        ids = np.asarray(ids, dtype=np.int64)
        self._check_inputs(ids)
        B, L = ids.shape
        if attention_mask is None:
            attention_mask = np.ones((B, L), dtype=bool)
        attention_mask = np.asarray(attention_mask, dtype=bool)
        cfg, p = self.config, self.params
        drop = cfg.dropout if self.training else 0.0

        tok = ad.embedding(p["embeddings.token"], ids)
        pos = ad.embedding(p["embeddings.position"], np.arange(L))
        x = ad.layer_norm(tok + pos, p["embeddings.ln.gain"], p["embeddings.ln.bias"], LN_EPS)
        x = ad.dropout(x, drop, self.rng, self.training)
        hidden = [x]
        attentions = [] if return_attentions else None

        neg = np.finfo(x.dtype).min / 2
        bias = np.where(attention_mask, 0.0, neg).astype(x.dtype)[:, None, None, :]
        A, dh = cfg.heads, cfg.head_dim
        for k in range(cfg.layers):
            pre = f"layers.{k}."

            def heads(t: Tensor) -> Tensor:
                return ad.transpose(ad.reshape(t, (B, L, A, dh)), (0, 2, 1, 3))

            q = heads(ad.linear(x, p[pre + "attn.query.weight"], p[pre + "attn.query.bias"]))
            kt = heads(ad.linear(x, p[pre + "attn.key.weight"], p[pre + "attn.key.bias"]))
            v = heads(ad.linear(x, p[pre + "attn.value.weight"], p[pre + "attn.value.bias"]))
            scores = ad.scale(ad.matmul(q, ad.swap_last(kt)), 1.0 / math.sqrt(dh)) + Tensor(bias)
            probs = ad.softmax(scores)
            if attentions is not None:
                attentions.append(probs)
            probs = ad.dropout(probs, drop, self.rng, self.training)
            ctx = ad.reshape(ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)), (B, L, cfg.hidden))
            attn = ad.linear(ctx, p[pre + "attn.output.weight"], p[pre + "attn.output.bias"])
            attn = ad.dropout(attn, drop, self.rng, self.training)
            x = ad.layer_norm(x + attn, p[pre + "attn_ln.gain"], p[pre + "attn_ln.bias"], LN_EPS)

            h = ad.gelu(ad.linear(x, p[pre + "ffn.in.weight"], p[pre + "ffn.in.bias"]))
            h = ad.linear(h, p[pre + "ffn.out.weight"], p[pre + "ffn.out.bias"])
            h = ad.dropout(h, drop, self.rng, self.training)
            x = ad.layer_norm(x + h, p[pre + "ffn_ln.gain"], p[pre + "ffn_ln.bias"], LN_EPS)
            hidden.append(x)
        return EncoderOutput(hidden, x, attentions)

    __call__ = forward

    def mlm_logits(self, hidden: Tensor, positions=None) -> Tensor:
        """Vocabulary logits; ``positions`` is an optional (rows, cols) index pair."""
        p = self.params
        if positions is not None:
            hidden = ad.take(hidden, tuple(np.asarray(a, dtype=np.int64) for a in positions))
        h = ad.gelu(ad.linear(hidden, p["head.dense.weight"], p["head.dense.bias"]))
        h = ad.layer_norm(h, p["head.ln.gain"], p["head.ln.bias"], LN_EPS)
        return ad.linear(h, ad.transpose(p["embeddings.token"]), p["head.output_bias"])

    def predict_logits(self, ids, attention_mask=None, positions=None) -> np.ndarray:
        """Inference-mode logits as a plain array."""
        was_training = self.training
        self.training = False
        try:
            with ad.no_grad():
                out = self.forward(ids, attention_mask)
                return self.mlm_logits(out.last_hidden, positions).data
        finally:
            self.training = was_training


def init_random(config: EncoderConfig, seed: int = 0) -> EncoderModel:
    rng = np.random.default_rng(seed)
    params = {
        name: Tensor(_init_array(name, shape, rng), requires_grad=True, name=name)
        for name, shape in parameter_shapes(config).items()
    }
    return EncoderModel(config, params, seed=seed)


def teacher_layer_for(student_layer: int, teacher_layers: int, student_layers: int) -> int:
    return (student_layer * teacher_layers) // student_layers


def init_student_from_teacher(teacher: EncoderModel, student_config: EncoderConfig, seed: int = 0) -> EncoderModel:
    """Copy embeddings, head and evenly spaced layers from ``teacher``.

    Student layer ``k`` takes teacher layer ``floor(k * D_t / D_s)``.  Tensors
    whose shapes differ (e.g. a narrower feed-forward block) stay randomly
    initialised.
    """
    tcfg = teacher.config
    if student_config.hidden != tcfg.hidden:
        raise ConfigError(f"student hidden size {student_config.hidden} != teacher hidden size {tcfg.hidden}")
    if student_config.layers > tcfg.layers:
        raise ConfigError(f"student has {student_config.layers} layers, teacher only {tcfg.layers}")
    student = init_random(student_config, seed)
    fresh: list[str] = []
    for name, param in student.params.items():
        src = name
        if name.startswith("layers."):
            _, k, rest = name.split(".", 2)
            src = f"layers.{teacher_layer_for(int(k), tcfg.layers, student_config.layers)}.{rest}"
        source = teacher.params.get(src)
        if source is not None and source.shape == param.shape:
            param.data = source.data.astype(np.float32, copy=True)
        else:
            fresh.append(name)
    if fresh:
        log.info("student tensors left at random init (shape mismatch): %s", ", ".join(fresh))
    student.fresh_parameters = fresh
    return student


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"DFCKPT\x00\x00"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(model: EncoderModel, path: str | Path) -> None:
    """Write header + little-endian float32 payload (float64 models are narrowed)."""
    directory, offset = [], 0
    blobs = []
    for name, p in model.params.items():
        blob = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        directory.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "config": model.config.to_json(), "tensors": directory},
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path: str | Path, expected_config: EncoderConfig | None = None) -> EncoderModel:
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise CheckpointFormatError(f"{path}: truncated preamble")
    magic, version, header_len = _PREAMBLE.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREAMBLE.size
    if start + header_len > len(raw):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start:start + header_len].decode("utf-8"))
        if header["format_version"] != FORMAT_VERSION:
            raise CheckpointVersionError(f"{path}: header version {header['format_version']}")
        config = EncoderConfig.from_json(header["config"])
        directory = {t["name"]: t for t in header["tensors"]}
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header ({e})") from None

    shapes = parameter_shapes(config)
    if set(directory) != set(shapes):
        missing = sorted(set(shapes) - set(directory))[:3]
        extra = sorted(set(directory) - set(shapes))[:3]
        raise CheckpointFormatError(f"{path}: tensor directory mismatch (missing {missing}, unexpected {extra})")
    if expected_config is not None:
        want = parameter_shapes(expected_config)
        for name, shape in shapes.items():
            if want.get(name) != shape:
                raise CheckpointShapeError(
                    f"{path}: tensor {name} has shape {shape}, model expects {want.get(name)}"
                )
        if set(want) != set(shapes):
            raise CheckpointShapeError(f"{path}: layer count differs from the expected config")

    payload = memoryview(raw)[start + header_len:]
    params = {}
    for name, shape in shapes.items():
        entry = directory[name]
        try:
            stored_shape = tuple(int(n) for n in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointFormatError(f"{path}: bad directory entry for {name} ({e})") from None
        if stored_shape != shape:
            raise CheckpointShapeError(f"{path}: tensor {name} stored as {stored_shape}, config implies {shape}")
        if nbytes != 4 * int(np.prod(shape)) or offset < 0 or offset + nbytes > len(payload):
            raise CheckpointFormatError(f"{path}: truncated or inconsistent payload for {name}")
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype="<f4").astype(np.float32).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return EncoderModel(config, params)
