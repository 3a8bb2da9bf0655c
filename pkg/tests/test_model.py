import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import erf

from distillforge import autodiff as ad
from distillforge.model import (
    FORMAT_VERSION, MAGIC,
    CheckpointError, CheckpointFormatError, CheckpointShapeError, CheckpointVersionError,
    ConfigError, EncoderConfig, count_parameters, init_random, init_student_from_teacher,
    load_checkpoint, parameter_shapes, save_checkpoint, teacher_layer_for,
)

TINY = EncoderConfig(layers=2, heads=4, hidden=32, intermediate=48, vocab_size=23, max_positions=16, dropout=0.0)


def _bert_style_count(D, A, H, I, V, P):
    """Parameter bookkeeping written per block, independently of the library."""
    emb = V * H + P * H + 2 * H
    attention = 3 * (H * H + H) + (H * H + H) + 2 * H
    ffn = (H * I + I) + (I * H + H) + 2 * H
    mlm_head = (H * H + H) + 2 * H + V  # decoder weight tied to the embeddings
    return emb + D * (attention + ffn) + mlm_head


@pytest.mark.parametrize(
    "d,a,h,i,reference",
    [(12, 12, 768, 3072, 116e6), (6, 12, 768, 3072, 74e6), (4, 8, 768, 768, 46e6)],
)
def test_reference_sizes_within_three_percent(d, a, h, i, reference):
    n = count_parameters(EncoderConfig(d, a, h, i, 40000, 512))
    assert abs(n - reference) / reference <= 0.03


configs = st.builds(
    lambda d, a, mult, i, v, p: EncoderConfig(d, a, a * mult, i, v, p),
    st.integers(1, 12), st.integers(1, 12), st.integers(1, 64), st.integers(1, 4096),
    st.integers(5, 50000), st.integers(1, 1024),
)


@settings(max_examples=20, deadline=None)
@given(configs)
def test_count_matches_shapes_and_independent_formula(cfg):
    from_shapes = sum(math.prod(s) for s in parameter_shapes(cfg).values())
    assert count_parameters(cfg) == from_shapes
    assert from_shapes == _bert_style_count(cfg.layers, cfg.heads, cfg.hidden, cfg.intermediate,
                                            cfg.vocab_size, cfg.max_positions)


def test_instantiated_model_matches_count():
    assert init_random(TINY).num_parameters() == count_parameters(TINY)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(2, 3, 32, 48, 10)
    with pytest.raises(ConfigError):
        EncoderConfig(0, 4, 32, 48, 10)
    with pytest.raises(ConfigError):
        EncoderConfig.from_json({"d": 2, "a": 4, "h": 32, "i": 48, "vocab_size": 10, "oops": 1})
    assert EncoderConfig.from_json(TINY.to_json()) == TINY


def test_initialisation_statistics():
    cfg = EncoderConfig(1, 4, 64, 256, 500, 64)
    m = init_random(cfg, seed=3)
    w = m.params["embeddings.token"].data
    assert abs(w.std() - 0.02) < 0.001 and abs(w.mean()) < 0.001
    assert np.all(m.params["layers.0.attn_ln.gain"].data == 1)
    assert np.all(m.params["layers.0.ffn.in.bias"].data == 0)


# -- dual-route forward pass -------------------------------------------------------


def _np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_gelu(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def _reference_forward(sd, cfg, ids, mask):
    """Loop-over-heads numpy encoder, float64, used as an oracle."""
    sd = {k: v.astype(np.float64) for k, v in sd.items()}
    B, L = ids.shape
    x = _np_layer_norm(sd["embeddings.token"][ids] + sd["embeddings.position"][:L],
                       sd["embeddings.ln.gain"], sd["embeddings.ln.bias"])
    dh = cfg.hidden // cfg.heads
    for k in range(cfg.layers):
        p = lambda n: sd[f"layers.{k}.{n}"]
        out = np.zeros_like(x)
        for b in range(B):
            heads = []
            for h in range(cfg.heads):
                sl = slice(h * dh, (h + 1) * dh)
                q = (x[b] @ p("attn.query.weight") + p("attn.query.bias"))[:, sl]
                kk = (x[b] @ p("attn.key.weight") + p("attn.key.bias"))[:, sl]
                v = (x[b] @ p("attn.value.weight") + p("attn.value.bias"))[:, sl]
                s = q @ kk.T / np.sqrt(dh)
                s[:, ~mask[b]] = -np.inf
                a = np.exp(s - s.max(-1, keepdims=True))
                a /= a.sum(-1, keepdims=True)
                heads.append(a @ v)
            out[b] = np.concatenate(heads, -1) @ p("attn.output.weight") + p("attn.output.bias")
        x = _np_layer_norm(x + out, p("attn_ln.gain"), p("attn_ln.bias"))
        f = _np_gelu(x @ p("ffn.in.weight") + p("ffn.in.bias")) @ p("ffn.out.weight") + p("ffn.out.bias")
        x = _np_layer_norm(x + f, p("ffn_ln.gain"), p("ffn_ln.bias"))
    h = _np_layer_norm(_np_gelu(x @ sd["head.dense.weight"] + sd["head.dense.bias"]),
                       sd["head.ln.gain"], sd["head.ln.bias"])
    return x, h @ sd["embeddings.token"].T + sd["head.output_bias"]


def test_forward_matches_reference_implementation():
    m = init_random(TINY, seed=1)
    for p in m.parameters():  # larger weights so the check is not dominated by layer norm
        p.data = p.data * 10
    rng = np.random.default_rng(0)
    ids = rng.integers(5, TINY.vocab_size, size=(3, 7))
    mask = np.ones((3, 7), dtype=bool)
    mask[1, 5:] = False
    mask[2, 3:] = False
    out = m.forward(ids, mask)
    ref_hidden, ref_logits = _reference_forward(m.state_dict(), TINY, ids, mask)
    np.testing.assert_allclose(out.last_hidden.data, ref_hidden, atol=2e-4)
    np.testing.assert_allclose(m.mlm_logits(out.last_hidden).data, ref_logits, atol=2e-3)
    assert len(out.hidden_states) == TINY.layers + 1


def test_padding_does_not_change_real_positions():
    m = init_random(TINY, seed=2)
    ids = np.array([[1, 7, 8, 9, 2]])
    padded = np.array([[1, 7, 8, 9, 2, 0, 0, 0]])
    mask = np.array([[True] * 5 + [False] * 3])
    a = m.forward(ids).last_hidden.data
    b = m.forward(padded, mask).last_hidden.data[:, :5]
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_attention_rows_are_distributions():
    m = init_random(TINY, seed=2)
    out = m.forward(np.array([[1, 6, 7, 2, 0]]), np.array([[1, 1, 1, 1, 0]], bool), return_attentions=True)
    for probs in out.attentions:
        np.testing.assert_allclose(probs.data.sum(-1), 1.0, atol=1e-6)
        assert np.all(probs.data[..., 4] < 1e-12)


def test_input_validation():
    m = init_random(TINY)
    with pytest.raises(ValueError):
        m.forward(np.zeros((1, TINY.max_positions + 1), dtype=int))
    with pytest.raises(ValueError):
        m.forward(np.array([[TINY.vocab_size]]))
    with pytest.raises(ValueError):
        m.forward(np.array([1, 2, 3]))


def test_model_gradient_finite_difference():
    cfg = EncoderConfig(2, 2, 32, 40, 19, 8, dropout=0.0)
    m = init_random(cfg, seed=4).astype(np.float64)
    ids = np.array([[1, 5, 9, 4, 2], [1, 7, 6, 2, 0]])
    mask = ids != 0
    labels = np.array([9, 7])

    def loss_for(name):
        def f(x):
            m.params[name] = x
            logits = m.mlm_logits(m.forward(ids, mask).last_hidden, (np.array([0, 1]), np.array([3, 2])))
            return -ad.take(ad.log_softmax(logits), (np.arange(2), labels)).mean()
        return f

    for name in ("embeddings.token", "layers.0.attn.query.weight", "layers.1.ffn.in.weight", "head.ln.gain"):
        x = m.params[name]
        assert ad.finite_difference_check(loss_for(name), x, max_coords=25) <= 1e-3, name


# -- student construction ----------------------------------------------------------


def test_teacher_layer_mapping():
    assert [teacher_layer_for(k, 12, 6) for k in range(6)] == [0, 2, 4, 6, 8, 10]
    assert [teacher_layer_for(k, 4, 2) for k in range(2)] == [0, 2]


def test_student_copy_is_bit_exact():
    teacher = init_random(EncoderConfig(12, 2, 16, 24, 30, 8), seed=5)
    student = init_student_from_teacher(teacher, teacher.config.replace(layers=6), seed=9)
    for k, t in enumerate([0, 2, 4, 6, 8, 10]):
        for suffix in ("attn.query.weight", "ffn.out.bias", "ffn_ln.gain"):
            s_arr = student.params[f"layers.{k}.{suffix}"].data
            t_arr = teacher.params[f"layers.{t}.{suffix}"].data
            assert s_arr.tobytes() == t_arr.tobytes()
    assert student.params["embeddings.token"].data.tobytes() == teacher.params["embeddings.token"].data.tobytes()
    assert student.fresh_parameters == []
    student.params["embeddings.token"].data[0, 0] += 1
    assert teacher.params["embeddings.token"].data[0, 0] != student.params["embeddings.token"].data[0, 0]


def test_student_with_narrower_ffn_keeps_fresh_tensors():
    teacher = init_random(EncoderConfig(4, 2, 16, 64, 30, 8), seed=5)
    student = init_student_from_teacher(teacher, EncoderConfig(2, 2, 16, 16, 30, 8), seed=1)
    assert "layers.0.ffn.in.weight" in student.fresh_parameters
    assert "layers.0.attn.key.weight" not in student.fresh_parameters


def test_student_construction_errors():
    teacher = init_random(EncoderConfig(2, 2, 16, 24, 30, 8))
    with pytest.raises(ConfigError):
        init_student_from_teacher(teacher, EncoderConfig(2, 2, 32, 24, 30, 8))
    with pytest.raises(ConfigError):
        init_student_from_teacher(teacher, EncoderConfig(3, 2, 16, 24, 30, 8))


# -- checkpoints ---------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = init_random(TINY, seed=8)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path, expected_config=TINY)
    assert back.config == TINY
    for name, p in m.named_parameters():
        assert back.params[name].data.tobytes() == p.data.tobytes()
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_layout(tmp_path):
    m = init_random(TINY)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<8sII", raw)
    assert magic == MAGIC and version == FORMAT_VERSION
    header = json.loads(raw[16:16 + hlen])
    first = header["tensors"][0]
    arr = np.frombuffer(raw[16 + hlen + first["offset"]:][: first["nbytes"]], dtype="<f4")
    np.testing.assert_array_equal(arr.reshape(first["shape"]), m.params[first["name"]].data)


def test_checkpoint_errors(tmp_path):
    m = init_random(TINY)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()

    (tmp_path / "v.ckpt").write_bytes(raw[:8] + struct.pack("<I", 99) + raw[12:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "x.ckpt")
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path, expected_config=TINY.replace(hidden=64))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 400), st.integers(0, 255))
def test_corrupted_header_bytes_fail_cleanly(tmp_path_factory, index, value):
    path = tmp_path_factory.mktemp("fuzz") / "m.ckpt"
    small = EncoderConfig(1, 1, 4, 4, 6, 4)
    save_checkpoint(init_random(small), path)
    raw = bytearray(path.read_bytes())
    hlen = struct.unpack_from("<I", raw, 12)[0]
    raw[index % (16 + hlen)] = value
    path.write_bytes(bytes(raw))
    try:
        load_checkpoint(path)
    except CheckpointError:
        pass
