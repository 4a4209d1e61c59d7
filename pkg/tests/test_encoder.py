import json
import struct
from pathlib import Path

import numpy as np
import pytest
from oracles import central_difference, embed_rows, relative_error

from nametune.core import SeededRng, TokenSequence
from nametune.encoder import (
    FeatureCacheEncoder,
    HashTokenizer,
    LinearEncoder,
    ToyTransformerEncoder,
    decode_feature_cache,
    encode_feature_cache,
    encode_video,
    make_encoder,
    read_feature_cache,
    uniform_frame_indices,
    write_feature_cache,
)
from nametune.errors import ConfigurationError, EmptyInputError, FormatError, SequenceLengthError

DATA = Path(__file__).parent / "data"


def rand_seq(enc, length, seed):
    return TokenSequence(SeededRng(seed).normal((length, enc.space.d_token), 0.5))


@pytest.mark.parametrize("enc", [ToyTransformerEncoder(seed=1), LinearEncoder(seed=1)], ids=["toy", "linear"])
def test_encode_text_deterministic(enc):
    t = rand_seq(enc, 4, 0)
    a, b = enc.encode_text(t), enc.encode_text(t)
    assert a.shape == (enc.space.d_embed,) and a.tobytes() == b.tobytes()


@pytest.mark.parametrize("enc", [ToyTransformerEncoder(), LinearEncoder()], ids=["toy", "linear"])
def test_sequence_length_limits(enc):
    with pytest.raises(SequenceLengthError):
        enc.encode_text(TokenSequence.empty(enc.space.d_token))
    with pytest.raises(SequenceLengthError):
        enc.encode_text(rand_seq(enc, enc.space.max_seq_len + 1, 0))
    enc.encode_text(rand_seq(enc, enc.space.max_seq_len, 0))


def test_linear_zero_input_gives_zero():
    enc = LinearEncoder()
    assert np.all(enc.encode_text(TokenSequence(np.zeros((3, 16)))) == 0)


def test_linear_matches_padded_matrix_product():
    enc = LinearEncoder()
    t = rand_seq(enc, 5, 3)
    padded = np.zeros(enc.space.max_seq_len * enc.space.d_token)
    padded[: t.rows.size] = t.rows.astype(np.float64).ravel()
    assert np.allclose(enc.encode_text(t), enc.text_matrix.astype(np.float64) @ padded, rtol=0, atol=1e-12)


def test_toy_transformer_golden_snapshot():
    golden = json.loads((DATA / "toy_transformer_seed7.json").read_text())
    enc = ToyTransformerEncoder(seed=7)
    rows = (np.linspace(-1.0, 1.0, 48, dtype=np.float64).reshape(3, 16) * 0.5).astype(np.float32)
    out = enc.encode_text(TokenSequence(rows))
    assert enc.digest() == golden["weights_sha256"]
    np.testing.assert_allclose(out, golden["output"], rtol=1e-9, atol=1e-12)


def test_linear_vjp_is_matrix_block():
    enc = LinearEncoder()
    t = rand_seq(enc, 3, 1)
    cot = np.arange(enc.space.d_embed, dtype=np.float64) - 3
    g = enc.text_input_gradient(t, cot)
    w = enc.text_matrix.astype(np.float64)
    expected = (w.T @ cot)[: 3 * 16].reshape(3, 16)
    assert np.allclose(g, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("enc", [ToyTransformerEncoder(), LinearEncoder()], ids=["toy", "linear"])
def test_zero_cotangent_gives_zero_gradient(enc):
    g = enc.text_input_gradient(rand_seq(enc, 3, 2), np.zeros(enc.space.d_embed))
    assert g.shape == (3, enc.space.d_token) and np.all(g == 0)


@pytest.mark.parametrize("enc", [ToyTransformerEncoder(), LinearEncoder()], ids=["toy", "linear"])
def test_vjp_matches_finite_differences(enc):
    for draw in range(20):
        rng = SeededRng(draw)
        rows = rng.normal((3, enc.space.d_token), 0.5).astype(np.float64)
        cot = rng.normal(enc.space.d_embed).astype(np.float64)
        analytic = enc.text_input_gradient(TokenSequence(rows), cot)
        numeric = central_difference(lambda x: float(cot @ embed_rows(enc, x)), rows.astype(np.float32))
        assert relative_error(analytic, numeric) < 1e-4


def test_linear_logits_affine_in_offset():
    enc = LinearEncoder()
    base = rand_seq(enc, 4, 0).rows.astype(np.float64)
    e1, e2 = (SeededRng(s).normal(base.shape, 0.1).astype(np.float64) for s in (1, 2))
    v = SeededRng(3).normal(enc.space.d_embed).astype(np.float64)
    logit = lambda e: float(v @ embed_rows(enc, base + e))  # noqa: E731
    assert abs(logit(e1) + logit(e2) - logit(0 * e1) - logit(e1 + e2)) < 1e-5


def test_encode_video_examples():
    enc = LinearEncoder()
    f = SeededRng(0).normal(enc.d_frame)
    assert np.array_equal(encode_video(enc, [f]), enc.encode_visual(f))
    assert np.allclose(encode_video(enc, [f, -f]), 0, atol=1e-12)
    frames = SeededRng(1).normal((10, enc.d_frame))
    total = np.zeros(enc.space.d_embed)
    for fr in frames:
        total = total + enc.encode_visual(fr)
    assert np.allclose(encode_video(enc, frames), total / 10, atol=1e-6)
    with pytest.raises(EmptyInputError):
        encode_video(enc, [])


def test_uniform_frame_indices():
    assert uniform_frame_indices(10, 10) == list(range(10))
    assert uniform_frame_indices(1, 10) == [0] * 10
    assert uniform_frame_indices(100, 10) == list(range(5, 100, 10))
    for total in range(1, 40):
        for k in range(1, 12):
            idx = uniform_frame_indices(total, k)
            assert len(idx) == k and idx == sorted(idx) and 0 <= idx[0] and idx[-1] < total
            assert idx == [int(np.floor((i + 0.5) * total / k)) for i in range(k)]
    with pytest.raises(ConfigurationError):
        uniform_frame_indices(0, 3)


def test_weights_are_frozen():
    enc = ToyTransformerEncoder()
    for w in enc.weights().values():
        with pytest.raises(ValueError):
            w.flat[0] = 1.0


def test_tokenizer_deterministic_and_case_insensitive():
    tok = HashTokenizer(8, seed=3)
    assert tok("Pour Water") == tok("pour  water")
    assert len(tok("a b c")) == 3 and len(tok("")) == 0
    assert HashTokenizer(8, seed=3)("x") == tok("x")


def test_make_encoder():
    assert isinstance(make_encoder("linear", 2), LinearEncoder)
    assert make_encoder("toy_transformer", 2).digest() == ToyTransformerEncoder(seed=2).digest()
    with pytest.raises(ConfigurationError):
        make_encoder("clip")


def _random_features(n, d, seed):
    rng = SeededRng(seed)
    return {f"key-{rng.integers(0, 10**9)}-{i}": rng.normal(d) for i in range(n)}


def test_feature_cache_roundtrip_1000_entries(tmp_path):
    feats = _random_features(1000, 8, 0)
    path = tmp_path / "f.ntfc"
    write_feature_cache(path, feats)
    back = read_feature_cache(path)
    assert set(back) == set(feats)
    for k, v in feats.items():
        assert back[k].tobytes() == np.asarray(v, np.float32).tobytes()
    enc = FeatureCacheEncoder.load(path)
    assert enc.encode_visual(next(iter(feats))).tobytes() == np.asarray(feats[next(iter(feats))], np.float32).tobytes()


def test_feature_cache_layout():
    data = encode_feature_cache({"b": np.ones(2), "a": np.zeros(2)})
    assert data[:4] == b"NTFC"
    assert struct.unpack_from("<IIBQ", data, 4) == (1, 2, 0, 2)
    pos = 4 + struct.calcsize("<IIBQ")
    (klen,) = struct.unpack_from("<H", data, pos)
    assert data[pos + 2 : pos + 2 + klen] == b"a"  # sorted by key bytes
    assert len(data) == pos + 2 * (2 + 1 + 8)


def test_feature_cache_rejects_corruption():
    data = encode_feature_cache({"a": np.zeros(3)})
    with pytest.raises(FormatError):
        decode_feature_cache(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        decode_feature_cache(data[:-1])
    with pytest.raises(FormatError):
        decode_feature_cache(data + b"\0")


def test_feature_cache_encoder_text_delegation():
    enc = FeatureCacheEncoder({"k": np.zeros(8)}, text_encoder=LinearEncoder())
    assert enc.tokenize("a b").shape == (2, 16)
    with pytest.raises(ConfigurationError):
        FeatureCacheEncoder({"k": np.zeros(8)}).tokenize("x")
