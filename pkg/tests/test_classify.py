import math

import numpy as np
import pytest
from conftest import make_classes
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import class_probs

from nametune.classify import (
    ClassifierHead,
    PromptSpec,
    build_head,
    class_probabilities,
    ensemble_head,
    predict,
    predict_batch,
    similarities,
)
from nametune.core import EmbeddingSpace, SeededRng, TokenSequence, concat
from nametune.errors import ConfigurationError, DegenerateInputError, NumericError, SequenceLengthError
from nametune.textparams import Method, init_parameters


def head(rows, similarity="dot", tau=1.0):
    rows = np.asarray(rows, dtype=np.float64)
    return ClassifierHead(rows, EmbeddingSpace(4, rows.shape[1], similarity, tau, 8))


def test_single_class_probability_one():
    assert class_probabilities([1.0, 2.0], head([[0.3, -1.0]])).tolist() == [1.0]


def test_identical_classes_uniform():
    p = class_probabilities([0.2, 0.7], head([[1.0, 2.0]] * 4, "cosine", 0.01))
    assert np.allclose(p, 0.25, atol=1e-12)


def test_two_class_hand_value():
    p = class_probabilities([1.0, 0.0], head([[1.0, 0.0], [0.0, 1.0]]))
    assert abs(p[0] - math.e / (math.e + 1)) < 1e-12
    assert abs(p[0] - 0.73106) < 1e-5


def test_cosine_zero_norm_rejected():
    with pytest.raises(DegenerateInputError):
        class_probabilities([0.0, 0.0], head([[1.0, 0.0]], "cosine"))
    with pytest.raises(NumericError):
        class_probabilities([np.nan, 0.0], head([[1.0, 0.0]]))


def test_head_validation():
    with pytest.raises(ConfigurationError):
        head(np.zeros((0, 2)))
    with pytest.raises(NumericError):
        head([[np.inf, 0.0]])


def test_predict_examples():
    h = head(np.eye(3))
    assert predict([0.2, 0.5, 0.3], h) == 1
    assert predict([0.5, 0.5], head(np.eye(2))) == 0


def test_small_temperature_no_false_ties():
    # exp underflow would equalize probabilities; prediction must still follow similarities
    h = head([[1.0, 0.0], [0.9, 0.1]], "cosine", 1e-6)
    assert predict([0.0, 1.0], h) == 1


def rand_instance(seed, n=None, d=None):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(1, 6))
    d = d or int(rng.integers(1, 5))
    kind = ["cosine", "dot"][int(rng.integers(0, 2))]
    tau = float(rng.choice([0.05, 0.5, 1.0, 2.0]))
    return rng.normal(size=d), rng.normal(size=(n, d)), kind, tau


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_probabilities_match_literal_formula(seed):
    v, t, kind, tau = rand_instance(seed)
    p = class_probabilities(v, head(t, kind, tau))
    assert np.max(np.abs(p - class_probs(v, t, kind, tau))) < 1e-6
    assert abs(p.sum() - 1) <= 1e-6 and np.all((p >= 0) & (p <= 1))


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 10))
def test_prediction_invariant_to_temperature(seed, tau2):
    v, t, kind, tau = rand_instance(seed)
    sims = [float(x) for x in similarities(v, head(t, kind))]
    brute = max(range(len(sims)), key=lambda i: (sims[i], -i))
    assert predict(v, head(t, kind, tau)) == predict(v, head(t, kind, tau2)) == brute


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_permutation_equivariance(seed):
    v, t, kind, tau = rand_instance(seed, n=5)
    perm = np.random.default_rng(seed).permutation(5)
    p = class_probabilities(v, head(t, kind, tau))
    pp = class_probabilities(v, head(t[perm], kind, tau))
    assert np.allclose(pp, p[perm], atol=1e-12)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_lower_temperature_sharpens(seed):
    v, t, kind, _ = rand_instance(seed, n=3)
    s = similarities(v, head(t, kind))
    if np.ptp(s) < 1e-6:
        return
    assert class_probabilities(v, head(t, kind, 0.5)).max() > class_probabilities(v, head(t, kind, 1.0)).max()


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
def test_cosine_prediction_scale_invariant(seed, scale):
    v, t, _, _ = rand_instance(seed)
    assert predict(v, head(t, "cosine")) == predict(scale * v, head(t * scale, "cosine"))


def test_prompt_spec():
    tok = lambda s: TokenSequence(np.zeros((len(s.split()), 2)), s)  # noqa: E731
    assert PromptSpec.from_template("a video of {}", tok).tokenized_prefix.source_text == "a video of"
    assert len(PromptSpec.from_template("{}", tok).tokenized_prefix) == 0
    for bad in ["a video of", "{} {}", "a {} video"]:
        with pytest.raises(ConfigurationError):
            PromptSpec.from_template(bad, tok)


def test_build_head_plain_rows(toy_enc):
    classes = make_classes(toy_enc, 4)
    prompt = PromptSpec.from_template("a video of {}", toy_enc.tokenize)
    h = build_head(toy_enc, prompt, classes)
    for c in classes:
        direct = toy_enc.encode_text(concat(prompt.tokenized_prefix, c.name_tokens))
        assert h.class_text_embeddings[c.class_id].tobytes() == direct.tobytes()


def test_build_head_zero_params_bit_identical(toy_enc):
    classes = make_classes(toy_enc, 4)
    prompt = PromptSpec.from_template("a video of {}", toy_enc.tokenize)
    params = init_parameters(Method.NAME_TUNING, classes, 0, SeededRng(0), prompt=prompt)
    a = build_head(toy_enc, prompt, classes).class_text_embeddings
    b = build_head(toy_enc, None, classes, params).class_text_embeddings
    assert a.tobytes() == b.tobytes()


def test_build_head_offset_locality(toy_enc):
    classes = make_classes(toy_enc, 5)
    prompt = PromptSpec.from_template("a video of {}", toy_enc.tokenize)
    params = init_parameters(Method.NAME_TUNING, classes, 0, SeededRng(0), prompt=prompt)
    base = build_head(toy_enc, None, classes, params).class_text_embeddings
    params.offsets[3] = params.offsets[3] + 0.1
    moved = build_head(toy_enc, None, classes, params).class_text_embeddings
    assert np.array_equal(moved[:3], base[:3]) and np.array_equal(moved[4], base[4])
    assert not np.array_equal(moved[3], base[3])
    direct = toy_enc.encode_text(params.assemble(classes[3]))
    assert moved[3].tobytes() == direct.tobytes()


def test_build_head_over_length_names_class(toy_enc):
    classes = make_classes(toy_enc, 2)
    long = " ".join(["word"] * toy_enc.space.max_seq_len)
    prompt = PromptSpec.from_template(long + " {}", toy_enc.tokenize)
    with pytest.raises(SequenceLengthError, match="class 0"):
        build_head(toy_enc, prompt, classes)


def test_ensemble_rules(toy_enc):
    classes = make_classes(toy_enc, 3)
    p1 = PromptSpec.from_template("a video of {}", toy_enc.tokenize)
    p2 = PromptSpec.from_template("a photo of a person doing {}", toy_enc.tokenize)
    single = build_head(toy_enc, p1, classes).class_text_embeddings
    unit = single / np.linalg.norm(single, axis=1, keepdims=True)
    assert np.allclose(ensemble_head(toy_enc, [p1], classes).class_text_embeddings, unit, atol=1e-12)
    assert np.allclose(ensemble_head(toy_enc, [p1, p1], classes).class_text_embeddings, unit, atol=1e-12)
    other = build_head(toy_enc, p2, classes).class_text_embeddings
    u2 = other / np.linalg.norm(other, axis=1, keepdims=True)
    expected = (unit + u2) / np.linalg.norm(unit + u2, axis=1, keepdims=True)
    assert np.allclose(ensemble_head(toy_enc, [p1, p2], classes).class_text_embeddings, expected, atol=1e-12)


def test_predict_batch_matches_single():
    rng = SeededRng(0)
    h = head(rng.normal((4, 3)), "cosine", 0.1)
    feats = rng.normal((20, 3))
    assert predict_batch(feats, h).tolist() == [predict(f, h) for f in feats]
