import numpy as np
import pytest
import scipy.optimize
from conftest import make_classes
from oracles import nearest_mean_predictions

from nametune.baselines import (
    LAMBDA_GRID,
    TEXT_WEIGHT_GRID,
    linear_probe_fit,
    logistic_objective,
    support_by_class,
    vl_prototype_build,
)
from nametune.classify import ClassifierHead, PromptSpec, build_head
from nametune.core import EmbeddingSpace, SeededRng
from nametune.errors import ConfigurationError


def test_grids():
    assert len(LAMBDA_GRID) == 96 and LAMBDA_GRID[0] == pytest.approx(1e-6) and LAMBDA_GRID[-1] == pytest.approx(1e6)
    assert len(TEXT_WEIGHT_GRID) == 16
    assert TEXT_WEIGHT_GRID[0] == pytest.approx(1e-2) and TEXT_WEIGHT_GRID[-1] == pytest.approx(1e2)
    ratios = np.diff(np.log(LAMBDA_GRID))
    assert np.allclose(ratios, ratios[0])


def blobs(seed=0, n_classes=3, per=6, d=5, spread=0.1):
    rng = SeededRng(seed)
    centers = rng.normal((n_classes, d)).astype(np.float64) * 3
    x = np.concatenate([c + spread * rng.normal((per, d)) for c in centers])
    y = np.repeat(np.arange(n_classes), per)
    return x, y


def test_logistic_gradient_matches_finite_differences():
    x, y = blobs()
    w = SeededRng(1).normal(3 * 5 + 3).astype(np.float64)
    err = scipy.optimize.check_grad(lambda p: logistic_objective(p, x, y, 3, 0.3)[0],
                                    lambda p: logistic_objective(p, x, y, 3, 0.3)[1], w)
    assert err < 1e-5


def test_separable_training_accuracy():
    x, y = blobs(n_classes=2)
    model = linear_probe_fit(x, y, 1e-6)
    assert np.mean(model.predict(x) == y) == 1.0
    assert model.objective <= model.initial_objective


def test_strong_regularization_shrinks_weights():
    x, y = blobs()
    model = linear_probe_fit(x, y, 1e6)
    assert np.linalg.norm(model.weight) < 1e-2


def test_probe_errors_and_determinism():
    x, y = blobs()
    with pytest.raises(ConfigurationError):
        linear_probe_fit(x, np.zeros_like(y), 1.0)
    with pytest.raises(ConfigurationError):
        linear_probe_fit(x, y, 0.0)
    a, b = linear_probe_fit(x, y, 0.1), linear_probe_fit(x, y, 0.1)
    assert a.weight.tobytes() == b.weight.tobytes()


def cos_head(seed, n=3, d=6):
    return ClassifierHead(SeededRng(seed).normal((n, d)), EmbeddingSpace(4, d, "cosine", 0.05, 8))


def test_vl_prototype_cosine_formula():
    head = cos_head(0)
    support = [SeededRng(10 + i).normal((2, 6)).astype(np.float64) for i in range(3)]
    model = vl_prototype_build(head, support, 0.7)
    for i in range(3):
        t = head.class_text_embeddings[i]
        v = support[i] / np.linalg.norm(support[i], axis=1, keepdims=True)
        raw = 0.7 * t / np.linalg.norm(t) + v.mean(axis=0)
        assert np.allclose(model.prototypes[i], raw / np.linalg.norm(raw), atol=1e-12)
    assert np.allclose(np.linalg.norm(model.prototypes, axis=1), 1)


def test_vl_prototype_errors():
    head = cos_head(0)
    with pytest.raises(ConfigurationError):
        vl_prototype_build(head, [np.ones((1, 6))] * 2 + [np.zeros((0, 6))], 1.0)
    with pytest.raises(ConfigurationError):
        vl_prototype_build(head, [np.ones((1, 6))] * 3, 0.0)


def test_vl_prototype_permutation_and_duplication():
    head = cos_head(1)
    support = [SeededRng(20 + i).normal((3, 6)).astype(np.float64) for i in range(3)]
    base = vl_prototype_build(head, support, 2.0).prototypes
    perm = [2, 0, 1]
    permuted = ClassifierHead(head.class_text_embeddings[perm], head.space)
    assert np.allclose(vl_prototype_build(permuted, [support[i] for i in perm], 2.0).prototypes, base[perm])
    doubled = [np.concatenate([s, s]) for s in support]
    assert np.allclose(vl_prototype_build(head, doubled, 2.0).prototypes, base, atol=1e-12)


def test_vl_prototype_limits_on_toy(toy_enc):
    classes = make_classes(toy_enc, 4)
    head = build_head(toy_enc, PromptSpec.from_template("a video of {}", toy_enc.tokenize), classes)
    rng = SeededRng(3)
    support = [rng.normal((3, 8)).astype(np.float64) for _ in range(4)]
    queries = rng.normal((100, 8)).astype(np.float64)
    text_dom = vl_prototype_build(head, support, 1e9).predict(queries)
    assert np.array_equal(text_dom, head.predict(queries))
    vis_dom = vl_prototype_build(head, support, 1e-9).predict(queries)
    feats, labels = np.concatenate(support), np.repeat(np.arange(4), 3)
    assert np.array_equal(vis_dom, nearest_mean_predictions(feats, labels, queries, 4, "cosine"))


def test_support_by_class():
    groups = support_by_class(np.arange(8.0).reshape(4, 2), [1, 0, 1, 1], 3)
    assert [len(g) for g in groups] == [1, 3, 0]
