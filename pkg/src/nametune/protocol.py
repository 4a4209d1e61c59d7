"""Few-shot evaluation: splits, episodes, hyperparameter selection and seed aggregation.

Two paradigms are supported. *Traditional* splits share one class set across
train/val/test; support sets subsample the train split and every seed is
scored on the full test split (all-way). *Meta-learning* splits partition the
classes; hyperparameters are chosen on meta-val episodes and each seed scores
one meta-test episode with the final-epoch model.
"""
from __future__ import annotations

import enum
import itertools
import json
import math
import statistics
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .baselines import (
    LAMBDA_GRID,
    TEXT_WEIGHT_GRID,
    linear_probe_fit,
    support_by_class,
    vl_prototype_build,
)
from .classify import ClassifierHead, PromptSpec, accuracy, build_head, ensemble_head
from .core import ClassEntry, Examples, SeededRng, Similarity, as_examples, relabel
from .errors import ConfigurationError, EmptyInputError, SamplingError
from .manifest import META_TAGS, TRADITIONAL_TAGS
from .textparams import Method, TextParameterSet
from .train import CheckpointPolicy, TrainConfig, default_config, default_grid, grid_points, train_run

RUN_RECORD_SCHEMA = 1


class Paradigm(str, enum.Enum):
    TRADITIONAL = "traditional"
    META_LEARNING = "meta_learning"


TUNING_METHODS = {m.value for m in Method}
BASELINE_METHODS = {"zero_shot", "linear_probe", "vl_prototype"}

DEFAULT_SEED_COUNTS = {
    (Paradigm.TRADITIONAL, "tuning"): 4,
    (Paradigm.META_LEARNING, "tuning"): 20,
    (Paradigm.TRADITIONAL, "linear_probe"): 5,
    (Paradigm.META_LEARNING, "linear_probe"): 100,
    (Paradigm.TRADITIONAL, "vl_prototype"): 32,
    (Paradigm.META_LEARNING, "vl_prototype"): 1000,
    (Paradigm.TRADITIONAL, "zero_shot"): 4,
    (Paradigm.META_LEARNING, "zero_shot"): 20,
}


def normalize_method(method) -> str:
    m = str(getattr(method, "value", method)).replace("-", "_").lower()
    if m not in TUNING_METHODS | BASELINE_METHODS:
        raise ConfigurationError(f"unknown method {method!r}")
    return m


def default_seeds(method, paradigm) -> list[int]:
    m = normalize_method(method)
    key = "tuning" if m in TUNING_METHODS else m
    return list(range(DEFAULT_SEED_COUNTS[(Paradigm(paradigm), key)]))


@dataclass(eq=False)
class DatasetSplit:
    """Per-part labeled features with labels indexing the global ``classes`` list."""

    paradigm: Paradigm
    classes: list[ClassEntry]
    parts: dict[str, Examples]

    def __post_init__(self):
        self.paradigm = Paradigm(self.paradigm)
        tags = TRADITIONAL_TAGS if self.paradigm is Paradigm.TRADITIONAL else META_TAGS
        unknown = set(self.parts) - set(tags)
        if unknown:
            raise ConfigurationError(f"parts {sorted(unknown)} do not belong to the {self.paradigm.value} paradigm")
        ids = [i for part in self.parts.values() for i in part.ids]
        if len(ids) != len(set(ids)):
            raise ConfigurationError("item ids overlap across parts")
        sets = {k: set(v.labels.tolist()) for k, v in self.parts.items()}
        if self.paradigm is Paradigm.TRADITIONAL:
            nonempty = [s for s in sets.values() if s]
            if any(s != nonempty[0] for s in nonempty):
                raise ConfigurationError("traditional parts must share one class set")
        else:
            keys = list(sets)
            for a in range(len(keys)):
                for b in range(a + 1, len(keys)):
                    if sets[keys[a]] & sets[keys[b]]:
                        raise ConfigurationError(f"meta-learning parts {keys[a]} and {keys[b]} share classes")

    def part(self, name: str) -> Examples:
        if name not in self.parts:
            raise ConfigurationError(f"split has no {name!r} part")
        return self.parts[name]

    def class_ids(self, name: str) -> list[int]:
        return sorted(set(self.part(name).labels.tolist()))

    @classmethod
    def from_manifest(cls, manifest, features: Mapping[str, np.ndarray], classes: Sequence[ClassEntry]):
        ids = manifest.class_ids
        buckets: dict[str, list] = {}
        for row in manifest.rows:
            key = manifest.feature_key(row)
            if key not in features:
                raise ConfigurationError(f"no feature for manifest item {row.id!r} (key {key!r})")
            buckets.setdefault(row.split, []).append((row.id, features[key], ids[row.class_name]))
        parts = {
            tag: Examples(np.stack([f for _, f, _ in items]), [y for _, _, y in items], [i for i, _, _ in items])
            for tag, items in buckets.items()
        }
        return cls(Paradigm(manifest.paradigm), list(classes), parts)


@dataclass(eq=False)
class Episode:
    n_way: int
    k_shot: int
    class_ids: list[int]
    classes: list[ClassEntry]
    support: Examples
    query: Examples

    def global_labels(self, local) -> np.ndarray:
        return np.asarray(self.class_ids)[np.asarray(local)]


def _take(rng: SeededRng, n: int, k: int) -> np.ndarray:
    return np.sort(rng.choice(n, k))


def sample_episode(
    split: DatasetSplit,
    n: int,
    k: int,
    rng: SeededRng,
    phase: Optional[str] = None,
    query_per_class: Optional[int] = None,
) -> Episode:
    """Sample ``n`` classes then ``k`` support items per class, uniformly without replacement.

    Traditional splits draw support from ``train`` and use all ``test`` items of
    the sampled classes as queries. Meta splits draw both from ``phase``
    (default ``meta_test``); queries are the remaining items, optionally
    subsampled to ``query_per_class``.
    """
    if n < 1 or k < 1:
        raise SamplingError(f"need n >= 1 and k >= 1, got n={n}, k={k}")
    if split.paradigm is Paradigm.TRADITIONAL:
        pool_part, query_part = split.part("train"), split.part("test")
        pool = split.class_ids("train")
    else:
        pool_part = query_part = split.part(phase or "meta_test")
        pool = split.class_ids(phase or "meta_test")
    if len(pool) < n:
        raise SamplingError(f"need {n} classes but the split offers {len(pool)}")
    chosen = [pool[i] for i in _take(rng, len(pool), n)]
    sup_idx, qry_idx, sup_lab, qry_lab = [], [], [], []
    for local, cid in enumerate(chosen):
        items = np.flatnonzero(pool_part.labels == cid)
        if split.paradigm is Paradigm.TRADITIONAL:
            if len(items) < k:
                raise SamplingError(f"class {cid} ({split.classes[cid].name_text!r}) has {len(items)} train items < k={k}")
            q_items = np.flatnonzero(query_part.labels == cid)
            if len(q_items) == 0:
                raise SamplingError(f"class {cid} ({split.classes[cid].name_text!r}) has no test items")
            picked = items[_take(rng, len(items), k)]
        else:
            if len(items) < k + 1:
                raise SamplingError(
                    f"class {cid} ({split.classes[cid].name_text!r}) has {len(items)} items; need k+1={k + 1}"
                )
            sel = _take(rng, len(items), k)
            picked = items[sel]
            q_items = np.delete(items, sel)
            if query_per_class is not None and query_per_class < len(q_items):
                q_items = q_items[_take(rng, len(q_items), query_per_class)]
        sup_idx.extend(picked)
        sup_lab.extend([local] * len(picked))
        qry_idx.extend(q_items)
        qry_lab.extend([local] * len(q_items))
    support = pool_part.subset(sup_idx)
    query = query_part.subset(qry_idx)
    support = Examples(support.features, sup_lab, support.ids)
    query = Examples(query.features, qry_lab, query.ids)
    local_classes = relabel([split.classes[c] for c in chosen])
    return Episode(n, k, chosen, local_classes, support, query)


def k_shot_subset(data: Examples, k: int, rng: SeededRng) -> Examples:
    """``k`` items per class from ``data``, labels untouched."""
    idx = []
    for cid in sorted(set(data.labels.tolist())):
        items = np.flatnonzero(data.labels == cid)
        if len(items) < k:
            raise SamplingError(f"class {cid} has {len(items)} items < k={k}")
        idx.extend(items[_take(rng, len(items), k)])
    return data.subset(idx)


def evaluate(model, query, enc=None, classes=None) -> float:
    """Top-1 accuracy of a parameter set, head, or any model with ``predict``."""
    query = as_examples(query)
    if len(query) == 0:
        raise EmptyInputError("evaluate needs a non-empty query set")
    if isinstance(model, TextParameterSet):
        model = build_head(enc, None, classes, model)
    if isinstance(model, ClassifierHead):
        return accuracy(model, query.features, query.labels)
    return float(np.mean(model.predict(query.features) == query.labels))


@dataclass
class RunRecord:
    method: str
    paradigm: str
    n_way: int
    k_shot: int
    seeds: list[int]
    accuracies: list[float]
    chosen_hyperparameters: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    ablation: dict = field(default_factory=dict)
    selection: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.seeds) != len(self.accuracies):
            raise ConfigurationError("one accuracy per seed is required")
        if not self.seeds:
            raise ConfigurationError("a run record needs at least one seed")

    @property
    def mean(self) -> float:
        return math.fsum(self.accuracies) / len(self.accuracies)

    @property
    def std(self) -> float:
        """Sample standard deviation; 0 for a single seed."""
        if len(self.accuracies) < 2:
            return 0.0
        return statistics.stdev(self.accuracies)

    def to_dict(self) -> dict:
        return {
            "schema_version": RUN_RECORD_SCHEMA,
            "method": self.method,
            "paradigm": self.paradigm,
            "n_way": self.n_way,
            "k_shot": self.k_shot,
            "seeds": list(self.seeds),
            "accuracies": list(self.accuracies),
            "mean": self.mean,
            "std": self.std,
            "chosen_hyperparameters": self.chosen_hyperparameters,
            "config": self.config,
            "ablation": self.ablation,
            "selection": self.selection,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "RunRecord":
        version = obj.get("schema_version")
        if version != RUN_RECORD_SCHEMA:
            raise ConfigurationError(f"unsupported run record schema {version!r}")
        return cls(
            method=obj["method"], paradigm=obj["paradigm"], n_way=obj["n_way"], k_shot=obj["k_shot"],
            seeds=list(obj["seeds"]), accuracies=list(obj["accuracies"]),
            chosen_hyperparameters=obj.get("chosen_hyperparameters", {}), config=obj.get("config", {}),
            ablation=obj.get("ablation", {}), selection=obj.get("selection", []),
        )


# -- running a protocol --------------------------------------------------------------


@dataclass
class Task:
    """One train/score problem: local classes, support, optional validation, and queries."""

    classes: list[ClassEntry]
    support: Examples
    query: Examples
    val: Optional[Examples]
    class_ids: list[int]


BatchObserver = Callable[[str, list], None]


def _fit_and_score(method: str, point: dict, task: Task, enc, base: dict, seed: int,
                   phase: str, on_batch: Optional[BatchObserver], result_sink: Optional[list] = None) -> float:
    """Train ``method`` with hyperparameters ``point`` on ``task`` and return query accuracy."""
    prompt_tpl = base.get("prompt", "a video of {}")
    if method in TUNING_METHODS:
        cfg_kwargs = {k: v for k, v in base.items() if k in TrainConfig.__dataclass_fields__}
        cfg = replace(default_config(method, **cfg_kwargs), **point, seed=seed)
        if task.val is None:
            cfg = replace(cfg, checkpoint_policy=CheckpointPolicy.FINAL_EPOCH)
        hook = None
        if on_batch is not None:
            ids = np.asarray(task.class_ids)
            hook = lambda labels: on_batch(phase, ids[labels].tolist())  # noqa: E731
        result = train_run(task.support, task.val, cfg, enc, task.classes, on_batch=hook)
        if result_sink is not None:
            result_sink.append(result)
        return evaluate(result.selected, task.query, enc, task.classes)
    if on_batch is not None and len(task.support):
        on_batch(phase, np.asarray(task.class_ids)[task.support.labels].tolist())
    if method == "zero_shot":
        prompt = PromptSpec.from_template(point.get("prompt", prompt_tpl), enc.tokenize)
        return evaluate(build_head(enc, prompt, task.classes), task.query)
    cosine = enc.space.similarity is Similarity.COSINE
    if method == "linear_probe":
        model = linear_probe_fit(task.support.features, task.support.labels, point["lambda"],
                                 n_classes=len(task.classes), normalize_inputs=cosine)
        return evaluate(model, task.query)
    templates = point.get("prompts", base.get("prompts") or [prompt_tpl])
    prompts = [PromptSpec.from_template(t, enc.tokenize) for t in templates]
    head = ensemble_head(enc, prompts, task.classes) if cosine else build_head(enc, prompts[0], task.classes)
    model = vl_prototype_build(head, support_by_class(task.support.features, task.support.labels,
                                                      len(task.classes)), point["text_weight"])
    return evaluate(model, task.query)


def default_method_grid(method: str) -> dict:
    if method in TUNING_METHODS:
        return default_grid(method)
    if method == "linear_probe":
        return {"lambda": list(LAMBDA_GRID)}
    if method == "vl_prototype":
        return {"text_weight": list(TEXT_WEIGHT_GRID)}
    return {}


def _points(method: str, grids: Optional[Mapping]) -> list[dict]:
    grids = default_method_grid(method) if grids is None else dict(grids)
    if method in TUNING_METHODS:
        return grid_points(grids)
    allowed = {"zero_shot": {"prompt"}, "linear_probe": {"lambda"}, "vl_prototype": {"text_weight", "prompts"}}
    unknown = set(grids) - allowed[method]
    if unknown:
        raise ConfigurationError(f"unknown grid axes {sorted(unknown)} for {method}")
    axes = list(grids)
    points = [dict(zip(axes, vals)) for vals in itertools.product(*(grids[a] for a in axes))]
    if not points:
        raise ConfigurationError("hyperparameter grid is empty")
    if method == "linear_probe" and "lambda" not in axes:
        raise ConfigurationError("linear_probe grid needs a 'lambda' axis")
    if method == "vl_prototype" and "text_weight" not in axes:
        raise ConfigurationError("vl_prototype grid needs a 'text_weight' axis")
    return points


def _select(scores: list[float]) -> int:
    best = 0
    for i, s in enumerate(scores):
        if s > scores[best]:
            best = i
    return best


def run_protocol(
    split: DatasetSplit,
    method,
    enc,
    k: int,
    seeds: Optional[Sequence[int]] = None,
    grids: Optional[Mapping] = None,
    n: Optional[int] = None,
    base: Optional[dict] = None,
    selection_episodes: int = 10,
    query_per_class: Optional[int] = 15,
    on_batch: Optional[BatchObserver] = None,
    on_result: Optional[Callable[[int, object], None]] = None,
) -> RunRecord:
    """Choose hyperparameters once on validation data, then score every seed.

    ``base`` holds fixed TrainConfig fields (epochs, prompt, ablation flag, ...).
    ``on_batch(phase, global_class_ids)`` sees every training batch; phases are
    ``"select"`` and ``"evaluate"``. ``on_result(seed, TrainResult)`` receives
    each evaluation run of a tuning method.
    """
    method = normalize_method(method)
    base = dict(base or {})
    seeds = list(default_seeds(method, split.paradigm) if seeds is None else seeds)
    if not seeds:
        raise ConfigurationError("run_protocol needs at least one seed")
    if base.get("ablation_random_names") and method not in ("name_tuning", "cona"):
        raise ConfigurationError(f"the random-name ablation does not apply to {method}")
    points = _points(method, grids)
    selection: list = []

    if split.paradigm is Paradigm.TRADITIONAL:
        n_all = len(split.class_ids("train"))
        if n is not None and n != n_all:
            raise ConfigurationError(f"traditional paradigm evaluates all-way ({n_all}); got n={n}")
        n = n_all
        if split.class_ids("train") != list(range(len(split.classes))):
            raise ConfigurationError("traditional split must cover every class")
        classes, ids = split.classes, list(range(len(split.classes)))
        val, test = split.part("val"), split.part("test")

        def task_for(seed: int) -> Task:
            if method == "zero_shot":
                return Task(classes, split.part("train").subset([]), test, val, ids)
            support = k_shot_subset(split.part("train"), k, SeededRng(seed).fork("support"))
            return Task(classes, support, test, val, ids)

        if len(points) > 1:
            sel_task = task_for(seeds[0])
            sel_task = Task(classes, sel_task.support, val, val, ids)
            scores = [_fit_and_score(method, p, sel_task, enc, base, seeds[0], "select", on_batch) for p in points]
        else:
            scores = [float("nan")]
        tasks = [task_for(s) for s in seeds]
    else:
        n = 5 if n is None else n
        # zero-shot never sees support, so its episodes are drawn independently of k
        k_draw = 1 if method == "zero_shot" else k

        def episode_task(rng: SeededRng, phase: str) -> Task:
            ep = sample_episode(split, n, k_draw, rng, phase=phase, query_per_class=query_per_class)
            return Task(ep.classes, ep.support, ep.query, None, ep.class_ids)

        if len(points) > 1:
            sel_rng = SeededRng(seeds[0]).fork("meta-val")
            sel_tasks = [episode_task(sel_rng.fork(e), "meta_val") for e in range(selection_episodes)]
            scores = [
                math.fsum(_fit_and_score(method, p, t, enc, base, seeds[0], "select", on_batch) for t in sel_tasks)
                / len(sel_tasks)
                for p in points
            ]
        else:
            scores = [float("nan")]
        tasks = [episode_task(SeededRng(s).fork("episode"), "meta_test") for s in seeds]

    best = points[_select(scores)]
    selection = [{"point": p, "score": s} for p, s in zip(points, scores)] if len(points) > 1 else []
    accs = []
    for s, t in zip(seeds, tasks):
        sink: list = []
        accs.append(_fit_and_score(method, best, t, enc, base, s, "evaluate", on_batch, sink))
        if on_result is not None and sink:
            on_result(s, sink[0])
    config = {
        "method": method,
        "paradigm": split.paradigm.value,
        "n_way": n,
        "k_shot": k,
        "base": base,
        "grids": grids if grids is not None else default_method_grid(method),
        "selection_episodes": selection_episodes if split.paradigm is Paradigm.META_LEARNING else None,
        "query_per_class": query_per_class if split.paradigm is Paradigm.META_LEARNING else None,
    }
    ablation = {"random_names": bool(base.get("ablation_random_names", False))}
    if ablation["random_names"]:
        ablation["alpha_forced_zero"] = True
    return RunRecord(method, split.paradigm.value, n, k, seeds, accs, best, config, ablation, selection)
