"""Regularized cross-entropy training of text parameters through a frozen encoder.

Objective for a batch B:

    J = -sum_{(x, y) in B} log p(y | x) + alpha * 1/2 * sum_i ||eps_i||^2

with p the softmax over similarities between the visual embedding and the
embedding of each class's assembled text input. Only name offsets are
penalized. Gradients come from torch autograd in float64; the encoder's
weights are plain tensors outside the graph, so they never receive gradient.
"""
from __future__ import annotations

import enum
import itertools
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.optimize
import torch

from .classify import DEFAULT_PROMPT, PromptSpec, accuracy, build_head
from .core import ClassEntry, Examples, SeededRng, Similarity, as_examples, check_class_set, derive_seed
from .errors import ConfigurationError, DegenerateInputError, NumericError
from .textparams import Method, TextParameterSet, init_parameters

log = logging.getLogger(__name__)

SGD_MOMENTUM = 0.9
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class CheckpointPolicy(str, enum.Enum):
    BEST_VALIDATION = "best_validation"
    FINAL_EPOCH = "final_epoch"


@dataclass(frozen=True)
class TrainConfig:
    method: Method
    optimizer: str = "adamw"
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 20
    alpha: float = 0.0
    checkpoint_policy: CheckpointPolicy = CheckpointPolicy.BEST_VALIDATION
    seed: int = 0
    l_context: int = 0
    prompt: str = DEFAULT_PROMPT
    ablation_random_names: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method.parse(self.method))
        object.__setattr__(self, "checkpoint_policy", CheckpointPolicy(self.checkpoint_policy))
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigurationError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if not self.alpha >= 0:
            raise ConfigurationError("alpha must be >= 0")

    @property
    def effective_alpha(self) -> float:
        # random-name ablation trains offsets without the penalty
        return 0.0 if self.ablation_random_names else float(self.alpha)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["method"] = self.method.value
        out["checkpoint_policy"] = self.checkpoint_policy.value
        return out


DEFAULTS = {
    Method.COOP: dict(optimizer="sgd", epochs=50, learning_rate=2e-3, l_context=16, alpha=0.0),
    Method.COOP_CSC: dict(optimizer="sgd", epochs=50, learning_rate=2e-3, l_context=16, alpha=0.0),
    Method.NAME_TUNING: dict(optimizer="adamw", epochs=20, learning_rate=1e-3, alpha=1.0),
    Method.CONA: dict(optimizer="adamw", epochs=20, learning_rate=1e-5, l_context=4, alpha=1.0),
}

DEFAULT_GRIDS = {
    Method.COOP: {"l_context": [8, 16], "learning_rate": [6.25e-5, 5e-4, 2e-3, 4e-3]},
    Method.COOP_CSC: {"l_context": [8, 16], "learning_rate": [6.25e-5, 5e-4, 2e-3, 4e-3]},
    Method.NAME_TUNING: {"learning_rate": [1e-5, 1e-4, 1e-3, 4e-3], "alpha": [0.01, 0.1, 1.0, 10.0]},
    Method.CONA: {"alpha": [1.0, 5.0, 10.0, 20.0]},
}


def default_config(method, **overrides) -> TrainConfig:
    method = Method.parse(method)
    return TrainConfig(method=method, **{**DEFAULTS[method], **overrides})


def default_grid(method) -> dict:
    return {k: list(v) for k, v in DEFAULT_GRIDS[Method.parse(method)].items()}


# -- objective -----------------------------------------------------------------


def _split(params: TextParameterSet, leaves):
    it = iter(leaves)
    ctx = next(it) if params.shared_context is not None else None
    cctx = [next(it) for _ in params.class_contexts] if params.class_contexts is not None else None
    offs = [next(it) for _ in params.offsets] if params.offsets is not None else None
    return ctx, cctx, offs


def _const(a) -> torch.Tensor:
    return torch.from_numpy(np.asarray(a, dtype=np.float64))


def class_embeddings(params: TextParameterSet, leaves, enc, classes: Sequence[ClassEntry]) -> torch.Tensor:
    """Differentiable ``N x d_embed`` text embeddings of every assembled class input."""
    ctx, cctx, offs = _split(params, leaves)
    rows = []
    for entry in classes:
        i = entry.class_id
        if params.method is Method.NAME_TUNING:
            prefix = _const(params.fixed_prompt.tokenized_prefix.rows)
        elif params.method is Method.COOP_CSC:
            prefix = cctx[i]
        else:
            prefix = ctx
        name = _const(params.base_name(entry).rows)
        if offs is not None:
            name = name + offs[i]
        seq = torch.cat([prefix, name], dim=0)
        enc.check_length(seq.shape[0], f"class {i} ({entry.name_text!r})")
        rows.append(enc.text_forward(seq))
    return torch.stack(rows)


def _objective(params, leaves, data: Examples, enc, classes, alpha: float) -> torch.Tensor:
    _, _, offs = _split(params, leaves)
    total = torch.zeros((), dtype=torch.float64)
    if len(data):
        feats = data.features
        bad = np.flatnonzero(~np.all(np.isfinite(feats), axis=1))
        if bad.size:
            raise NumericError(f"non-finite visual embedding at batch item {int(bad[0])}")
        labels = data.labels
        if labels.min() < 0 or labels.max() >= len(classes):
            raise ConfigurationError(f"labels must lie in 0..{len(classes) - 1}")
        text = class_embeddings(params, leaves, enc, classes)
        vis = torch.from_numpy(feats)
        if enc.space.similarity is Similarity.COSINE:
            vnorm = vis.norm(dim=1, keepdim=True)
            if torch.any(vnorm == 0):
                raise DegenerateInputError(
                    f"zero-norm visual embedding at batch item {int(torch.nonzero(vnorm[:, 0] == 0)[0])}"
                )
            vis = vis / vnorm
            text = text / text.norm(dim=1, keepdim=True)
        logits = vis @ text.T / enc.space.temperature
        logp = torch.log_softmax(logits, dim=1)
        total = total - logp[torch.arange(len(labels)), torch.from_numpy(labels)].sum()
    if offs is not None and alpha:
        total = total + (0.5 * alpha) * sum((o * o).sum() for o in offs)
    if not torch.isfinite(total):
        raise NumericError("objective is not finite")
    return total


def _leaves(params: TextParameterSet) -> list[torch.Tensor]:
    return [torch.tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in params.learnable()]


def loss(params: TextParameterSet, batch, enc, classes: Sequence[ClassEntry], alpha: float) -> float:
    check_class_set(classes)
    with torch.no_grad():
        return float(_objective(params, _leaves(params), as_examples(batch), enc, classes, alpha))


def loss_and_gradients(params, batch, enc, classes, alpha) -> tuple[float, list[np.ndarray]]:
    """Objective value and its gradient w.r.t. ``params.learnable()``, in float64."""
    check_class_set(classes)
    leaves = _leaves(params)
    total = _objective(params, leaves, as_examples(batch), enc, classes, alpha)
    grads = torch.autograd.grad(total, leaves, allow_unused=True) if leaves else []
    out = [np.zeros(a.shape) if g is None else g.numpy() for a, g in zip(params.learnable(), grads)]
    return float(total.detach()), out


def gradients(params, batch, enc, classes, alpha) -> list[np.ndarray]:
    return loss_and_gradients(params, batch, enc, classes, alpha)[1]


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for a in like:
        out.append(vec[pos : pos + a.size].reshape(a.shape))
        pos += a.size
    return out


def minimize_objective(params, data, enc, classes, alpha, gtol: float = 1e-10, maxiter: int = 20000):
    """Full-batch L-BFGS on the objective; returns float64 parameters and the scipy result."""
    data = as_examples(data)
    like = params.learnable()

    def fun(x):
        p = params.with_learnable(unflatten(x, like), dtype=np.float64)
        value, grads = loss_and_gradients(p, data, enc, classes, alpha)
        return value, flatten(grads)

    res = scipy.optimize.minimize(
        fun, flatten(like), jac=True, method="L-BFGS-B",
        options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-15, "maxcor": 10},
    )
    return params.with_learnable(unflatten(res.x, like), dtype=np.float64), res


# -- training loop ---------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: Optional[float]
    snapshot: TextParameterSet


@dataclass
class CheckpointHistory:
    epochs: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    def __getitem__(self, i) -> EpochRecord:
        return self.epochs[i]

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    @property
    def val_accuracies(self) -> list[Optional[float]]:
        return [e.val_accuracy for e in self.epochs]


@dataclass
class TrainResult:
    final: TextParameterSet
    history: CheckpointHistory
    selected: TextParameterSet
    selected_epoch: int
    initial: TextParameterSet
    config: TrainConfig


def select_epoch(history: CheckpointHistory, policy: CheckpointPolicy) -> int:
    """1-based epoch chosen by ``policy``; validation ties go to the earliest epoch."""
    if CheckpointPolicy(policy) is CheckpointPolicy.FINAL_EPOCH:
        return history[-1].epoch
    best = max(history.epochs, key=lambda e: (e.val_accuracy, -e.epoch))
    return best.epoch


def make_prompt(enc, template: str) -> PromptSpec:
    return PromptSpec.from_template(template, enc.tokenize)


def _batches(n: int, batch_size: int, rng: SeededRng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_run(
    train_set,
    val_set,
    cfg: TrainConfig,
    enc,
    classes: Sequence[ClassEntry],
    log_path=None,
    on_batch: Optional[Callable[[np.ndarray], None]] = None,
) -> TrainResult:
    """Train from a fresh initialization and keep one snapshot per epoch."""
    train = as_examples(train_set)
    val = as_examples(val_set) if val_set is not None else None
    if len(train) == 0:
        raise ConfigurationError("training set is empty")
    if cfg.checkpoint_policy is CheckpointPolicy.BEST_VALIDATION and (val is None or len(val) == 0):
        raise ConfigurationError("best_validation checkpointing needs a validation set")
    check_class_set(classes)

    rng = SeededRng(cfg.seed)
    prompt = make_prompt(enc, cfg.prompt) if cfg.method is Method.NAME_TUNING else None
    init = init_parameters(cfg.method, classes, cfg.l_context, rng.fork("init"),
                           cfg.ablation_random_names, prompt)
    for entry in classes:
        init.assemble(entry, enc.space.max_seq_len)
    shuffle_rng = rng.fork("shuffle")
    alpha = cfg.effective_alpha

    leaves = _leaves(init)
    if cfg.optimizer == "sgd":
        opt = torch.optim.SGD(leaves, lr=cfg.learning_rate, momentum=SGD_MOMENTUM)
    else:
        opt = torch.optim.AdamW(leaves, lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=0.0)

    history = CheckpointHistory()
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            batch_losses = []
            for idx in _batches(len(train), cfg.batch_size, shuffle_rng):
                batch = train.subset(idx)
                if on_batch is not None:
                    on_batch(batch.labels)
                opt.zero_grad(set_to_none=False)
                obj = _objective(init, leaves, batch, enc, classes, alpha)
                obj.backward()
                opt.step()
                batch_losses.append(float(obj.detach()))
            snap = init.with_learnable([leaf.detach().numpy() for leaf in leaves])
            val_acc = None
            if val is not None and len(val):
                val_acc = accuracy(build_head(enc, None, classes, snap), val.features, val.labels)
            rec = EpochRecord(epoch, float(np.mean(batch_losses)), val_acc, snap)
            history.epochs.append(rec)
            if log_file is not None:
                log_file.write(json.dumps({"epoch": epoch, "loss": rec.loss, "val_accuracy": val_acc}) + "\n")
                log_file.flush()
            log.debug("epoch %d loss %.6f val %s", epoch, rec.loss, val_acc)
    finally:
        if log_file is not None:
            log_file.close()

    chosen = select_epoch(history, cfg.checkpoint_policy)
    return TrainResult(
        final=history[-1].snapshot,
        history=history,
        selected=history[chosen - 1].snapshot,
        selected_epoch=chosen,
        initial=init.snapshot(),
        config=cfg,
    )


# -- grid search ---------------------------------------------------------------

GRID_AXES = {"learning_rate", "alpha", "l_context", "epochs", "batch_size", "optimizer", "prompt"}


@dataclass
class GridSearchResult:
    best_config: TrainConfig
    best_point: dict
    scores: list[tuple[dict, float]]
    final: TrainResult
    test_accuracy: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "best_point": self.best_point,
            "scores": [{"point": p, "val_accuracy": s} for p, s in self.scores],
            "selected_epoch": self.final.selected_epoch,
            "test_accuracy": self.test_accuracy,
        }


def grid_points(grids: Mapping[str, Sequence]) -> list[dict]:
    unknown = set(grids) - GRID_AXES
    if unknown:
        raise ConfigurationError(f"unknown grid axes {sorted(unknown)}; allowed: {sorted(GRID_AXES)}")
    axes = list(grids)
    points = [dict(zip(axes, values)) for values in itertools.product(*(grids[a] for a in axes))]
    if not points:
        raise ConfigurationError("hyperparameter grid is empty")
    return points


def score_params(params, data, enc, classes) -> float:
    data = as_examples(data)
    return accuracy(build_head(enc, None, classes, params), data.features, data.labels)


def grid_search(
    grids: Mapping[str, Sequence],
    train_set,
    val_set,
    enc,
    classes,
    base: TrainConfig,
    seed: Optional[int] = None,
    test_set=None,
    on_batch=None,
) -> GridSearchResult:
    """Exhaustive search maximizing validation accuracy; ties keep the earliest grid point."""
    if val_set is None or len(as_examples(val_set)) == 0:
        raise ConfigurationError("grid search needs a validation set")
    seed = base.seed if seed is None else seed
    best = None
    scores = []
    for point in grid_points(grids):
        cfg = replace(base, **point, seed=derive_seed(seed, "grid", sorted(point.items())))
        result = train_run(train_set, val_set, cfg, enc, classes, on_batch=on_batch)
        score = score_params(result.selected, val_set, enc, classes)
        scores.append((point, score))
        if best is None or score > best[1]:
            best = (point, score)
    point = best[0]
    best_cfg = replace(base, **point, seed=seed)
    final = train_run(train_set, val_set, best_cfg, enc, classes, on_batch=on_batch)
    test_acc = score_params(final.selected, test_set, enc, classes) if test_set is not None else None
    return GridSearchResult(best_cfg, dict(point), scores, final, test_acc)
