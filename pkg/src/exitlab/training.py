"""Joint training of every exit head with a depth-weighted loss.

The per-layer classification losses L_1..L_n are combined as

    L = sum_j j * L_j / sum_j j

so deeper classifiers weigh linearly more. Single-label heads use
softmax + cross-entropy, multi-label heads sigmoid + binary
cross-entropy (averaged over labels). Each layer's confidence head is
trained jointly with a small auxiliary BCE term whose target is whether
that exit's prediction is correct.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from . import tensor as T
from .data import Dataset, DataSplits, Vocab, binarize_mlc
from .errors import ConfigError
from .model import MultiExitModel
from .similarity import SLC, ProbDist

__all__ = [
    "TrainConfig",
    "LossReport",
    "load_train_config",
    "save_train_config",
    "per_layer_loss",
    "total_loss",
    "AdamW",
    "train",
    "make_grid",
    "grid_search",
    "GridSearchResult",
]

_LOG_FLOOR = 1e-12
CONFIDENCE_LOSS_WEIGHT = 0.1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 2e-3
    epochs: int = 10
    weight_decay: float = 0.01
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    confidence_loss_weight: float = CONFIDENCE_LOSS_WEIGHT

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")


@dataclass
class LossReport:
    """One epoch: per-layer losses, their depth-weighted total, accuracies."""

    epoch: int
    per_layer_losses: list[float]
    total: float
    per_layer_accuracy: list[float]


_CONFIG_FIELDS = {f.name: f.type for f in fields(TrainConfig)}


def save_train_config(config: TrainConfig, path) -> None:
    """Write ``key = value`` lines, one per TrainConfig field."""
    with open(path, "w", encoding="utf-8") as fh:
        for name in _CONFIG_FIELDS:
            fh.write(f"{name} = {getattr(config, name)}\n")


def load_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Parse ``key = value`` lines (# starts a comment) into a TrainConfig.

    Unknown keys are configuration errors; omitted keys keep the value
    from ``base`` (or the defaults).
    """
    values = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigError(f"{path}: no such config file") from e
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"{path}:{lineno}: unknown training option {key!r}")
            caster = int if key in ("batch_size", "epochs", "seed") else float
            try:
                values[key] = caster(raw)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {raw!r}") from e
    return replace(base or TrainConfig(), **values)


def per_layer_loss(p: ProbDist, target) -> float:
    """Loss of one prediction: -ln p[target] (slc) or mean label BCE (mlc)."""
    if p.kind == SLC:
        t = int(target)
        if not 0 <= t < p.k:
            raise ValueError(f"target {t} outside [0, {p.k})")
        return float(-np.log(max(p.probs[t], _LOG_FLOOR)))
    targets = binarize_mlc(target, p.k) if not isinstance(target, np.ndarray) else target
    if targets.shape != (p.k,) or not np.isin(targets, (0.0, 1.0)).all():
        raise ValueError(f"mlc target must be a 0/1 vector of length {p.k}")
    pos = np.maximum(p.probs[:, 0], _LOG_FLOOR)
    neg = np.maximum(p.probs[:, 1], _LOG_FLOOR)
    return float(-(targets * np.log(pos) + (1.0 - targets) * np.log(neg)).mean())


def layer_weights(n: int) -> np.ndarray:
    """Depth weights j / sum(1..n); they sum to 1."""
    j = np.arange(1, n + 1, dtype=np.float64)
    return j / j.sum()


def total_loss(per_layer: list[float], n: int) -> float:
    """Depth-weighted average of the per-layer losses."""
    if len(per_layer) != n:
        raise ValueError(f"expected {n} per-layer losses, got {len(per_layer)}")
    return float((layer_weights(n) * np.asarray(per_layer, dtype=np.float64)).sum())


class AdamW:
    """Adam with decoupled weight decay; state keyed by parameter name."""

    def __init__(self, params: dict[str, T.Tensor], config: TrainConfig):
        self.params = dict(params)
        self.cfg = config
        self.step_count = 0
        self.m = {name: np.zeros(t.shape) for name, t in self.params.items()}
        self.v = {name: np.zeros(t.shape) for name, t in self.params.items()}

    def step(self, grads: dict[T.Tensor, np.ndarray]) -> None:
        c = self.cfg
        self.step_count += 1
        bc1 = 1.0 - c.beta1**self.step_count
        bc2 = 1.0 - c.beta2**self.step_count
        for name in sorted(self.params):
            p = self.params[name]
            g = grads.get(p)
            if g is None:
                continue
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + c.adam_eps)
            p.array[...] -= c.learning_rate * (update + c.weight_decay * p.array)


# -- batching ----------------------------------------------------------------


def encode_dataset(dataset: Dataset, vocab: Vocab, max_seq_len: int) -> list[np.ndarray]:
    return [vocab.encode(ex.text, max_len=max_seq_len) for ex in dataset.examples]


def _pad_batch(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float64)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = s
        mask[row, : len(s)] = 1.0
    return ids, mask


def _slc_targets(dataset: Dataset, idx: np.ndarray) -> np.ndarray:
    return np.asarray([dataset.examples[i].label for i in idx], dtype=np.int64)


def _mlc_targets(dataset: Dataset, idx: np.ndarray) -> np.ndarray:
    k = dataset.n_classes
    return np.stack([binarize_mlc(dataset.examples[i].labels, k) for i in idx])


def _batch_losses(
    model: MultiExitModel,
    probs: list[T.Tensor],
    targets: np.ndarray,
) -> tuple[list[T.Tensor], np.ndarray]:
    """Per-layer mean loss tensors plus a [n_layers, b] correctness matrix."""
    losses: list[T.Tensor] = []
    correct = np.zeros((len(probs), probs[0].shape[0]))
    if model.config.task == SLC:
        onehot = np.eye(model.config.n_classes)[targets]
        for i, p in enumerate(probs):
            picked = (T.log(T.clamp_min(p, _LOG_FLOOR)) * T.Tensor(onehot)).sum(axis=-1)
            losses.append(-picked.mean())
            correct[i] = p.array.argmax(axis=-1) == targets
    else:
        t = T.Tensor(targets)
        for i, p in enumerate(probs):
            pos = T.log(T.clamp_min(p, _LOG_FLOOR))
            neg = T.log(T.clamp_min(1.0 - p, _LOG_FLOOR))
            bce = -(t * pos + (1.0 - t) * neg).mean(axis=-1)
            losses.append(bce.mean())
            correct[i] = ((p.array > 0.5) == (targets > 0.5)).all(axis=-1)
    return losses, correct


def _weighted_total(losses: list[T.Tensor]) -> T.Tensor:
    weights = layer_weights(len(losses))
    total = losses[0] * float(weights[0])
    for w, loss in zip(weights[1:], losses[1:]):
        total = total + loss * float(w)
    return total


def _confidence_loss(confs: list[T.Tensor], correct: np.ndarray) -> T.Tensor:
    terms = []
    for i, c in enumerate(confs):
        tgt = T.Tensor(correct[i])
        bce = -(tgt * T.log(T.clamp_min(c, _LOG_FLOOR)) + (1.0 - tgt) * T.log(T.clamp_min(1.0 - c, _LOG_FLOOR)))
        terms.append(bce.mean())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def train(
    model: MultiExitModel,
    dataset: Dataset,
    config: TrainConfig,
    vocab: Vocab,
) -> list[LossReport]:
    """Optimize all exits jointly; deterministic for a fixed seed.

    Returns one report per epoch; the model is updated in place.
    """
    if dataset.task != model.config.task:
        raise ConfigError(f"dataset task {dataset.task!r} does not match model task {model.config.task!r}")
    if dataset.n_classes != model.config.n_classes:
        raise ConfigError(
            f"dataset has {dataset.n_classes} classes, model expects {model.config.n_classes}"
        )
    encoded = encode_dataset(dataset, vocab, model.config.max_seq_len)
    optimizer = AdamW(model.parameters(), config)
    wrt = list(model.parameters().values())
    rng = np.random.default_rng(config.seed)
    n_layers = model.config.n_layers
    history: list[LossReport] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(encoded))
        sum_losses = np.zeros(n_layers)
        sum_correct = np.zeros(n_layers)
        count = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            ids, mask = _pad_batch([encoded[i] for i in idx])
            targets = _slc_targets(dataset, idx) if dataset.task == SLC else _mlc_targets(dataset, idx)
            probs, confs = model.forward_batch(ids, mask)
            losses, correct = _batch_losses(model, probs, targets)
            objective = _weighted_total(losses)
            if config.confidence_loss_weight > 0:
                objective = objective + _confidence_loss(confs, correct) * config.confidence_loss_weight
            grads = T.backward(objective, wrt=wrt)
            optimizer.step(grads)
            sum_losses += [loss.item() * len(idx) for loss in losses]
            sum_correct += correct.sum(axis=1)
            count += len(idx)
        per_layer = (sum_losses / count).tolist()
        history.append(
            LossReport(
                epoch=epoch,
                per_layer_losses=per_layer,
                total=total_loss(per_layer, n_layers),
                per_layer_accuracy=(sum_correct / count).tolist(),
            )
        )
    return history


# -- grid search --------------------------------------------------------------


@dataclass
class GridSearchResult:
    best_config: TrainConfig
    best_model: MultiExitModel
    rows: list[dict]


def make_grid(batch_sizes, learning_rates, base: TrainConfig | None = None) -> list[TrainConfig]:
    """Cartesian batch-size x learning-rate grid over a base config."""
    base = base or TrainConfig()
    return [
        replace(base, batch_size=int(b), learning_rate=float(lr))
        for b in batch_sizes
        for lr in learning_rates
    ]


def dev_accuracy(model: MultiExitModel, dataset: Dataset, vocab: Vocab) -> float:
    """Final-layer accuracy (slc) or exact-set accuracy (mlc)."""
    hits = 0
    for ex in dataset.examples:
        ids = vocab.encode(ex.text, max_len=model.config.max_seq_len)
        stream = model.forward_full(ids)
        final = stream.probs[-1]
        if dataset.task == SLC:
            hits += final.argmax() == ex.label
        else:
            hits += final.label_set() == frozenset(ex.labels)
    return hits / max(1, len(dataset))


def grid_search(
    model_factory,
    splits: DataSplits,
    grid: list[TrainConfig],
    vocab: Vocab,
) -> GridSearchResult:
    """Train one model per cell; select by dev accuracy at the final layer.

    Ties keep the earlier grid row. ``model_factory()`` must return a
    freshly initialized model each call.
    """
    if not grid:
        raise ConfigError("grid search needs at least one configuration")
    rows: list[dict] = []
    best = None
    for config in grid:
        model = model_factory()
        history = train(model, splits.train, config, vocab)
        acc = dev_accuracy(model, splits.dev, vocab)
        rows.append(
            {
                "batch_size": config.batch_size,
                "learning_rate": config.learning_rate,
                "epochs": config.epochs,
                "seed": config.seed,
                "dev_accuracy": acc,
                "final_train_loss": history[-1].total if history else float("nan"),
            }
        )
        if best is None or acc > best[0]:
            best = (acc, config, model)
    return GridSearchResult(best_config=best[1], best_model=best[2], rows=rows)
