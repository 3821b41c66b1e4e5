"""Few-shot episodes, prompt training, evaluation, and experiment grids."""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import math
import time
from pathlib import Path

import numpy as np

from uniprompt.autodiff import backward, cross_entropy, no_grad
from uniprompt.autodiff.io import save_tensor
from uniprompt.data.synthetic import Split, check_class_lists, philox
from uniprompt.errors import ConfigurationError, ContractError, DataError, NonFiniteLossError
from uniprompt.prompts import StrategyKind, TextFeatureCache, forward_logits, make_strategy

logger = logging.getLogger(__name__)

ALLOWED_SHOTS = (1, 2, 4, 8, 16)


@dataclasses.dataclass(frozen=True)
class EpisodeSpec:
    shots: int
    seed: int
    class_names: tuple = ()

    def validate(self):
        if self.shots not in ALLOWED_SHOTS:
            raise ConfigurationError(f"shots must be one of {{1,2,4,8,16}}, got {self.shots}")
        return self


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.002
    batch_size: int = 32
    epochs: int = 50
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    eval_batch_size: int = 256

    def validate(self):
        if not self.initial_lr > 0:
            raise ConfigurationError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must lie in [0, 1)")
        return self


@dataclasses.dataclass
class RunRecord:
    strategy: str
    dataset: str
    shots: int
    seed: int
    train_config: dict
    strategy_config: dict
    epoch_loss: list = dataclasses.field(default_factory=list)
    epoch_accuracy: list = dataclasses.field(default_factory=list)
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    parameter_count: int = 0
    backbone_checksum: str = ""
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None
    ood: dict | None = None
    diagnostics: dict | None = None

    def to_dict(self):
        return dataclasses.asdict(self)


# sampling & schedule ----------------------------------------------------------------

def sample_few_shot(split, spec, k=None):
    """Indices of ``shots`` examples per class, drawn without replacement.

    Each class uses its own Philox stream keyed by ``(seed, class id)`` so
    the selection is independent of class order and platform.
    """
    spec.validate()
    k = int(split.labels.max()) + 1 if k is None else k
    chosen = []
    for c in range(k):
        pool = np.flatnonzero(split.labels == c)
        if len(pool) < spec.shots:
            name = spec.class_names[c] if c < len(spec.class_names) else c
            raise DataError(f"class {name!r} has {len(pool)} examples, {spec.shots} shots requested")
        picks = philox(spec.seed, c, 0x5407).choice(len(pool), size=spec.shots, replace=False)
        chosen.append(np.sort(pool[picks]))
    return np.concatenate(chosen)


def cosine_lr(step, total, lr0):
    """``lr0 * (1 + cos(pi * step / total)) / 2``."""
    if total < 1:
        raise ContractError(f"cosine schedule needs total >= 1, got {total}")
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total))


class SGD:
    """Momentum SGD: ``v <- mu v + g (+ wd p)``, ``p <- p - lr v``.  Frozen tensors are skipped."""

    def __init__(self, params, momentum=0.9, weight_decay=0.0):
        self.params = [p for p in params if getattr(p, "trainable", True)]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype, copy=False)


# train / evaluate -------------------------------------------------------------------

def predict(encoder, strategy, images, class_names, batch_size=256, cache=None):
    """Top-1 predictions; ties go to the lowest class index."""
    preds = []
    with no_grad():
        plan = strategy.generate()
        for lo in range(0, len(images), batch_size):
            logits = forward_logits(encoder, strategy, images[lo:lo + batch_size], class_names, plan, cache)
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(strategy, encoder, split, class_names, batch_size=256, cache=None):
    if len(split) == 0:
        raise DataError("cannot evaluate on an empty split")
    preds = predict(encoder, strategy, split.images, class_names, batch_size, cache)
    return float(np.mean(preds == split.labels))


def _dump_batch(dump_dir, step, images, labels):
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nonfinite_step{step}_images.pft"
    save_tensor(path, images)
    save_tensor(dump_dir / f"nonfinite_step{step}_labels.pft", labels.astype(np.float64))
    return path


def train(strategy, encoder, train_split, class_names, cfg=TrainConfig(), dump_dir=None, record=None):
    """Minibatch momentum SGD on ``strategy.trainables()`` only.

    Returns a :class:`RunRecord` with per-epoch mean loss and accuracy.  The
    backbone checksum is verified unchanged at the end.
    """
    cfg.validate()
    record = record or RunRecord(
        strategy=strategy.kind.value, dataset="", shots=0, seed=cfg.seed,
        train_config=dataclasses.asdict(cfg), strategy_config=strategy.descriptor(),
    )
    record.parameter_count = strategy.parameter_count()
    before = encoder.checksum()
    record.backbone_checksum = before
    params = strategy.trainables()
    cache = TextFeatureCache()
    n = len(train_split)
    if n == 0:
        raise DataError("training split is empty")
    if not params or cfg.epochs == 0:
        return record

    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    order_rng = philox(cfg.seed, 0x0DE4)
    step = 0
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        losses, correct = [], 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            images, labels = train_split.images[idx], train_split.labels[idx]
            opt.zero_grad()
            logits = forward_logits(encoder, strategy, images, class_names, cache=cache)
            loss = cross_entropy(logits, labels)
            value = float(loss.data)
            if not math.isfinite(value):
                path = _dump_batch(dump_dir, step, images, labels) if dump_dir else None
                raise NonFiniteLossError(
                    f"non-finite loss {value} at epoch {epoch} step {step}; batch indices {idx.tolist()}",
                    batch_indices=idx, dump_path=path,
                )
            backward(loss)
            opt.step(cosine_lr(step, total, cfg.initial_lr))
            step += 1
            losses.append(value * len(idx))
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
        record.epoch_loss.append(float(np.sum(losses) / n))
        record.epoch_accuracy.append(correct / n)
        logger.debug("%s epoch %d loss %.4f acc %.3f", strategy.kind.value, epoch, record.epoch_loss[-1], correct / n)

    if encoder.checksum() != before:
        raise ContractError("backbone weights changed during prompt training")
    return record


def run_cell(encoder, dataset, kind, shots, seed, cfg, strategy_kwargs=None, shifted=None):
    """Sample an episode, train a fresh strategy, evaluate; returns (record, strategy)."""
    strategy_kwargs = dict(strategy_kwargs or {})
    cfg = dataclasses.replace(cfg, seed=seed)
    start = time.perf_counter()
    strategy = make_strategy(kind, encoder, seed=seed, **strategy_kwargs)
    episode = EpisodeSpec(shots, seed, tuple(dataset.class_names))
    train_split = dataset.splits["train"].subset(sample_few_shot(dataset.splits["train"], episode, dataset.k))
    record = RunRecord(
        strategy=strategy.kind.value, dataset=dataset.name, shots=shots, seed=seed,
        train_config=dataclasses.asdict(cfg), strategy_config=strategy.descriptor(),
    )
    train(strategy, encoder, train_split, dataset.class_names, cfg, record=record)
    cache = TextFeatureCache()
    record.train_accuracy = evaluate(strategy, encoder, train_split, dataset.class_names, cfg.eval_batch_size, cache)
    record.test_accuracy = evaluate(strategy, encoder, dataset.splits["test"], dataset.class_names, cfg.eval_batch_size, cache)
    if shifted:
        record.ood = evaluate_targets(strategy, encoder, shifted, dataset.class_names, cfg.eval_batch_size)
    record.wall_time = time.perf_counter() - start
    return record, strategy


def evaluate_targets(strategy, encoder, targets, class_names, batch_size=256):
    """Per-target accuracy plus their arithmetic mean (the OOD average)."""
    cache = TextFeatureCache()
    per_target = {}
    for name, (split, target_classes) in targets.items():
        check_class_lists(class_names, target_classes)
        per_target[name] = evaluate(strategy, encoder, split, class_names, batch_size, cache)
    average = float(np.mean(list(per_target.values()))) if per_target else float("nan")
    return {"targets": per_target, "ood_average": average}


def evaluate_shifted(strategy, encoder, source, targets, cfg=TrainConfig(), shots=16, seed=0, train_first=True):
    """Train once on ``source`` (a Dataset), then evaluate unchanged on each target.

    ``targets`` maps a name to ``(Split, class_names)``.
    """
    for name, (_, names) in targets.items():
        if list(names) != list(source.class_names):
            raise DataError(f"target {name!r} class list does not match the source")
    if train_first:
        episode = EpisodeSpec(shots, seed, tuple(source.class_names))
        idx = sample_few_shot(source.splits["train"], episode, source.k)
        train(strategy, encoder, source.splits["train"].subset(idx), source.class_names,
              dataclasses.replace(cfg, seed=seed))
    result = evaluate_targets(strategy, encoder, targets, source.class_names, cfg.eval_batch_size)
    result["source"] = evaluate(strategy, encoder, source.splits["test"], source.class_names, cfg.eval_batch_size)
    return result


def run_matrix(encoder, dataset, strategies, shots=ALLOWED_SHOTS, seeds=(1, 2, 3), cfg=TrainConfig(),
               strategy_kwargs=None, threads=1, shifted=None, on_record=None):
    """Run every (strategy, shots, seed) cell; failed cells are recorded, not raised.

    Returns the list of RunRecords in grid order regardless of completion order.
    """
    strategy_kwargs = strategy_kwargs or {}
    for s in shots:
        EpisodeSpec(s, 0).validate()
    cells = [(StrategyKind(k).value, s, seed) for k in strategies for s in shots for seed in seeds]

    def work(cell):
        kind, s, seed = cell
        try:
            record, _ = run_cell(encoder, dataset, kind, s, seed, cfg, strategy_kwargs.get(kind), shifted)
        except Exception as exc:  # a failed cell must not stop the grid
            logger.warning("cell %s failed: %s", cell, exc)
            record = RunRecord(kind, dataset.name, s, seed, dataclasses.asdict(cfg), dict(strategy_kwargs.get(kind) or {}),
                               status="failed", error=f"{type(exc).__name__}: {exc}")
        if on_record is not None:
            on_record(record)
        return record

    if threads <= 1:
        return [work(c) for c in cells]
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, cells))


def summarize(records):
    """Mean test accuracy over seeds per (strategy, shots); failed cells are excluded."""
    groups = {}
    for r in records:
        groups.setdefault((r.strategy, r.shots), []).append(r)
    rows = []
    for (strategy, shots), rs in groups.items():
        ok = [r for r in rs if r.status == "ok"]
        row = {
            "strategy": strategy,
            "shots": shots,
            "seeds": len(rs),
            "failed": len(rs) - len(ok),
            "accuracy": float(np.mean([r.test_accuracy for r in ok])) if ok else None,
        }
        if any(r.ood for r in ok):
            row["ood_average"] = float(np.mean([r.ood["ood_average"] for r in ok]))
        rows.append(row)
    return rows


__all__ = [
    "ALLOWED_SHOTS",
    "EpisodeSpec",
    "RunRecord",
    "SGD",
    "Split",
    "TrainConfig",
    "cosine_lr",
    "evaluate",
    "evaluate_shifted",
    "evaluate_targets",
    "predict",
    "run_cell",
    "run_matrix",
    "sample_few_shot",
    "summarize",
    "train",
]
