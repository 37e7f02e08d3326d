"""Adam, the mini-batch training loop, and evaluation metrics."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from grurec.data import (
    AugmentSpec,
    NormStats,
    augment_sample,
    check_dims,
    pad_batch,
    stratified_split,
    zscore_apply,
    zscore_fit,
)
from grurec.errors import ConfigError, ContractError, DataError, DivergenceError, EmptyDatasetError, ShapeError
from grurec.layers import cross_entropy
from grurec.model import Model, backward, forward
from grurec.tensor import SeededRng, softmax

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    weight_decay: float = 0.0
    max_epochs: int = 500
    patience: int = 50
    seed: int = 0
    augmentation: AugmentSpec = field(default_factory=AugmentSpec)
    precision: int = 32
    val_fraction: float = 0.1
    threads: int = 1
    timing: bool = True

    def validate(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2 (batch normalisation), got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be at least 1")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is coupled: ``wd * p`` is added to the gradient before the
    moment updates.
    """
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ContractError(f"parameter/gradient keys differ: {missing[:5]}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if cfg.lr:
            p -= (cfg.lr / bc1) * m / (np.sqrt(v / bc2) + cfg.eps)


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    accuracy: float
    per_class: list
    confusion: list
    loss: float | None = None

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "per_class": self.per_class, "confusion": self.confusion, "loss": self.loss}


def metrics_from_predictions(y_true, y_pred, num_classes: int, loss=None) -> Metrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ShapeError("prediction and label counts differ")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    total = conf.sum()
    rows = conf.sum(axis=1)
    per_class = [None if rows[k] == 0 else float(conf[k, k] / rows[k]) for k in range(num_classes)]
    acc = float(np.trace(conf) / total) if total else 0.0
    return Metrics(accuracy=acc, per_class=per_class, confusion=conf.tolist(), loss=loss)


def _label_index(model: Model) -> dict:
    return {name: i for i, name in enumerate(model.labels)}


def evaluate(model: Model, dataset, batch_size: int = 256) -> Metrics:
    """Eval-mode accuracy, per-class accuracy, confusion matrix and mean loss
    over raw (un-normalised) samples. No augmentation."""
    if not dataset:
        raise EmptyDatasetError("cannot evaluate an empty dataset")
    for s in dataset:
        if s.dim != model.config.input_dim:
            raise DataError(f"sample {s.id}: feature dim {s.dim}, model expects N={model.config.input_dim}")
    idx = _label_index(model)
    norm = [zscore_apply(s, model.norm_stats) for s in dataset] if model.norm_stats is not None else list(dataset)
    preds, labels, loss_sum = [], [], 0.0
    for start in range(0, len(norm), batch_size):
        batch = pad_batch(norm[start:start + batch_size], idx, dtype=model.dtype)
        logits, _ = forward(model, batch, train=False)
        loss, _ = cross_entropy(logits.astype(np.float64), batch.labels)
        loss_sum += loss * len(batch.labels)
        preds.append(np.argmax(logits, axis=1))
        labels.append(batch.labels)
    y_pred = np.concatenate(preds)
    y_true = np.concatenate(labels)
    return metrics_from_predictions(y_true, y_pred, model.config.num_classes, loss=loss_sum / len(y_true))


# --------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    elapsed_s: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def write_history(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(rec.to_json() + "\n")


def _round_f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _augment_batch(samples, idxs, spec, seed, epoch, pool):
    padded_len = max(s.length for s in samples)

    def one(pair):
        s, i = pair
        return augment_sample(s, spec, padded_len, SeededRng(seed, "augment", epoch, int(i)))

    pairs = list(zip(samples, idxs))
    if pool is None:
        return [one(p) for p in pairs]
    return list(pool.map(one, pairs))


def train(model: Model, train_set, val_set=None, cfg: TrainConfig | None = None, on_epoch=None):
    """Fit ``model`` in place and return ``(model, history)``.

    Normalisation stats are fitted on ``train_set`` and stored on the model.
    Augmentation is drawn per (epoch, sample index) so it does not depend on
    batch order or threading. When ``val_set`` is None a stratified slice of
    the training data is held out; if that slice would be empty, training
    accuracy (eval mode, clean data) drives early stopping instead. The
    parameters with the best validation accuracy are restored at the end.
    """
    cfg = cfg or TrainConfig()
    cfg.validate()
    if not train_set:
        raise EmptyDatasetError("training set is empty")
    dim = check_dims(train_set)
    if dim != model.config.input_dim:
        raise ShapeError(f"training data has feature dim {dim}, model expects {model.config.input_dim}")
    cfg.augmentation.validate(dim)
    if val_set is None:
        train_set, val_set = stratified_split(train_set, cfg.val_fraction, cfg.seed)
    if val_set:
        check_dims(val_set, dim)
    if len(train_set) < 2:
        raise EmptyDatasetError("need at least 2 training samples for batch normalisation")
    idx = _label_index(model)
    unknown = {s.label for s in list(train_set) + list(val_set)} - set(idx)
    if unknown:
        raise DataError(f"labels not known to the model: {sorted(unknown)}")

    stats = zscore_fit(train_set)
    model.norm_stats = NormStats(_round_f32(stats.mean), _round_f32(stats.std))
    train_norm = [zscore_apply(s, model.norm_stats) for s in train_set]
    monitor = val_set if val_set else train_set
    dtype = model.dtype

    adam = AdamState()
    history = []
    best_acc = -1.0
    best = None
    stale = 0
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.max_epochs):
            order = SeededRng(cfg.seed, "shuffle", epoch).permutation(len(train_norm))
            starts = list(range(0, len(order), cfg.batch_size))
            loss_sum = correct = seen = 0
            for bi, start in enumerate(starts):
                bidx = order[start:start + cfg.batch_size]
                if len(bidx) < 2:
                    continue  # a trailing singleton cannot be batch-normalised
                samples = [train_norm[i] for i in bidx]
                if cfg.augmentation.active:
                    samples = _augment_batch(samples, bidx, cfg.augmentation, cfg.seed, epoch, pool)
                batch = pad_batch(samples, idx, dtype=dtype)
                logits, caches = forward(model, batch, train=True, rng=SeededRng(cfg.seed, "dropout", epoch, bi))
                loss, dlogits = cross_entropy(logits, batch.labels)
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}", epoch=epoch)
                grads = backward(model, caches, dlogits.astype(dtype, copy=False))
                adam_step(model.params, grads, adam, cfg)
                loss_sum += loss * len(bidx)
                correct += int(np.sum(np.argmax(logits, axis=1) == batch.labels))
                seen += len(bidx)
            if seen == 0:
                raise EmptyDatasetError("no trainable batch (need at least 2 samples)")
            val_acc = evaluate(model, monitor).accuracy
            rec = EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / seen,
                train_acc=correct / seen,
                val_acc=val_acc,
                elapsed_s=round(time.perf_counter() - t0, 3) if cfg.timing else None,
            )
            history.append(rec)
            log.info("epoch %d loss %.4f train_acc %.3f val_acc %.3f", epoch, rec.train_loss, rec.train_acc, val_acc)
            if on_epoch is not None:
                on_epoch(rec)
            if val_acc > best_acc:
                best_acc = val_acc
                best = ({k: v.copy() for k, v in model.params.items()}, {k: v.copy() for k, v in model.state.items()})
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    finally:
        if pool is not None:
            pool.shutdown()

    model.params, model.state = best
    return model, history
