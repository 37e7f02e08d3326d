"""End-to-end recogniser: GRU encoder stack -> attention -> BN/dropout/FC head."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from grurec import layers
from grurec.data import Batch, GestureSample, NormStats, pad_batch, zscore_apply
from grurec.errors import ConfigError, ContractError, DataError, ShapeError
from grurec.tensor import SeededRng, softmax

DEFAULT_WIDTHS = (512, 512, 256, 256, 128)
THREE_STACK_WIDTHS = (512, 256, 128)


@dataclass
class ModelConfig:
    input_dim: int
    num_classes: int
    encoder_widths: tuple = DEFAULT_WIDTHS
    use_attention: bool = True
    fc_count: int = 2
    fc_width: int | None = None  # None: same as the head's input width
    dropout_rate: float = 0.5

    def __post_init__(self):
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)

    def validate(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if not self.encoder_widths or any(w < 1 for w in self.encoder_widths):
            raise ConfigError("encoder_widths must be a non-empty list of positive widths")
        if self.fc_count not in (1, 2):
            raise ConfigError(f"fc_count must be 1 or 2, got {self.fc_count}")
        if self.fc_width is not None and self.fc_width < 1:
            raise ConfigError("fc_width must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def hidden(self) -> int:
        return self.encoder_widths[-1]

    @property
    def head_dim(self) -> int:
        return 2 * self.hidden if self.use_attention else self.hidden

    @property
    def resolved_fc_width(self) -> int:
        return self.head_dim if self.fc_width is None else self.fc_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d


@dataclass
class Model:
    config: ModelConfig
    params: dict  # flat "layer.name" -> array
    state: dict  # batch-norm running statistics
    labels: list = field(default_factory=list)
    norm_stats: NormStats | None = None

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def group(self, prefix: str, source=None) -> dict:
        src = self.params if source is None else source
        pre = prefix + "."
        return {k[len(pre):]: v for k, v in src.items() if k.startswith(pre)}

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        m.state = {k: v.astype(dtype) for k, v in m.state.items()}
        return m


def build_model(config: ModelConfig, rng, dtype=np.float32, labels=None) -> Model:
    """Initialise every parameter; deterministic given the rng seed."""
    config.validate()
    if not isinstance(rng, SeededRng):
        rng = SeededRng(int(rng))
    params, state = {}, {}

    def put(prefix, group):
        for k, v in group.items():
            params[f"{prefix}.{k}"] = v

    n_in = config.input_dim
    for i, w in enumerate(config.encoder_widths):
        put(f"enc{i}", layers.init_gru(rng.child("init", f"enc{i}"), n_in, w, dtype))
        n_in = w
    if config.use_attention:
        put("attn", layers.init_attention(rng.child("init", "attn"), config.hidden, dtype))

    d = config.head_dim
    bn_p, bn_s = layers.init_batchnorm(d, dtype)
    put("bn1", bn_p)
    state.update({f"bn1.{k}": v for k, v in bn_s.items()})
    if config.fc_count == 2:
        fw = config.resolved_fc_width
        put("fc1", layers.init_dense(rng.child("init", "fc1"), d, fw, dtype))
        bn_p, bn_s = layers.init_batchnorm(fw, dtype)
        put("bn2", bn_p)
        state.update({f"bn2.{k}": v for k, v in bn_s.items()})
        d = fw
    put("fc2", layers.init_dense(rng.child("init", "fc2"), d, config.num_classes, dtype))
    if labels is None:
        labels = [f"class{k}" for k in range(config.num_classes)]
    if len(labels) != config.num_classes:
        raise ConfigError(f"{len(labels)} label names for {config.num_classes} classes")
    return Model(config=config, params=params, state=state, labels=list(labels))


def parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable scalar count."""
    total = 0
    n_in = config.input_dim
    for h in config.encoder_widths:
        total += 3 * (h * n_in + h * h + 2 * h)
        n_in = h
    H = config.hidden
    if config.use_attention:
        total += H * H + 3 * (H * H + H * H + 2 * H)
    d = config.head_dim
    total += 2 * d
    if config.fc_count == 2:
        fw = config.resolved_fc_width
        total += d * fw + fw + 2 * fw
        d = fw
    total += d * config.num_classes + config.num_classes
    return total


def count_stored_parameters(model: Model) -> int:
    return int(sum(v.size for v in model.params.values()))


# --------------------------------------------------------------------------
# forward / backward


def forward(model: Model, batch: Batch, train: bool = False, rng=None, params=None):
    """Logits ``(B, C)`` for an already-normalised batch.

    ``rng`` feeds dropout in train mode. ``params`` substitutes a different
    flat parameter dict (used by gradient checks). Train mode updates the
    batch-norm running statistics in ``model.state``.
    Returns ``(logits, cache)``.
    """
    cfg = model.config
    P = model.params if params is None else params
    g = lambda prefix: model.group(prefix, P)  # noqa: E731
    dtype = P["fc2.W"].dtype
    if batch.data.shape[1] != cfg.input_dim:
        raise ShapeError(f"batch feature dim {batch.data.shape[1]}, model expects {cfg.input_dim}")
    if train and cfg.dropout_rate > 0 and rng is None:
        raise ContractError("train-mode forward with dropout needs an rng")

    caches = {}
    X = batch.time_major.astype(dtype, copy=False)
    lengths = batch.lengths
    for i in range(len(cfg.encoder_widths)):
        X, h_last, caches[f"enc{i}"] = layers.gru_layer_forward(X, lengths, g(f"enc{i}"))
    if cfg.use_attention:
        z, caches["attn"] = layers.attention_forward(X, h_last, lengths, g("attn"))
    else:
        z = h_last

    def bn_drop(z, name, drop_key):
        st = {k: model.state[f"{name}.{k}"] for k in ("running_mean", "running_var")}
        z, caches[name] = layers.batchnorm_forward(z, g(name), st, train)
        drng = rng.child(drop_key) if (train and rng is not None) else None
        z, caches[drop_key] = layers.dropout_forward(z, cfg.dropout_rate, train, drng)
        return z

    z = bn_drop(z, "bn1", "drop1")
    if cfg.fc_count == 2:
        z, caches["fc1"] = layers.dense_forward(z, g("fc1"))
        z, caches["relu"] = layers.relu_forward(z)
        z = bn_drop(z, "bn2", "drop2")
    logits, caches["fc2"] = layers.dense_forward(z, g("fc2"))
    return logits, caches


def backward(model: Model, caches: dict, dlogits) -> dict:
    """Gradients of every parameter given the gradient w.r.t. the logits."""
    cfg = model.config
    grads = {}

    def collect(prefix, gd):
        for k, v in gd.items():
            grads[f"{prefix}.{k}"] = v

    dz, gd = layers.dense_backward(caches["fc2"], dlogits)
    collect("fc2", gd)
    if cfg.fc_count == 2:
        dz, _ = layers.dropout_backward(caches["drop2"], dz)
        dz, gd = layers.batchnorm_backward(caches["bn2"], dz)
        collect("bn2", gd)
        dz, _ = layers.relu_backward(caches["relu"], dz)
        dz, gd = layers.dense_backward(caches["fc1"], dz)
        collect("fc1", gd)
    dz, _ = layers.dropout_backward(caches["drop1"], dz)
    dz, gd = layers.batchnorm_backward(caches["bn1"], dz)
    collect("bn1", gd)

    top = len(cfg.encoder_widths) - 1
    if cfg.use_attention:
        (dH, dh_last), gd = layers.attention_backward(caches["attn"], dz)
        collect("attn", gd)
    else:
        dH, dh_last = None, dz
    for i in range(top, -1, -1):
        dH, gd = layers.gru_layer_backward(caches[f"enc{i}"], dH, dh_last if i == top else None)
        collect(f"enc{i}", gd)
    return grads


# --------------------------------------------------------------------------
# inference


def normalise(model: Model, samples) -> list:
    if model.norm_stats is None:
        return list(samples)
    return [zscore_apply(s, model.norm_stats) for s in samples]


def predict_proba(model: Model, samples, batch_size: int = 256) -> np.ndarray:
    """Eval-mode class probabilities for raw (un-normalised) samples."""
    out = []
    for s in samples:
        if s.dim != model.config.input_dim:
            raise DataError(f"sample {s.id}: feature dim {s.dim}, model expects N={model.config.input_dim}")
    samples = normalise(model, samples)
    for start in range(0, len(samples), batch_size):
        batch = pad_batch(samples[start:start + batch_size], dtype=model.dtype)
        logits, _ = forward(model, batch, train=False)
        out.append(softmax(logits.astype(np.float64), axis=1))
    if not out:
        return np.zeros((0, model.config.num_classes))
    return np.concatenate(out, axis=0)


def predict(model: Model, sample: GestureSample):
    """``(label index, probabilities)`` for one raw sample."""
    probs = predict_proba(model, [sample])[0]
    return int(np.argmax(probs)), probs
