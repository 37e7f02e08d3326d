"""64-bit gradient-check suite: every layer's backward against central differences.

Each check builds a small random instance, reduces the layer output to a
scalar through a fixed random projection, and compares analytic gradients
(for every parameter and every differentiable input) with
:func:`grurec.tensor.finite_diff_grad`. The reported error for a component
is the worst :func:`grurec.tensor.max_relative_error` over its tensors and
trials.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from grurec import layers
from grurec.data import Batch
from grurec.model import ModelConfig, backward, build_model, forward
from grurec.tensor import SeededRng, finite_diff_grad, max_relative_error

TOLERANCE = 1e-4
STEP = 1e-5
F64 = np.float64


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    tensors: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _compare(objective, analytic: dict, inputs: dict, perturb: bool) -> tuple:
    """Worst relative error over ``inputs``; each is a float64 array that
    ``objective`` reads by reference."""
    worst = 0.0
    for name, arr in inputs.items():
        def f(x, arr=arr):
            saved = arr.copy()
            arr[...] = x
            try:
                return objective()
            finally:
                arr[...] = saved

        num = finite_diff_grad(f, arr, STEP)
        ana = analytic[name] * (1.01 if perturb else 1.0)
        worst = max(worst, max_relative_error(ana, num))
    return worst, len(inputs)


def _gru_params(rng, n_in, h):
    p = layers.init_gru(rng, n_in, h, F64)
    # non-zero biases so every bias path is exercised
    for k in ("bx", "bh"):
        p[k] = rng.uniform(-0.5, 0.5, p[k].shape)
    return p


def check_gru_cell(rng, perturb=False):
    B, N, H = 3, 3, 4
    p = _gru_params(rng, N, H)
    x = rng.normal(size=(B, N))
    h0 = rng.normal(size=(B, H))
    R = rng.normal(size=(B, H))

    def obj():
        h, _ = layers.gru_cell_forward(x, h0, p)
        return np.sum(h * R)

    _, cache = layers.gru_cell_forward(x, h0, p)
    (dx, dh), grads = layers.gru_cell_backward(cache, R)
    analytic = dict(grads, x=dx, h_prev=dh)
    return _compare(obj, analytic, dict(p, x=x, h_prev=h0), perturb)


def check_gru_layer(rng, perturb=False):
    L, B, N, H = 5, 3, 3, 4
    p = _gru_params(rng, N, H)
    X = rng.normal(size=(L, B, N))
    lengths = np.array([5, 2, 4])
    R = rng.normal(size=(L, B, H))
    Rl = rng.normal(size=(B, H))

    def obj():
        Hs, hl, _ = layers.gru_layer_forward(X, lengths, p)
        return np.sum(Hs * R) + np.sum(hl * Rl)

    _, _, cache = layers.gru_layer_forward(X, lengths, p)
    dX, grads = layers.gru_layer_backward(cache, R, Rl)
    return _compare(obj, dict(grads, X=dX), dict(p, X=X), perturb)


def check_attention(rng, perturb=False):
    L, B, H = 6, 3, 4
    p = layers.init_attention(rng, H, F64)
    p["Wc"] = rng.normal(0, 0.7, (H, H))
    p["bx"] = rng.uniform(-0.5, 0.5, 3 * H)
    p["bh"] = rng.uniform(-0.5, 0.5, 3 * H)
    Hs = rng.normal(size=(L, B, H))
    hl = rng.normal(size=(B, H))
    lengths = np.array([6, 1, 4])
    R = rng.normal(size=(B, 2 * H))

    def obj():
        o, _ = layers.attention_forward(Hs, hl, lengths, p)
        return np.sum(o * R)

    _, cache = layers.attention_forward(Hs, hl, lengths, p)
    (dH, dhl), grads = layers.attention_backward(cache, R)
    return _compare(obj, dict(grads, H_all=dH, h_last=dhl), dict(p, H_all=Hs, h_last=hl), perturb)


def _check_bn(rng, train, perturb):
    B, D = 5, 4
    p = {"gamma": rng.uniform(0.5, 1.5, D), "beta": rng.normal(size=D)}
    state = {"running_mean": rng.normal(size=D), "running_var": rng.uniform(0.5, 2.0, D)}
    X = rng.normal(size=(B, D))
    R = rng.normal(size=(B, D))

    def obj():
        out, _ = layers.batchnorm_forward(X, p, dict((k, v.copy()) for k, v in state.items()), train)
        return np.sum(out * R)

    _, cache = layers.batchnorm_forward(X, p, {k: v.copy() for k, v in state.items()}, train)
    dX, grads = layers.batchnorm_backward(cache, R)
    return _compare(obj, dict(grads, X=dX), dict(p, X=X), perturb)


def check_batchnorm_train(rng, perturb=False):
    return _check_bn(rng, True, perturb)


def check_batchnorm_eval(rng, perturb=False):
    return _check_bn(rng, False, perturb)


def check_dropout(rng, perturb=False):
    X = rng.normal(size=(4, 5))
    R = rng.normal(size=(4, 5))
    key = int(rng.integers(0, 2**31))

    def obj():
        out, _ = layers.dropout_forward(X, 0.5, True, SeededRng(key))
        return np.sum(out * R)

    _, cache = layers.dropout_forward(X, 0.5, True, SeededRng(key))
    dX, _ = layers.dropout_backward(cache, R)
    return _compare(obj, {"X": dX}, {"X": X}, perturb)


def check_dense(rng, perturb=False):
    p = {"W": rng.normal(size=(3, 5)), "b": rng.normal(size=3)}
    X = rng.normal(size=(4, 5))
    R = rng.normal(size=(4, 3))

    def obj():
        out, _ = layers.dense_forward(X, p)
        return np.sum(out * R)

    _, cache = layers.dense_forward(X, p)
    dX, grads = layers.dense_backward(cache, R)
    return _compare(obj, dict(grads, X=dX), dict(p, X=X), perturb)


def check_relu(rng, perturb=False):
    X = rng.normal(size=(4, 5))
    X[np.abs(X) < 1e-3] = 0.5  # keep away from the kink
    R = rng.normal(size=(4, 5))

    def obj():
        out, _ = layers.relu_forward(X)
        return np.sum(out * R)

    _, cache = layers.relu_forward(X)
    dX, _ = layers.relu_backward(cache, R)
    return _compare(obj, {"X": dX}, {"X": X}, perturb)


def check_cross_entropy(rng, perturb=False):
    logits = rng.normal(size=(4, 3))
    labels = rng.integers(0, 3, 4)

    def obj():
        return layers.cross_entropy(logits, labels)[0]

    _, grad = layers.cross_entropy(logits, labels)
    return _compare(obj, {"logits": grad}, {"logits": logits}, perturb)


TINY_CONFIG = dict(input_dim=4, num_classes=3, encoder_widths=(8, 8, 6))


def tiny_batch(rng, lengths=(3, 5), dim=4):
    lengths = np.asarray(lengths)
    data = np.zeros((len(lengths), dim, int(lengths.max())))
    for i, n in enumerate(lengths):
        data[i, :, :n] = rng.normal(size=(dim, n))
    return Batch(data=data, lengths=lengths, labels=rng.integers(0, 3, len(lengths)))


def check_model(rng, perturb=False, **overrides):
    """End-to-end loss gradient of the tiny model, train mode (BN + dropout)."""
    cfg = ModelConfig(**dict(TINY_CONFIG, **overrides))
    model = build_model(cfg, rng.child("build"), dtype=F64)
    for k, v in model.params.items():
        if k.endswith((".bx", ".bh", ".b", ".beta")):
            v[...] = rng.uniform(-0.3, 0.3, v.shape)
    batch = tiny_batch(rng.child("batch"))
    drop_key = int(rng.integers(0, 2**31))

    def obj():
        logits, _ = forward(model, batch, train=True, rng=SeededRng(drop_key))
        return layers.cross_entropy(logits, batch.labels)[0]

    logits, caches = forward(model, batch, train=True, rng=SeededRng(drop_key))
    _, dlogits = layers.cross_entropy(logits, batch.labels)
    grads = backward(model, caches, dlogits)
    return _compare(obj, grads, model.params, perturb)


COMPONENTS = {
    "gru_cell": check_gru_cell,
    "gru_layer": check_gru_layer,
    "attention": check_attention,
    "batchnorm_train": check_batchnorm_train,
    "batchnorm_eval": check_batchnorm_eval,
    "dropout": check_dropout,
    "dense": check_dense,
    "relu": check_relu,
    "cross_entropy": check_cross_entropy,
    "model": check_model,
}


def run_suite(seed: int = 0, trials: int = 3, model_trials: int = 1, perturb: str | None = None) -> list:
    """Run every component check; ``perturb`` names one component whose
    analytic gradient is deliberately scaled by 1.01 (fault injection)."""
    results = []
    for name, fn in COMPONENTS.items():
        t0 = time.perf_counter()
        n = model_trials if name == "model" else trials
        worst, count = 0.0, 0
        for trial in range(n):
            err, k = fn(SeededRng(seed, "gradcheck", name, trial), perturb=(perturb == name))
            worst = max(worst, err)
            count += k
        results.append(CheckResult(name, worst, count, time.perf_counter() - t0))
    return results
