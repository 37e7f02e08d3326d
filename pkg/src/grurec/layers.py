"""Differentiable layers with hand-written backward passes.

Conventions:

* sequences are time-major inside the layers: ``X`` has shape ``(L, B, N)``;
  the batch container transposes from its ``B x N x L`` storage once;
* GRU weights are stored gate-stacked in the order reset, update,
  candidate: ``Wx`` is ``(3H, N)``, ``Wh`` is ``(3H, H)``, ``bx`` and ``bh``
  are ``(3H,)``. :func:`gru_gates` splits them back into the six matrices
  and six bias vectors;
* every ``*_forward`` returns ``(output, cache)`` and the matching
  ``*_backward(cache, upstream)`` returns ``(input_grads, param_grads)``.
"""

from __future__ import annotations

import numpy as np

from grurec.errors import BatchTooSmallError, ConfigError, ContractError, DataError, EmptySequenceError, ShapeError
from grurec.tensor import log_softmax, sigmoid, softmax

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

GATES = ("r", "u", "c")


# --------------------------------------------------------------------------
# initialisation


def init_gru(rng, n_in: int, hidden: int, dtype=np.float32) -> dict:
    bound = 1.0 / np.sqrt(hidden)
    return {
        "Wx": rng.uniform(-bound, bound, (3 * hidden, n_in)).astype(dtype),
        "Wh": rng.uniform(-bound, bound, (3 * hidden, hidden)).astype(dtype),
        "bx": np.zeros(3 * hidden, dtype=dtype),
        "bh": np.zeros(3 * hidden, dtype=dtype),
    }


def init_attention(rng, hidden: int, dtype=np.float32) -> dict:
    bound = 1.0 / np.sqrt(hidden)
    p = {"Wc": rng.uniform(-bound, bound, (hidden, hidden)).astype(dtype)}
    p.update(init_gru(rng, hidden, hidden, dtype))
    return p


def init_dense(rng, d_in: int, d_out: int, dtype=np.float32) -> dict:
    bound = 1.0 / np.sqrt(d_in)
    return {
        "W": rng.uniform(-bound, bound, (d_out, d_in)).astype(dtype),
        "b": np.zeros(d_out, dtype=dtype),
    }


def init_batchnorm(dim: int, dtype=np.float32):
    params = {"gamma": np.ones(dim, dtype=dtype), "beta": np.zeros(dim, dtype=dtype)}
    state = {"running_mean": np.zeros(dim, dtype=dtype), "running_var": np.ones(dim, dtype=dtype)}
    return params, state


def gru_gates(p: dict) -> dict:
    """Per-gate view: ``W_x^q``, ``W_h^q``, ``b_x^q``, ``b_h^q`` for q in r, u, c."""
    H = p["Wh"].shape[1]
    out = {}
    for k, q in enumerate(GATES):
        sl = slice(k * H, (k + 1) * H)
        out[f"Wx_{q}"] = p["Wx"][sl]
        out[f"Wh_{q}"] = p["Wh"][sl]
        out[f"bx_{q}"] = p["bx"][sl]
        out[f"bh_{q}"] = p["bh"][sl]
    return out


def _check_gru(p: dict, n_in: int):
    H = p["Wh"].shape[1]
    if p["Wh"].shape != (3 * H, H) or p["Wx"].shape[0] != 3 * H or p["bx"].shape != (3 * H,) or p["bh"].shape != (3 * H,):
        raise ShapeError("inconsistent GRU parameter shapes")
    if p["Wx"].shape[1] != n_in:
        raise ShapeError(f"GRU expects input dim {p['Wx'].shape[1]}, got {n_in}")
    return H


# --------------------------------------------------------------------------
# GRU


def _gru_step(xp, h, Wh, bh, H):
    hp = h @ Wh.T + bh
    r = sigmoid(xp[:, :H] + hp[:, :H])
    u = sigmoid(xp[:, H:2 * H] + hp[:, H:2 * H])
    hc = hp[:, 2 * H:]
    c = np.tanh(xp[:, 2 * H:] + r * hc)
    h_new = u * h + (1 - u) * c
    return h_new, r, u, c, hc


def _gru_step_backward(dh_new, h_prev, r, u, c, hc, Wh):
    du = dh_new * (h_prev - c)
    dc = dh_new * (1 - u)
    dc_pre = dc * (1 - c * c)
    du_pre = du * u * (1 - u)
    dr_pre = dc_pre * hc * r * (1 - r)
    dxp = np.concatenate([dr_pre, du_pre, dc_pre], axis=1)
    dhp = np.concatenate([dr_pre, du_pre, dc_pre * r], axis=1)
    dh_prev = dh_new * u + dhp @ Wh
    return dxp, dhp, dh_prev


def gru_cell_forward(x_t, h_prev, p):
    """One GRU transition; ``x_t`` is ``(N,)`` or ``(B, N)``."""
    x_t = np.asarray(x_t)
    h_prev = np.asarray(h_prev)
    squeeze = x_t.ndim == 1
    x2 = np.atleast_2d(x_t)
    h2 = np.atleast_2d(h_prev)
    H = _check_gru(p, x2.shape[1])
    if h2.shape != (x2.shape[0], H):
        raise ShapeError(f"hidden state shape {h_prev.shape} does not match H={H}")
    xp = x2 @ p["Wx"].T + p["bx"]
    h_new, r, u, c, hc = _gru_step(xp, h2, p["Wh"], p["bh"], H)
    cache = {"kind": "gru_cell", "x": x2, "h_prev": h2, "r": r, "u": u, "c": c, "hc": hc, "p": p, "squeeze": squeeze}
    return (h_new[0] if squeeze else h_new), cache


def gru_cell_backward(cache, dh):
    _expect(cache, "gru_cell")
    p = cache["p"]
    dh = np.atleast_2d(dh)
    dxp, dhp, dh_prev = _gru_step_backward(dh, cache["h_prev"], cache["r"], cache["u"], cache["c"], cache["hc"], p["Wh"])
    grads = {
        "Wx": dxp.T @ cache["x"],
        "Wh": dhp.T @ cache["h_prev"],
        "bx": dxp.sum(axis=0),
        "bh": dhp.sum(axis=0),
    }
    dx = dxp @ p["Wx"]
    if cache["squeeze"]:
        return (dx[0], dh_prev[0]), grads
    return (dx, dh_prev), grads


def length_mask(lengths, max_len: int, dtype=np.float32) -> np.ndarray:
    """``(L, B, 1)`` mask with ones for ``t < lengths[b]``."""
    lengths = np.asarray(lengths)
    if lengths.ndim != 1:
        raise ShapeError("lengths must be 1-D")
    if np.any(lengths < 1):
        raise EmptySequenceError("every sequence needs at least one step")
    if np.any(lengths > max_len):
        raise ShapeError(f"length exceeds padded size {max_len}")
    t = np.arange(max_len)[:, None]
    return (t < lengths[None, :]).astype(dtype)[:, :, None]


def gru_layer_forward(X, lengths, p):
    """Run a GRU over a padded time-major batch ``X`` of shape ``(L, B, N)``.

    Past each sequence's true length the hidden state is carried forward
    unchanged, so ``h_last`` is the state at the last real step and
    padding never leaks into later layers or the attention scores.
    Returns ``(H_all (L, B, H), h_last (B, H), cache)``.
    """
    X = np.asarray(X)
    if X.ndim != 3:
        raise ShapeError(f"expected (L, B, N) input, got {X.shape}")
    L, B, N = X.shape
    H = _check_gru(p, N)
    mask = length_mask(lengths, L, X.dtype)
    if mask.shape[1] != B:
        raise ShapeError(f"{mask.shape[1]} lengths for batch of {B}")
    XP = X @ p["Wx"].T + p["bx"]
    Wh, bh = p["Wh"], p["bh"]

    H_all = np.empty((L, B, H), dtype=XP.dtype)
    H_prev = np.empty_like(H_all)
    R = np.empty_like(H_all)
    U = np.empty_like(H_all)
    C = np.empty_like(H_all)
    HC = np.empty_like(H_all)
    h = np.zeros((B, H), dtype=XP.dtype)
    for t in range(L):
        H_prev[t] = h
        h_new, R[t], U[t], C[t], HC[t] = _gru_step(XP[t], h, Wh, bh, H)
        m = mask[t]
        h = m * h_new + (1 - m) * h
        H_all[t] = h
    cache = {"kind": "gru_layer", "X": X, "mask": mask, "H_prev": H_prev, "R": R, "U": U, "C": C, "HC": HC, "p": p}
    return H_all, h, cache


def gru_layer_backward(cache, dH_all, dh_last=None):
    """Backprop through time. Returns ``(dX, grads)``."""
    _expect(cache, "gru_layer")
    p = cache["p"]
    X, mask, H_prev = cache["X"], cache["mask"], cache["H_prev"]
    R, U, C, HC = cache["R"], cache["U"], cache["C"], cache["HC"]
    L, B, N = X.shape
    H = H_prev.shape[2]
    Wh = p["Wh"]

    dXP = np.empty((L, B, 3 * H), dtype=H_prev.dtype)
    dHP = np.empty_like(dXP)
    dh = np.zeros((B, H), dtype=H_prev.dtype)
    if dh_last is not None:
        dh = dh + dh_last
    for t in range(L - 1, -1, -1):
        if dH_all is not None:
            dh = dh + dH_all[t]
        m = mask[t]
        dxp, dhp, dh_prev = _gru_step_backward(dh * m, H_prev[t], R[t], U[t], C[t], HC[t], Wh)
        dXP[t] = dxp
        dHP[t] = dhp
        dh = dh * (1 - m) + dh_prev

    flat_dxp = dXP.reshape(L * B, 3 * H)
    flat_dhp = dHP.reshape(L * B, 3 * H)
    grads = {
        "Wx": flat_dxp.T @ X.reshape(L * B, N),
        "Wh": flat_dhp.T @ H_prev.reshape(L * B, H),
        "bx": flat_dxp.sum(axis=0),
        "bh": flat_dhp.sum(axis=0),
    }
    dX = dXP @ p["Wx"]
    return dX, grads


# --------------------------------------------------------------------------
# attention


def attention_forward(H_all, h_last, lengths, p):
    """Global attention scored against the last hidden state, plus the
    auxiliary context from one step of the attentional GRU.

    Returns ``(o_attn (B, 2H), cache)`` with ``o_attn = [c ; c']``.
    """
    H_all = np.asarray(H_all)
    L, B, H = H_all.shape
    if p["Wc"].shape != (H, H):
        raise ShapeError(f"W_c is {p['Wc'].shape}, encoder width is {H}")
    if h_last.shape != (B, H):
        raise ShapeError(f"h_last shape {h_last.shape} does not match ({B}, {H})")
    valid = length_mask(lengths, L, bool)[:, :, 0]

    q = h_last @ p["Wc"]
    scores = np.einsum("lbh,bh->lb", H_all, q)
    scores = np.where(valid, scores, -np.inf)
    weights = softmax(scores, axis=0)
    ctx = np.einsum("lb,lbh->bh", weights, H_all)
    aux, gcache = gru_cell_forward(ctx, h_last, p)
    out = np.concatenate([ctx, aux], axis=1)
    cache = {"kind": "attention", "H_all": H_all, "h_last": h_last, "q": q, "weights": weights, "gru": gcache, "p": p}
    return out, cache


def attention_backward(cache, d_out):
    """Returns ``((dH_all, dh_last), grads)``."""
    _expect(cache, "attention")
    p = cache["p"]
    H_all, h_last, q, w = cache["H_all"], cache["h_last"], cache["q"], cache["weights"]
    H = H_all.shape[2]
    d_ctx = d_out[:, :H]
    d_aux = d_out[:, H:]
    (d_ctx_gru, dh_last), grads = gru_cell_backward(cache["gru"], d_aux)
    d_ctx = d_ctx + d_ctx_gru

    dH_all = w[:, :, None] * d_ctx[None, :, :]
    dw = np.einsum("bh,lbh->lb", d_ctx, H_all)
    ds = w * (dw - np.sum(w * dw, axis=0, keepdims=True))
    dH_all += ds[:, :, None] * q[None, :, :]
    dq = np.einsum("lb,lbh->bh", ds, H_all)
    grads["Wc"] = h_last.T @ dq
    dh_last = dh_last + dq @ p["Wc"].T
    return (dH_all, dh_last), grads


# --------------------------------------------------------------------------
# batch norm, dropout, dense


def batchnorm_forward(X, p, state, train: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Batch normalisation over axis 0.

    In train mode the running statistics in ``state`` are updated in place
    (running variance uses the unbiased batch variance).
    """
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != p["gamma"].shape[0]:
        raise ShapeError(f"batchnorm expects (B, {p['gamma'].shape[0]}), got {X.shape}")
    B = X.shape[0]
    if train:
        if B < 2:
            raise BatchTooSmallError("batch normalisation in train mode needs a batch of at least 2")
        mean = X.mean(axis=0)
        var = X.var(axis=0)
        state["running_mean"] *= 1 - momentum
        state["running_mean"] += momentum * mean
        state["running_var"] *= 1 - momentum
        state["running_var"] += momentum * var * (B / (B - 1))
    else:
        mean = state["running_mean"]
        var = state["running_var"]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (X - mean) * inv_std
    out = p["gamma"] * xhat + p["beta"]
    cache = {"kind": "batchnorm", "xhat": xhat, "inv_std": inv_std, "train": train, "p": p}
    return out, cache


def batchnorm_backward(cache, dout):
    _expect(cache, "batchnorm")
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["p"]["gamma"]
    grads = {"gamma": np.sum(dout * xhat, axis=0), "beta": np.sum(dout, axis=0)}
    dxhat = dout * gamma
    if cache["train"]:
        B = dout.shape[0]
        dX = (inv_std / B) * (B * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    else:
        dX = dxhat * inv_std
    return dX, grads


def dropout_forward(X, rate: float, train: bool, rng=None):
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    X = np.asarray(X)
    if not train or rate == 0:
        return X, {"kind": "dropout", "mask": None}
    keep = rng.random(X.shape) >= rate
    mask = keep.astype(X.dtype) / X.dtype.type(1 - rate)
    return X * mask, {"kind": "dropout", "mask": mask}


def dropout_backward(cache, dout):
    _expect(cache, "dropout")
    if cache["mask"] is None:
        return dout, {}
    return dout * cache["mask"], {}


def dense_forward(X, p):
    X = np.asarray(X)
    W, b = p["W"], p["b"]
    if X.ndim != 2 or X.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"dense layer {W.shape} cannot take input {X.shape}")
    return X @ W.T + b, {"kind": "dense", "X": X, "p": p}


def dense_backward(cache, dout):
    _expect(cache, "dense")
    X, W = cache["X"], cache["p"]["W"]
    return dout @ W, {"W": dout.T @ X, "b": dout.sum(axis=0)}


def relu_forward(X):
    return np.maximum(X, 0), {"kind": "relu", "X": X}


def relu_backward(cache, dout):
    _expect(cache, "relu")
    return dout * (cache["X"] > 0), {}


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"{labels.shape[0]} labels for {B} rows")
    if np.any(labels < 0) or np.any(labels >= C):
        raise DataError(f"label outside [0, {C})")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    grad /= B
    return float(loss), grad


# --------------------------------------------------------------------------
# dispatch


_BACKWARD = {
    "gru_cell": gru_cell_backward,
    "gru_layer": gru_layer_backward,
    "attention": attention_backward,
    "batchnorm": batchnorm_backward,
    "dropout": dropout_backward,
    "dense": dense_backward,
    "relu": relu_backward,
}


def _expect(cache, kind):
    if not isinstance(cache, dict) or cache.get("kind") != kind:
        got = cache.get("kind") if isinstance(cache, dict) else type(cache).__name__
        raise ContractError(f"{kind} backward called with a {got} cache")


def layer_backward(kind: str, cache, upstream, *extra):
    """Generic entry point: dispatch to the backward pass of ``kind``."""
    try:
        fn = _BACKWARD[kind]
    except KeyError:
        raise ContractError(f"unknown layer kind {kind!r}") from None
    _expect(cache, kind)
    return fn(cache, upstream, *extra)
