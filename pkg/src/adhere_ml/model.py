"""Hybrid LSTM + feedforward fusion classifier and a logistic baseline.

Forward pass for one batch::

    h_T        = LSTM(dynamic sequence, oldest lag first)
    s          = relu(static @ fnn_W + fnn_b)
    z          = dropout([h_T, s])
    q          = relu(z @ final_W + final_b)
    p          = sigmoid(q @ out_w + out_b)

LSTM gates are stacked column-wise in the order input, forget, cell, output.
Gradients are derived by hand (backpropagation through time) in float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .preprocess import Design

FORMAT_VERSION = "adhere-ml/1"
PROB_CLAMP = 1e-7
GATES = ("input", "forget", "cell", "output")


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    lstm_hidden: int = 16
    fnn_hidden: int = 8
    final_hidden: int = 8
    dropout_rate: float = 0.2
    learning_rate: float = 1e-2
    batch_size: int = 128
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    min_delta: float = 1e-6

    def __post_init__(self):
        for name in ("lstm_hidden", "fnn_hidden", "final_hidden", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ModelError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ModelError("dropout_rate must lie in [0, 1)")
        if self.max_epochs < 0 or self.patience < 1:
            raise ModelError("max_epochs must be >= 0 and patience >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 means the initial parameters were kept
    stop_reason: str = "max_epochs"

    def to_dict(self) -> dict:
        return asdict(self)


Params = dict[str, np.ndarray]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def param_shapes(config: ModelConfig, dynamic_channels: int, static_dim: int) -> dict[str, tuple[int, ...]]:
    H, F, D = config.lstm_hidden, config.fnn_hidden, config.final_hidden
    return {
        "lstm_W": (dynamic_channels, 4 * H),
        "lstm_U": (H, 4 * H),
        "lstm_b": (4 * H,),
        "fnn_W": (static_dim, F),
        "fnn_b": (F,),
        "final_W": (H + F, D),
        "final_b": (D,),
        "out_w": (D,),
        "out_b": (1,),
    }


def init_params(config: ModelConfig, dynamic_channels: int, static_dim: int, seed: int | None = None) -> Params:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; forget-gate bias 1."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    H = config.lstm_hidden
    params: Params = {}
    for name, shape in param_shapes(config, dynamic_channels, static_dim).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[0]
        limit = 1.0 / math.sqrt(fan_in) if fan_in else 0.0
        params[name] = rng.uniform(-limit, limit, size=shape)
    params["lstm_b"][H:2 * H] = 1.0
    return params


def _check_inputs(params: Params, seq: np.ndarray, static: np.ndarray) -> None:
    if seq.ndim != 3 or static.ndim != 2 or seq.shape[0] != static.shape[0]:
        raise ModelError(f"expected (n, T, C) and (n, S) inputs, got {seq.shape} and {static.shape}")
    if seq.shape[2] != params["lstm_W"].shape[0]:
        raise ModelError(f"dynamic input has {seq.shape[2]} channels, parameters expect {params['lstm_W'].shape[0]}")
    if static.shape[1] != params["fnn_W"].shape[0]:
        raise ModelError(f"static input has {static.shape[1]} features, parameters expect {params['fnn_W'].shape[0]}")


def forward(
    params: Params,
    seq: np.ndarray,
    static: np.ndarray,
    train: bool = False,
    dropout_mask: np.ndarray | None = None,
) -> tuple[np.ndarray, dict]:
    """Return probabilities and a cache for :func:`backward`.

    ``seq`` is (n, T, C) ordered oldest lag first. In train mode
    ``dropout_mask`` (already scaled by 1/(1-rate)) multiplies the
    concatenated hidden state; eval mode ignores it.
    """
    seq = np.asarray(seq, dtype=float)
    static = np.asarray(static, dtype=float)
    _check_inputs(params, seq, static)
    n, T, _ = seq.shape
    H = params["lstm_U"].shape[0]
    W, U, b = params["lstm_W"], params["lstm_U"], params["lstm_b"]
    h = np.zeros((n, H))
    c = np.zeros((n, H))
    steps = []
    for t in range(T):
        a = seq[:, t, :] @ W + h @ U + b
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        steps.append((h_prev, c_prev, i, f, g, o, tc))
    s_pre = static @ params["fnn_W"] + params["fnn_b"]
    s = np.maximum(s_pre, 0.0)
    z = np.hstack([h, s])
    mask = dropout_mask if (train and dropout_mask is not None) else None
    zd = z * mask if mask is not None else z
    q_pre = zd @ params["final_W"] + params["final_b"]
    q = np.maximum(q_pre, 0.0)
    logit = q @ params["out_w"] + params["out_b"][0]
    prob = _sigmoid(logit)
    cache = dict(seq=seq, static=static, steps=steps, s_pre=s_pre, mask=mask, zd=zd, q_pre=q_pre, q=q, logit=logit)
    return prob, cache


def backward(params: Params, cache: dict, dlogit: np.ndarray) -> tuple[Params, np.ndarray, np.ndarray]:
    """Gradients of sum(dlogit * logit) w.r.t. parameters, sequence and static input."""
    H = params["lstm_U"].shape[0]
    grads: Params = {}
    q, q_pre, zd = cache["q"], cache["q_pre"], cache["zd"]
    grads["out_w"] = q.T @ dlogit
    grads["out_b"] = np.array([dlogit.sum()])
    dq = np.outer(dlogit, params["out_w"]) * (q_pre > 0)
    grads["final_W"] = zd.T @ dq
    grads["final_b"] = dq.sum(axis=0)
    dz = dq @ params["final_W"].T
    if cache["mask"] is not None:
        dz = dz * cache["mask"]
    dh = dz[:, :H]
    ds = dz[:, H:] * (cache["s_pre"] > 0)
    grads["fnn_W"] = cache["static"].T @ ds
    grads["fnn_b"] = ds.sum(axis=0)
    dstatic = ds @ params["fnn_W"].T

    seq = cache["seq"]
    W, U = params["lstm_W"], params["lstm_U"]
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros_like(params["lstm_b"])
    dseq = np.zeros_like(seq)
    dc = np.zeros_like(dh)
    for t in range(seq.shape[1] - 1, -1, -1):
        h_prev, c_prev, i, f, g, o, tc = cache["steps"][t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        da = np.hstack([
            dc * g * i * (1.0 - i),
            dc * c_prev * f * (1.0 - f),
            dc * i * (1.0 - g * g),
            do * o * (1.0 - o),
        ])
        dW += seq[:, t, :].T @ da
        dU += h_prev.T @ da
        db += da.sum(axis=0)
        dseq[:, t, :] = da @ W.T
        dh = da @ U.T
        dc = dc * f
    grads["lstm_W"], grads["lstm_U"], grads["lstm_b"] = dW, dU, db
    return grads, dseq, dstatic


def bce(prob: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1.0 - p)))


def _dloss_dlogit(prob: np.ndarray, y: np.ndarray) -> np.ndarray:
    # zero gradient where the clamp is active, matching the clamped loss
    inside = (prob > PROB_CLAMP) & (prob < 1.0 - PROB_CLAMP)
    return np.where(inside, prob - y, 0.0) / y.shape[0]


def loss_and_grads(
    params: Params,
    seq: np.ndarray,
    static: np.ndarray,
    y: np.ndarray,
    dropout_mask: np.ndarray | None = None,
) -> tuple[float, Params]:
    """Mean binary cross-entropy and its exact gradient for every tensor."""
    y = np.asarray(y, dtype=float)
    prob, cache = forward(params, seq, static, train=dropout_mask is not None, dropout_mask=dropout_mask)
    grads, _, _ = backward(params, cache, _dloss_dlogit(prob, y))
    return bce(prob, y), grads


def logit(params: Params, seq: np.ndarray, static: np.ndarray) -> np.ndarray:
    return forward(params, seq, static)[1]["logit"]


def logit_input_gradients(params: Params, seq: np.ndarray, static: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode logits and their gradients w.r.t. both inputs."""
    _, cache = forward(params, seq, static)
    _, dseq, dstatic = backward(params, cache, np.ones(seq.shape[0]))
    return cache["logit"], dseq, dstatic


def predict_proba(params: Params, design: Design) -> np.ndarray:
    return forward(params, design.sequence(), design.static)[0]


def classify(prob: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(int)


def predict(params: Params, design: Design) -> np.ndarray:
    return classify(predict_proba(params, design))


class _Adam:
    def __init__(self, params: Params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def fit_adam(
    params: Params,
    n_train: int,
    batch_loss_grads: Callable[[Params, np.ndarray, np.random.Generator], tuple[float, Params]],
    val_loss: Callable[[Params], float],
    config: ModelConfig,
    rng: np.random.Generator,
    restore_best: bool = True,
) -> tuple[Params, TrainHistory]:
    """Minibatch Adam with patience-based early stopping on validation loss."""
    params = {k: v.copy() for k, v in params.items()}
    opt = _Adam(params, config.learning_rate)
    hist = TrainHistory()
    best = math.inf
    best_params = {k: v.copy() for k, v in params.items()}
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = batch_loss_grads(params, idx, rng)
            opt.step(params, grads)
            total += loss * len(idx)
        hist.train_loss.append(total / n_train)
        vl = val_loss(params)
        hist.val_loss.append(vl)
        if vl < best - config.min_delta:
            best = vl
            hist.best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                hist.stop_reason = "patience"
                break
    return (best_params if restore_best else params), hist


def train(
    config: ModelConfig, train_set: Design, val_set: Design, restore_best: bool = True
) -> tuple[Params, TrainHistory]:
    """Fit the hybrid network; returns the parameters of the best validation epoch."""
    if len(val_set) == 0:
        raise ModelError("validation set is empty; early stopping is undefined")
    if len(train_set) == 0:
        raise ModelError("training set is empty")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_seed = int(seeds[0].generate_state(1)[0])
    params = init_params(config, train_set.dynamic.shape[2], train_set.static.shape[1], seed=init_seed)
    seq, static, y = train_set.sequence(), train_set.static, train_set.y.astype(float)
    vseq, vstatic, vy = val_set.sequence(), val_set.static, val_set.y.astype(float)
    width = config.lstm_hidden + config.fnn_hidden
    keep = 1.0 - config.dropout_rate

    def batch(p: Params, idx: np.ndarray, rng: np.random.Generator):
        mask = (rng.random((len(idx), width)) < keep) / keep
        return loss_and_grads(p, seq[idx], static[idx], y[idx], dropout_mask=mask)

    def val(p: Params) -> float:
        return bce(forward(p, vseq, vstatic)[0], vy)

    return fit_adam(params, len(train_set), batch, val, config, np.random.default_rng(seeds[1]), restore_best)


# --- logistic-regression baseline -------------------------------------------

def logistic_loss_and_grads(params: Params, X: np.ndarray, y: np.ndarray, l2: float) -> tuple[float, Params]:
    """Mean BCE plus (l2/2)*||w||^2; the bias is not penalized."""
    z = X @ params["w"] + params["b"][0]
    prob = _sigmoid(z)
    d = _dloss_dlogit(prob, y)
    loss = bce(prob, y) + 0.5 * l2 * float(params["w"] @ params["w"])
    return loss, {"w": X.T @ d + l2 * params["w"], "b": np.array([d.sum()])}


def logistic_proba(params: Params, X: np.ndarray) -> np.ndarray:
    return _sigmoid(np.asarray(X, dtype=float) @ params["w"] + params["b"][0])


def logistic_baseline(
    train_set: Design | tuple[np.ndarray, np.ndarray],
    val_set: Design | tuple[np.ndarray, np.ndarray],
    config: ModelConfig | None = None,
    l2: float = 1e-4,
    restore_best: bool = True,
) -> tuple[Params, TrainHistory]:
    """Logistic regression on the flattened dynamic+static vector, trained
    with the same Adam loop and early stopping as the hybrid model."""
    config = config or ModelConfig()
    if isinstance(train_set, Design):
        X, y = train_set.flat(), train_set.y
    else:
        X, y = train_set
    if isinstance(val_set, Design):
        Xv, yv = val_set.flat(), val_set.y
    else:
        Xv, yv = val_set
    if len(yv) == 0:
        raise ModelError("validation set is empty; early stopping is undefined")
    X, y = np.asarray(X, dtype=float), np.asarray(y, dtype=float)
    Xv, yv = np.asarray(Xv, dtype=float), np.asarray(yv, dtype=float)
    params = {"w": np.zeros(X.shape[1]), "b": np.zeros(1)}

    def batch(p: Params, idx: np.ndarray, rng: np.random.Generator):
        return logistic_loss_and_grads(p, X[idx], y[idx], l2)

    def val(p: Params) -> float:
        return logistic_loss_and_grads(p, Xv, yv, l2)[0]

    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(2)[1])
    return fit_adam(params, len(y), batch, val, config, rng, restore_best)


# --- persistence ---------------------------------------------------------------

def _reject_constant(token: str):
    raise ModelError(f"non-finite value {token} in model file")


def save_params(
    path: str | Path,
    params: Params,
    config: ModelConfig | None = None,
    feature_names: dict | None = None,
    kind: str = "hybrid",
) -> None:
    """Write a JSON model file with explicit shapes and row-major values."""
    tensors = {}
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"tensor {name!r} contains non-finite values")
        tensors[name] = {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}
    doc = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "config": config.to_dict() if config else None,
        "feature_names": feature_names,
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_params(path: str | Path, expected_shapes: dict[str, tuple[int, ...]] | None = None) -> tuple[Params, dict]:
    """Read a model file written by :func:`save_params`.

    Returns the tensors plus the document metadata (version, kind, config,
    feature_names). Raises :class:`ModelError` on NaN/Inf or shape problems.
    """
    doc = json.loads(Path(path).read_text(encoding="utf-8"), parse_constant=_reject_constant)
    if doc.get("version") != FORMAT_VERSION:
        raise ModelError(f"unsupported model file version {doc.get('version')!r}")
    params: Params = {}
    for name, t in doc["tensors"].items():
        shape = tuple(int(s) for s in t["shape"])
        values = t["values"]
        if len(values) != int(np.prod(shape)):
            raise ModelError(f"tensor {name!r}: {len(values)} values do not fill shape {shape}")
        arr = np.array(values, dtype=float).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise ModelError(f"tensor {name!r} contains non-finite values")
        params[name] = arr
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in params:
                raise ModelError(f"tensor {name!r} missing from model file")
            if params[name].shape != tuple(shape):
                raise ModelError(f"tensor {name!r} has shape {params[name].shape}, expected {tuple(shape)}")
    meta = {k: doc.get(k) for k in ("version", "kind", "config", "feature_names")}
    return params, meta
