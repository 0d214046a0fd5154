"""Comparison classifiers: a plain MLP and a GCN over the physical feeder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    NumericError,
    ParamStore,
    adam_step,
    add,
    glorot,
    matmul,
    propagate,
    relu,
    reshape,
    scale,
    softmax,
    softmax_xent,
    sum_squares,
    value_and_grad,
)


@dataclass
class BaselineConfig:
    lam: float = 5e-3
    lr: float = 1e-3
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    gcn_width: int = 32
    gcn_layers: int = 3


def gcn_operator(adjacency: np.ndarray) -> np.ndarray:
    """Symmetric-normalised physical adjacency with self loops."""
    a = np.asarray(adjacency, dtype=float) + np.eye(len(adjacency))
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def mlp_logits(X, params):
    h = reshape(X, (X.shape[0], -1)) if X.ndim == 3 else X
    l = 1
    while f"W{l}" in params:
        h = relu(add(matmul(h, params[f"W{l}"]), params[f"b{l}"]))
        l += 1
    return add(matmul(h, params["Wo"]), params["bo"])


def gcn_logits(X, P, params):
    h = X
    l = 1
    while f"W{l}" in params:
        h = relu(propagate(P, matmul(h, params[f"W{l}"])))
        l += 1
    flat = reshape(h, (h.shape[0], h.shape[1] * h.shape[2]))
    return add(matmul(flat, params["Wo"]), params["bo"])


def init_mlp(in_dim: int, n_classes: int, rng) -> ParamStore:
    """Two ReLU layers, each halving the width, then a linear output."""
    store = ParamStore()
    d = in_dim
    for l in (1, 2):
        store.add(f"W{l}", glorot(rng, d, d // 2))
        store.add(f"b{l}", np.zeros(d // 2))
        d //= 2
    store.add("Wo", glorot(rng, d, n_classes))
    store.add("bo", np.zeros(n_classes))
    return store


def init_gcn(n: int, n_features: int, n_classes: int, cfg: BaselineConfig, rng) -> ParamStore:
    store = ParamStore()
    d = n_features
    for l in range(1, cfg.gcn_layers + 1):
        store.add(f"W{l}", glorot(rng, d, cfg.gcn_width))
        d = cfg.gcn_width
    store.add("Wo", glorot(rng, n * d, n_classes))
    store.add("bo", np.zeros(n_classes))
    return store


@dataclass
class Baseline:
    kind: str
    store: ParamStore
    P: np.ndarray | None = None
    history: list = field(default_factory=list)

    def logits(self, X) -> np.ndarray:
        if self.kind == "mlp":
            return mlp_logits(X.reshape(len(X), -1), self.store.params).data
        return gcn_logits(X, self.P, self.store.params).data

    def predict(self, X) -> np.ndarray:
        return np.argmax(softmax(self.logits(X)), axis=1)


def _fit(model: Baseline, X, y, cfg: BaselineConfig) -> Baseline:
    rng = np.random.default_rng(cfg.seed + 1)

    def loss_fn(p, b):
        f = mlp_logits(X[b].reshape(len(b), -1), p) if model.kind == "mlp" else gcn_logits(X[b], model.P, p)
        ce, _ = softmax_xent(f, y[b])
        return add(ce, scale(sum_squares(p.values()), cfg.lam))

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            loss = value_and_grad(lambda p: loss_fn(p, b), model.store)
            if not np.isfinite(loss):
                raise NumericError(f"{model.kind} baseline diverged at epoch {epoch}")
            adam_step(model.store, lr=cfg.lr)
            total += loss * len(b)
        model.history.append({"epoch": epoch, "loss": total / len(y)})
    return model


def baseline_mlp(X, y, n_classes: int, cfg: BaselineConfig | None = None) -> Baseline:
    cfg = cfg or BaselineConfig()
    rng = np.random.default_rng(cfg.seed)
    store = init_mlp(X.shape[1] * X.shape[2], n_classes, rng)
    return _fit(Baseline("mlp", store), X, y, cfg)


def baseline_gcn(X, y, adjacency: np.ndarray, n_classes: int, cfg: BaselineConfig | None = None) -> Baseline:
    cfg = cfg or BaselineConfig()
    rng = np.random.default_rng(cfg.seed)
    store = init_gcn(X.shape[1], X.shape[2], n_classes, cfg, rng)
    return _fit(Baseline("gcn", store, gcn_operator(adjacency)), X, y, cfg)
