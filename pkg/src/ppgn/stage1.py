"""Stage I: local aggregation over the constructed adjacency, global transform.

Each sample is an (n, 6) matrix. ``K`` aggregation layers update every node
from its own features concatenated with the weighted mean of its
neighbours; the final hidden matrix is flattened node-major and mapped by two
affine layers to one logit per fault class.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .adjacency import AdjacencyA
from .tensor import (
    NumericError,
    ParamStore,
    Tensor,
    adam_step,
    add,
    concat_cols,
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

logger = logging.getLogger(__name__)


@dataclass
class Stage1Config:
    layers: int = 3
    width: int = 32
    lam: float = 5e-3
    lr: float = 1e-3
    T1: int = 10
    T2: int = 10
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    schedule: str = "alternating"  # or "joint"

    def __post_init__(self):
        if self.T1 < 1 or self.T2 < 1:
            raise ValueError("T1 and T2 must be >= 1")
        if self.schedule not in ("alternating", "joint"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self):
        return asdict(self)


def local_names(layers: int) -> list[str]:
    return [f"W{k}" for k in range(1, layers + 1)]


GLOBAL_NAMES = ["Wf", "bf", "Wo", "bo"]


def init_theta1(n: int, n_classes: int, cfg: Stage1Config, rng: np.random.Generator,
                n_features: int = 6) -> ParamStore:
    store = ParamStore()
    d = n_features
    for name in local_names(cfg.layers):
        store.add(name, glorot(rng, 2 * d, cfg.width))
        d = cfg.width
    store.add("Wf", glorot(rng, n * d, 2 * n))
    store.add("bf", np.zeros(2 * n))
    store.add("Wo", glorot(rng, 2 * n, n_classes))
    store.add("bo", np.zeros(n_classes))
    return store


def local_aggregate_layer(H, P, W) -> Tensor:
    """h_i' = relu([h_i || sum_j P_ij h_j] W) with P = a_tilde / |N_i|."""
    M = propagate(P, H)
    return relu(matmul(concat_cols(H, M), W))


def global_transform(H, params) -> tuple[Tensor, np.ndarray]:
    """Flatten (B, n, d) node-major and map to class logits and probabilities."""
    H = H if isinstance(H, Tensor) else Tensor(H)
    batch = H.shape[:-2]
    flat = reshape(H, batch + (H.shape[-2] * H.shape[-1],))
    hidden = add(matmul(flat, params["Wf"]), params["bf"])
    f = add(matmul(hidden, params["Wo"]), params["bo"])
    return f, softmax(f.data)


def forward(X, P, params) -> Tensor:
    H = X if isinstance(X, Tensor) else Tensor(X)
    k = 1
    while f"W{k}" in params:
        H = local_aggregate_layer(H, P, params[f"W{k}"])
        k += 1
    f, _ = global_transform(H, params)
    return f


def loss_stage1(X, y, P, params, lam: float) -> Tensor:
    """Mean cross entropy over the batch plus lam * sum of squared parameters."""
    if len(y) == 0:
        raise ValueError("empty batch")
    f = forward(X, P, params)
    ce, _ = softmax_xent(f, y)
    if lam == 0:
        return ce
    return add(ce, scale(sum_squares(params.values()), lam))


def block_for_epoch(epoch: int, cfg: Stage1Config) -> str:
    if cfg.schedule == "joint":
        return "joint"
    return "local" if epoch % (cfg.T1 + cfg.T2) < cfg.T1 else "global"


@dataclass
class Stage1Model:
    store: ParamStore
    P: np.ndarray
    cfg: Stage1Config
    history: list[dict] = field(default_factory=list)

    def logits(self, X, chunk: int = 512) -> np.ndarray:
        out = []
        for s in range(0, len(X), chunk):
            out.append(forward(X[s:s + chunk], self.P, self.store.params).data)
        return np.concatenate(out)

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        z = softmax(self.logits(X))
        return np.argmax(z, axis=1), z


def train_stage1(X: np.ndarray, y: np.ndarray, A: AdjacencyA | np.ndarray, n_classes: int,
                 cfg: Stage1Config | None = None, store: ParamStore | None = None) -> Stage1Model:
    """Block-coordinate training: T1 epochs on the aggregation weights with the
    global layers frozen, then T2 epochs the other way round, repeated until
    the epoch budget is spent. ``schedule="joint"`` updates everything every
    epoch instead."""
    cfg = cfg or Stage1Config()
    if len(y) == 0:
        raise ValueError("no labelled samples")
    P = A.propagation() if isinstance(A, AdjacencyA) else np.asarray(A)
    rng = np.random.default_rng(cfg.seed)
    n = X.shape[1]
    if store is None:
        store = init_theta1(n, n_classes, cfg, rng, X.shape[2])
    blocks = {
        "local": local_names(cfg.layers),
        "global": GLOBAL_NAMES,
        "joint": local_names(cfg.layers) + GLOBAL_NAMES,
    }
    model = Stage1Model(store, P, cfg)
    for epoch in range(cfg.epochs):
        block = block_for_epoch(epoch, cfg)
        order = rng.permutation(len(y))
        losses = []
        for s in range(0, len(y), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            loss = value_and_grad(lambda p: loss_stage1(X[b], y[b], P, p, cfg.lam), store)
            if not np.isfinite(loss):
                raise NumericError(f"stage I loss diverged at epoch {epoch} ({block} block): {loss}")
            adam_step(store, lr=cfg.lr, names=blocks[block])
            losses.append(loss * len(b))
        acc = float(np.mean(np.argmax(model.logits(X), axis=1) == y))
        rec = {"epoch": epoch, "phase": block, "loss": sum(losses) / len(y), "train_acc": acc}
        model.history.append(rec)
        logger.debug("stage I epoch %d %s loss %.4f", epoch, block, rec["loss"])
    return model


def predict_stage1(X, model: Stage1Model) -> tuple[np.ndarray, np.ndarray]:
    return model.predict(X)
