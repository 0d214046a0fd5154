"""Stage II: label propagation over a sample-similarity graph.

Samples are vertices. Two samples are linked when their masked Stage I
embeddings are among each other's ``k_II`` most cosine-similar; two graph
convolution layers then spread the few known labels across the graph.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .tensor import (
    NumericError,
    ParamStore,
    Tensor,
    adam_step,
    add,
    glorot,
    matmul,
    propagate,
    relu,
    scale,
    softmax,
    softmax_xent,
    sum_squares,
    value_and_grad,
)

logger = logging.getLogger(__name__)

K_II = 120
B_FORMAT = "ppgn-B-v1"


def mask_embedding(z: np.ndarray, adjacency: np.ndarray) -> np.ndarray:
    """Keep z on the predicted class and its physical neighbours, zero elsewhere.

    ``z`` is (c,) or (N, c); ``adjacency`` is the boolean class adjacency.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    star = np.argmax(Z, axis=1)
    keep = adjacency[star].copy()
    keep[np.arange(len(Z)), star] = True
    out = np.where(keep, Z, 0.0)
    return out[0] if single else out


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        warnings.warn("cosine similarity of a zero vector taken as 0")
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def similarity_matrix(E: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(E, axis=1)
    if np.any(norms == 0):
        warnings.warn(f"{int(np.sum(norms == 0))} zero embeddings; their similarities are 0")
    safe = np.where(norms == 0, 1.0, norms)
    U = E / safe[:, None]
    return U @ U.T


@dataclass
class SimilarityB:
    B: sp.csr_matrix
    k: int

    @property
    def N(self) -> int:
        return self.B.shape[0]

    def b_hat(self) -> sp.csr_matrix:
        return (sp.identity(self.N, format="csr") + self.B).tocsr()

    def normalized(self) -> sp.csr_matrix:
        """D^-1/2 (I + B) D^-1/2."""
        Bh = self.b_hat()
        d = np.asarray(Bh.sum(axis=1)).ravel()
        s = sp.diags(1.0 / np.sqrt(d))
        return (s @ Bh @ s).tocsr()

    def random_walk(self) -> sp.csr_matrix:
        """Row-stochastic form of I + B."""
        Bh = self.b_hat()
        d = np.asarray(Bh.sum(axis=1)).ravel()
        return (sp.diags(1.0 / d) @ Bh).tocsr()

    def save(self, path: str | Path) -> None:
        coo = self.B.tocoo()
        with open(path, "w") as fh:
            fh.write(json.dumps({"format": B_FORMAT, "N": self.N, "k_II": self.k}) + "\n")
            for p, q, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{int(p)},{int(q)},{float(v)!r}\n")

    @classmethod
    def load(cls, path: str | Path) -> "SimilarityB":
        with open(path) as fh:
            head = json.loads(fh.readline())
            if head.get("format") != B_FORMAT:
                raise ValueError(f"{path}: not a {B_FORMAT} file")
            rows = [line.split(",") for line in fh if line.strip()]
        N = head["N"]
        p = [int(r[0]) for r in rows]
        q = [int(r[1]) for r in rows]
        v = [float(r[2]) for r in rows]
        return cls(sp.csr_matrix((v, (p, q)), shape=(N, N)), head["k_II"])


def top_k_mask(S: np.ndarray, k: int) -> np.ndarray:
    """mask[p, q] is True when q is among the k largest entries of row p
    (diagonal excluded, ties to the lower index)."""
    N = S.shape[0]
    ranked = -S.copy()
    np.fill_diagonal(ranked, np.inf)
    order = np.argsort(ranked, axis=1, kind="stable")[:, :k]
    mask = np.zeros((N, N), dtype=bool)
    mask[np.arange(N)[:, None], order] = True
    return mask


def degree_cap(S: np.ndarray, cand: np.ndarray, cap: int) -> np.ndarray:
    """Symmetric mask of candidate edges ranking within ``cap`` at both ends.

    A sample that sits in many other samples' top-k lists would otherwise
    collect an unbounded number of links.
    """
    N = S.shape[0]
    ranked = np.where(cand, -S, np.inf)
    order = np.argsort(ranked, axis=1, kind="stable")
    rank = np.empty((N, N), dtype=np.int64)
    rank[np.arange(N)[:, None], order] = np.arange(N)[None, :]
    ok = cand & (rank < cap)
    return ok & ok.T


def build_B(E: np.ndarray, k: int = K_II) -> SimilarityB:
    """Sparse similarity graph over the rows of ``E`` (N x dim embeddings).

    Entry (p, q) keeps s(p, q) when it ranks in the top ``k`` of row p or of
    column q, and survives a cap of ``2k`` links per sample (each end keeps
    its most similar candidates). Negative similarities (possible for raw
    features) are dropped.
    """
    E = np.asarray(E, dtype=float)
    N = E.shape[0]
    if N < 2:
        raise ValueError("need at least two samples")
    if k < 1:
        raise ValueError("k_II must be >= 1")
    if k >= N:
        warnings.warn(f"k_II={k} >= N={N}: similarity graph is dense")
        k = N - 1
    S = similarity_matrix(E)
    keep = top_k_mask(S, k)
    keep |= keep.T
    keep &= degree_cap(S, keep, 2 * k)
    B = np.where(keep, np.clip(S, 0.0, 1.0), 0.0)
    np.fill_diagonal(B, 0.0)
    B = np.maximum(B, B.T)  # guard against last-ulp asymmetry in S
    return SimilarityB(sp.csr_matrix(B), k)


# -- the network ---------------------------------------------------------------


@dataclass
class Stage2Config:
    layers: int = 2
    width_factor: int = 3  # hidden width = width_factor * n
    lam: float = 5e-5
    lr: float = 1e-3
    epochs: int = 200
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def init_theta2(in_dim: int, hidden: int, n_classes: int, layers: int, rng) -> ParamStore:
    store = ParamStore()
    d = in_dim
    for l in range(1, layers + 1):
        store.add(f"W{l}", glorot(rng, d, hidden))
        d = hidden
    store.add("Wo", glorot(rng, d, n_classes))
    store.add("bo", np.zeros(n_classes))
    return store


def gcl_logits(C0, S, params) -> Tensor:
    """C^l = relu(S C^{l-1} W^l); logits = C^L Wo + bo."""
    C = C0 if isinstance(C0, Tensor) else Tensor(C0)
    l = 1
    while f"W{l}" in params:
        C = relu(propagate(S, matmul(C, params[f"W{l}"])))
        l += 1
    return add(matmul(C, params["Wo"]), params["bo"])


def gcl_forward(C0, S, params) -> np.ndarray:
    return softmax(gcl_logits(C0, S, params).data)


def loss_stage2(C0, S, y, rows, params, lam: float) -> Tensor:
    """Cross entropy on the labelled ``rows`` only, plus lam * sum of squares."""
    ce, _ = softmax_xent(gcl_logits(C0, S, params), y, rows)
    if lam == 0:
        return ce
    return add(ce, scale(sum_squares(params.values()), lam))


@dataclass
class Stage2Model:
    store: ParamStore
    cfg: Stage2Config
    history: list[dict] = field(default_factory=list)

    def predict_proba(self, C0, S) -> np.ndarray:
        return gcl_forward(C0, S, self.store.params)


def train_stage2(C0: np.ndarray, S, y_labeled: np.ndarray, rows: np.ndarray, n_classes: int,
                 cfg: Stage2Config | None = None) -> Stage2Model:
    """Full-batch transductive training: every row is propagated, only
    ``rows`` (with labels ``y_labeled``) enter the loss."""
    cfg = cfg or Stage2Config()
    rows = np.asarray(rows)
    if len(rows) == 0:
        raise ValueError("no labelled samples")
    rng = np.random.default_rng(cfg.seed)
    n = C0.shape[1] // 6
    store = init_theta2(C0.shape[1], cfg.width_factor * n, n_classes, cfg.layers, rng)
    model = Stage2Model(store, cfg)
    for epoch in range(cfg.epochs):
        loss = value_and_grad(lambda p: loss_stage2(C0, S, y_labeled, rows, p, cfg.lam), store)
        if not np.isfinite(loss):
            raise NumericError(f"stage II loss diverged at epoch {epoch}: {loss}")
        adam_step(store, lr=cfg.lr)
        model.history.append({"epoch": epoch, "loss": loss})
    return model


def predict_stage2(y_hat: np.ndarray) -> np.ndarray:
    return np.argmax(y_hat, axis=1)
