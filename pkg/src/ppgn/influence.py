"""Random-walk view of the two learning graphs.

For linear aggregation the influence of node j's input on node i after K
layers is the probability that a K-step walk from i ends at j, so node
influence can be read off powers of the transition matrix.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import scipy.sparse as sp


def check_stochastic(T: np.ndarray, tol: float = 1e-10) -> None:
    T = np.asarray(T, dtype=float)
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValueError(f"transition matrix must be square, got {T.shape}")
    if np.any(T < 0):
        raise ValueError("transition matrix has negative entries")
    bad = np.flatnonzero(np.abs(T.sum(axis=1) - 1) > tol)
    if len(bad):
        raise ValueError(f"rows {bad.tolist()} do not sum to 1")


def transition(adjacency: np.ndarray) -> np.ndarray:
    """Row-normalise a non-negative adjacency; isolated rows stay zero."""
    a = np.asarray(adjacency, dtype=float)
    s = a.sum(axis=1, keepdims=True)
    return np.divide(a, s, out=np.zeros_like(a), where=s > 0)


def influence_matrix(T: np.ndarray, K: int) -> np.ndarray:
    """M[i, j] = probability that a K-step walk from i ends at j."""
    check_stochastic(T)
    return np.linalg.matrix_power(np.asarray(T, dtype=float), K)


def path_enumeration_oracle(T: np.ndarray, i: int, j: int, K: int) -> float:
    """Sum of edge-weight products over every length-K walk from i to j."""
    T = np.asarray(T, dtype=float)
    n = T.shape[0]
    if n > 10 or K > 6:
        raise ValueError(f"instance too large for enumeration (n={n}, K={K})")
    succ = [np.flatnonzero(T[u]) for u in range(n)]
    total = 0.0

    def walk(u: int, steps: int, weight: float) -> None:
        nonlocal total
        if steps == 0:
            if u == j:
                total += weight
            return
        for v in succ[u]:
            walk(v, steps - 1, weight * T[u, v])

    walk(i, K, 1.0)
    return total


def total_observed_influence(T: np.ndarray, observed, K: int) -> np.ndarray:
    """Per node: probability mass that K-step walks deliver onto observed nodes."""
    M = influence_matrix(T, K)
    obs = list(observed)
    if not obs:
        return np.zeros(M.shape[0])
    return M[:, obs].sum(axis=1)


def invisible_nodes(T, observed, K) -> list[int]:
    return np.flatnonzero(total_observed_influence(T, observed, K) == 0).tolist()


def write_influence_csv(path: str | Path, node_ids, influence: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "total_observed_influence", "covered"])
        for nid, v in zip(node_ids, influence):
            w.writerow([nid, f"{v:.12g}", "yes" if v > 0 else "no"])


def label_influence_ratio(W, labels, p: int, L: int) -> float:
    """Share of p's L-step walk mass landing on other samples with p's label.

    ``W`` is the row-stochastic sample graph. Sample p itself is left out of
    both sums since its label is what is being predicted; an isolated sample
    scores 0.
    """
    labels = np.asarray(labels)
    e = np.zeros(W.shape[0])
    e[p] = 1.0
    WT = W.T.tocsr() if sp.issparse(W) else np.asarray(W).T
    for _ in range(L):
        e = WT @ e
    e[p] = 0.0
    denom = e.sum()
    if denom <= 0:
        return 0.0
    return float(e[labels == labels[p]].sum() / denom)


def mean_label_influence_ratio(W, labels, samples, L: int) -> float:
    return float(np.mean([label_influence_ratio(W, labels, p, L) for p in samples]))


# -- gradients as influence ------------------------------------------------------


def linear_surrogate(T: np.ndarray, H0: np.ndarray, K: int) -> np.ndarray:
    """Aggregation-only update h^k = T h^(k-1), K times."""
    H = np.asarray(H0, dtype=float)
    for _ in range(K):
        H = T @ H
    return H


def fd_jacobian_blocks(fn, H0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """J[i, j, :, :] = d fn(H0)[i] / d H0[j] by central differences.

    ``fn`` maps an (n, d) array to an (n, e) array.
    """
    H0 = np.asarray(H0, dtype=float)
    n, d = H0.shape
    out0 = fn(H0)
    J = np.zeros((out0.shape[0], n, out0.shape[1], d))
    for j in range(n):
        for a in range(d):
            up = H0.copy()
            up[j, a] += h
            down = H0.copy()
            down[j, a] -= h
            J[:, j, :, a] = (fn(up) - fn(down)) / (2 * h)
    return J


def influence_norms(J: np.ndarray) -> np.ndarray:
    """Per (i, j) sum of absolute Jacobian entries."""
    return np.abs(J).sum(axis=(2, 3))
