"""Stage I learning graph: Gaussian kernel over k nearest shortest-path neighbours."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

K_I = 3


@dataclass(frozen=True)
class AdjacencyA:
    a: np.ndarray  # symmetric kernel weights, zero diagonal
    a_tilde: np.ndarray  # row-normalised a
    k: int
    neighbors: tuple[tuple[int, ...], ...]  # k-NN sets before symmetrisation
    sigma: np.ndarray  # per-node bandwidth

    @property
    def support(self) -> np.ndarray:
        return self.a > 0

    def propagation(self) -> np.ndarray:
        """Aggregation operator: ``a_tilde`` with each row divided by |N_i|."""
        deg = self.support.sum(axis=1)
        return self.a_tilde / deg[:, None]

    def dump_csv(self, path: str | Path, normalized: bool = False) -> None:
        m = self.a_tilde if normalized else self.a
        np.savetxt(path, m, delimiter=",", fmt="%.12g")


def knn(d: np.ndarray, k: int) -> list[list[int]]:
    """k nearest neighbours of every node, self excluded, ties to lower index."""
    n = d.shape[0]
    out = []
    for i in range(n):
        cand = [j for j in range(n) if j != i and np.isfinite(d[i, j])]
        if len(cand) < k:
            raise ValueError(f"node {i} has only {len(cand)} reachable neighbours, need k_I={k}")
        cand.sort(key=lambda j: (d[i, j], j))
        out.append(cand[:k])
    return out


def kernel_weights(d: np.ndarray, k: int) -> tuple[np.ndarray, list[list[int]], np.ndarray]:
    """Unsymmetrised weights exp(-d_ij^2 / delta_i^2) on each k-NN set."""
    n = d.shape[0]
    nbrs = knn(d, k)
    a = np.zeros((n, n))
    sigma = np.zeros(n)
    for i, js in enumerate(nbrs):
        dist = d[i, js]
        sigma[i] = dist.mean()
        if sigma[i] <= 0:
            raise ValueError(f"node {i}: zero bandwidth (coincident neighbours)")
        a[i, js] = np.exp(-(dist ** 2) / sigma[i] ** 2)
    return a, nbrs, sigma


def symmetrize(a: np.ndarray) -> np.ndarray:
    return np.maximum(a, a.T)


def row_normalize(a: np.ndarray) -> np.ndarray:
    s = a.sum(axis=1)
    if np.any(s <= 0):
        raise ValueError(f"rows {np.flatnonzero(s <= 0).tolist()} have no support (isolated nodes)")
    return a / s[:, None]


def build_A(d: np.ndarray, k: int = K_I) -> AdjacencyA:
    if k < 1:
        raise ValueError("k_I must be >= 1")
    raw, nbrs, sigma = kernel_weights(np.asarray(d, dtype=float), k)
    a = symmetrize(raw)
    return AdjacencyA(a, row_normalize(a), k, tuple(tuple(js) for js in nbrs), sigma)


@dataclass
class CoverageReport:
    covered: np.ndarray  # bool per node
    hops: np.ndarray  # hops to nearest observed node (inf when unreachable)
    min_k: int | None = None

    @property
    def passed(self) -> bool:
        return bool(self.covered.all())


def _hops_to(support: np.ndarray, observed) -> np.ndarray:
    n = support.shape[0]
    hops = np.full(n, np.inf)
    frontier = np.zeros(n, dtype=bool)
    frontier[list(observed)] = True
    hops[frontier] = 0
    seen = frontier.copy()
    step = 0
    while frontier.any():
        step += 1
        nxt = support[frontier].any(axis=0) & ~seen
        hops[nxt] = step
        seen |= nxt
        frontier = nxt
    return hops


def coverage_check(support, observed, layers: int, d: np.ndarray | None = None,
                   k_max: int | None = None) -> CoverageReport:
    """Which nodes reach an observed node within ``layers`` hops of ``support``.

    ``support`` is any boolean adjacency (pass ``A.support`` or the physical
    adjacency). With a distance table ``d`` the report also carries the
    smallest k_I whose constructed A covers every node.
    """
    if isinstance(support, AdjacencyA):
        support = support.support
    support = np.asarray(support, dtype=bool)
    hops = _hops_to(support, observed)
    rep = CoverageReport(hops <= layers, hops)
    if d is not None:
        n = d.shape[0]
        for k in range(1, (k_max or n - 1) + 1):
            try:
                A = build_A(d, k)
            except ValueError:
                break
            if (_hops_to(A.support, observed) <= layers).all():
                rep.min_k = k
                break
    return rep


def check_A_coverage(A: AdjacencyA, observed, layers: int) -> CoverageReport:
    rep = coverage_check(A.support, observed, layers)
    if not rep.passed:
        missing = np.flatnonzero(~rep.covered).tolist()
        warnings.warn(f"k_I={A.k}: nodes {missing} see no observed node within {layers} layers")
    return rep
