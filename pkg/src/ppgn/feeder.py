"""Physical feeder model: loading, validation, Y-bus assembly, distances.

Nodes are addressed internally by their position ``0..n-1`` in the feeder
file; the integer ids from the file are kept for reporting. Everything that
works on 3n vectors uses node-major, phase-minor ordering (a, b, c).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

logger = logging.getLogger(__name__)

FEEDER_FORMAT = "ppgn-feeder-v1"
PHASES = "abc"
# Norton equivalent of the slack source, siemens.
SLACK_SHUNT = 1e6

DATA_DIR = Path(__file__).parent / "data"


class FeederError(ValueError):
    """Raised when a feeder file cannot be parsed or violates an invariant."""


class IslandWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Branch:
    frm: int
    to: int
    y: np.ndarray  # 3x3 complex, siemens


@dataclass(frozen=True)
class FeederGraph:
    node_ids: tuple[int, ...]
    phases: tuple[str, ...]
    branches: tuple[Branch, ...]
    # switch -> (branch index, current state); normal states kept for reset
    switches: tuple[tuple[int, str], ...]
    normal_switches: tuple[tuple[int, str], ...]
    observed: tuple[int, ...]
    slack: int
    slack_voltage: np.ndarray
    loads: np.ndarray  # (n, 3) complex current drawn per phase, amperes
    merge: tuple[tuple[int, int], ...] = ()
    name: str = ""
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def index_of(self, node_id: int) -> int:
        if not self._index:
            self._index.update({nid: i for i, nid in enumerate(self.node_ids)})
        try:
            return self._index[node_id]
        except KeyError:
            raise FeederError(f"unknown node id {node_id}") from None

    def phase_mask(self) -> np.ndarray:
        """(n, 3) boolean mask of phases present at each node."""
        mask = np.zeros((self.n, 3), dtype=bool)
        for i, ph in enumerate(self.phases):
            for p in ph:
                mask[i, PHASES.index(p)] = True
        return mask

    def open_branches(self) -> set[int]:
        return {b for b, state in self.switches if state == "open"}

    def active_branches(self) -> list[int]:
        closed = self.open_branches()
        return [k for k in range(len(self.branches)) if k not in closed]

    def edges(self) -> list[tuple[int, int]]:
        return [(self.branches[k].frm, self.branches[k].to) for k in self.active_branches()]

    def adjacency(self) -> np.ndarray:
        """Boolean physical adjacency under the current switch states."""
        adj = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.edges():
            adj[i, j] = adj[j, i] = True
        return adj

    def components(self) -> np.ndarray:
        _, comp = connected_components(csr_matrix(self.adjacency()), directed=False)
        return comp

    def islanded_nodes(self) -> list[int]:
        """Indices of nodes not connected to the slack bus."""
        comp = self.components()
        return [i for i in range(self.n) if comp[i] != comp[self.slack]]

    # -- labels --------------------------------------------------------
    def label_map(self) -> np.ndarray:
        """Class index for each node; -1 for the slack bus.

        Nodes listed together in ``merge`` share one class, mirroring buses
        joined by a switch or regulator at the same location.
        """
        parent = list(range(self.n))

        def find(i: int) -> int:
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for a, b in self.merge:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        labels = np.full(self.n, -1, dtype=int)
        roots: dict[int, int] = {}
        for i in range(self.n):
            if i == self.slack:
                continue
            r = find(i)
            if r not in roots:
                roots[r] = len(roots)
            labels[i] = roots[r]
        return labels

    @property
    def n_classes(self) -> int:
        return int(self.label_map().max()) + 1

    def class_nodes(self) -> list[list[int]]:
        labels = self.label_map()
        return [list(np.flatnonzero(labels == c)) for c in range(self.n_classes)]

    def class_adjacency(self) -> np.ndarray:
        """Boolean c x c adjacency of fault classes (merged nodes collapsed)."""
        labels = self.label_map()
        c = self.n_classes
        adj = np.zeros((c, c), dtype=bool)
        for i, j in self.edges():
            li, lj = labels[i], labels[j]
            if li >= 0 and lj >= 0 and li != lj:
                adj[li, lj] = adj[lj, li] = True
        return adj

    def class_hops(self) -> np.ndarray:
        adj = self.class_adjacency()
        return shortest_path(csr_matrix(adj.astype(float)), method="D", unweighted=True)

    def to_dict(self) -> dict:
        def cplx(z):
            return [float(np.real(z)), float(np.imag(z))]

        state = dict(self.switches)
        return {
            "format": FEEDER_FORMAT,
            "name": self.name,
            "nodes": [{"id": nid, "phases": ph} for nid, ph in zip(self.node_ids, self.phases)],
            "branches": [
                {
                    "from": self.node_ids[b.frm],
                    "to": self.node_ids[b.to],
                    "y": [[cplx(v) for v in row] for row in b.y],
                }
                for b in self.branches
            ],
            "switches": [{"branch": b, "state": s} for b, s in self.normal_switches],
            "switch_state": [state[b] for b, _ in self.normal_switches],
            "observed": [self.node_ids[i] for i in self.observed],
            "slack": {
                "node": self.node_ids[self.slack],
                "voltage": [cplx(v) for v in self.slack_voltage],
            },
            "loads": [
                {"node": self.node_ids[i], "current": [cplx(v) for v in self.loads[i]]}
                for i in range(self.n)
                if np.any(self.loads[i] != 0)
            ],
            "merge": [[self.node_ids[a], self.node_ids[b]] for a, b in self.merge],
        }


def _complex(value, where: str) -> complex:
    if not (isinstance(value, (list, tuple)) and len(value) == 2):
        raise FeederError(f"{where}: complex numbers are [re, im] pairs, got {value!r}")
    z = complex(float(value[0]), float(value[1]))
    if not np.isfinite(z):
        raise FeederError(f"{where}: non-finite value")
    return z


def _require(d: Mapping, key: str, where: str):
    if key not in d:
        raise FeederError(f"{where}: missing field '{key}'")
    return d[key]


def feeder_from_dict(doc: Mapping) -> FeederGraph:
    """Parse and validate a feeder document (already decoded JSON)."""
    fmt = doc.get("format")
    if fmt != FEEDER_FORMAT:
        raise FeederError(f"format: expected '{FEEDER_FORMAT}', got {fmt!r}")

    node_ids: list[int] = []
    phases: list[str] = []
    for k, node in enumerate(_require(doc, "nodes", "root")):
        nid = int(_require(node, "id", f"nodes[{k}]"))
        ph = str(node.get("phases", "abc"))
        if not ph or any(p not in PHASES for p in ph) or len(set(ph)) != len(ph):
            raise FeederError(f"nodes[{k}].phases: invalid phase set {ph!r}")
        if nid in node_ids:
            raise FeederError(f"nodes[{k}].id: duplicate id {nid}")
        node_ids.append(nid)
        phases.append("".join(p for p in PHASES if p in ph))
    if not node_ids:
        raise FeederError("nodes: feeder has no nodes")
    index = {nid: i for i, nid in enumerate(node_ids)}

    def idx(nid, where):
        try:
            return index[int(nid)]
        except KeyError:
            raise FeederError(f"{where}: unknown node id {nid}") from None

    branches = []
    for k, br in enumerate(_require(doc, "branches", "root")):
        where = f"branches[{k}]"
        i = idx(_require(br, "from", where), where + ".from")
        j = idx(_require(br, "to", where), where + ".to")
        if i == j:
            raise FeederError(f"{where}: self-loop on node {node_ids[i]}")
        rows = _require(br, "y", where)
        if len(rows) != 3 or any(len(r) != 3 for r in rows):
            raise FeederError(f"{where}.y: admittance block must be 3x3")
        y = np.array(
            [[_complex(v, f"{where}.y[{r}][{c}]") for c, v in enumerate(row)] for r, row in enumerate(rows)],
            dtype=complex,
        )
        # phases absent at either end must carry no admittance
        live = np.array([p in phases[i] and p in phases[j] for p in PHASES])
        dead = ~live
        if np.any(y[dead, :] != 0) or np.any(y[:, dead] != 0):
            raise FeederError(f"{where}.y: nonzero admittance on a phase absent at an end node")
        y.setflags(write=False)
        branches.append(Branch(i, j, y))

    switches = []
    for k, sw in enumerate(doc.get("switches", [])):
        b = int(_require(sw, "branch", f"switches[{k}]"))
        state = _require(sw, "state", f"switches[{k}]")
        if not 0 <= b < len(branches):
            raise FeederError(f"switches[{k}].branch: no branch {b}")
        if state not in ("open", "closed"):
            raise FeederError(f"switches[{k}].state: expected open|closed, got {state!r}")
        switches.append((b, state))
    current = list(switches)
    if "switch_state" in doc:
        states = doc["switch_state"]
        if len(states) != len(switches):
            raise FeederError("switch_state: length differs from switches")
        current = [(b, s) for (b, _), s in zip(switches, states)]

    observed = [idx(o, "observed") for o in doc.get("observed", [])]
    if len(set(observed)) != len(observed):
        raise FeederError("observed: duplicate node ids")

    slack_doc = _require(doc, "slack", "root")
    if isinstance(slack_doc, Mapping):
        slack = idx(_require(slack_doc, "node", "slack"), "slack.node")
        volts = np.array([_complex(v, "slack.voltage") for v in _require(slack_doc, "voltage", "slack")])
    else:
        slack = idx(slack_doc, "slack")
        a = np.exp(-2j * np.pi / 3)
        volts = np.array([1.0, a, a.conjugate()])
    if volts.shape != (3,):
        raise FeederError("slack.voltage: need three phase voltages")

    loads = np.zeros((len(node_ids), 3), dtype=complex)
    for k, ld in enumerate(doc.get("loads", [])):
        i = idx(_require(ld, "node", f"loads[{k}]"), f"loads[{k}].node")
        cur = _require(ld, "current", f"loads[{k}]")
        if len(cur) != 3:
            raise FeederError(f"loads[{k}].current: need three phase currents")
        loads[i] = [_complex(v, f"loads[{k}].current") for v in cur]
        for p in range(3):
            if PHASES[p] not in phases[i] and loads[i, p] != 0:
                raise FeederError(f"loads[{k}]: load on absent phase {PHASES[p]}")
    loads.setflags(write=False)
    volts.setflags(write=False)

    merge = tuple((idx(a, "merge"), idx(b, "merge")) for a, b in doc.get("merge", []))

    g = FeederGraph(
        node_ids=tuple(node_ids),
        phases=tuple(phases),
        branches=tuple(branches),
        switches=tuple(current),
        normal_switches=tuple(switches),
        observed=tuple(sorted(observed)),
        slack=slack,
        slack_voltage=volts,
        loads=loads,
        merge=merge,
        name=str(doc.get("name", "")),
    )
    normal = replace(g, switches=g.normal_switches)
    if normal.islanded_nodes():
        bad = [node_ids[i] for i in normal.islanded_nodes()]
        raise FeederError(f"connectivity: nodes {bad} unreachable with normal switch states")
    return g


def load_feeder(path: str | Path) -> FeederGraph:
    path = Path(path)
    if not path.exists() and (DATA_DIR / path).exists():
        path = DATA_DIR / path
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FeederError(f"{path}: parse error at line {exc.lineno} col {exc.colno}: {exc.msg}") from exc
    return feeder_from_dict(doc)


def save_feeder(g: FeederGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=1) + "\n")


def bundled(name: str) -> FeederGraph:
    """Load one of the bundled fixtures: ``feeder13``, ``feeder36``, ``fig3``."""
    return load_feeder(DATA_DIR / f"{name}.json")


def build_ybus(g: FeederGraph, with_slack: bool = False) -> np.ndarray:
    """Assemble the 3n x 3n bus admittance matrix.

    With ``with_slack`` the slack bus gets the Norton shunt ``SLACK_SHUNT`` on
    its present phases, which makes the matrix nonsingular for a connected
    feeder.
    """
    n = g.n
    Y = np.zeros((3 * n, 3 * n), dtype=complex)
    for k in g.active_branches():
        b = g.branches[k]
        i, j = 3 * b.frm, 3 * b.to
        Y[i:i + 3, i:i + 3] += b.y
        Y[j:j + 3, j:j + 3] += b.y
        Y[i:i + 3, j:j + 3] -= b.y
        Y[j:j + 3, i:i + 3] -= b.y.T
    if with_slack:
        s = 3 * g.slack
        mask = g.phase_mask()[g.slack]
        Y[s:s + 3, s:s + 3] += np.diag(SLACK_SHUNT * mask)
    islands = g.islanded_nodes()
    if islands:
        warnings.warn(
            f"nodes {[g.node_ids[i] for i in islands]} are islanded from the slack bus",
            IslandWarning,
            stacklevel=2,
        )
    return Y


def branch_impedance(b: Branch) -> float:
    """Mean self-impedance magnitude over the live phases of a branch, ohms."""
    live = np.flatnonzero(np.any(b.y != 0, axis=0))
    z = np.linalg.inv(b.y[np.ix_(live, live)])
    return float(np.mean(np.abs(np.diag(z))))


def shortest_paths(g: FeederGraph, weight: str = "hop") -> np.ndarray:
    """All-pairs shortest distances over active branches (Dijkstra).

    ``weight`` is ``"hop"`` (unit edges) or ``"impedance"`` (branch self-
    impedance magnitude). Disconnected pairs are ``inf``.
    """
    if weight not in ("hop", "impedance"):
        raise ValueError(f"weight must be 'hop' or 'impedance', got {weight!r}")
    w = np.full((g.n, g.n), np.inf)
    for k in g.active_branches():
        b = g.branches[k]
        c = 1.0 if weight == "hop" else branch_impedance(b)
        if c < w[b.frm, b.to]:
            w[b.frm, b.to] = w[b.to, b.frm] = c
    rows, cols = np.nonzero(np.isfinite(w))
    graph = csr_matrix((w[rows, cols], (rows, cols)), shape=(g.n, g.n))
    d = shortest_path(graph, method="D", directed=False)
    # csgraph can leave the two triangles differing in the last ulp
    return np.minimum(d, d.T)


def apply_switch_states(
    g: FeederGraph, states: Mapping[int, str] | Iterable[tuple[int, str]]
) -> FeederGraph:
    """Return a copy of ``g`` with the given switches set open/closed.

    Keys are switch indices (positions in the ``switches`` list).
    """
    updates = dict(states.items() if isinstance(states, Mapping) else states)
    current = list(g.switches)
    for s, state in updates.items():
        if not 0 <= s < len(current):
            raise FeederError(f"unknown switch index {s}")
        if state not in ("open", "closed"):
            raise FeederError(f"switch {s}: state must be open|closed, got {state!r}")
        current[s] = (current[s][0], state)
    return replace(g, switches=tuple(current), _index={})
