"""Fault simulation on a feeder and labelled dataset generation.

Loads are constant-current injections, so both the pre-fault and faulted
networks are single complex linear solves. A fault is a shunt admittance
added at one node; the voltage change it causes is obtained from its own
solve so that ``Y @ dU`` can be checked for support on the fault node.
"""
from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .feeder import PHASES, SLACK_SHUNT, FeederGraph, apply_switch_states, build_ybus

logger = logging.getLogger(__name__)

DATA_FORMAT = "ppgn-data-v1"
FAULT_KINDS = ("SPG", "DPG", "PP")
Z_RANGE = (0.05, 20.0)
# mean scaled load of 0.53 p.u. of nameplate
LOAD_LOW, LOAD_HIGH = 0.06, 1.0


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    node: int  # node index
    kind: str
    phases: str
    impedance: float  # ohms; inf means no fault

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ValueError(f"unknown fault kind {self.kind!r}")
        need = 1 if self.kind == "SPG" else 2
        if len(self.phases) != need or any(p not in PHASES for p in self.phases):
            raise ValueError(f"{self.kind} fault needs {need} phase(s), got {self.phases!r}")
        if not self.impedance > 0:
            raise ValueError("fault impedance must be positive")


@dataclass(frozen=True)
class LoadScenario:
    scales: np.ndarray
    low: float = LOAD_LOW
    high: float = LOAD_HIGH

    def __post_init__(self):
        if np.any(self.scales <= 0):
            raise ValueError("load scales must be positive")

    @classmethod
    def nominal(cls, n: int) -> "LoadScenario":
        return cls(np.ones(n), 1.0, 1.0)

    @classmethod
    def draw(cls, n: int, rng: np.random.Generator, low=LOAD_LOW, high=LOAD_HIGH) -> "LoadScenario":
        return cls(rng.uniform(low, high, size=n), low, high)

    @classmethod
    def around(cls, n, rng, mean_pu: float, half_width: float = (LOAD_HIGH - LOAD_LOW) / 2):
        """Uniform scales centred on ``mean_pu`` (the OOD load sweeps)."""
        return cls.draw(n, rng, mean_pu - half_width, mean_pu + half_width)


@dataclass
class NetworkState:
    U: np.ndarray  # 3n complex volts
    C: np.ndarray  # 3n complex injected amperes


@dataclass
class Sample:
    x: np.ndarray  # (n, 6)
    label: int
    meta: dict = field(default_factory=dict)
    delta_u: np.ndarray | None = None


def injections(g: FeederGraph, loads: LoadScenario) -> np.ndarray:
    """Injected currents: loads draw current, the slack source pushes it in."""
    C = -(loads.scales[:, None] * g.loads).reshape(-1)
    s = 3 * g.slack
    C[s:s + 3] += SLACK_SHUNT * g.slack_voltage * g.phase_mask()[g.slack]
    return C


def _active_rows(g: FeederGraph) -> np.ndarray:
    return np.flatnonzero(g.phase_mask().reshape(-1))


def _solve(Y: np.ndarray, rhs: np.ndarray, rows: np.ndarray) -> np.ndarray:
    U = np.zeros(Y.shape[0], dtype=complex)
    try:
        U[rows] = np.linalg.solve(Y[np.ix_(rows, rows)], rhs[rows])
    except np.linalg.LinAlgError as exc:
        raise SimulationError(f"singular network matrix: {exc}") from exc
    if not np.all(np.isfinite(U)):
        raise SimulationError("non-finite voltages")
    return U


def system_matrix(g: FeederGraph) -> np.ndarray:
    islands = g.islanded_nodes()
    if islands:
        raise SimulationError(f"isolated nodes {[g.node_ids[i] for i in islands]} have no path to the slack bus")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_ybus(g, with_slack=True)


def solve_prefault(g: FeederGraph, loads: LoadScenario, Y: np.ndarray | None = None) -> NetworkState:
    if Y is None:
        Y = system_matrix(g)
    C0 = injections(g, loads)
    return NetworkState(_solve(Y, C0, _active_rows(g)), C0)


def fault_admittance_delta(spec: FaultSpec, g: FeederGraph | None = None) -> np.ndarray:
    """3x3 admittance added at the fault node."""
    if g is not None:
        missing = [p for p in spec.phases if p not in g.phases[spec.node]]
        if missing:
            raise SimulationError(f"phase(s) {missing} absent at node {g.node_ids[spec.node]}")
    y = 0.0 if np.isinf(spec.impedance) else 1.0 / spec.impedance
    d = np.zeros((3, 3), dtype=complex)
    idx = [PHASES.index(p) for p in spec.phases]
    if spec.kind in ("SPG", "DPG"):
        for i in idx:
            d[i, i] += y
    else:
        a, b = idx
        d[a, a] += y
        d[b, b] += y
        d[a, b] -= y
        d[b, a] -= y
    return d


@dataclass
class FaultSolution:
    prefault: NetworkState
    U: np.ndarray
    delta_u: np.ndarray
    delta: np.ndarray  # fault current vector on the 3 rows of the fault node
    Y: np.ndarray


def solve_fault(g: FeederGraph, loads: LoadScenario, spec: FaultSpec, Y=None, prefault=None) -> FaultSolution:
    if Y is None:
        Y = system_matrix(g)
    if prefault is None:
        prefault = solve_prefault(g, loads, Y)
    d = fault_admittance_delta(spec, g)
    f = 3 * spec.node
    Yf = Y.copy()
    Yf[f:f + 3, f:f + 3] += d
    # (Y + D) dU = -D U0, solved directly for accuracy in dU
    rhs = np.zeros_like(prefault.U)
    rhs[f:f + 3] = -d @ prefault.U[f:f + 3]
    dU = _solve(Yf, rhs, _active_rows(g))
    U = prefault.U + dU
    delta = np.zeros_like(U)
    delta[f:f + 3] = -d @ U[f:f + 3]
    return FaultSolution(prefault, U, dU, delta, Y)


def features(g: FeederGraph, U: np.ndarray) -> np.ndarray:
    """(n, 6) matrix [|Va|, ang a, |Vb|, ang b, |Vc|, ang c]; unobserved rows zero."""
    V = U.reshape(g.n, 3)
    ang = np.angle(V)
    ang[ang <= -np.pi] = np.pi
    x = np.zeros((g.n, 6))
    x[:, 0::2] = np.abs(V)
    x[:, 1::2] = ang
    mask = np.zeros(g.n, dtype=bool)
    mask[list(g.observed)] = True
    x[~mask] = 0.0
    return x


def simulate_fault(g: FeederGraph, loads: LoadScenario, spec: FaultSpec, **kw) -> Sample:
    sol = solve_fault(g, loads, spec, **kw)
    label = int(g.label_map()[spec.node])
    meta = {
        "node": g.node_ids[spec.node],
        "kind": spec.kind,
        "phases": spec.phases,
        "impedance": float(spec.impedance),
    }
    return Sample(features(g, sol.U), label, meta, sol.delta_u)


# -- datasets ----------------------------------------------------------------


@dataclass
class ScenarioGrid:
    kinds: tuple[str, ...] = FAULT_KINDS
    classes: tuple[int, ...] | None = None  # None means every class
    impedance_draws: int = 20
    impedance_range: tuple[float, float] = Z_RANGE
    load_low: float = LOAD_LOW
    load_high: float = LOAD_HIGH
    # scenario name -> {switch index: state}; "base" leaves switches alone
    switch_scenarios: dict = field(default_factory=lambda: {"base": {}})
    min_per_class: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioGrid":
        d = dict(d)
        for key in ("kinds", "classes", "impedance_range"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if "switch_scenarios" in d:
            d["switch_scenarios"] = {
                k: {int(s): v for s, v in states.items()} for k, states in d["switch_scenarios"].items()
            }
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["switch_scenarios"] = {k: {str(s): v for s, v in st.items()} for k, st in self.switch_scenarios.items()}
        return d


def valid_phase_sets(phases: str, kind: str) -> list[str]:
    if kind == "SPG":
        return list(phases)
    return [phases[i] + phases[j] for i in range(len(phases)) for j in range(i + 1, len(phases))]


@dataclass
class Dataset:
    X: np.ndarray  # (N, n, 6)
    y: np.ndarray  # (N,)
    meta: list[dict]
    manifest: dict

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], [self.meta[i] for i in idx], dict(self.manifest))


def feeder_hash(g: FeederGraph) -> str:
    doc = json.dumps(g.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(doc).hexdigest()[:16]


def generate_dataset(g: FeederGraph, grid: ScenarioGrid, seed: int) -> Dataset:
    """Simulate every (scenario, class, kind, draw) cell of ``grid``.

    Sample ``k`` draws its phases, impedance and loads from a generator seeded
    with ``(seed, k)``, so any subset of the grid can be regenerated alone.
    """
    labels = g.label_map()
    members = g.class_nodes()
    classes = grid.classes if grid.classes is not None else tuple(range(g.n_classes))

    cells = []
    for scen in grid.switch_scenarios:
        for c in classes:
            for kind in grid.kinds:
                hosts = [i for i in members[c] if valid_phase_sets(g.phases[i], kind)]
                if not hosts:
                    continue
                for draw in range(grid.impedance_draws):
                    cells.append((scen, c, kind, hosts, draw))
    counts = {c: 0 for c in classes}
    for cell in cells:
        counts[cell[1]] += 1
    thin = [c for c, k in counts.items() if k < grid.min_per_class]
    if thin:
        raise SimulationError(f"infeasible grid: classes {thin} have fewer than {grid.min_per_class} fault configurations")

    topo = {name: apply_switch_states(g, states) for name, states in grid.switch_scenarios.items()}
    Ys = {name: system_matrix(t) for name, t in topo.items()}
    lo, hi = grid.impedance_range
    X = np.zeros((len(cells), g.n, 6))
    y = np.zeros(len(cells), dtype=int)
    meta = []
    for k, (scen, c, kind, hosts, draw) in enumerate(cells):
        rng = np.random.default_rng([seed, k])
        node = hosts[draw % len(hosts)]
        ph_opts = valid_phase_sets(g.phases[node], kind)
        phases = ph_opts[rng.integers(len(ph_opts))]
        zf = float(rng.uniform(lo, hi))
        loads = LoadScenario.draw(g.n, rng, grid.load_low, grid.load_high)
        spec = FaultSpec(node, kind, phases, zf)
        gs = topo[scen]
        s = simulate_fault(gs, loads, spec, Y=Ys[scen])
        X[k] = s.x
        y[k] = labels[node]
        meta.append({**s.meta, "scenario": scen, "seed": [seed, k], "load_mean": float(loads.scales.mean())})
    manifest = {
        "format": DATA_FORMAT,
        "feeder": g.name,
        "feeder_hash": feeder_hash(g),
        "grid": grid.to_dict(),
        "seed": seed,
        "n_samples": len(cells),
        "n_classes": g.n_classes,
        "observed": [g.node_ids[i] for i in g.observed],
    }
    logger.info("generated %d samples over %d classes", len(cells), len(classes))
    return Dataset(X, y, meta, manifest)


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def observed_mask(X: np.ndarray) -> np.ndarray:
    """(N, n) mask of rows that carry measurements."""
    return np.any(X != 0, axis=-1)


def normalize_dataset(X: np.ndarray, stats: NormStats | None = None, observed=None):
    """Standardise each feature column over observed rows only.

    ``observed`` is a list of node indices; when omitted, nonzero rows are
    taken as observed. Unobserved rows stay exactly zero. Returns the new
    array and the statistics (pass them back in to transform OOD sets).
    """
    if len(X) == 0:
        raise ValueError("empty dataset")
    if observed is None:
        mask = observed_mask(X)
    else:
        mask = np.zeros(X.shape[:2], dtype=bool)
        mask[:, list(observed)] = True
    if stats is None:
        rows = X[mask]
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
        if np.any(flat):
            warnings.warn(f"zero-variance feature columns {np.flatnonzero(flat).tolist()}; std clamped to 1")
            std = np.where(flat, 1.0, std)
        stats = NormStats(mean, std)
    out = np.zeros_like(X)
    out[mask] = (X[mask] - stats.mean) / stats.std
    return out, stats


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def save_dataset(ds: Dataset, out_dir: str | Path, stats: NormStats | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "samples.ndjson", "w") as fh:
        for x, label, meta in zip(ds.X, ds.y, ds.meta):
            rec = {"label": int(label), "x": x.tolist(), "meta": meta}
            fh.write(json.dumps(rec, default=_json_default) + "\n")
    manifest = dict(ds.manifest)
    if stats is not None:
        manifest["norm_stats"] = stats.to_dict()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, default=_json_default) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != DATA_FORMAT:
        raise ValueError(f"{path}: not a {DATA_FORMAT} dataset")
    X, y, meta = [], [], []
    with open(path / "samples.ndjson") as fh:
        for line in fh:
            rec = json.loads(line)
            X.append(rec["x"])
            y.append(rec["label"])
            meta.append(rec["meta"])
    return Dataset(np.asarray(X, dtype=float), np.asarray(y, dtype=int), meta, manifest)


def stack(samples: Iterable[Sample]) -> tuple[np.ndarray, np.ndarray]:
    samples = list(samples)
    return np.stack([s.x for s in samples]), np.array([s.label for s in samples])
