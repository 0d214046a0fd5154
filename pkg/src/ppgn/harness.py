"""End-to-end experiments: data, splits, training, frozen evaluation, results.

A run trains every requested method once per (label rate, seed) on the base
dataset, freezes, then scores the frozen models on the held-out samples and on
each out-of-distribution scenario. Nothing is retrained after the freeze; the
``Harness`` object enforces that.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adjacency import AdjacencyA, build_A, check_A_coverage
from .baselines import Baseline, BaselineConfig, baseline_gcn, baseline_mlp
from .faultsim import (
    Dataset,
    NormStats,
    ScenarioGrid,
    generate_dataset,
    load_dataset,
    normalize_dataset,
)
from .feeder import FeederGraph, apply_switch_states, bundled, load_feeder, shortest_paths
from .metrics import MetricsReport, compute_metrics, stratified_split
from .stage1 import Stage1Config, Stage1Model, train_stage1
from .stage2 import K_II, Stage2Config, Stage2Model, build_B, mask_embedding, predict_stage2, train_stage2

logger = logging.getLogger(__name__)

EXP_FORMAT = "ppgn-exp-v1"
METHODS = ("I", "I-joint", "II", "I+II", "mlp", "gcn")
RESULT_HEADER = ["scenario", "seed", "beta", "stage", "f1", "lar", "lar1hop", "runtime_s", "lar_classwise"]


class ConfigError(ValueError):
    pass


class FrozenError(RuntimeError):
    pass


# -- switch scenarios -------------------------------------------------------------


def switch_scenarios(g: FeederGraph) -> dict[str, dict[int, str]]:
    """Named topology changes built from the feeder's switches.

    ``close-ties`` closes every normally-open switch, ``open-all`` opens every
    normally-closed one and ``open-half`` the first half of them. Arms that
    would island a node are left out.
    """
    closed = [s for s, (_, st) in enumerate(g.normal_switches) if st == "closed"]
    opened = [s for s, (_, st) in enumerate(g.normal_switches) if st == "open"]
    cand = {"base": {}}
    if opened:
        cand["close-ties"] = {s: "closed" for s in opened}
    if closed:
        cand["open-all"] = {s: "open" for s in closed}
        half = closed[: max(1, len(closed) // 2)]
        cand["open-half"] = {s: "open" for s in half}
    # a topology that strands load cannot be simulated
    return {k: v for k, v in cand.items() if not apply_switch_states(g, v).islanded_nodes()}


# -- configuration -----------------------------------------------------------------


@dataclass
class ExperimentConfig:
    feeder: str = "feeder36"
    data: str | None = None  # existing dataset directory; generated when None
    grid: dict = field(default_factory=lambda: {"impedance_draws": 30})
    data_seed: int = 1
    betas: list = field(default_factory=lambda: [0.15])
    seeds: list = field(default_factory=lambda: [1, 2, 3])
    methods: list = field(default_factory=lambda: ["I", "I+II"])
    ood: list = field(default_factory=list)  # "load:0.64", "switch:open-all"
    ood_draws: int = 10
    k_I: int = 3
    k_II: int = K_II
    distance_weight: str = "hop"
    stage1: dict = field(default_factory=dict)
    stage2: dict = field(default_factory=dict)
    baseline: dict = field(default_factory=dict)
    timing: bool = True
    out: str | None = None

    def validate(self) -> None:
        for b in self.betas:
            if not 0 < b <= 1:
                raise ConfigError(f"label rate {b} outside (0, 1]")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        for s in self.ood:
            kind, _, arg = s.partition(":")
            if kind not in ("load", "switch") or not arg:
                raise ConfigError(f"bad OOD scenario {s!r}; expected load:DP or switch:NAME")
            if kind == "load":
                try:
                    float(arg)
                except ValueError:
                    raise ConfigError(f"bad load level in {s!r}") from None
        if self.data is not None and not Path(self.data).exists():
            raise ConfigError(f"dataset directory {self.data} does not exist")
        if self.distance_weight not in ("hop", "impedance"):
            raise ConfigError("distance_weight must be hop or impedance")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        fmt = d.pop("format", EXP_FORMAT)
        if fmt != EXP_FORMAT:
            raise ConfigError(f"config format {fmt!r}, expected {EXP_FORMAT}")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {"format": EXP_FORMAT, **asdict(self)}


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def resolve_feeder(name: str) -> FeederGraph:
    p = Path(name)
    return load_feeder(p) if p.suffix == ".json" or p.exists() else bundled(name)


# -- harness state machine -------------------------------------------------------------


class Harness:
    """Guards the train -> frozen transition and counts training calls."""

    def __init__(self):
        self.frozen = False
        self.train_calls = 0

    def train(self, fn, *args, **kwargs):
        if self.frozen:
            raise FrozenError(f"training call {getattr(fn, '__name__', fn)} after the models were frozen")
        self.train_calls += 1
        return fn(*args, **kwargs)

    def freeze(self) -> None:
        self.frozen = True


def fingerprint(models: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(models):
        for store in _stores(models[name]):
            for k in sorted(store.params):
                h.update(k.encode())
                h.update(np.ascontiguousarray(store.params[k]).tobytes())
    return h.hexdigest()


def _stores(model):
    if isinstance(model, (Stage1Model, Baseline)):
        return [model.store]
    if isinstance(model, TwoStage):
        return ([model.stage1.store] if model.stage1 else []) + [model.stage2.store]
    return []


# -- methods --------------------------------------------------------------------------


@dataclass
class TwoStage:
    """Stage II on top of a Stage I embedding (``stage1`` set) or raw features."""

    stage1: Stage1Model | None
    stage2: Stage2Model
    class_adj: np.ndarray
    k: int
    X_lab: np.ndarray
    y_lab: np.ndarray

    def embed(self, X) -> np.ndarray:
        if self.stage1 is None:
            return X.reshape(len(X), -1)
        _, z = self.stage1.predict(X)
        return mask_embedding(z, self.class_adj)

    def graph(self, X_all):
        return build_B(self.embed(X_all), self.k).normalized()

    def predict(self, X) -> np.ndarray:
        X_all = np.concatenate([self.X_lab, X])
        S = self.graph(X_all)
        C0 = X_all.reshape(len(X_all), -1)
        return predict_stage2(self.stage2.predict_proba(C0, S))[len(self.X_lab):]


def fit_two_stage(stage1, X, y, lab, unl, class_adj, n_classes, k, cfg2: Stage2Config, harness: Harness):
    order = np.concatenate([lab, unl])
    X_all = X[order]
    model = TwoStage(stage1, None, class_adj, k, X[lab], y[lab])
    S = model.graph(X_all)
    C0 = X_all.reshape(len(X_all), -1)
    rows = np.arange(len(lab))
    model.stage2 = harness.train(train_stage2, C0, S, y[lab], rows, n_classes, cfg2)
    return model


def predict_with(model, X) -> np.ndarray:
    if isinstance(model, TwoStage):
        return model.predict(X)
    if isinstance(model, Stage1Model):
        return model.predict(X)[0]
    return model.predict(X)


@dataclass
class Context:
    g: FeederGraph
    A: AdjacencyA
    dataset: Dataset
    X: np.ndarray
    stats: NormStats


def build_context(cfg: ExperimentConfig) -> Context:
    g = resolve_feeder(cfg.feeder)
    if cfg.data:
        ds = load_dataset(cfg.data)
    else:
        ds = generate_dataset(g, ScenarioGrid.from_dict(cfg.grid), cfg.data_seed)
    X, stats = normalize_dataset(ds.X, observed=g.observed)
    A = build_A(shortest_paths(g, cfg.distance_weight), cfg.k_I)
    check_A_coverage(A, g.observed, Stage1Config(**cfg.stage1).layers)
    return Context(g, A, ds, X, stats)


def train_methods(ctx: Context, cfg: ExperimentConfig, seed: int, lab, unl, harness: Harness) -> tuple[dict, dict]:
    """Train every configured method on the labelled split; returns models and
    training wall times."""
    g, X, y = ctx.g, ctx.X, ctx.dataset.y
    c = g.n_classes
    class_adj = g.class_adjacency()
    s1 = {**cfg.stage1, "seed": seed}
    s2 = Stage2Config(**{**cfg.stage2, "seed": seed})
    bcfg = BaselineConfig(**{**cfg.baseline, "seed": seed})
    models, times = {}, {}
    stage1 = None
    for m in cfg.methods:
        t0 = time.perf_counter()
        if m in ("I", "I+II") and stage1 is None:
            stage1 = harness.train(train_stage1, X[lab], y[lab], ctx.A, c, Stage1Config(**{**s1, "schedule": "alternating"}))
            times["stage1"] = time.perf_counter() - t0
            t0 = time.perf_counter()
        if m == "I":
            models[m] = stage1
            times[m] = times["stage1"]
            continue
        if m == "I-joint":
            models[m] = harness.train(train_stage1, X[lab], y[lab], ctx.A, c, Stage1Config(**{**s1, "schedule": "joint"}))
        elif m == "I+II":
            models[m] = fit_two_stage(stage1, X, y, lab, unl, class_adj, c, cfg.k_II, s2, harness)
        elif m == "II":
            models[m] = fit_two_stage(None, X, y, lab, unl, class_adj, c, cfg.k_II, s2, harness)
        elif m == "mlp":
            models[m] = harness.train(baseline_mlp, X[lab], y[lab], c, bcfg)
        elif m == "gcn":
            models[m] = harness.train(baseline_gcn, X[lab], y[lab], g.adjacency(), c, bcfg)
        times[m] = time.perf_counter() - t0 + (times.get("stage1", 0.0) if m == "I+II" else 0.0)
    return models, times


def ood_dataset(ctx: Context, cfg: ExperimentConfig, scenario: str) -> tuple[np.ndarray, np.ndarray]:
    """Simulate and normalise (with the training statistics) one OOD set."""
    g = ctx.g
    kind, _, arg = scenario.partition(":")
    grid = ScenarioGrid.from_dict({**cfg.grid, "impedance_draws": cfg.ood_draws})
    if kind == "load":
        level = float(arg)
        half = (grid.load_high - grid.load_low) / 2
        grid.load_low, grid.load_high = level - half, level + half
        if grid.load_low <= 0:
            raise ConfigError(f"load level {level} too low for the configured spread")
    else:
        named = switch_scenarios(g)
        if arg not in named:
            raise ConfigError(f"unknown switch scenario {arg!r}; feeder offers {sorted(named)}")
        grid.switch_scenarios = {arg: named[arg]}
    seed = cfg.data_seed * 1000 + (zlib.crc32(scenario.encode()) % 1000)
    ds = generate_dataset(g, grid, seed)
    X, _ = normalize_dataset(ds.X, stats=ctx.stats, observed=g.observed)
    return X, ds.y


def evaluate(models: dict, X, y, class_adj) -> dict[str, tuple[MetricsReport, float]]:
    out = {}
    for name, model in models.items():
        t0 = time.perf_counter()
        pred = predict_with(model, X)
        out[name] = (compute_metrics(y, pred, class_adj), time.perf_counter() - t0)
    return out


def _result_row(scenario, seed, beta, stage, rep: MetricsReport, runtime, timing: bool) -> dict:
    return {
        "scenario": scenario,
        "seed": seed,
        "beta": beta,
        "stage": stage,
        "f1": f"{rep.f1:.6f}",
        "lar": f"{rep.lar:.6f}",
        "lar1hop": f"{rep.lar1hop:.6f}",
        "runtime_s": f"{runtime:.3f}" if timing else "",
        "lar_classwise": f"{rep.lar_classwise:.6f}",
    }


@dataclass
class ExperimentResult:
    rows: list[dict]
    manifest: dict
    models: dict = field(default_factory=dict)  # (beta, seed) -> {method: model}
    harness: Harness | None = None

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=RESULT_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def mean(self, stage: str, metric: str = "lar", scenario: str = "base", beta=None) -> float:
        vals = [
            float(r[metric])
            for r in self.rows
            if r["stage"] == stage and r["scenario"] == scenario and (beta is None or r["beta"] == beta)
        ]
        if not vals:
            raise KeyError(f"no rows for {stage}/{scenario}/{beta}")
        return float(np.mean(vals))


def run_experiment(cfg: ExperimentConfig, ctx: Context | None = None) -> ExperimentResult:
    cfg.validate()
    ctx = ctx or build_context(cfg)
    y = ctx.dataset.y
    class_adj = ctx.g.class_adjacency()
    ood_sets = {s: ood_dataset(ctx, cfg, s) for s in cfg.ood}
    rows, all_models = [], {}
    harness = Harness()
    trained = []
    for beta in cfg.betas:
        for seed in cfg.seeds:
            lab, unl = stratified_split(y, beta, seed)
            models, times = train_methods(ctx, cfg, seed, lab, unl, harness)
            trained.append((beta, seed, lab, unl, models, times))
            all_models[(beta, seed)] = models
    harness.freeze()
    before = fingerprint({f"{b}/{s}/{m}": v for (b, s), ms in all_models.items() for m, v in ms.items()})
    for beta, seed, lab, unl, models, times in trained:
        # with every sample labelled there is nothing held out; report the fit
        scen, held = ("base", unl) if len(unl) else ("train", lab)
        for name, (rep, t) in evaluate(models, ctx.X[held], y[held], class_adj).items():
            rows.append(_result_row(scen, seed, beta, name, rep, times.get(name, 0.0) + t, cfg.timing))
        for scen, (Xo, yo) in ood_sets.items():
            for name, (rep, t) in evaluate(models, Xo, yo, class_adj).items():
                rows.append(_result_row(scen, seed, beta, name, rep, t, cfg.timing))
    after = fingerprint({f"{b}/{s}/{m}": v for (b, s), ms in all_models.items() for m, v in ms.items()})
    if before != after:
        raise FrozenError("model parameters changed during evaluation")
    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "dataset": ctx.dataset.manifest,
        "norm_stats": ctx.stats.to_dict(),
        "train_calls": harness.train_calls,
        "param_fingerprint": after,
    }
    result = ExperimentResult(rows, manifest, all_models, harness)
    if cfg.out:
        write_result(result, cfg.out)
    return result


def write_result(result: ExperimentResult, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.csv").write_text(result.csv_text())
    (out / "manifest.json").write_text(json.dumps(result.manifest, indent=1, default=str) + "\n")
