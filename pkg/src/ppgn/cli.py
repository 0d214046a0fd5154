"""Command line entry point: ``ppgn gen|train|eval|sweep|influence``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .adjacency import build_A
from .faultsim import NormStats, ScenarioGrid, SimulationError, generate_dataset, load_dataset, normalize_dataset, save_dataset
from .feeder import FeederError, load_feeder, save_feeder, shortest_paths
from .harness import (
    RESULT_HEADER,
    ConfigError,
    Context,
    ExperimentConfig,
    Harness,
    TwoStage,
    _result_row,
    evaluate,
    fingerprint,
    fit_two_stage,
    load_config,
    ood_dataset,
    resolve_feeder,
    run_experiment,
)
from .influence import total_observed_influence, transition, write_influence_csv
from .metrics import stratified_split
from .stage1 import Stage1Config, Stage1Model, train_stage1
from .stage2 import K_II, Stage2Config, Stage2Model
from .tensor import NumericError, load_checkpoint, save_checkpoint

log = logging.getLogger("ppgn")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _context(data_dir: Path, k_I: int, weight: str = "hop") -> Context:
    ds = load_dataset(data_dir)
    g = load_feeder(data_dir / "feeder.json")
    stats = NormStats.from_dict(ds.manifest["norm_stats"]) if "norm_stats" in ds.manifest else None
    X, stats = normalize_dataset(ds.X, stats=stats, observed=g.observed)
    A = build_A(shortest_paths(g, weight), k_I)
    return Context(g, A, ds, X, stats)


def cmd_gen(args) -> None:
    g = resolve_feeder(args.feeder)
    grid = ScenarioGrid.from_dict(json.loads(Path(args.grid).read_text())) if args.grid else ScenarioGrid()
    ds = generate_dataset(g, grid, args.seed)
    _, stats = normalize_dataset(ds.X, observed=g.observed)
    out = Path(args.out)
    save_dataset(ds, out, stats)
    save_feeder(g, out / "feeder.json")
    print(f"wrote {len(ds)} samples to {out}")


def cmd_train(args) -> None:
    ctx = _context(Path(args.data), args.kI)
    y = ctx.dataset.y
    lab, unl = stratified_split(y, args.labels, args.seed)
    c = ctx.g.n_classes
    cfg1 = Stage1Config(seed=args.seed, epochs=args.epochs1)
    cfg2 = Stage2Config(seed=args.seed, epochs=args.epochs2)
    harness = Harness()
    stores, history = {}, []
    stage1 = None
    if args.stage in ("1", "both"):
        stage1 = harness.train(train_stage1, ctx.X[lab], y[lab], ctx.A, c, cfg1)
        stores["stage1"] = stage1.store
        history = stage1.history
    if args.stage in ("2", "both"):
        model = fit_two_stage(stage1, ctx.X, y, lab, unl, ctx.g.class_adjacency(), c, args.kII, cfg2, harness)
        stores["stage2"] = model.stage2.store
    extra = {
        "stage": args.stage,
        "beta": args.labels,
        "seed": args.seed,
        "k_I": args.kI,
        "k_II": args.kII,
        "labeled": lab.tolist(),
        "stage1": cfg1.to_dict(),
        "stage2": cfg2.to_dict(),
    }
    save_checkpoint(args.out, stores, extra)
    if history:
        with open(str(args.out) + ".history.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "phase", "loss", "train_acc"], lineterminator="\n")
            w.writeheader()
            w.writerows(history)
    print(f"saved checkpoint {args.out}")


def _restore(ctx: Context, stores: dict, extra: dict):
    lab = np.asarray(extra["labeled"], dtype=int)
    y = ctx.dataset.y
    stage1 = None
    if "stage1" in stores:
        stage1 = Stage1Model(stores["stage1"], ctx.A.propagation(), Stage1Config(**extra["stage1"]))
    if "stage2" in stores:
        s2 = Stage2Model(stores["stage2"], Stage2Config(**extra["stage2"]))
        model = TwoStage(stage1, s2, ctx.g.class_adjacency(), extra["k_II"], ctx.X[lab], y[lab])
    else:
        model = stage1
    return model, lab


def cmd_eval(args) -> None:
    stores, extra, _ = load_checkpoint(args.ckpt)
    ctx = _context(Path(args.data), extra["k_I"])
    model, lab = _restore(ctx, stores, extra)
    name = {"1": "I", "2": "II", "both": "I+II"}[extra["stage"]]
    models = {name: model}
    before = fingerprint(models)
    if args.scenario == "base":
        unl = np.setdiff1d(np.arange(len(ctx.dataset)), lab)
        X, y = ctx.X[unl], ctx.dataset.y[unl]
    else:
        grid = ctx.dataset.manifest.get("grid", {})
        cfg = ExperimentConfig(feeder=str(Path(args.data) / "feeder.json"), grid=grid,
                               data_seed=ctx.dataset.manifest.get("seed", 1), ood_draws=args.draws)
        X, y = ood_dataset(ctx, cfg, args.scenario)
    res = evaluate(models, X, y, ctx.g.class_adjacency())
    if fingerprint(models) != before:
        raise NumericError("parameters changed during evaluation")
    rep, t = res[name]
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerow(_result_row(args.scenario, extra["seed"], extra["beta"], name, rep, t, True))
    print(f"{args.scenario}: lar={rep.lar:.4f} lar1hop={rep.lar1hop:.4f} f1={rep.f1:.4f}")


def cmd_sweep(args) -> None:
    cfg = load_config(args.config)
    if args.out:
        cfg.out = args.out
    res = run_experiment(cfg)
    sys.stdout.write(res.csv_text())


def cmd_influence(args) -> None:
    g = resolve_feeder(args.feeder)
    A = build_A(shortest_paths(g), args.kI)
    infl = total_observed_influence(A.a_tilde, g.observed, args.layers)
    phys = total_observed_influence(transition(g.adjacency()), g.observed, args.layers)
    write_influence_csv(args.out, g.node_ids, infl)
    print(f"invisible nodes: constructed A {int(np.sum(infl == 0))}, physical {int(np.sum(phys == 0))}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppgn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("gen", help="simulate a labelled fault dataset")
    s.add_argument("--feeder", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--grid")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gen)

    s = sub.add_parser("train", help="train Stage I, Stage II or both")
    s.add_argument("--data", required=True)
    s.add_argument("--stage", choices=["1", "2", "both"], default="both")
    s.add_argument("--labels", type=float, default=0.15)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--kI", type=int, default=3)
    s.add_argument("--kII", type=int, default=K_II)
    s.add_argument("--epochs1", type=int, default=Stage1Config.epochs)
    s.add_argument("--epochs2", type=int, default=Stage2Config.epochs)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="score a frozen checkpoint on one scenario")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scenario", default="base")
    s.add_argument("--out", required=True)
    s.add_argument("--draws", type=int, default=10)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sweep", help="run an experiment config (label rates, OOD arms)")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("influence", help="observed-node influence report")
    s.add_argument("--feeder", required=True)
    s.add_argument("--kI", type=int, default=3)
    s.add_argument("--layers", type=int, default=3)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_influence)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.fn(args)
    except (ConfigError, FeederError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, SimulationError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
