import csv
import io
import json

import numpy as np
import pytest

from ppgn import harness as H
from ppgn.baselines import BaselineConfig, baseline_gcn, baseline_mlp, gcn_operator
from ppgn.cli import main
from ppgn.harness import (
    RESULT_HEADER,
    ConfigError,
    ExperimentConfig,
    FrozenError,
    Harness,
    build_context,
    fingerprint,
    load_config,
    run_experiment,
    switch_scenarios,
)
from ppgn.metrics import compute_metrics, stratified_split

FAST = {
    "feeder": "feeder13",
    "grid": {"impedance_draws": 4},
    "stage1": {"epochs": 4, "width": 8},
    "stage2": {"epochs": 5},
    "baseline": {"epochs": 3},
    "k_II": 10,
    "timing": False,
}


def fast_cfg(**kw):
    return ExperimentConfig.from_dict({**FAST, **kw})


@pytest.fixture(scope="module")
def ctx13():
    return build_context(fast_cfg())


def test_pipeline_identity(ctx13):
    cfg = fast_cfg(betas=[1.0], seeds=[1], methods=["I"])
    res = run_experiment(cfg, ctx13)
    (row,) = res.rows
    assert row["scenario"] == "train"
    model = res.models[(1.0, 1)]["I"]
    pred, _ = model.predict(ctx13.X)
    rep = compute_metrics(ctx13.dataset.y, pred, ctx13.g.class_adjacency())
    assert row["lar"] == f"{rep.lar:.6f}" and row["f1"] == f"{rep.f1:.6f}"


def test_rows_per_seed(ctx13):
    res = run_experiment(fast_cfg(betas=[0.15], seeds=[1, 2, 3], methods=["I"]), ctx13)
    assert len(res.rows) == 3
    assert [r["seed"] for r in res.rows] == [1, 2, 3]
    assert all(list(r) == RESULT_HEADER for r in res.rows)


def test_all_methods_and_ood_arms(ctx13):
    ood = ["load:0.58", "load:0.74"]
    res = run_experiment(fast_cfg(seeds=[1], methods=list(H.METHODS), ood=ood, ood_draws=2), ctx13)
    arms = {(r["scenario"], r["stage"]) for r in res.rows}
    assert arms == {(s, m) for s in ["base"] + ood for m in H.METHODS}
    for r in res.rows:
        assert 0 <= float(r["lar"]) <= float(r["lar1hop"]) <= 1
    assert res.harness.frozen
    assert res.manifest["param_fingerprint"] == fingerprint(
        {f"{b}/{s}/{m}": v for (b, s), ms in res.models.items() for m, v in ms.items()})


def test_ood_uses_training_stats(ctx13):
    cfg = fast_cfg(ood_draws=2)
    X, y = H.ood_dataset(ctx13, cfg, "load:0.53")
    assert X.shape[1:] == ctx13.X.shape[1:]
    assert len(y) == 3 * 12 * 2
    obs = list(ctx13.g.observed)
    # same statistics, so a distribution close to training stays near zero mean
    assert np.all(np.abs(X[:, obs].reshape(-1, 6).mean(axis=0)) < 1.0)
    with pytest.raises(ConfigError, match="switch scenario"):
        H.ood_dataset(ctx13, cfg, "switch:nope")


def test_frozen_guard():
    h = Harness()
    assert h.train(lambda: 1) == 1
    h.freeze()
    with pytest.raises(FrozenError):
        h.train(lambda: 1)


def test_eval_does_not_touch_parameters(ctx13, monkeypatch):
    """A model that mutates itself during prediction trips the fingerprint."""
    real = H.predict_with

    def sneaky(model, X):
        model.store.params["bo"][0] += 1.0
        return real(model, X)

    monkeypatch.setattr(H, "predict_with", sneaky)
    with pytest.raises(FrozenError, match="changed"):
        run_experiment(fast_cfg(seeds=[1], methods=["I"]), ctx13)


def test_methods_share_split(ctx13, monkeypatch):
    seen = {}

    def spy(name, fn):
        def wrapped(X, y, *a, **k):
            seen.setdefault(name, []).append(y.copy())
            return fn(X, y, *a, **k)
        return wrapped

    monkeypatch.setattr(H, "train_stage1", spy("I", H.train_stage1))
    monkeypatch.setattr(H, "baseline_mlp", spy("mlp", H.baseline_mlp))
    monkeypatch.setattr(H, "baseline_gcn", spy("gcn", H.baseline_gcn))
    run_experiment(fast_cfg(seeds=[2], methods=["I", "mlp", "gcn"]), ctx13)
    lab, _ = stratified_split(ctx13.dataset.y, 0.15, 2)
    for name in ("I", "mlp", "gcn"):
        assert np.array_equal(seen[name][0], ctx13.dataset.y[lab])


def test_csv_deterministic(ctx13, tmp_path):
    cfg = fast_cfg(seeds=[1], methods=["I", "I+II"], out=str(tmp_path / "a"))
    a = run_experiment(cfg, ctx13).csv_text()
    b = run_experiment(cfg, ctx13).csv_text()
    assert a == b
    assert (tmp_path / "a" / "results.csv").read_text() == a
    rows = list(csv.DictReader(io.StringIO(a)))
    assert all(r["runtime_s"] == "" for r in rows)


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="label rate"):
        fast_cfg(betas=[1.5])
    with pytest.raises(ConfigError, match="unknown method"):
        fast_cfg(methods=["cnn"])
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="OOD"):
        fast_cfg(ood=["weather:3"])
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)


def test_config_roundtrip():
    cfg = fast_cfg(ood=["load:0.4"])
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_switch_scenarios(feeder36, feeder13):
    sc = switch_scenarios(feeder36)
    assert set(sc) == {"base", "close-ties", "open-all", "open-half"}
    assert sc["close-ties"] == {3: "closed", 4: "closed"}
    assert sc["open-all"] == {0: "open", 1: "open", 2: "open"}
    assert sc["open-half"] == {0: "open"}
    # opening the 13-node feeder's only switch strands 692 and 675
    assert set(switch_scenarios(feeder13)) == {"base"}


@pytest.mark.parametrize("arm", ["close-ties", "open-all", "open-half"])
def test_switch_ood_set(arm):
    ctx = build_context(fast_cfg(feeder="feeder36", grid={"impedance_draws": 1}))
    X, y = H.ood_dataset(ctx, fast_cfg(feeder="feeder36", ood_draws=1), f"switch:{arm}")
    assert X.shape == (3 * 34, 36, 6)
    assert np.array_equal(np.bincount(y), np.full(34, 3))


# -- baselines ---------------------------------------------------------------------


def test_mlp_fits_separable():
    rng = np.random.default_rng(0)
    y = np.repeat(np.arange(4), 5)
    X = rng.normal(scale=0.05, size=(20, 4, 6))
    X[np.arange(20), y, 0] += 1
    m = baseline_mlp(X, y, 4, BaselineConfig(epochs=150, lr=1e-2, lam=0))
    assert np.array_equal(m.predict(X), y)


def test_gcn_zero_adjacency_is_per_node():
    assert np.array_equal(gcn_operator(np.zeros((4, 4))), np.eye(4))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(3, 4, 6))
    m = baseline_gcn(X, np.array([0, 1, 2]), np.zeros((4, 4)), 3, BaselineConfig(epochs=1))
    p = m.store.params
    Wo = p["Wo"].reshape(4, -1, 3)
    expect = np.tile(p["bo"], (3, 1))
    for i in range(4):
        h = X[:, i]
        for k in ("W1", "W2", "W3"):
            h = np.maximum(h @ p[k], 0)
        expect += h @ Wo[i]
    assert np.allclose(m.logits(X), expect, atol=1e-12)


# -- command line ---------------------------------------------------------------------


def test_cli_round_trip(tmp_path, capsys):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"impedance_draws": 3}))
    data = tmp_path / "data"
    assert main(["gen", "--feeder", "feeder13", "--out", str(data), "--grid", str(grid), "--seed", "3"]) == 0
    ckpt = tmp_path / "m.json"
    assert main(["train", "--data", str(data), "--stage", "both", "--labels", "0.3", "--seed", "1",
                 "--out", str(ckpt), "--kII", "10", "--epochs1", "4", "--epochs2", "4"]) == 0
    assert (tmp_path / "m.json.history.csv").exists()
    out = tmp_path / "eval.csv"
    assert main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert rows[0]["stage"] == "I+II" and rows[0]["scenario"] == "base"
    out2 = tmp_path / "ood.csv"
    assert main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(out2),
                 "--scenario", "load:0.8", "--draws", "1"]) == 0
    assert list(csv.DictReader(out2.open()))[0]["scenario"] == "load:0.8"


def test_cli_influence(tmp_path, capsys):
    out = tmp_path / "infl.csv"
    assert main(["influence", "--feeder", "fig3", "--kI", "2", "--layers", "1", "--out", str(out)]) == 0
    assert "physical 3" in capsys.readouterr().out


def test_cli_sweep(tmp_path, capsys):
    cfg = tmp_path / "exp.json"
    cfg.write_text(json.dumps({**FAST, "seeds": [1], "methods": ["I"]}))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert capsys.readouterr().out.startswith(",".join(RESULT_HEADER))
    assert (tmp_path / "r" / "manifest.json").exists()


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"methods": ["cnn"]}))
    assert main(["sweep", "--config", str(bad)]) == 2
    assert main(["gen", "--feeder", str(tmp_path / "missing.json"), "--out", str(tmp_path / "x")]) == 2
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"impedance_draws": 2}))
    data = tmp_path / "d"
    main(["gen", "--feeder", "feeder13", "--out", str(data), "--grid", str(grid)])
    # a corrupted measurement poisons the loss
    lines = (data / "samples.ndjson").read_text().splitlines()
    rec = json.loads(lines[0])
    obs = next(i for i, row in enumerate(rec["x"]) if any(row))
    rec["x"][obs][0] = float("nan")
    lines[0] = json.dumps(rec)
    (data / "samples.ndjson").write_text("\n".join(lines) + "\n")
    code = main(["train", "--data", str(data), "--stage", "1", "--labels", "1.0",
                 "--out", str(tmp_path / "c.json"), "--epochs1", "1"])
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err
