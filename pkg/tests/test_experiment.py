import json
import logging

import numpy as np
import pandas as pd
import pytest

from lpci.cli import main
from lpci.engine import LpciConfig, read_records
from lpci.errors import ConfigError, FetchError, ModeError
from lpci.experiment import (
    COVID_FILE,
    ExperimentConfig,
    SyntheticSpec,
    aggregate,
    fetch_covid,
    generate_synthetic,
    reaggregate,
    run_experiment,
)
from lpci.baselines import BaselineConfig
from lpci.forest import ForestParams
from lpci.metrics import CoverageReport

SMALL = ForestParams(n_trees=10, min_leaf_size=3)


def tiny_config(tmp_path, **kw):
    base = dict(
        data={"source": "synthetic", "spec": {"n_groups": 12, "n_times": 10, "seed": None}},
        mode="longitudinal",
        methods=("split", "cqr"),
        seeds=(0, 1, 2, 3, 4),
        last_k=None,
        lpci=LpciConfig(window=3, n_folds=3, point_forest=SMALL, qrf_forest=SMALL),
        baseline=BaselineConfig(forest=SMALL),
        output_dir=str(tmp_path / "out"),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_synthetic_iid_case():
    spec = SyntheticSpec(n_groups=200, n_times=200, phi=0.0, mu_scale=0.0, sigma_min=1.0, sigma_max=1.0, seed=1)
    y = generate_synthetic(spec).y
    assert abs(y.mean()) < 0.02 and abs(y.std() - 1.0) < 0.02
    lag_corr = np.corrcoef(y[:, 1:].ravel(), y[:, :-1].ravel())[0, 1]
    assert abs(lag_corr) < 0.02


def test_synthetic_stationary_mean():
    spec = SyntheticSpec(n_groups=4, n_times=5000, phi=0.6, mu_scale=2.0, seed=3)
    d = generate_synthetic(spec)
    long_mean = np.array([d.y[i].mean() for i in range(4)])
    # recover mu from the AR(1) regression and compare with the long-run mean
    for i in range(4):
        y = d.y[i]
        slope, intercept = np.polyfit(y[:-1], y[1:], 1)
        assert abs(slope - 0.6) < 0.05
        assert abs(long_mean[i] - intercept / (1 - slope)) < 0.15


def test_synthetic_deterministic():
    spec = SyntheticSpec(n_groups=5, n_times=7, seed=11)
    assert np.array_equal(generate_synthetic(spec).y, generate_synthetic(spec).y)
    assert not np.array_equal(generate_synthetic(spec).y, generate_synthetic(spec.replace(seed=12)).y)


@pytest.mark.parametrize(
    "kw", [dict(phi=1.0), dict(sigma_min=0.0), dict(sigma_min=3.0, sigma_max=2.0), dict(n_groups=0)]
)
def test_synthetic_validation(kw):
    with pytest.raises(ConfigError):
        SyntheticSpec(**kw)


def test_config_round_trip(tmp_path):
    cfg = tiny_config(tmp_path, methods=("lpci", "spci_per_group"), split_time=4)
    path = tmp_path / "c.json"
    path.write_text(cfg.to_json())
    back = ExperimentConfig.load(path)
    assert back == cfg
    assert ExperimentConfig.from_dict(back.to_dict()).to_dict() == cfg.to_dict()


def test_config_validation(tmp_path):
    with pytest.raises(ModeError):
        tiny_config(tmp_path, mode="cross_sectional", methods=("spci_per_group",))
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, methods=())
    with pytest.raises(ConfigError):
        tiny_config(tmp_path, methods=("bogus",))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"sedes": [1]})


def _fake_covid(root, drop_day=True):
    days = pd.date_range("2022-01-25", "2022-04-05", freq="D")
    rows = []
    for area in ("E1", "E2", "E3"):
        for i, day in enumerate(days):
            if area == "E3" and drop_day and day == pd.Timestamp("2022-03-10"):
                continue
            rows.append((area, day.strftime("%Y-%m-%d"), 10 + i + len(area)))
    frame = pd.DataFrame(rows, columns=["areaCode", "date", "newCasesBySpecimenDate"])
    root.mkdir(parents=True, exist_ok=True)
    frame.to_csv(root / COVID_FILE, index=False)


def test_covid_cache_hit(tmp_path, caplog, monkeypatch):
    _fake_covid(tmp_path / "cache")

    def no_network(*a, **k):
        raise AssertionError("network used despite cache")

    monkeypatch.setattr("urllib.request.urlopen", no_network)
    with caplog.at_level(logging.WARNING):
        panel = fetch_covid(tmp_path / "cache")
    assert panel.groups == ("E1", "E2") and panel.n_times == 59
    assert "dropped 1" in caplog.text


def test_covid_env_cache_dir(tmp_path, monkeypatch):
    _fake_covid(tmp_path / "envcache", drop_day=False)
    monkeypatch.setenv("LPCI_CACHE_DIR", str(tmp_path / "envcache"))
    assert fetch_covid().n_groups == 3


def test_covid_fetch_error(tmp_path):
    with pytest.raises(FetchError):
        fetch_covid(tmp_path / "empty", url=(tmp_path / "missing.csv").as_uri())


def test_fan_out_and_aggregate(tmp_path):
    cfg = tiny_config(tmp_path)
    result = run_experiment(cfg)
    out = tmp_path / "out"
    assert len(list((out / "records").glob("*.csv"))) == 10
    assert len(list((out / "reports").glob("*.json"))) == 10
    assert (out / "aggregate.csv").exists() and (out / "aggregate.json").exists()
    agg = result["aggregate"]
    reports = [CoverageReport.from_json(out / "reports" / f"cqr_seed{s}.json") for s in cfg.seeds]
    vals = np.array([r.marginal_coverage for r in reports])
    assert agg["cqr"]["marginal_coverage"]["mean"] == pytest.approx(vals.mean(), abs=1e-15)
    assert agg["cqr"]["marginal_coverage"]["std"] == pytest.approx(vals.std(), abs=1e-15)
    # split widths are constant within a run
    assert agg["split"]["width_cov"]["mean"] < 1e-12
    assert "±" in (out / "aggregate.csv").read_text()
    again = reaggregate(out)
    assert again["aggregate"] == agg


def test_aggregate_constant_metric_has_zero_std():
    rep = CoverageReport(0.9, 0.8, 1.0, 0.0, 0.0, 10, 2, "all")
    agg = aggregate({("m", s): rep for s in range(5)})
    assert agg["m"]["marginal_coverage"] == {"mean": 0.9, "std": 0.0, "n": 5}


def test_rerun_is_byte_identical(tmp_path):
    kw = dict(methods=("lpci",), seeds=(3,))
    run_experiment(tiny_config(tmp_path / "a", **kw))
    run_experiment(tiny_config(tmp_path / "b", **kw))
    a = (tmp_path / "a" / "out" / "records" / "lpci_seed3.csv").read_bytes()
    b = (tmp_path / "b" / "out" / "records" / "lpci_seed3.csv").read_bytes()
    assert a == b and len(read_records(tmp_path / "a" / "out" / "records" / "lpci_seed3.csv")) == 12 * 5


def test_adding_a_method_keeps_other_streams(tmp_path):
    run_experiment(tiny_config(tmp_path / "a", methods=("split",), seeds=(1,)))
    run_experiment(tiny_config(tmp_path / "b", methods=("cqr", "split"), seeds=(1,)))
    name = "out/records/split_seed1.csv"
    assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_matches_serial(tmp_path):
    run_experiment(tiny_config(tmp_path / "a", seeds=(0, 1)))
    run_experiment(tiny_config(tmp_path / "b", seeds=(0, 1), jobs=2))
    for f in ("split_seed0.csv", "cqr_seed1.csv"):
        assert (tmp_path / "a/out/records" / f).read_bytes() == (tmp_path / "b/out/records" / f).read_bytes()


def test_cli_generate_run_report(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_groups": 4, "n_times": 6, "seed": 2}))
    assert main(["generate", "--spec", str(spec), "--out", str(tmp_path / "p.csv")]) == 0
    assert len(pd.read_csv(tmp_path / "p.csv")) == 24

    cfg = tiny_config(tmp_path, seeds=(0,))
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    out = tmp_path / "cli_out"
    assert main(["run", "--config", str(path), "--seed", "5", "--seed", "6",
                 "--method", "split", "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "records").iterdir()) == ["split_seed5.csv", "split_seed6.csv"]
    assert "marginal_coverage" in capsys.readouterr().out
    assert main(["report", "--in", str(out)]) == 0
    assert "split" in capsys.readouterr().out


def test_cli_stage_error(tmp_path, capsys):
    cfg = tiny_config(tmp_path, data={"source": "csv", "path": str(tmp_path / "nope.csv")}, seeds=(0,))
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    assert main(["run", "--config", str(path)]) == 2
    assert "[data]" in capsys.readouterr().err


def test_cli_bad_config(tmp_path, capsys):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"methods": ["bogus"]}))
    assert main(["run", "--config", str(path)]) == 1
    assert "error" in capsys.readouterr().err
