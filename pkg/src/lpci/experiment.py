"""Config-driven experiments: data sources, method dispatch, seeded repetition, reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import urllib.request
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import pandas as pd

from lpci._rng import derive_seed, make_rng
from lpci.baselines import BaselineConfig, run_baseline
from lpci.engine import (
    IntervalRecord,
    LpciConfig,
    fit as fit_lpci,
    run_cross_sectional,
    run_longitudinal,
    write_records,
)
from lpci.errors import ConfigError, FetchError, ModeError
from lpci.metrics import CoverageReport, coverage_report, format_rows
from lpci.panel import (
    PanelDataset,
    fit_scaler,
    load_csv,
    panel_from_frame,
    split_cross_sectional,
    split_longitudinal,
)

log = logging.getLogger(__name__)

METHODS = ("lpci", "split", "cqr", "spci_per_group")
MODES = ("cross_sectional", "longitudinal")

COVID_URL = (
    "https://api.coronavirus.data.gov.uk/v2/data"
    "?areaType=ltla&metric=newCasesBySpecimenDate&format=csv"
)
COVID_FILE = "ltla_newCasesBySpecimenDate.csv"


# -- synthetic data ---------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """AR(1) panel ``y_t = mu_g + phi * y_{t-1} + sigma_g * eta_t``.

    ``mu_g ~ U(-mu_scale, mu_scale)``, ``sigma_g ~ U(sigma_min, sigma_max)``
    and the pre-sample value is drawn from the stationary law. ``seed=None``
    lets the experiment runner draw a fresh panel per run seed.
    """

    n_groups: int = 130
    n_times: int = 30
    phi: float = 0.6
    mu_scale: float = 1.0
    sigma_min: float = 0.5
    sigma_max: float = 2.0
    seed: int | None = 0

    def __post_init__(self) -> None:
        if self.n_groups < 1 or self.n_times < 2:
            raise ConfigError("need at least 1 group and 2 time points")
        if not -1.0 < self.phi < 1.0:
            raise ConfigError("phi must lie in (-1, 1)")
        if self.mu_scale < 0:
            raise ConfigError("mu_scale must be >= 0")
        if not 0.0 < self.sigma_min <= self.sigma_max:
            raise ConfigError("need 0 < sigma_min <= sigma_max")

    def replace(self, **changes: Any) -> SyntheticSpec:
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SyntheticSpec:
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synthetic option(s): {sorted(unknown)}")
        return cls(**data)


def generate_synthetic(spec: SyntheticSpec) -> PanelDataset:
    if spec.seed is None:
        raise ConfigError("generate_synthetic needs a concrete seed")
    rng = make_rng(spec.seed, "synthetic")
    G, T, phi = spec.n_groups, spec.n_times, spec.phi
    mu = rng.uniform(-spec.mu_scale, spec.mu_scale, G)
    sigma = rng.uniform(spec.sigma_min, spec.sigma_max, G)
    eta = rng.standard_normal((G, T + 1))
    y = np.empty((G, T + 1))
    y[:, 0] = mu / (1.0 - phi) + sigma / np.sqrt(1.0 - phi * phi) * eta[:, 0]
    for t in range(1, T + 1):
        y[:, t] = mu + phi * y[:, t - 1] + sigma * eta[:, t]
    width = len(str(G - 1))
    return PanelDataset(
        groups=tuple(f"g{i:0{width}d}" for i in range(G)),
        times=np.arange(1, T + 1),
        y=y[:, 1:],
    )


# -- covid data --------------------------------------------------------------


def cache_dir(path: str | Path | None = None) -> Path:
    if path is not None:
        return Path(path)
    return Path(os.environ.get("LPCI_CACHE_DIR", Path.home() / ".cache" / "lpci"))


def fetch_covid(
    cache: str | Path | None = None,
    start: str = "2022-02-01",
    end: str = "2022-03-31",
    url: str | None = None,
) -> PanelDataset:
    """Daily specimen-date case counts per lower-tier local authority.

    The raw CSV is downloaded once into the cache directory (``LPCI_CACHE_DIR``
    or ``~/.cache/lpci``) and reused afterwards. Authorities without a value on
    every day of ``[start, end]`` are dropped.
    """
    root = cache_dir(cache)
    path = root / COVID_FILE
    if not path.exists():
        url = url or os.environ.get("LPCI_COVID_URL", COVID_URL)
        log.info("downloading %s", url)
        try:
            with urllib.request.urlopen(url, timeout=60) as resp:
                payload = resp.read()
        except Exception as exc:  # network errors come in many types
            raise FetchError(f"could not download covid data and no cache at {path}: {exc}") from exc
        root.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    return covid_panel(pd.read_csv(path), start, end)


def covid_panel(raw: pd.DataFrame, start: str, end: str) -> PanelDataset:
    need = {"areaCode", "date", "newCasesBySpecimenDate"}
    missing = need - set(raw.columns)
    if missing:
        raise FetchError(f"covid file lacks column(s) {sorted(missing)}")
    frame = raw[["areaCode", "date", "newCasesBySpecimenDate"]].copy()
    frame["date"] = pd.to_datetime(frame["date"])
    days = pd.date_range(start, end, freq="D")
    frame = frame[frame["date"].isin(days)].dropna()
    frame = frame.drop_duplicates(["areaCode", "date"])
    counts = frame.groupby("areaCode")["date"].nunique()
    complete = counts.index[counts == len(days)]
    dropped = frame["areaCode"].nunique() - len(complete)
    if dropped:
        log.warning("dropped %d authorities with incomplete windows", dropped)
    frame = frame[frame["areaCode"].isin(complete)]
    if frame.empty:
        raise FetchError("no authority has a complete window")
    return panel_from_frame(
        frame, {"group": "areaCode", "time": "date", "y": "newCasesBySpecimenDate"}
    )


# -- experiment config -------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a data source, a protocol, methods and seeds.

    ``data`` is ``{"source": "synthetic", "spec": {...}}``,
    ``{"source": "csv", "path": ..., "schema": {...}}`` or
    ``{"source": "covid", "cache_dir": ...}``.
    """

    data: Mapping[str, Any] = field(default_factory=lambda: {"source": "synthetic", "spec": {}})
    mode: str = "cross_sectional"
    methods: tuple[str, ...] = ("lpci",)
    seeds: tuple[int, ...] = (0,)
    alpha: float = 0.1
    test_fraction: float = 0.2
    split_time: int | None = None
    last_k: int | None = 20
    lpci: LpciConfig = field(default_factory=LpciConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    output_dir: str = "results"
    jobs: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "data", dict(self.data))
        if not self.methods:
            raise ConfigError("at least one method is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; expected {METHODS}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if "spci_per_group" in self.methods and self.mode != "longitudinal":
            raise ModeError("spci_per_group requires the longitudinal mode")
        if self.data.get("source") not in ("synthetic", "csv", "covid"):
            raise ConfigError("data.source must be 'synthetic', 'csv' or 'covid'")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def replace(self, **changes: Any) -> ExperimentConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["methods"] = list(self.methods)
        out["seeds"] = list(self.seeds)
        out["lpci"] = self.lpci.to_dict()
        out["baseline"] = self.baseline.to_dict()
        return json.loads(json.dumps(out))

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ExperimentConfig:
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment option(s): {sorted(unknown)}")
        if "lpci" in data and not isinstance(data["lpci"], LpciConfig):
            data["lpci"] = LpciConfig.from_dict(data["lpci"])
        if "baseline" in data and not isinstance(data["baseline"], BaselineConfig):
            data["baseline"] = BaselineConfig.from_dict(data["baseline"])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


def load_data(config: ExperimentConfig, seed: int) -> PanelDataset:
    src = config.data
    kind = src["source"]
    if kind == "synthetic":
        spec = SyntheticSpec.from_dict(src.get("spec", {}))
        if spec.seed is None:
            spec = spec.replace(seed=derive_seed(seed, "data"))
        return generate_synthetic(spec)
    if kind == "csv":
        return load_csv(src["path"], src.get("schema"))
    return fetch_covid(src.get("cache_dir"), src.get("start", "2022-02-01"), src.get("end", "2022-03-31"))


def split_data(config: ExperimentConfig, data: PanelDataset, seed: int) -> tuple[PanelDataset, PanelDataset]:
    if config.mode == "cross_sectional":
        return split_cross_sectional(data, config.test_fraction, derive_seed(seed, "split"))
    split_time = config.split_time
    if split_time is None:
        split_time = int(data.times[0]) + data.n_times // 2 - 1
    return split_longitudinal(data, split_time)


def run_method(
    method: str, train: PanelDataset, test: PanelDataset, config: ExperimentConfig, seed: int
) -> list[IntervalRecord]:
    """One method on one split; ``seed`` feeds only this method's streams."""
    method_seed = derive_seed(seed, "method", method)
    if method == "lpci":
        cfg = config.lpci.replace(alpha=config.alpha, seed=method_seed)
        model = fit_lpci(train, cfg)
        if config.mode == "cross_sectional":
            return run_cross_sectional(model, test)
        return run_longitudinal(model, test)
    cfg = config.baseline.replace(method=method, alpha=config.alpha, seed=method_seed, lpci=config.lpci)
    return run_baseline(train, test, cfg)


@dataclass
class CellResult:
    method: str
    seed: int
    records_path: str
    report_path: str
    report: CoverageReport


def _run_cell(config: ExperimentConfig, method: str, seed: int) -> CellResult:
    out = Path(config.output_dir)
    stage = "data"
    try:
        data = load_data(config, seed)
        stage = "split"
        train, test = split_data(config, data, seed)
        stage = method
        records = run_method(method, train, test, config, seed)
        stage = "report"
        scale = fit_scaler(train, "y").std
        report = coverage_report(records, config.last_k, scale=scale)
    except Exception as exc:
        raise StageError(stage, method, seed, exc) from exc
    rec_path = out / "records" / f"{method}_seed{seed}.csv"
    rep_path = out / "reports" / f"{method}_seed{seed}.json"
    write_records(rec_path, records)
    report.to_json(rep_path)
    return CellResult(method, seed, str(rec_path), str(rep_path), report)


class StageError(RuntimeError):
    def __init__(self, stage: str, method: str, seed: int, cause: Exception):
        super().__init__(f"[{stage}] {method} seed={seed}: {type(cause).__name__}: {cause}")
        self.stage = stage


def aggregate(reports: Mapping[tuple[str, int], CoverageReport]) -> dict[str, dict[str, dict[str, float]]]:
    """Per method and metric: mean and population std over seeds."""
    by_method: dict[str, list[CoverageReport]] = {}
    for (method, _seed), rep in sorted(reports.items()):
        by_method.setdefault(method, []).append(rep)
    out: dict[str, dict[str, dict[str, float]]] = {}
    for method, reps in by_method.items():
        stats = {}
        for key in CoverageReport.SUMMARY_FIELDS:
            vals = [getattr(r, key) for r in reps if getattr(r, key) is not None]
            if not vals:
                continue
            arr = np.asarray(vals, dtype=np.float64)
            stats[key] = {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}
        out[method] = stats
    return out


def write_aggregate(agg: Mapping[str, Mapping[str, Mapping[str, float]]], out_dir: str | Path) -> str:
    """Write ``aggregate.json`` and ``aggregate.csv``; return the text table."""
    out_dir = Path(out_dir)
    (out_dir / "aggregate.json").write_text(json.dumps(agg, indent=2) + "\n")
    rows = []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "metric", "mean", "std", "n_seeds", "summary"])
    for method, stats in agg.items():
        for metric, s in stats.items():
            cell = f"{s['mean']:.3f} ± {s['std']:.3f}"
            writer.writerow([method, metric, repr(s["mean"]), repr(s["std"]), s["n"], cell])
            rows.append((method, metric, cell))
    (out_dir / "aggregate.csv").write_text(buf.getvalue())
    return format_rows(["method", "metric", "mean ± std"], rows)


def run_experiment(config: ExperimentConfig) -> dict[str, Any]:
    """Run every (method, seed) cell, then aggregate. Returns paths and the summary."""
    out = Path(config.output_dir)
    for sub in ("records", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json() + "\n")
    cells = [(m, s) for m in config.methods for s in config.seeds]
    if config.jobs > 1:
        with ProcessPoolExecutor(config.jobs) as pool:
            results = list(pool.map(_run_cell, [config] * len(cells), *zip(*cells)))
    else:
        results = [_run_cell(config, m, s) for m, s in cells]
    agg = aggregate({(r.method, r.seed): r.report for r in results})
    table = write_aggregate(agg, out)
    return {"cells": results, "aggregate": agg, "table": table}


def reaggregate(out_dir: str | Path) -> dict[str, Any]:
    """Rebuild the aggregate files from the per-cell report JSONs in ``out_dir``."""
    out_dir = Path(out_dir)
    reports = {}
    for path in sorted((out_dir / "reports").glob("*_seed*.json")):
        method, seed = path.stem.rsplit("_seed", 1)
        reports[(method, int(seed))] = CoverageReport.from_json(path)
    if not reports:
        raise ConfigError(f"no reports found under {out_dir / 'reports'}")
    agg = aggregate(reports)
    return {"aggregate": agg, "table": write_aggregate(agg, out_dir)}
