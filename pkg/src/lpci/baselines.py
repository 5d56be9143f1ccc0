"""Comparison methods: split conformal, CQR and per-group SPCI."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Mapping

import numpy as np

from lpci._rng import derive_seed
from lpci.engine import IntervalRecord, LpciConfig, fit as fit_lpci, run_longitudinal
from lpci.errors import ConfigError, ModeError
from lpci.forest import ForestParams, QuantileForest
from lpci.panel import (
    GroupEncoder,
    PanelDataset,
    concat_times,
    fit_scaler,
    make_supervised,
    scale_panel,
    split_cross_sectional,
)

METHODS = ("split", "cqr", "spci_per_group")
CROSS_SECTIONAL = "cross_sectional"
LONGITUDINAL = "longitudinal"


@dataclass(frozen=True)
class BaselineConfig:
    """``calibration_fraction=None`` picks 0.5 of groups (cross-sectional)
    or the last 0.25 of training times (longitudinal)."""

    method: str = "split"
    alpha: float = 0.1
    calibration_fraction: float | None = None
    forest: ForestParams = field(default_factory=ForestParams)
    lpci: LpciConfig = field(default_factory=LpciConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown baseline {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        cf = self.calibration_fraction
        if cf is not None and not 0.0 < cf < 1.0:
            raise ConfigError("calibration_fraction must lie in (0, 1)")

    def replace(self, **changes: Any) -> BaselineConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["forest"] = self.forest.to_dict()
        out["lpci"] = self.lpci.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> BaselineConfig:
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown baseline option(s): {sorted(unknown)}")
        if "forest" in data and not isinstance(data["forest"], ForestParams):
            data["forest"] = ForestParams.from_dict(data["forest"])
        if "lpci" in data and not isinstance(data["lpci"], LpciConfig):
            data["lpci"] = LpciConfig.from_dict(data["lpci"])
        return cls(**data)


def detect_mode(train: PanelDataset, test: PanelDataset) -> str:
    """``cross_sectional`` for disjoint groups on the same times, ``longitudinal``
    for the same groups at later times."""
    if set(train.groups).isdisjoint(test.groups):
        if not np.array_equal(train.times, test.times):
            raise ModeError("disjoint groups must share the same time range")
        return CROSS_SECTIONAL
    if set(train.groups) == set(test.groups):
        if test.times[0] != train.times[-1] + 1:
            raise ModeError("test times must directly follow the training times")
        return LONGITUDINAL
    raise ModeError("train and test groups neither coincide nor are disjoint")


def conformal_rank(n: int, alpha: float) -> int:
    """1-based rank ``ceil((n + 1)(1 - alpha))`` of the calibration order statistic."""
    # guard against 10 * 0.9 = 9.000000000000002 style round-up
    if n < 1:
        raise ConfigError("calibration set is empty")
    k = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    if k > n:
        raise ConfigError(
            f"{n} calibration scores are too few for alpha={alpha}; rank {k} is needed"
        )
    return max(k, 1)


def conformal_quantile(scores, alpha: float) -> float:
    s = np.sort(np.asarray(scores, dtype=np.float64))
    return float(s[conformal_rank(len(s), alpha) - 1])


@dataclass
class _Design:
    X_fit: np.ndarray
    y_fit: np.ndarray
    X_cal: np.ndarray
    y_cal: np.ndarray
    X_test: np.ndarray
    test_group: np.ndarray
    test_time: np.ndarray
    test_y: np.ndarray
    scaler: Any


def _design(train: PanelDataset, test: PanelDataset, config: BaselineConfig, lags: int = 1) -> _Design:
    """Standardized lag features for the proper-training, calibration and test rows.

    Cross-sectionally, calibration groups are encoded and featurized exactly
    like test groups (codes past the proper-training ones, zero-filled first
    lag) so that calibration and test rows are exchangeable.
    """
    mode = detect_mode(train, test)
    train, test = train.select_groups(train.groups), test.select_groups(test.groups)
    scaler = fit_scaler(train, "y")
    te = scale_panel(test, scaler)
    raw_y = test.y.reshape(-1)
    if mode == CROSS_SECTIONAL:
        frac = 0.5 if config.calibration_fraction is None else config.calibration_fraction
        proper, cal = split_cross_sectional(train, frac, derive_seed(config.seed, "calibration"))
        encoder = GroupEncoder(proper.groups)
        fit_rows = make_supervised(scale_panel(proper, scaler), lags, encoder)
        encoder.extend(cal.groups)
        encoder.extend(test.groups)
        cal_rows = make_supervised(scale_panel(cal, scaler), lags, encoder, fill_value=0.0)
        sup_te = make_supervised(te, lags, encoder, fill_value=0.0)
    else:
        frac = 0.25 if config.calibration_fraction is None else config.calibration_fraction
        encoder = GroupEncoder(train.groups)
        tr = scale_panel(train, scaler)
        sup = make_supervised(tr, lags, encoder)
        n_cal = max(1, math.ceil(frac * train.n_times))
        is_cal = sup.time >= train.times[-1] - n_cal + 1
        if not is_cal.any():
            raise ConfigError("calibration set is empty")
        if is_cal.all():
            raise ConfigError("proper training set is empty")
        fit_rows, cal_rows = _subset(sup, ~is_cal), _subset(sup, is_cal)
        sup_all = make_supervised(concat_times(tr, te), lags, encoder)
        sup_te = _subset(sup_all, sup_all.time >= test.times[0])
    return _Design(
        X_fit=fit_rows.features(), y_fit=fit_rows.target,
        X_cal=cal_rows.features(), y_cal=cal_rows.target,
        X_test=sup_te.features(), test_group=sup_te.group, test_time=sup_te.time,
        test_y=raw_y, scaler=scaler,
    )


def _subset(sup, mask):
    return type(sup)(
        group=sup.group[mask], group_code=sup.group_code[mask], lags=sup.lags[mask],
        exog=sup.exog[mask], time=sup.time[mask], target=sup.target[mask],
        include_code=sup.include_code,
    )


def _records(design: _Design, pred, lower, upper, beta: float) -> list[IntervalRecord]:
    inv = design.scaler.invert
    pred, lower, upper = inv(pred), inv(lower), inv(upper)
    out = []
    order = sorted(range(len(pred)), key=lambda i: (int(design.test_time[i]), str(design.test_group[i])))
    for i in order:
        y = float(design.test_y[i])
        out.append(
            IntervalRecord(
                group=str(design.test_group[i]), time=int(design.test_time[i]), y_true=y,
                y_pred=float(pred[i]), lower=float(lower[i]), upper=float(upper[i]),
                beta=beta, covered=bool(lower[i] <= y <= upper[i]),
            )
        )
    return out


def split_conformal(train: PanelDataset, test: PanelDataset, config: BaselineConfig = BaselineConfig()) -> list[IntervalRecord]:
    """Random-forest point prediction plus/minus a calibrated absolute-residual quantile."""
    dz = _design(train, test, config)
    forest = QuantileForest(config.forest.replace(seed=derive_seed(config.seed, "split", config.forest.seed)))
    forest.fit(dz.X_fit, dz.y_fit)
    q = conformal_quantile(np.abs(dz.y_cal - forest.predict(dz.X_cal)), config.alpha)
    pred = forest.predict(dz.X_test)
    return _records(dz, pred, pred - q, pred + q, float("nan"))


def cqr(train: PanelDataset, test: PanelDataset, config: BaselineConfig = BaselineConfig()) -> list[IntervalRecord]:
    """Conformalized quantile regression with a quantile forest.

    Intervals whose negative correction makes them cross collapse to their
    midpoint.
    """
    dz = _design(train, test, config)
    forest = QuantileForest(config.forest.replace(seed=derive_seed(config.seed, "cqr", config.forest.seed)))
    forest.fit(dz.X_fit, dz.y_fit)
    levels = [config.alpha / 2.0, 1.0 - config.alpha / 2.0]
    cal_q = forest.quantiles(dz.X_cal, levels)
    scores = np.maximum(cal_q[:, 0] - dz.y_cal, dz.y_cal - cal_q[:, 1])
    correction = conformal_quantile(scores, config.alpha)
    q = forest.quantiles(dz.X_test, levels)
    lower, upper = q[:, 0] - correction, q[:, 1] + correction
    crossed = lower > upper
    mid = (lower + upper) / 2.0
    lower, upper = np.where(crossed, mid, lower), np.where(crossed, mid, upper)
    return _records(dz, forest.predict(dz.X_test), lower, upper, config.alpha / 2.0)


def spci_config(base: LpciConfig, group: str, n_train_times: int) -> LpciConfig:
    """Single-series settings: no group code, time-block folds, window at most half the history.

    The residual forest's leaf size is capped at the number of rows one series
    provides, so a pooled-data setting still fits (as a single leaf).
    """
    window = max(1, min(base.window, n_train_times // 2))
    qrf = base.qrf_forest
    rows = n_train_times - window
    if qrf.min_leaf_size > rows:
        qrf = qrf.replace(min_leaf_size=rows)
    return base.replace(
        include_group_code=False,
        fold_unit="time",
        window=window,
        qrf_forest=qrf,
        seed=derive_seed(base.seed, "spci", group),
    )


def spci_per_group(train: PanelDataset, test: PanelDataset, config: BaselineConfig = BaselineConfig()) -> list[IntervalRecord]:
    """Run the LPCI engine separately on every group's own series."""
    if detect_mode(train, test) != LONGITUDINAL:
        raise ModeError("spci_per_group needs the longitudinal setting")
    base = config.lpci.replace(alpha=config.alpha, seed=config.seed)
    records: list[IntervalRecord] = []
    for g in sorted(train.groups):
        cfg = spci_config(base, g, train.n_times)
        model = fit_lpci(train.select_groups([g]), cfg)
        records.extend(run_longitudinal(model, test.select_groups([g])))
    records.sort(key=lambda r: (r.time, r.group))
    return records


def run_baseline(train: PanelDataset, test: PanelDataset, config: BaselineConfig) -> list[IntervalRecord]:
    return {"split": split_conformal, "cqr": cqr, "spci_per_group": spci_per_group}[config.method](
        train, test, config
    )
