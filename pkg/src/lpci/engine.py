"""LPCI engine: ensemble point predictor, QRF-based intervals and the online loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from lpci._rng import derive_seed, make_rng
from lpci.errors import ConfigError, StateError
from lpci.forest import ForestParams, QuantileForest
from lpci.panel import (
    GroupEncoder,
    PanelDataset,
    ScalerParams,
    fit_group_scalers,
    fit_scaler,
    make_supervised,
    scale_panel,
)
from lpci.residuals import ResidualState

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LpciConfig:
    alpha: float = 0.1
    window: int = 20
    gamma: float = 0.9
    beta_grid_size: int = 20
    retrain_every: int = 1
    n_folds: int = 5
    fold_unit: str = "group"
    include_group_code: bool = True
    lags: int = 1
    scaling: str = "global"
    train_residuals: str = "out_of_fold"
    point_forest: ForestParams = field(default_factory=ForestParams)
    qrf_forest: ForestParams = field(default_factory=ForestParams)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.beta_grid_size < 2:
            raise ConfigError("beta_grid_size must be >= 2")
        if self.retrain_every < 1:
            raise ConfigError("retrain_every must be >= 1")
        if self.n_folds < 2:
            raise ConfigError("n_folds must be >= 2")
        if self.fold_unit not in ("group", "time"):
            raise ConfigError("fold_unit must be 'group' or 'time'")
        if self.lags < 1:
            raise ConfigError("lags must be >= 1")
        if self.train_residuals not in ("out_of_fold", "in_sample"):
            raise ConfigError("train_residuals must be 'out_of_fold' or 'in_sample'")
        if self.scaling not in ("global", "group"):
            raise ConfigError("scaling must be 'global' or 'group'")

    def replace(self, **changes: Any) -> LpciConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["point_forest"] = self.point_forest.to_dict()
        out["qrf_forest"] = self.qrf_forest.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> LpciConfig:
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown lpci option(s): {sorted(unknown)}")
        for key in ("point_forest", "qrf_forest"):
            if key in data and not isinstance(data[key], ForestParams):
                data[key] = ForestParams.from_dict(data[key])
        return cls(**data)


@dataclass(frozen=True)
class IntervalRecord:
    group: str
    time: int
    y_true: float
    y_pred: float
    lower: float
    upper: float
    beta: float
    covered: bool

    @property
    def width(self) -> float:
        return self.upper - self.lower


def optimize_beta(quantile_fn: Callable[[float], float], alpha: float, grid_size: int) -> float:
    """Grid value ``p`` in ``[0, alpha]`` minimising ``Q(1 - alpha + p) - Q(p)``.

    Ties go to the smallest ``p``.
    """
    grid = np.linspace(0.0, alpha, grid_size)
    widths = [quantile_fn(1.0 - alpha + p) - quantile_fn(p) for p in grid]
    return float(grid[int(np.argmin(widths))])


def _beta_levels(alpha: float, grid_size: int) -> tuple[np.ndarray, np.ndarray]:
    grid = np.linspace(0.0, alpha, grid_size)
    return grid, 1.0 - alpha + grid


class PointPredictor:
    """Mean of ``n_folds`` forests, each fit with one fold held out.

    Folds hold whole groups (``fold_unit="group"``) or contiguous time blocks
    (``fold_unit="time"``, used for single-series runs).
    """

    def __init__(self, config: LpciConfig):
        self.config = config

    def fit(self, X: np.ndarray, y: np.ndarray, fold_of_row: np.ndarray) -> PointPredictor:
        cfg = self.config
        self.forests = []
        for k in range(cfg.n_folds):
            held = fold_of_row == k
            params = cfg.point_forest.replace(
                seed=derive_seed(cfg.seed, "point", k, cfg.point_forest.seed)
            )
            self.forests.append(QuantileForest(params).fit(X[~held], y[~held]))
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        acc = np.zeros(len(X))
        for forest in self.forests:
            acc += forest.predict(X)
        return acc / len(self.forests)


def _fold_assignment(sup, groups: Sequence[str], config: LpciConfig) -> np.ndarray:
    rng = make_rng(config.seed, "folds")
    if config.fold_unit == "group":
        if len(groups) < config.n_folds:
            raise ConfigError(
                f"{len(groups)} groups cannot be split into {config.n_folds} group-disjoint folds"
            )
        perm = rng.permutation(len(groups))
        fold_of_group = {}
        for k, chunk in enumerate(np.array_split(perm, config.n_folds)):
            for i in chunk:
                fold_of_group[groups[i]] = k
        return np.array([fold_of_group[g] for g in sup.group])
    times = np.unique(sup.time)
    if len(times) < config.n_folds:
        raise ConfigError(f"{len(times)} time points cannot form {config.n_folds} folds")
    fold_of_time = {}
    for k, chunk in enumerate(np.array_split(times, config.n_folds)):
        for t in chunk:
            fold_of_time[int(t)] = k
    return np.array([fold_of_time[int(t)] for t in sup.time])


class LpciModel:
    """Fitted LPCI state. Created by :func:`fit`; advanced by :meth:`step`."""

    def __init__(self, config: LpciConfig):
        self.config = config
        self.n_steps = 0
        self.n_qrf_fits = 0
        self.active_groups: list[str] = []

    # -- training ---------------------------------------------------------

    def fit(self, train: PanelDataset) -> LpciModel:
        cfg = self.config
        if train.n_times <= cfg.window:
            raise ConfigError(
                f"training panel has T={train.n_times} <= window={cfg.window}; no QRF rows"
            )
        if train.n_times <= cfg.lags:
            raise ConfigError("training panel is shorter than the lag order")
        self.scaler: ScalerParams = fit_scaler(train, "y")
        self.group_scalers: dict[str, ScalerParams] = (
            fit_group_scalers(train, "y") if cfg.scaling == "group" else {}
        )
        self.encoder = GroupEncoder(train.groups)
        self.train_groups = list(train.groups)
        self.train_times = train.times.copy()
        self.n_exog = train.n_exog

        if self.group_scalers:
            loc, scale = self._loc_scale(train.groups)
            scaled = PanelDataset(
                groups=train.groups, times=train.times,
                y=(train.y - loc[:, None]) / scale[:, None], exog=train.exog,
                exog_names=train.exog_names, time_labels=train.time_labels,
            )
        else:
            scaled = scale_panel(train, self.scaler)
        ys = scaled.y
        sup = make_supervised(
            scaled, cfg.lags, self.encoder, fill_value=0.0,
            include_code=cfg.include_group_code,
        )
        X = sup.features()
        has_lags = sup.time >= train.times[0] + cfg.lags
        folds = _fold_assignment(sup, train.groups, cfg)
        self.point = PointPredictor(cfg)
        self.point.fit(X[has_lags], sup.target[has_lags], folds[has_lags])
        if cfg.train_residuals == "in_sample":
            fitted = self.point.predict(X)
        else:
            fitted = np.empty(len(sup))
            for k, forest in enumerate(self.point.forests):
                rows = folds == k
                if rows.any():
                    fitted[rows] = forest.predict(X[rows])
        resid = (sup.target - fitted).reshape(train.n_groups, train.n_times)

        self.state = ResidualState(cfg.window, cfg.gamma, self.encoder, cfg.include_group_code)
        self._last: dict[str, list[float]] = {}
        for i, g in enumerate(train.groups):
            self.state.register(g)
            self.state.extend(g, resid[i])
            self._last[g] = list(ys[i, ::-1][: cfg.lags])
        self.retrain()
        return self

    def _loc_scale(self, groups: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        """Per-group standardization offsets and scales."""
        if not self.group_scalers:
            n = len(groups)
            return np.full(n, self.scaler.mean), np.full(n, self.scaler.std)
        try:
            params = [self.group_scalers[g] for g in groups]
        except KeyError as exc:
            raise StateError(f"no per-group scaler for group {exc.args[0]!r}") from None
        return np.array([p.mean for p in params]), np.array([p.std for p in params])

    def _invert(self, groups: Sequence[str], z) -> np.ndarray:
        loc, scale = self._loc_scale(groups)
        return np.asarray(z, dtype=np.float64) * scale + loc

    def retrain(self) -> None:
        cfg = self.config
        X, y = self.state.build_training_matrix(strict=False)
        params = cfg.qrf_forest.replace(seed=derive_seed(cfg.seed, "qrf", cfg.qrf_forest.seed))
        self.qrf = QuantileForest(params).fit(X, y)
        self.n_qrf_fits += 1

    # -- prediction -------------------------------------------------------

    def _point_features(self, groups: Sequence[str], exog: np.ndarray | None) -> np.ndarray:
        cfg = self.config
        lags = np.zeros((len(groups), cfg.lags))
        for i, g in enumerate(groups):
            last = self._last.get(g, [])
            lags[i, : len(last)] = last[: cfg.lags]
        parts = [lags]
        if cfg.include_group_code:
            parts.insert(0, self.encoder.codes(groups)[:, None])
        if self.n_exog:
            if exog is None:
                raise ValueError("exogenous features are required for this model")
            parts.append(np.asarray(exog, dtype=np.float64).reshape(len(groups), self.n_exog))
        return np.hstack(parts)

    def predict_intervals(
        self,
        groups: Sequence[str],
        exog: np.ndarray | None = None,
        alpha: float | None = None,
        beta: float | None = None,
    ) -> dict[str, np.ndarray]:
        """Intervals for the next time step of ``groups``, in standardized units.

        ``beta`` fixes the lower level instead of searching the grid.
        """
        cfg = self.config
        alpha = cfg.alpha if alpha is None else alpha
        groups = list(groups)
        for g in groups:
            if g not in self.state.encoder or self.state.history_length(g) < cfg.window:
                raise StateError(f"group {g!r} lacks a full residual window")
        y_hat = self.point.predict(self._point_features(groups, exog))
        Xq = np.vstack([self.state.feature_window(g) for g in groups])
        if beta is None:
            lo_levels, hi_levels = _beta_levels(alpha, cfg.beta_grid_size)
        else:
            lo_levels, hi_levels = np.array([beta]), np.array([1.0 - alpha + beta])
        Q = self.qrf.quantiles(Xq, np.concatenate([lo_levels, hi_levels]))
        q_lo, q_hi = Q[:, : len(lo_levels)], Q[:, len(lo_levels):]
        pick = np.argmin(q_hi - q_lo, axis=1)
        rows = np.arange(len(groups))
        return {
            "y_pred": y_hat,
            "lower": y_hat + q_lo[rows, pick],
            "upper": y_hat + q_hi[rows, pick],
            "beta": lo_levels[pick],
        }

    def predict_interval(self, group: str, time: int, exog=None) -> IntervalRecord:
        """Interval for one group (truth fields are NaN / False)."""
        out = self.predict_intervals([group], None if exog is None else np.atleast_2d(exog))
        inv = lambda z: self._invert([group], z)[0]
        return IntervalRecord(
            group=group, time=int(time), y_true=float("nan"),
            y_pred=float(inv(out["y_pred"][0])), lower=float(inv(out["lower"][0])),
            upper=float(inv(out["upper"][0])), beta=float(out["beta"][0]), covered=False,
        )

    # -- online loop ------------------------------------------------------

    def step(
        self,
        time: int,
        observations: Mapping[str, float],
        exog: Mapping[str, Sequence[float]] | None = None,
    ) -> list[IntervalRecord]:
        """Predict all active groups at ``time``, reveal truths, update, maybe retrain."""
        groups = self.active_groups
        missing = [g for g in groups if g not in observations]
        if missing:
            raise ValueError(f"missing observation(s) at time {time} for {missing[:5]}")
        ex = None
        if self.n_exog:
            if exog is None:
                raise ValueError("exogenous features are required for this model")
            ex = np.array([exog[g] for g in groups], dtype=np.float64)
        out = self.predict_intervals(groups, ex)
        loc, scale = self._loc_scale(groups)
        y_pred, lower, upper = (out[k] * scale + loc for k in ("y_pred", "lower", "upper"))
        records = []
        for i, g in enumerate(groups):
            y = float(observations[g])
            y_s = (y - loc[i]) / scale[i]
            self.state.append_observation(g, y_s - out["y_pred"][i])
            self._last[g] = ([y_s] + self._last.get(g, []))[: self.config.lags]
            records.append(
                IntervalRecord(
                    group=g, time=int(time), y_true=y, y_pred=float(y_pred[i]),
                    lower=float(lower[i]), upper=float(upper[i]), beta=float(out["beta"][i]),
                    covered=bool(lower[i] <= y <= upper[i]),
                )
            )
        self.n_steps += 1
        if self.n_steps % self.config.retrain_every == 0:
            self.retrain()
        return records

    # -- checkpoint -------------------------------------------------------

    def checkpoint(self) -> dict[str, Any]:
        return {
            "config": self.config.to_dict(),
            "scaler": {"mean": self.scaler.mean, "std": self.scaler.std},
            "group_scalers": {g: [p.mean, p.std] for g, p in sorted(self.group_scalers.items())},
            "n_steps": self.n_steps,
            "active_groups": list(self.active_groups),
            "last_lags": {g: list(v) for g, v in sorted(self._last.items())},
            "residual_state": self.state.to_dict(),
        }


def fit(train: PanelDataset, config: LpciConfig = LpciConfig()) -> LpciModel:
    return LpciModel(config).fit(train)


def predict_interval(model: LpciModel, group: str, time: int, exog=None) -> IntervalRecord:
    return model.predict_interval(group, time, exog)


def step(model: LpciModel, time: int, observations: Mapping[str, float], exog=None) -> list[IntervalRecord]:
    return model.step(time, observations, exog)


def _run(model: LpciModel, test: PanelDataset) -> list[IntervalRecord]:
    records: list[IntervalRecord] = []
    rows = [test.group_index(g) for g in model.active_groups]
    for j, t in enumerate(test.times):
        obs = {g: float(test.y[r, j]) for g, r in zip(model.active_groups, rows)}
        exog = {g: test.exog[r, j] for g, r in zip(model.active_groups, rows)} if test.n_exog else None
        records.extend(model.step(int(t), obs, exog))
    return records


def run_cross_sectional(model: LpciModel, test: PanelDataset) -> list[IntervalRecord]:
    """Score unseen groups over the training time range.

    Each test group starts from ``window`` zero residuals. The model is
    advanced in place.
    """
    overlap = set(test.groups) & set(model.train_groups)
    if overlap:
        raise ValueError(f"test groups overlap training groups: {sorted(overlap)[:5]}")
    if not np.array_equal(test.times, model.train_times):
        raise ValueError("cross-sectional test panel must cover the training time range")
    if model.group_scalers:
        raise ConfigError("per-group scaling cannot score groups unseen in training")
    model.encoder.extend(test.groups)
    for g in test.groups:
        model.state.seed_dummy_residuals(g, model.config.window)
        model._last[g] = []
    model.active_groups = list(test.groups)
    return _run(model, test)


def run_longitudinal(model: LpciModel, test: PanelDataset) -> list[IntervalRecord]:
    """Score the training groups at future times; history carries over."""
    if set(test.groups) != set(model.train_groups):
        raise ValueError("longitudinal test panel must contain exactly the training groups")
    if test.times[0] <= model.train_times[-1]:
        raise ValueError("longitudinal test times must follow the training times")
    model.active_groups = list(test.groups)
    return _run(model, test)


RECORD_COLUMNS = ("group", "time", "y_true", "y_pred", "lower", "upper", "beta", "covered")


def write_records(path, records: Sequence[IntervalRecord]) -> None:
    """CSV with one row per record; floats use ``repr`` so files round-trip exactly."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(RECORD_COLUMNS)
        for r in records:
            out.writerow([
                r.group, r.time, repr(r.y_true), repr(r.y_pred), repr(r.lower),
                repr(r.upper), repr(r.beta), int(r.covered),
            ])


def read_records(path) -> list[IntervalRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        IntervalRecord(
            group=row["group"], time=int(row["time"]), y_true=float(row["y_true"]),
            y_pred=float(row["y_pred"]), lower=float(row["lower"]), upper=float(row["upper"]),
            beta=float(row["beta"]), covered=row["covered"] in ("1", "True", "true"),
        )
        for row in rows
    ]
