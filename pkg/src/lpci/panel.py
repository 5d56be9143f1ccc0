"""Balanced panel datasets: loading, splitting, scaling and featurizing."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from lpci._rng import make_rng
from lpci.errors import (
    ConfigError,
    DegenerateScaleError,
    DuplicateError,
    PanelError,
    SchemaError,
    UnbalancedError,
)

DEFAULT_SCHEMA = {"group": "group", "time": "time", "y": "y"}


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """A balanced panel of ``len(groups) x len(times)`` observations.

    ``y[i, j]`` is the target of ``groups[i]`` at ``times[j]`` and
    ``exog[i, j]`` its (possibly empty) exogenous feature vector. Times are
    consecutive integers; ``time_labels`` keeps the original timestamps.
    """

    groups: tuple[str, ...]
    times: np.ndarray
    y: np.ndarray
    exog: np.ndarray | None = None
    exog_names: tuple[str, ...] = ()
    time_labels: tuple = ()

    def __post_init__(self) -> None:
        groups = tuple(str(g) for g in self.groups)
        if len(set(groups)) != len(groups):
            raise DuplicateError("group identifiers must be unique")
        times = np.asarray(self.times, dtype=np.int64)
        y = np.asarray(self.y, dtype=np.float64)
        if times.ndim != 1 or len(times) == 0:
            raise PanelError("times must be a nonempty 1-d array")
        if np.any(np.diff(times) != 1):
            raise PanelError("times must be consecutive integers")
        if y.shape != (len(groups), len(times)):
            raise PanelError(
                f"target shape {y.shape} does not match "
                f"{len(groups)} groups x {len(times)} times"
            )
        if not np.all(np.isfinite(y)):
            raise UnbalancedError("target contains missing or non-finite values")
        exog = self.exog
        if exog is None:
            exog = np.zeros((len(groups), len(times), 0))
        exog = np.asarray(exog, dtype=np.float64)
        if exog.shape[:2] != y.shape or exog.ndim != 3:
            raise PanelError("exogenous array must have shape (groups, times, d)")
        if len(self.exog_names) not in (0, exog.shape[2]):
            raise PanelError("exog_names length does not match exogenous width")
        labels = tuple(self.time_labels) or tuple(int(t) for t in times)
        if len(labels) != len(times):
            raise PanelError("time_labels length does not match times")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "exog", _frozen(exog))
        names = tuple(self.exog_names) or tuple(f"x{i}" for i in range(exog.shape[2]))
        object.__setattr__(self, "exog_names", names)
        object.__setattr__(self, "time_labels", labels)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def n_exog(self) -> int:
        return self.exog.shape[2]

    def group_index(self, group: str) -> int:
        try:
            return self.groups.index(group)
        except ValueError:
            raise KeyError(group) from None

    def target(self, group: str, time: int) -> float:
        return float(self.y[self.group_index(group), int(time) - int(self.times[0])])

    def select_groups(self, groups: Iterable[str]) -> PanelDataset:
        groups = sorted(groups)
        rows = [self.group_index(g) for g in groups]
        return PanelDataset(
            groups=tuple(groups),
            times=self.times,
            y=self.y[rows],
            exog=self.exog[rows],
            exog_names=self.exog_names,
            time_labels=self.time_labels,
        )

    def select_times(self, mask: np.ndarray) -> PanelDataset:
        mask = np.asarray(mask, dtype=bool)
        return PanelDataset(
            groups=self.groups,
            times=self.times[mask],
            y=self.y[:, mask],
            exog=self.exog[:, mask],
            exog_names=self.exog_names,
            time_labels=tuple(np.asarray(self.time_labels, dtype=object)[mask]),
        )

    def to_frame(self) -> pd.DataFrame:
        g, t = np.meshgrid(np.arange(self.n_groups), np.arange(self.n_times), indexing="ij")
        frame = pd.DataFrame(
            {
                "group": np.asarray(self.groups, dtype=object)[g.ravel()],
                "time": self.times[t.ravel()],
                "y": self.y.ravel(),
            }
        )
        for k, name in enumerate(self.exog_names):
            frame[name] = self.exog[:, :, k].ravel()
        return frame


def load_csv(path: str | Path, schema: Mapping[str, str] | None = None) -> PanelDataset:
    """Read a long-format CSV into a validated :class:`PanelDataset`.

    ``schema`` maps the roles ``group``, ``time`` and ``y`` to column names.
    Every other numeric column becomes an exogenous feature. Time values
    (integers or dates) are ranked and renumbered ``1..T``.
    """
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    frame = pd.read_csv(path)
    return panel_from_frame(frame, schema)


def panel_from_frame(frame: pd.DataFrame, schema: Mapping[str, str] | None = None) -> PanelDataset:
    schema = {**DEFAULT_SCHEMA, **(schema or {})}
    missing = [schema[k] for k in ("group", "time", "y") if schema[k] not in frame.columns]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    gcol, tcol, ycol = schema["group"], schema["time"], schema["y"]
    exog_cols = [
        c
        for c in frame.columns
        if c not in (gcol, tcol, ycol) and pd.api.types.is_numeric_dtype(frame[c])
    ]
    frame = frame.copy()
    frame[gcol] = frame[gcol].astype(str)
    if frame.duplicated([gcol, tcol]).any():
        dup = frame.loc[frame.duplicated([gcol, tcol]), [gcol, tcol]].iloc[0]
        raise DuplicateError(f"duplicate observation for group={dup[gcol]!r} time={dup[tcol]!r}")

    raw_times = frame[tcol]
    if pd.api.types.is_integer_dtype(raw_times):
        labels = np.sort(raw_times.unique())
        if np.any(np.diff(labels) != 1):
            raise PanelError("integer time index has gaps; irregular grids are not supported")
        labels = [int(v) for v in labels]
    else:
        parsed = pd.to_datetime(raw_times)
        frame[tcol] = parsed
        uniq = np.sort(parsed.unique())
        if len(uniq) > 1:
            steps = np.diff(uniq)
            if np.any(steps != steps[0]):
                raise PanelError("time stamps are not evenly spaced")
        labels = [pd.Timestamp(v).strftime("%Y-%m-%d") for v in uniq]
        uniq = list(uniq)
    groups = sorted(frame[gcol].unique())
    n_groups, n_times = len(groups), len(labels)
    if n_times < 2:
        raise PanelError("a panel needs at least two time points")
    if len(frame) != n_groups * n_times:
        raise UnbalancedError(
            f"expected {n_groups * n_times} rows for {n_groups} groups x {n_times} times, "
            f"got {len(frame)}"
        )
    gpos = {g: i for i, g in enumerate(groups)}
    if pd.api.types.is_integer_dtype(raw_times):
        tpos = {v: i for i, v in enumerate(labels)}
    else:
        tpos = {pd.Timestamp(v): i for i, v in enumerate(uniq)}
    rows = frame[gcol].map(gpos).to_numpy()
    cols = frame[tcol].map(tpos).to_numpy()
    y = np.full((n_groups, n_times), np.nan)
    y[rows, cols] = frame[ycol].to_numpy(dtype=np.float64)
    exog = np.zeros((n_groups, n_times, len(exog_cols)))
    for k, c in enumerate(exog_cols):
        exog[rows, cols, k] = frame[c].to_numpy(dtype=np.float64)
    return PanelDataset(
        groups=tuple(groups),
        times=np.arange(1, n_times + 1),
        y=y,
        exog=exog,
        exog_names=tuple(exog_cols),
        time_labels=tuple(labels),
    )


def split_cross_sectional(
    d: PanelDataset, test_fraction: float, seed: int
) -> tuple[PanelDataset, PanelDataset]:
    """Randomly assign whole groups to train or test; all times are kept."""
    if d.n_groups < 2:
        raise ConfigError("cross-sectional split needs at least two groups")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    n_test = int(round(test_fraction * d.n_groups))
    if n_test <= 0 or n_test >= d.n_groups:
        raise ConfigError(
            f"test_fraction={test_fraction} leaves an empty split for {d.n_groups} groups"
        )
    order = make_rng(seed, "split_cross_sectional").permutation(d.n_groups)
    test = {d.groups[i] for i in order[:n_test]}
    train = [g for g in d.groups if g not in test]
    return d.select_groups(train), d.select_groups(test)


def split_longitudinal(d: PanelDataset, split_time: int) -> tuple[PanelDataset, PanelDataset]:
    """Train on times ``<= split_time`` and test on the rest, for every group."""
    if not d.times[0] < split_time < d.times[-1]:
        raise ConfigError(
            f"split_time must lie strictly inside ({d.times[0]}, {d.times[-1]}), got {split_time}"
        )
    mask = d.times <= split_time
    return d.select_times(mask), d.select_times(~mask)


@dataclass(frozen=True)
class ScalerParams:
    mean: float
    std: float

    def __post_init__(self) -> None:
        if not self.std > 0:
            raise DegenerateScaleError("scale must be positive")

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def _column(d: PanelDataset, column: str) -> np.ndarray:
    if column == "y":
        return d.y
    try:
        return d.exog[:, :, d.exog_names.index(column)]
    except ValueError:
        raise SchemaError(f"unknown column {column!r}") from None


def fit_scaler(train: PanelDataset, column: str = "y") -> ScalerParams:
    """Pooled mean and population std of ``column`` over all groups and times."""
    values = _column(train, column).ravel()
    if np.unique(values).size < 2:
        raise DegenerateScaleError(f"column {column!r} is constant and cannot be standardized")
    return ScalerParams(mean=float(values.mean()), std=float(values.std()))


def fit_group_scalers(train: PanelDataset, column: str = "y") -> dict[str, ScalerParams]:
    """One scaler per group (the non-default per-group standardization)."""
    values = _column(train, column)
    out = {}
    for i, g in enumerate(train.groups):
        if np.unique(values[i]).size < 2:
            raise DegenerateScaleError(f"column {column!r} is constant for group {g!r}")
        out[g] = ScalerParams(mean=float(values[i].mean()), std=float(values[i].std()))
    return out


def apply_scaler(params: ScalerParams, x):
    return params.apply(x)


def invert_scaler(params: ScalerParams, z):
    return params.invert(z)


def scale_panel(d: PanelDataset, params: ScalerParams) -> PanelDataset:
    """Copy of ``d`` with the target standardized by ``params``."""
    return PanelDataset(
        groups=d.groups, times=d.times, y=params.apply(d.y), exog=d.exog,
        exog_names=d.exog_names, time_labels=d.time_labels,
    )


def concat_times(first: PanelDataset, second: PanelDataset) -> PanelDataset:
    """Join two panels over the same groups where ``second`` continues ``first`` in time."""
    if first.groups != second.groups:
        raise PanelError("panels must hold the same groups in the same order")
    return PanelDataset(
        groups=first.groups,
        times=np.concatenate([first.times, second.times]),
        y=np.hstack([first.y, second.y]),
        exog=np.concatenate([first.exog, second.exog], axis=1),
        exog_names=first.exog_names,
        time_labels=tuple(first.time_labels) + tuple(second.time_labels),
    )


class GroupEncoder:
    """Label encoding of group identifiers.

    Groups seen at fit time get codes ``0..n-1`` in sorted order; groups
    registered later are appended after them (again sorted within each batch).
    """

    def __init__(self, groups: Iterable[str] = ()):
        self._codes: dict[str, int] = {}
        self.extend(groups)

    def extend(self, groups: Iterable[str]) -> None:
        for g in sorted(set(map(str, groups)) - set(self._codes)):
            self._codes[g] = len(self._codes)

    def code(self, group: str) -> int:
        return self._codes[group]

    def codes(self, groups: Sequence[str]) -> np.ndarray:
        return np.array([self._codes[g] for g in groups], dtype=np.float64)

    def __contains__(self, group: str) -> bool:
        return group in self._codes

    def __len__(self) -> int:
        return len(self._codes)

    def to_dict(self) -> dict[str, int]:
        return dict(self._codes)

    @classmethod
    def from_dict(cls, codes: Mapping[str, int]) -> GroupEncoder:
        enc = cls()
        enc._codes = {str(k): int(v) for k, v in sorted(codes.items(), key=lambda kv: kv[1])}
        return enc


@dataclass(frozen=True, eq=False)
class SupervisedPanel:
    """Row-per-observation design: group code, lagged targets, exogenous, target."""

    group: np.ndarray
    group_code: np.ndarray
    lags: np.ndarray
    exog: np.ndarray
    time: np.ndarray
    target: np.ndarray
    include_code: bool = field(default=True)

    def __len__(self) -> int:
        return len(self.target)

    def features(self) -> np.ndarray:
        parts = [self.lags, self.exog]
        if self.include_code:
            parts.insert(0, self.group_code[:, None])
        return np.hstack(parts)


def make_supervised(
    d: PanelDataset,
    lags: int = 1,
    encoder: GroupEncoder | None = None,
    fill_value: float | None = None,
    include_code: bool = True,
) -> SupervisedPanel:
    """Build lagged-target rows for every group, sorted by group then time.

    Without ``fill_value`` the first ``lags`` times of each group have no
    complete lag vector and are dropped, giving ``G * (T - lags)`` rows. With
    ``fill_value`` those lags are filled and every cell yields a row.
    """
    if lags < 1:
        raise ConfigError("lags must be >= 1")
    encoder = encoder if encoder is not None else GroupEncoder(d.groups)
    encoder.extend(d.groups)
    G, T = d.y.shape
    if fill_value is None:
        if T <= lags:
            raise PanelError(f"need more than {lags} time points to build lags")
        start = lags
        padded = d.y
        offset = 0
    else:
        start = 0
        padded = np.hstack([np.full((G, lags), float(fill_value)), d.y])
        offset = lags
    n_t = T - start
    lag_cols = [padded[:, offset + start - k : offset + T - k] for k in range(1, lags + 1)]
    lag_mat = np.stack(lag_cols, axis=-1).reshape(G * n_t, lags)
    codes = np.repeat(encoder.codes(d.groups), n_t)
    return SupervisedPanel(
        group=np.repeat(np.asarray(d.groups, dtype=object), n_t),
        group_code=codes,
        lags=lag_mat,
        exog=d.exog[:, start:, :].reshape(G * n_t, d.n_exog),
        time=np.tile(d.times[start:], G),
        target=d.y[:, start:].reshape(-1),
        include_code=include_code,
    )
