"""Residual histories, exponentially weighted means and the QRF design matrix."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from lpci.errors import ConfigError, StateError
from lpci.panel import GroupEncoder


def compute_residuals(truth, preds) -> np.ndarray:
    """Signed residuals ``truth - preds``; over-prediction is negative."""
    truth = np.asarray(truth, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    if truth.shape != preds.shape:
        raise ValueError(f"shape mismatch: truth {truth.shape} vs predictions {preds.shape}")
    return truth - preds


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")


def ew_mean_series(residuals, gamma: float) -> np.ndarray:
    """``out[k-1] = k**-1 * sum_{i<=k} gamma**(k-i) * residuals[i-1]``.

    Evaluated with the running sum ``s_k = gamma * s_{k-1} + e_k``, the same
    recursion :class:`ResidualState` uses when appending one value at a time.
    """
    _check_gamma(gamma)
    r = np.asarray(residuals, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("residual series must be a nonempty 1-d sequence")
    out = np.empty_like(r)
    s = 0.0
    for k, e in enumerate(r.tolist(), start=1):
        s = gamma * s + e
        out[k - 1] = s / k
    return out


class ResidualState:
    """Per-group residual histories and the windowed training data built from them.

    For a group with history ``e_1..e_k`` and EW means ``m_1..m_k``, one
    supervised row exists per target index ``j > w``: features
    ``(m_{j-1}, ..., m_{j-w}[, code])`` and target ``e_j``.
    """

    def __init__(
        self,
        window: int,
        gamma: float,
        encoder: GroupEncoder | None = None,
        include_code: bool = True,
    ):
        if window < 1:
            raise ConfigError("window must be >= 1")
        _check_gamma(gamma)
        self.window = int(window)
        self.gamma = float(gamma)
        self.include_code = include_code
        self.encoder = encoder if encoder is not None else GroupEncoder()
        self._raw: dict[str, list[float]] = {}
        self._ew: dict[str, list[float]] = {}
        self._sum: dict[str, float] = {}
        self._n_dummy: dict[str, int] = {}

    # -- bookkeeping -----------------------------------------------------

    @property
    def n_features(self) -> int:
        return self.window + int(self.include_code)

    @property
    def groups(self) -> list[str]:
        return sorted(self._raw, key=self.encoder.code)

    def register(self, group: str) -> None:
        if group not in self._raw:
            self.encoder.extend([group])
            self._raw[group] = []
            self._ew[group] = []
            self._sum[group] = 0.0
            self._n_dummy[group] = 0

    def history_length(self, group: str) -> int:
        return len(self._raw[group])

    def n_dummy(self, group: str) -> int:
        return self._n_dummy[group]

    def residuals(self, group: str) -> np.ndarray:
        return np.array(self._raw[group])

    def ew_means(self, group: str) -> np.ndarray:
        return np.array(self._ew[group])

    def n_rows(self) -> int:
        return sum(max(0, len(r) - self.window) for r in self._raw.values())

    # -- updates ---------------------------------------------------------

    def append_observation(self, group: str, residual: float) -> None:
        self.register(group)
        k = len(self._raw[group]) + 1
        s = self.gamma * self._sum[group] + float(residual)
        self._sum[group] = s
        self._raw[group].append(float(residual))
        self._ew[group].append(s / k)

    def extend(self, group: str, residuals: Iterable[float]) -> None:
        for r in residuals:
            self.append_observation(group, r)

    def seed_dummy_residuals(self, group: str, count: int) -> None:
        """Give a group with no history ``count`` zero residuals."""
        self.register(group)
        if self._raw[group]:
            raise StateError(f"group {group!r} already has residual history")
        self.extend(group, [0.0] * int(count))
        self._n_dummy[group] = int(count)

    # -- design matrices -------------------------------------------------

    def feature_window(self, group: str) -> np.ndarray:
        """Features for predicting the group's next residual."""
        ew = self._ew.get(group, [])
        w = self.window
        if len(ew) < w:
            raise StateError(
                f"group {group!r} has {len(ew)} residuals; {w} are needed for a window"
            )
        feats = ew[::-1][:w]
        if self.include_code:
            feats = feats + [float(self.encoder.code(group))]
        return np.array(feats)

    def group_rows(self, group: str) -> tuple[np.ndarray, np.ndarray]:
        w = self.window
        raw = np.array(self._raw[group])
        ew = np.array(self._ew[group])
        k = len(raw)
        if k <= w:
            return np.empty((0, self.n_features)), np.empty(0)
        lags = sliding_window_view(ew, w)[: k - w, ::-1]
        if self.include_code:
            code = np.full((k - w, 1), float(self.encoder.code(group)))
            lags = np.hstack([lags, code])
        return np.ascontiguousarray(lags), raw[w:]

    def build_training_matrix(
        self, groups: Iterable[str] | None = None, strict: bool = True
    ) -> tuple[np.ndarray, np.ndarray]:
        """Stack every group's rows, groups in code order and time ascending.

        With ``strict`` each requested group must have more than ``window``
        residuals; otherwise short groups simply contribute no rows.
        """
        groups = self.groups if groups is None else sorted(groups, key=self.encoder.code)
        Xs, ys = [], []
        for g in groups:
            if g not in self._raw:
                raise KeyError(g)
            if strict and len(self._raw[g]) <= self.window:
                raise ValueError(
                    f"group {g!r} has {len(self._raw[g])} residuals; "
                    f"window {self.window} needs at least {self.window + 1}"
                )
            X, y = self.group_rows(g)
            Xs.append(X)
            ys.append(y)
        if not Xs:
            return np.empty((0, self.n_features)), np.empty(0)
        return np.vstack(Xs), np.concatenate(ys)

    # -- checkpoints -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "gamma": self.gamma,
            "include_code": self.include_code,
            "codes": self.encoder.to_dict(),
            "groups": {
                g: {"residuals": list(self._raw[g]), "n_dummy": self._n_dummy[g]}
                for g in self.groups
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> ResidualState:
        state = cls(
            window=data["window"],
            gamma=data["gamma"],
            encoder=GroupEncoder.from_dict(data["codes"]),
            include_code=data.get("include_code", True),
        )
        for g, entry in data["groups"].items():
            state.register(g)
            state.extend(g, entry["residuals"])
            state._n_dummy[g] = int(entry.get("n_dummy", 0))
        return state

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> ResidualState:
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_training_matrix(state: ResidualState, groups: Iterable[str] | None = None):
    return state.build_training_matrix(groups, strict=True)


def append_observation(state: ResidualState, group: str, residual: float) -> ResidualState:
    state.append_observation(group, residual)
    return state


def seed_dummy_residuals(state: ResidualState, group: str, count: int) -> ResidualState:
    state.seed_dummy_residuals(group, count)
    return state
