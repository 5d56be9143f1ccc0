"""Coverage and width metrics over interval records."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from lpci.errors import LpciError


class MetricError(LpciError, ValueError):
    pass


def _nonempty(records) -> list:
    records = list(records)
    if not records:
        raise MetricError("no records to score")
    return records


def marginal_coverage(records) -> float:
    records = _nonempty(records)
    return sum(bool(r.covered) for r in records) / len(records)


def per_group_coverage(records) -> dict[str, float]:
    hits: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    for r in _nonempty(records):
        h = hits[r.group]
        h[0] += bool(r.covered)
        h[1] += 1
    return {g: h[0] / h[1] for g, h in sorted(hits.items())}


def tail_coverage(records, tail_fraction: float = 0.1) -> float:
    """Mean coverage of the ``ceil(tail_fraction * G)`` worst-covered groups (at least one)."""
    if not 0.0 < tail_fraction <= 1.0:
        raise MetricError("tail_fraction must lie in (0, 1]")
    cov = sorted(per_group_coverage(records).values())
    n = max(1, math.ceil(tail_fraction * len(cov) - 1e-9))
    return math.fsum(cov[:n]) / n


def width_stats(records) -> tuple[float, float, float]:
    """Mean, population std and coefficient of variation of ``upper - lower``."""
    w = np.array([r.upper - r.lower for r in _nonempty(records)], dtype=np.float64)
    mean, std = float(w.mean()), float(w.std())
    if not mean > 0:
        raise MetricError("width CoV is undefined when the mean width is not positive")
    return mean, std, std / mean


def filter_last_k(records, k: int = 20) -> list:
    """Keep each group's records at its ``k`` largest time indices."""
    if k < 0:
        raise MetricError("k must be >= 0")
    by_group: dict[str, list] = defaultdict(list)
    for r in records:
        by_group[r.group].append(r.time)
    cutoff = {g: sorted(ts)[-k] if 0 < k < len(ts) else (min(ts) if k else math.inf)
              for g, ts in by_group.items()}
    return [r for r in records if r.time >= cutoff[r.group]]


@dataclass(frozen=True)
class CoverageReport:
    marginal_coverage: float
    tail_coverage: float
    width_mean: float
    width_std: float
    width_cov: float
    n_records: int
    n_groups: int
    filter: str
    per_group_coverage: dict[str, float] = field(default_factory=dict)
    # widths divided by the training target scale, when known
    scaled_width_mean: float | None = None
    scaled_width_std: float | None = None

    SUMMARY_FIELDS = (
        "marginal_coverage", "tail_coverage", "width_mean", "width_std", "width_cov",
        "scaled_width_mean", "scaled_width_std",
    )

    def summary(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.SUMMARY_FIELDS if getattr(self, k) is not None}

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CoverageReport:
        return cls(**data)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, allow_nan=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, path: str | Path) -> CoverageReport:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def format_table(self) -> str:
        rows = [(k, f"{v:.4f}") for k, v in self.summary().items()]
        rows += [("n_records", str(self.n_records)), ("n_groups", str(self.n_groups)),
                 ("filter", self.filter)]
        return format_rows(["metric", "value"], rows)


def coverage_report(
    records,
    last_k: int | None = None,
    tail_fraction: float = 0.1,
    scale: float | None = None,
) -> CoverageReport:
    """Score ``records``, optionally keeping only each group's last ``last_k`` times."""
    records = list(records)
    desc = "all"
    if last_k is not None:
        records = filter_last_k(records, last_k)
        desc = f"last {last_k} times per group"
    records = _nonempty(records)
    w = np.array([r.upper - r.lower for r in records], dtype=np.float64)
    mean, std = float(w.mean()), float(w.std())
    per_group = per_group_coverage(records)
    return CoverageReport(
        marginal_coverage=marginal_coverage(records),
        tail_coverage=tail_coverage(records, tail_fraction),
        width_mean=mean,
        width_std=std,
        width_cov=std / mean if mean > 0 else float("nan"),
        n_records=len(records),
        n_groups=len(per_group),
        filter=desc,
        per_group_coverage=per_group,
        scaled_width_mean=None if scale is None else mean / scale,
        scaled_width_std=None if scale is None else std / scale,
    )


def format_rows(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    """Left-aligned plain-text table."""
    rows = [list(map(str, r)) for r in rows]
    widths = [max(len(str(h)), *(len(r[i]) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    line = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    out = [line(list(map(str, header))), line(["-" * w for w in widths])]
    out += [line(r) for r in rows]
    return "\n".join(out)
