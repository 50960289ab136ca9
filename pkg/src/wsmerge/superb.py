"""Benchmark score normalization between baseline and SOTA anchors.

Each metric is mapped linearly so the baseline scores 0 and SOTA scores 1;
metrics are averaged within a task, tasks are averaged, and the result is
multiplied by 1000. Values are not clamped.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterable

__all__ = [
    "MetricRow",
    "MetricTable",
    "normalize_metric",
    "superb_score",
    "task_breakdown",
    "merge_anchors",
]

DIRECTIONS = ("higher_better", "lower_better")


@dataclass(frozen=True)
class MetricRow:
    task: str
    metric: str
    direction: str
    value: float
    baseline: float
    sota: float

    def validate(self) -> None:
        if self.direction not in DIRECTIONS:
            raise ValueError(f"{self.task}/{self.metric}: unknown direction {self.direction!r}")
        if self.baseline == self.sota:
            raise ValueError(f"{self.task}/{self.metric}: baseline equals sota")
        if self.direction == "higher_better" and not self.sota > self.baseline:
            raise ValueError(f"{self.task}/{self.metric}: higher_better needs sota > baseline")
        if self.direction == "lower_better" and not self.sota < self.baseline:
            raise ValueError(f"{self.task}/{self.metric}: lower_better needs sota < baseline")


class MetricTable:
    """Ordered collection of :class:`MetricRow`."""

    def __init__(self, rows: Iterable[MetricRow] = ()):
        self.rows = list(rows)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    def __eq__(self, other):
        return isinstance(other, MetricTable) and self.rows == other.rows

    def __repr__(self):
        return f"MetricTable({self.rows!r})"

    def value(self, task: str, metric: str | None = None) -> float:
        for r in self.rows:
            if r.task == task and (metric is None or r.metric == metric):
                return r.value
        raise KeyError((task, metric))

    def to_list(self) -> list[dict]:
        return [asdict(r) for r in self.rows]

    @classmethod
    def from_list(cls, items: list[dict]) -> "MetricTable":
        return cls(MetricRow(**{k: d[k] for k in MetricRow.__dataclass_fields__}) for d in items)

    @classmethod
    def load(cls, path) -> "MetricTable":
        with open(path) as fh:
            return cls.from_list(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_list(), fh, indent=2)
            fh.write("\n")


def normalize_metric(row: MetricRow) -> float:
    """``(value - baseline) / (sota - baseline)``.

    The anchor ordering already encodes direction; the flag only feeds
    validation.
    """
    row.validate()
    return (row.value - row.baseline) / (row.sota - row.baseline)


def task_breakdown(table: MetricTable) -> "OrderedDict[str, float]":
    """Mean normalized value per task, in first-appearance order."""
    per_task: OrderedDict[str, list[float]] = OrderedDict()
    for row in table:
        per_task.setdefault(row.task, []).append(normalize_metric(row))
    return OrderedDict((t, sum(v) / len(v)) for t, v in per_task.items())


def superb_score(table: MetricTable) -> float:
    if not len(table):
        raise ValueError("cannot score an empty metric table")
    per_task = task_breakdown(table)
    return 1000.0 * sum(per_task.values()) / len(per_task)


def merge_anchors(metrics: list[dict], anchors: list[dict]) -> MetricTable:
    """Join measured values with anchor rows on ``(task, metric)``.

    ``metrics`` entries need ``task``, ``metric``, ``value``; ``anchors``
    entries need ``task``, ``metric``, ``direction``, ``baseline``, ``sota``.
    Either side may carry all fields, in which case the measured value wins.
    """
    index = {(a["task"], a["metric"]): a for a in anchors}
    rows = []
    for m in metrics:
        key = (m["task"], m["metric"])
        a = index.get(key, m)
        try:
            rows.append(MetricRow(m["task"], m["metric"], a["direction"], float(m["value"]),
                                  float(a["baseline"]), float(a["sota"])))
        except KeyError as exc:
            raise ValueError(f"no anchor for {key}: missing {exc}") from None
    return MetricTable(rows)
