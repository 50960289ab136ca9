"""Stable fine-tuning freeze schedules.

A schedule is plain data: for each contiguous, 1-based, inclusive step range
it lists the parameter groups that may be updated. ``downsampling`` is never
trainable; the first ``floor(beta / 100 * S)`` steps train only ``head``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

__all__ = ["Phase", "FreezeSchedule", "make_schedule", "trainable_at"]

FROZEN_GROUP = "downsampling"
HEAD_GROUP = "head"


@dataclass(frozen=True)
class Phase:
    start: int
    stop: int  # inclusive
    trainable: frozenset

    def to_dict(self) -> dict:
        return {"from": self.start, "to": self.stop, "trainable": sorted(self.trainable)}


@dataclass(frozen=True)
class FreezeSchedule:
    total_steps: int
    beta_percent: float
    phases: tuple

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        expected = 1
        for ph in self.phases:
            if ph.start != expected or ph.stop < ph.start:
                raise ValueError(f"phases do not partition [1, {self.total_steps}]: {ph}")
            if FROZEN_GROUP in ph.trainable:
                raise ValueError("downsampling may never be trainable")
            expected = ph.stop + 1
        if expected != self.total_steps + 1:
            raise ValueError(f"phases do not cover [1, {self.total_steps}]")

    @property
    def warmup_steps(self) -> int:
        return warmup_boundary(self.total_steps, self.beta_percent)

    def to_dict(self) -> dict:
        return {
            "total_steps": self.total_steps,
            "beta_percent": self.beta_percent,
            "phases": [p.to_dict() for p in self.phases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FreezeSchedule":
        phases = tuple(
            Phase(int(p["from"]), int(p["to"]), frozenset(p["trainable"])) for p in d["phases"]
        )
        return cls(int(d["total_steps"]), float(d["beta_percent"]), phases)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "FreezeSchedule":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def warmup_boundary(total_steps: int, beta_percent: float) -> int:
    # beta * S / 100 keeps integers exact where beta/100 would not (0.07 * 100)
    return min(total_steps, math.floor(beta_percent * total_steps / 100))


def make_schedule(manifest: dict, total_steps: int, beta_percent: float = 10.0) -> FreezeSchedule:
    """Build the two-phase freeze schedule for ``manifest``'s groups.

    Phase 1 (steps ``1..floor(beta/100*S)``) trains ``{"head"}``. Phase 2
    trains every group except ``downsampling``. Empty phases are dropped, so
    ``beta=0`` and ``beta=100`` give a single phase.
    """
    if int(total_steps) != total_steps or total_steps < 1:
        raise ValueError(f"total_steps must be a positive integer, got {total_steps}")
    beta_percent = float(beta_percent)
    if not (0.0 <= beta_percent <= 100.0):
        raise ValueError(f"beta_percent must lie in [0, 100], got {beta_percent}")
    if HEAD_GROUP not in manifest:
        raise ValueError("manifest has no 'head' group")
    total_steps = int(total_steps)
    boundary = warmup_boundary(total_steps, beta_percent)
    full = frozenset(g for g in manifest if g != FROZEN_GROUP)
    phases = []
    if boundary >= 1:
        phases.append(Phase(1, boundary, frozenset({HEAD_GROUP})))
    if boundary < total_steps:
        phases.append(Phase(boundary + 1, total_steps, full))
    return FreezeSchedule(total_steps, beta_percent, tuple(phases))


def trainable_at(schedule: FreezeSchedule, step: int) -> frozenset:
    if not (1 <= step <= schedule.total_steps):
        raise ValueError(f"step {step} outside [1, {schedule.total_steps}]")
    for ph in schedule.phases:
        if ph.start <= step <= ph.stop:
            return ph.trainable
    raise AssertionError("unreachable: schedule phases partition the step range")
