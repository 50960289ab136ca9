"""Weight-space combination of checkpoints.

All operators take the pre-trained checkpoint first and return a new
checkpoint whose schema matches the inputs. Manifest and meta come from the
base; a short provenance entry is appended to ``meta["provenance"]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor_store import Checkpoint, CheckpointError, check_compat

__all__ = [
    "DEFAULT_ALPHA",
    "DEFAULT_TRIM",
    "MergeRecipe",
    "task_vector",
    "interpolate",
    "linear_merge",
    "ties_merge",
    "sequential_step",
    "sequential_chain",
    "apply_recipe",
]

DEFAULT_ALPHA = 0.25
DEFAULT_TRIM = 0.2


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


def _require_compat(base: Checkpoint, others: Sequence[Checkpoint]) -> None:
    for i, other in enumerate(others):
        rep = check_compat(base, other)
        # dtype differences are allowed and promote to f64
        if rep.missing_in_a or rep.missing_in_b or rep.shape_mismatch:
            raise CheckpointError(
                f"input {i + 1} is not merge-compatible with the base: {rep.entries}"
            )


def _out_dtype(arrays) -> np.dtype:
    dtypes = {a.dtype for a in arrays}
    return dtypes.pop() if len(dtypes) == 1 else np.dtype("float64")


def _with_provenance(base: Checkpoint, tensors: dict, note: str) -> Checkpoint:
    meta = dict(base.meta)
    prev = meta.get("provenance")
    meta["provenance"] = f"{prev};{note}" if prev else note
    return Checkpoint(
        {k: tensors[k] for k in base.tensors},
        {g: list(m) for g, m in base.manifest.items()},
        meta,
    )


def task_vector(theta0: Checkpoint, theta_ft: Checkpoint) -> dict[str, np.ndarray]:
    """tau = theta_ft - theta0, per tensor, in f64."""
    _require_compat(theta0, [theta_ft])
    return {
        k: theta_ft.tensors[k].astype(np.float64) - theta0.tensors[k].astype(np.float64)
        for k in theta0.tensors
    }


def _blend(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    out_dtype = _out_dtype([a, b])
    if alpha == 0.0:
        return a.astype(out_dtype, copy=True)
    if alpha == 1.0:
        return b.astype(out_dtype, copy=True)
    a64 = a.astype(np.float64)
    out = a64 + alpha * (b.astype(np.float64) - a64)
    return out.astype(out_dtype)


def interpolate(theta0: Checkpoint, theta_ft: Checkpoint, alpha: float = DEFAULT_ALPHA) -> Checkpoint:
    """Return ``(1 - alpha) * theta0 + alpha * theta_ft`` tensor by tensor.

    Evaluated as ``theta0 + alpha * (theta_ft - theta0)`` so that
    ``interpolate(a, a, alpha) == a`` exactly; the endpoints ``alpha in {0, 1}``
    return bitwise copies of the respective input.
    """
    alpha = _check_alpha(alpha)
    _require_compat(theta0, [theta_ft])
    out = {k: _blend(v, theta_ft.tensors[k], alpha) for k, v in theta0.tensors.items()}
    return _with_provenance(theta0, out, f"interpolate(alpha={alpha!r})")


def _fsum_stack(arrays: Sequence[np.ndarray]) -> np.ndarray:
    # exactly rounded elementwise sum, independent of input order
    stacked = np.stack([a.astype(np.float64) for a in arrays], axis=-1)
    flat = stacked.reshape(-1, len(arrays))
    out = np.fromiter((math.fsum(row) for row in flat), dtype=np.float64, count=flat.shape[0])
    return out.reshape(arrays[0].shape)


def linear_merge(
    theta0: Checkpoint, models: Sequence[Checkpoint], alpha: float = DEFAULT_ALPHA
) -> Checkpoint:
    """Blend theta0 with the plain average of ``models``.

    The average uses an exactly rounded sum, so the result does not depend on
    the order of ``models``. With one model this is :func:`interpolate`.
    """
    alpha = _check_alpha(alpha)
    if not models:
        raise ValueError("linear_merge needs at least one fine-tuned model")
    _require_compat(theta0, models)
    k = len(models)
    out = {}
    for name, base in theta0.tensors.items():
        members = [m.tensors[name] for m in models]
        dtype = _out_dtype([base, *members])
        mean = _fsum_stack(members) / k
        out[name] = _blend(base.astype(np.float64), mean, alpha).astype(dtype)
    return _with_provenance(theta0, out, f"linear(alpha={alpha!r},k={k})")


def _keep_count(n: int, fraction: float) -> int:
    # guard against products like 0.3 * 10 = 3.0000000000000004
    return min(n, max(1, math.ceil(fraction * n - 1e-9))) if n else 0


def _trim_mask(flat_abs: np.ndarray, fraction: float) -> np.ndarray:
    """Mask keeping entries whose magnitude reaches the top-``fraction`` cutoff.

    Entries tied with the cutoff value are all kept.
    """
    n = flat_abs.size
    keep = _keep_count(n, fraction)
    if keep == 0:
        return np.zeros(0, dtype=bool)
    if keep >= n:
        return np.ones(n, dtype=bool)
    cutoff = np.partition(flat_abs, n - keep)[n - keep]
    return flat_abs >= cutoff


def ties_merge(
    theta0: Checkpoint,
    models: Sequence[Checkpoint],
    alpha: float = DEFAULT_ALPHA,
    trim_fraction: float = DEFAULT_TRIM,
    per_tensor: bool = False,
) -> Checkpoint:
    """TIES merge of several fine-tuned checkpoints, blended into theta0.

    For each task vector ``tau_i = models[i] - theta0``:

    1. trim: keep the ``trim_fraction`` largest-magnitude entries (one cutoff
       over the whole model, or one per tensor with ``per_tensor=True``);
    2. elect: consensus sign per scalar is ``sign(sum_i trimmed tau_i)``;
    3. disjoint mean: average the kept entries whose sign equals the
       consensus; scalars with no agreeing entry (or a zero sum) get 0.

    Returns ``(1 - alpha) * theta0 + alpha * (theta0 + merged_tau)``, which is
    evaluated as ``theta0 + alpha * merged_tau``.
    """
    alpha = _check_alpha(alpha)
    trim_fraction = float(trim_fraction)
    if not (0.0 < trim_fraction <= 1.0):
        raise ValueError(f"trim_fraction must lie in (0, 1], got {trim_fraction}")
    if not models:
        raise ValueError("ties_merge needs at least one fine-tuned model")
    _require_compat(theta0, models)
    names = list(theta0.tensors)
    sizes = [theta0.tensors[n].size for n in names]
    splits = np.cumsum(sizes)[:-1]

    trimmed = []
    for m in models:
        taus = [m.tensors[n].astype(np.float64) - theta0.tensors[n].astype(np.float64)
                for n in names]
        if per_tensor:
            parts = [t.ravel() * _trim_mask(np.abs(t.ravel()), trim_fraction) for t in taus]
            flat = np.concatenate(parts) if parts else np.zeros(0)
        else:
            flat = np.concatenate([t.ravel() for t in taus]) if taus else np.zeros(0)
            flat = np.where(_trim_mask(np.abs(flat), trim_fraction), flat, 0.0)
        trimmed.append(flat)

    total = np.zeros_like(trimmed[0]) if trimmed else np.zeros(0)
    for t in trimmed:
        total = total + t
    elected = np.sign(total)
    acc = np.zeros_like(total)
    count = np.zeros_like(total)
    for t in trimmed:
        agree = (np.sign(t) == elected) & (elected != 0)
        acc = acc + np.where(agree, t, 0.0)
        count = count + agree
    merged = np.divide(acc, count, out=np.zeros_like(acc), where=count > 0)

    out = {}
    for name, chunk in zip(names, np.split(merged, splits) if names else []):
        base = theta0.tensors[name]
        dtype = _out_dtype([base, *(m.tensors[name] for m in models)])
        delta = chunk.reshape(base.shape)
        out[name] = (base.astype(np.float64) + alpha * delta).astype(dtype)
    note = (
        f"ties(alpha={alpha!r},k={len(models)},trim={trim_fraction!r}"
        f"{',per_tensor' if per_tensor else ''})"
    )
    return _with_provenance(theta0, out, note)


def sequential_step(current: Checkpoint, fine_tuned: Checkpoint, alpha: float = DEFAULT_ALPHA) -> Checkpoint:
    """One stage of sequential fine-tuning: interpolate the previous stage's
    output with the model fine-tuned from it."""
    alpha = _check_alpha(alpha)
    _require_compat(current, [fine_tuned])
    out = {k: _blend(v, fine_tuned.tensors[k], alpha) for k, v in current.tensors.items()}
    return _with_provenance(current, out, f"sequential(alpha={alpha!r})")


def sequential_chain(
    theta0: Checkpoint, fine_tuned: Sequence[Checkpoint], alpha: float = DEFAULT_ALPHA
) -> Checkpoint:
    """Fold :func:`sequential_step` over precomputed fine-tuned checkpoints."""
    current = theta0
    for ft in fine_tuned:
        current = sequential_step(current, ft, alpha)
    return current


@dataclass
class MergeRecipe:
    method: str
    inputs: list[str]
    alpha: float = DEFAULT_ALPHA
    trim_fraction: float = DEFAULT_TRIM
    per_tensor: bool = False
    output: str | None = None
    extra: dict = field(default_factory=dict)

    METHODS = ("interpolate", "linear", "ties", "sequential")

    def __post_init__(self):
        if self.method not in self.METHODS:
            raise ValueError(f"unknown merge method {self.method!r}")
        _check_alpha(self.alpha)
        if self.method == "interpolate" and len(self.inputs) != 2:
            raise ValueError("interpolate needs exactly 2 inputs")
        if len(self.inputs) < 2:
            raise ValueError(f"{self.method} needs theta0 plus at least one model")
        if self.method == "ties" and not (0.0 < self.trim_fraction <= 1.0):
            raise ValueError("trim_fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "MergeRecipe":
        known = {"method", "inputs", "alpha", "trim_fraction", "per_tensor", "output"}
        return cls(**{k: v for k, v in d.items() if k in known},
                   extra={k: v for k, v in d.items() if k not in known})

    @classmethod
    def load(cls, path) -> "MergeRecipe":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "inputs": list(self.inputs),
            "alpha": self.alpha,
        }
        if self.method == "ties":
            d["trim_fraction"] = self.trim_fraction
            d["per_tensor"] = self.per_tensor
        if self.output is not None:
            d["output"] = self.output
        d.update(self.extra)
        return d


def apply_recipe(recipe: MergeRecipe, checkpoints: Sequence[Checkpoint]) -> Checkpoint:
    """Run ``recipe`` on already-loaded checkpoints (same order as ``recipe.inputs``)."""
    if len(checkpoints) != len(recipe.inputs):
        raise ValueError("number of checkpoints does not match recipe inputs")
    base, rest = checkpoints[0], list(checkpoints[1:])
    if recipe.method == "interpolate":
        return interpolate(base, rest[0], recipe.alpha)
    if recipe.method == "linear":
        return linear_merge(base, rest, recipe.alpha)
    if recipe.method == "ties":
        return ties_merge(base, rest, recipe.alpha, recipe.trim_fraction, recipe.per_tensor)
    return sequential_chain(base, rest, recipe.alpha)
