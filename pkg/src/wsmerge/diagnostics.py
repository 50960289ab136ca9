"""Drift diagnostics between checkpoints.

Feature matrices are ``(N, D)`` float64 arrays of per-layer activations on a
fixed probe set, one per backbone layer (list index = layer index).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .merge import _require_compat, interpolate
from .tensor_store import Checkpoint

__all__ = [
    "register_feature_adapter",
    "extract_features",
    "feature_similarity",
    "weight_distortion",
    "procrustes_align",
    "llfc_regress",
    "llfc_verify",
    "drift_report",
    "DriftReport",
    "LLFCReport",
    "SingularSystemError",
    "DEFAULT_RIDGE",
]

DEFAULT_RIDGE = 1e-6

WEIGHT_DISTORTION_DEFINITION = "sqrt(sum_i (a_i - b_i)^2) / P, P = total scalar parameter count"


class SingularSystemError(np.linalg.LinAlgError):
    pass


# (predicate, extractor) pairs; first match wins
_ADAPTERS: list[tuple[Callable[[Checkpoint], bool], Callable]] = []


def register_feature_adapter(predicate: Callable[[Checkpoint], bool],
                             extractor: Callable[[Checkpoint, np.ndarray], list]) -> None:
    """Teach :func:`extract_features` about another model family."""
    _ADAPTERS.insert(0, (predicate, extractor))


def _toy_features(ckpt: Checkpoint, probe: np.ndarray) -> list[np.ndarray]:
    from .toy import ToyModel

    return ToyModel.from_checkpoint(ckpt).layer_features(probe)


_ADAPTERS.append((lambda c: "model" in c.meta, _toy_features))


def extract_features(ckpt: Checkpoint, probe: np.ndarray) -> list[np.ndarray]:
    """Per-backbone-layer activations of ``ckpt`` on ``probe`` rows."""
    probe = np.asarray(probe, dtype=np.float64)
    for predicate, extractor in _ADAPTERS:
        if predicate(ckpt):
            return [np.asarray(f, dtype=np.float64) for f in extractor(ckpt, probe)]
    raise ValueError("no feature adapter accepts this checkpoint")


def _same_shape(*mats):
    shapes = {np.shape(m) for m in mats}
    if len(shapes) != 1:
        raise ValueError(f"feature matrices differ in shape: {sorted(shapes)}")


def feature_similarity(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Mean row-wise cosine similarity and mean row-wise Euclidean distance.

    Rows where either side is the zero vector contribute cosine 0 and still
    count toward N.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _same_shape(a, b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    dots = np.einsum("ij,ij->i", a, b)
    cos = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    cos = np.clip(cos, -1.0, 1.0)
    l2 = np.linalg.norm(a - b, axis=1)
    return float(cos.mean()), float(l2.mean())


def weight_distortion(a: Checkpoint, b: Checkpoint) -> float:
    """Global L2 distance between parameter vectors divided by the count P."""
    _require_compat(a, [b])
    total = 0.0
    for name, ta in a.tensors.items():
        d = ta.astype(np.float64) - b.tensors[name].astype(np.float64)
        total += float(np.dot(d.ravel(), d.ravel()))
    p = a.n_params
    return float(np.sqrt(total) / p) if p else 0.0


def procrustes_align(src: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, float]:
    """Rotate ``src`` onto ``ref`` with the best orthogonal map.

    ``Q = U @ Vt`` from the SVD of ``src.T @ ref`` minimizes
    ``||src @ Q - ref||_F`` over orthogonal ``Q``. Returns ``(src @ Q,
    residual)``.
    """
    src = np.asarray(src, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    _same_shape(src, ref)
    if src.ndim != 2 or src.shape[1] < 1:
        raise ValueError("procrustes_align needs (N, D) matrices with D >= 1")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(ref))):
        raise np.linalg.LinAlgError("SVD failed: non-finite input")
    u, _, vt = np.linalg.svd(src.T @ ref)
    aligned = src @ (u @ vt)
    return aligned, float(np.linalg.norm(aligned - ref))


def llfc_regress(f_interp: np.ndarray, f0: np.ndarray, f1: np.ndarray,
                 ridge_lambda: float = 0.0) -> tuple[float, float, float]:
    """Fit ``f_interp ~ b0 * f0 + b1 * f1`` over all entries (no intercept).

    Ridge penalty ``ridge_lambda * (b0**2 + b1**2)`` is absolute. R^2 uses the
    total sum of squares of ``f_interp`` about its per-feature (column) mean,
    so it is unchanged by an orthogonal rotation of the feature axes.
    """
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be >= 0")
    _same_shape(f_interp, f0, f1)
    y = np.asarray(f_interp, dtype=np.float64).ravel()
    x0 = np.asarray(f0, dtype=np.float64).ravel()
    x1 = np.asarray(f1, dtype=np.float64).ravel()
    g00, g01, g11 = x0 @ x0, x0 @ x1, x1 @ x1
    a00, a11 = g00 + ridge_lambda, g11 + ridge_lambda
    det = a00 * a11 - g01 * g01
    if not det > 1e-12 * a00 * a11:
        raise SingularSystemError("singular system: features are (nearly) collinear")
    r0, r1 = x0 @ y, x1 @ y
    b0 = (a11 * r0 - g01 * r1) / det
    b1 = (a00 * r1 - g01 * r0) / det
    resid = y - b0 * x0 - b1 * x1
    rss = float(resid @ resid)
    y2 = np.asarray(f_interp, dtype=np.float64)
    y2 = y2.reshape(len(y2), -1) if y2.ndim > 1 else y2[:, None]
    yc = (y2 - y2.mean(axis=0)).ravel()
    tss = float(yc @ yc)
    if tss == 0.0:
        r2 = 1.0 if rss == 0.0 else float("-inf")
    else:
        r2 = 1.0 - rss / tss
    return float(b0), float(b1), float(r2)


@dataclass
class LLFCReport:
    rows: list[dict] = field(default_factory=list)

    def get(self, alpha: float, layer: int) -> dict:
        for r in self.rows:
            if r["alpha"] == alpha and r["layer"] == layer:
                return r
        raise KeyError((alpha, layer))

    def to_dict(self) -> dict:
        return {"rows": self.rows}

    def write_csv(self, path) -> None:
        cols = ["alpha", "layer", "b0", "b1", "r2", "residual_ft", "residual_interp"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            w.writerows(self.rows)


def llfc_verify(theta0: Checkpoint, theta_ft: Checkpoint, alphas: Sequence[float],
                probe: np.ndarray, ridge_lambda: float = DEFAULT_RIDGE) -> LLFCReport:
    """Check layerwise linear feature connectivity along the interpolation path.

    For every alpha and backbone layer, features of ``theta_ft`` and of the
    interpolated model are Procrustes-aligned to ``theta0``'s and regressed on
    ``[F(theta0), F(theta_ft)]``. ``ridge_lambda`` is relative: the absolute
    penalty is ``ridge_lambda`` times the mean diagonal of the 2x2 Gram matrix.
    """
    _require_compat(theta0, [theta_ft])
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise ValueError(f"alphas must lie in (0, 1), got {a}")
    f0s = extract_features(theta0, probe)
    f1s = extract_features(theta_ft, probe)
    aligned_ft = [procrustes_align(f1, f0) for f1, f0 in zip(f1s, f0s)]
    report = LLFCReport()
    for alpha in alphas:
        fas = extract_features(interpolate(theta0, theta_ft, alpha), probe)
        for layer, (fa, f0, (f1, res1)) in enumerate(zip(fas, f0s, aligned_ft)):
            fa_al, res_a = procrustes_align(fa, f0)
            scale = 0.5 * (float(np.sum(f0 * f0)) + float(np.sum(f1 * f1)))
            b0, b1, r2 = llfc_regress(fa_al, f0, f1, ridge_lambda * scale)
            report.rows.append({
                "alpha": float(alpha), "layer": layer, "b0": b0, "b1": b1, "r2": r2,
                "residual_ft": res1, "residual_interp": res_a,
            })
    return report


@dataclass
class DriftReport:
    layers: list[dict]
    weight_distortion: float
    definition: str = WEIGHT_DISTORTION_DEFINITION

    def to_dict(self) -> dict:
        return asdict(self)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["layer", "cosine", "l2"])
            w.writeheader()
            w.writerows(self.layers)


def drift_report(a: Checkpoint, b: Checkpoint, probe: np.ndarray) -> DriftReport:
    """Per-layer feature similarity plus weight distortion of ``b`` vs ``a``."""
    fa, fb = extract_features(a, probe), extract_features(b, probe)
    layers = []
    for k, (x, y) in enumerate(zip(fa, fb)):
        cos, l2 = feature_similarity(x, y)
        layers.append({"layer": k, "cosine": cos, "l2": l2})
    return DriftReport(layers, weight_distortion(a, b))
