"""Desk-scale model and trainer for running stable fine-tuning end to end.

The model is ``front -> L x (linear + activation) -> head``:

* ``front`` (group ``downsampling``): affine map ``d_in -> d_h``, no activation
* ``layer.k``: affine ``d_h -> d_h`` followed by ``tanh`` (or identity)
* ``head``: affine ``d_h -> sum(n_classes)``; each task owns a contiguous
  slice of the logits, so several task heads live in one ``head`` group

Everything is float64 with hand-written backprop and plain SGD.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .schedule import FreezeSchedule, trainable_at
from .superb import MetricRow, MetricTable
from .tensor_store import Checkpoint, CheckpointError

__all__ = [
    "ToyTaskSpec",
    "ToyModel",
    "make_task_data",
    "init_toy",
    "pretrain_toy",
    "finetune_toy",
    "grad_check",
    "eval_toy",
    "task_accuracy",
]

RULES = ("quadrant", "argmax")


@dataclass(frozen=True)
class ToyTaskSpec:
    """Synthetic classification task over standard-normal inputs.

    ``rule="quadrant"`` labels by the sign pattern of ``coords`` (``2**len``
    classes); ``rule="argmax"`` labels by which of ``coords`` is largest.
    Both are balanced. Splits are consecutive slices of a single draw, so the
    probe split never overlaps train.
    """

    task_id: str
    input_dim: int
    coords: tuple
    rule: str = "quadrant"
    n_train: int = 2000
    n_val: int = 2000
    n_probe: int = 500
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(int(c) for c in self.coords))
        if self.rule not in RULES:
            raise ValueError(f"unknown label rule {self.rule!r}")
        if not self.coords or any(not 0 <= c < self.input_dim for c in self.coords):
            raise ValueError(f"coords {self.coords} out of range for input_dim {self.input_dim}")
        if len(set(self.coords)) != len(self.coords):
            raise ValueError("coords must be distinct")

    @property
    def n_classes(self) -> int:
        return 2 ** len(self.coords) if self.rule == "quadrant" else len(self.coords)

    def label(self, x: np.ndarray) -> np.ndarray:
        sub = np.atleast_2d(x)[:, list(self.coords)]
        if self.rule == "quadrant":
            bits = (sub > 0).astype(np.int64)
            return bits @ (2 ** np.arange(len(self.coords)))
        return np.argmax(sub, axis=1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coords"] = list(self.coords)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyTaskSpec":
        return cls(**d)


def make_task_data(spec: ToyTaskSpec) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Return ``{"train"|"val"|"probe": (X, y)}`` for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_train + spec.n_val + spec.n_probe
    X = rng.standard_normal((n, spec.input_dim))
    y = spec.label(X)
    a, b = spec.n_train, spec.n_train + spec.n_val
    return {"train": (X[:a], y[:a]), "val": (X[a:b], y[a:b]), "probe": (X[b:], y[b:])}


def _act(name):
    if name == "tanh":
        return np.tanh, lambda out: 1.0 - out * out
    if name == "identity":
        return (lambda z: z), (lambda out: np.ones_like(out))
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class ToyModel:
    params: dict[str, np.ndarray]
    d_in: int
    d_hidden: int
    n_layers: int
    tasks: list[ToyTaskSpec] = field(default_factory=list)
    activation: str = "tanh"

    # -- layout -------------------------------------------------------------
    @property
    def manifest(self) -> dict[str, list[str]]:
        m = {"downsampling": ["front.b", "front.w"], "head": ["head.b", "head.w"]}
        for k in range(self.n_layers):
            m[f"layer.{k}"] = [f"layer.{k}.b", f"layer.{k}.w"]
        return m

    def head_slice(self, task_id: str) -> slice:
        start = 0
        for t in self.tasks:
            if t.task_id == task_id:
                return slice(start, start + t.n_classes)
            start += t.n_classes
        raise KeyError(f"model has no head for task {task_id!r}")

    def task(self, task_id: str) -> ToyTaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"model has no head for task {task_id!r}")

    @property
    def d_out(self) -> int:
        return sum(t.n_classes for t in self.tasks)

    @staticmethod
    def shapes(d_in, d_hidden, n_layers, d_out) -> dict[str, tuple]:
        s = {"front.w": (d_hidden, d_in), "front.b": (d_hidden,)}
        for k in range(n_layers):
            s[f"layer.{k}.w"] = (d_hidden, d_hidden)
            s[f"layer.{k}.b"] = (d_hidden,)
        s["head.w"] = (d_out, d_hidden)
        s["head.b"] = (d_out,)
        return s

    # -- checkpoint conversion ---------------------------------------------
    def to_checkpoint(self, meta: dict | None = None) -> Checkpoint:
        cfg = {
            "d_in": self.d_in,
            "d_hidden": self.d_hidden,
            "n_layers": self.n_layers,
            "activation": self.activation,
        }
        m = {
            "model": json.dumps(cfg, sort_keys=True),
            "tasks": json.dumps([t.to_dict() for t in self.tasks], sort_keys=True),
        }
        m.update(meta or {})
        tensors = {k: np.array(v, dtype=np.float64) for k, v in sorted(self.params.items())}
        return Checkpoint(tensors, self.manifest, m)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ToyModel":
        try:
            cfg = json.loads(ckpt.meta["model"])
            tasks = [ToyTaskSpec.from_dict(d) for d in json.loads(ckpt.meta.get("tasks", "[]"))]
        except (KeyError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"checkpoint is not a toy model: {exc}") from None
        model = cls({}, cfg["d_in"], cfg["d_hidden"], cfg["n_layers"], tasks,
                    cfg.get("activation", "tanh"))
        want = cls.shapes(model.d_in, model.d_hidden, model.n_layers, model.d_out)
        got = {k: v.shape for k, v in ckpt.tensors.items()}
        if got != want:
            raise CheckpointError(f"schema mismatch: expected {want}, got {got}")
        model.params = {k: v.astype(np.float64) for k, v in ckpt.tensors.items()}
        return model

    def copy(self) -> "ToyModel":
        return ToyModel({k: v.copy() for k, v in self.params.items()}, self.d_in,
                        self.d_hidden, self.n_layers, list(self.tasks), self.activation)

    # -- compute ------------------------------------------------------------
    def forward(self, X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return ``(hiddens, logits)``; hiddens[0] is the front output,
        hiddens[k+1] the output of ``layer.k``."""
        p = self.params
        f, _ = _act(self.activation)
        h = X @ p["front.w"].T + p["front.b"]
        hiddens = [h]
        for k in range(self.n_layers):
            h = f(h @ p[f"layer.{k}.w"].T + p[f"layer.{k}.b"])
            hiddens.append(h)
        logits = h @ p["head.w"].T + p["head.b"]
        return hiddens, logits

    def layer_features(self, X: np.ndarray) -> list[np.ndarray]:
        return self.forward(X)[0][1:]

    def loss(self, X, y, task_id: str) -> float:
        _, logits = self.forward(X)
        z = logits[:, self.head_slice(task_id)]
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(-logp[np.arange(len(y)), y].mean())

    def loss_and_grads(self, X, y, task_id: str) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross-entropy over the task's logit slice and its gradients."""
        p = self.params
        _, dact = _act(self.activation)
        hiddens, logits = self.forward(X)
        sl = self.head_slice(task_id)
        n = len(y)
        z = logits[:, sl]
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        prob = ez / ez.sum(axis=1, keepdims=True)
        loss = float(-np.log(prob[np.arange(n), y]).mean())

        dlogits = np.zeros_like(logits)
        dz = prob
        dz[np.arange(n), y] -= 1.0
        dlogits[:, sl] = dz / n

        g = {}
        g["head.w"] = dlogits.T @ hiddens[-1]
        g["head.b"] = dlogits.sum(axis=0)
        dh = dlogits @ p["head.w"]
        for k in reversed(range(self.n_layers)):
            dpre = dh * dact(hiddens[k + 1])
            g[f"layer.{k}.w"] = dpre.T @ hiddens[k]
            g[f"layer.{k}.b"] = dpre.sum(axis=0)
            dh = dpre @ p[f"layer.{k}.w"]
        g["front.w"] = dh.T @ X
        g["front.b"] = dh.sum(axis=0)
        return loss, g

    def predict(self, X, task_id: str) -> np.ndarray:
        _, logits = self.forward(X)
        return np.argmax(logits[:, self.head_slice(task_id)], axis=1)


def init_toy(tasks: Sequence[ToyTaskSpec], d_hidden: int = 32, n_layers: int = 3,
             seed: int = 0, activation: str = "tanh") -> ToyModel:
    """Random model with 1/sqrt(fan_in) Gaussian weights and zero biases."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("need at least one task")
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids: {ids}")
    d_in = tasks[0].input_dim
    if any(t.input_dim != d_in for t in tasks):
        raise ValueError("all tasks must share input_dim")
    rng = np.random.default_rng(seed)
    d_out = sum(t.n_classes for t in tasks)
    params = {}
    for name, shape in ToyModel.shapes(d_in, d_hidden, n_layers, d_out).items():
        if name.endswith(".w"):
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[1])
        else:
            params[name] = np.zeros(shape)
    return ToyModel(params, d_in, d_hidden, n_layers, tasks, activation)


def _batches(rng, n: int, batch_size: int):
    while True:
        order = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield order[i : i + batch_size]


def pretrain_toy(
    tasks: Sequence[ToyTaskSpec],
    steps: int,
    seed: int = 0,
    *,
    d_hidden: int = 32,
    n_layers: int = 3,
    lr: float = 0.05,
    batch_size: int = 64,
    activation: str = "tanh",
    history: list | None = None,
) -> Checkpoint:
    """Train a fresh model on the sum of all task losses (the theta0 analog).

    If ``history`` is given, ``(step, {task: train_loss})`` pairs are appended
    for step 0 and the final step.
    """
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps}")
    model = init_toy(tasks, d_hidden, n_layers, seed, activation)
    data = {t.task_id: make_task_data(t)["train"] for t in model.tasks}
    rng = np.random.default_rng([seed, 1])
    streams = {t.task_id: _batches(rng, len(data[t.task_id][1]), batch_size) for t in model.tasks}

    def losses():
        return {tid: model.loss(X, y, tid) for tid, (X, y) in data.items()}

    if history is not None:
        history.append((0, losses()))
    for _ in range(int(steps)):
        total = {k: np.zeros_like(v) for k, v in model.params.items()}
        for tid, (X, y) in data.items():
            idx = next(streams[tid])
            _, g = model.loss_and_grads(X[idx], y[idx], tid)
            for k in total:
                total[k] += g[k]
        for k, gk in total.items():
            model.params[k] -= lr * gk
    if history is not None:
        history.append((int(steps), losses()))
    return model.to_checkpoint({"stage": "pretrain", "steps": str(steps), "seed": str(seed)})


StepCallback = Callable[[int, frozenset, dict], None]


def finetune_toy(
    theta0: Checkpoint,
    task: ToyTaskSpec | str,
    schedule: FreezeSchedule,
    steps: int,
    lr: float = 0.05,
    seed: int = 0,
    *,
    batch_size: int = 64,
    callback: StepCallback | None = None,
) -> Checkpoint:
    """Stable fine-tuning of ``theta0`` on one task under ``schedule``.

    At step ``t`` only tensors of groups in ``trainable_at(schedule, t)`` are
    updated; the others are never written. ``callback(step, trainable,
    params)`` runs after every step with the live parameter dict.
    """
    if schedule.total_steps != steps:
        raise ValueError(f"schedule covers {schedule.total_steps} steps, asked for {steps}")
    model = ToyModel.from_checkpoint(theta0)
    task_id = task if isinstance(task, str) else task.task_id
    spec = model.task(task_id)
    if not isinstance(task, str) and task != spec:
        raise CheckpointError(f"task spec for {task_id!r} differs from the one stored in theta0")
    X, y = make_task_data(spec)["train"]
    rng = np.random.default_rng([seed, 2])
    stream = _batches(rng, len(y), batch_size)
    manifest = model.manifest
    for t in range(1, steps + 1):
        trainable = trainable_at(schedule, t)
        idx = next(stream)
        _, g = model.loss_and_grads(X[idx], y[idx], task_id)
        for group in trainable:
            for name in manifest.get(group, ()):
                model.params[name] -= lr * g[name]
        if callback is not None:
            callback(t, trainable, model.params)
    meta = {k: v for k, v in theta0.meta.items() if k not in ("provenance",)}
    meta.update({
        "stage": "finetune",
        "task": task_id,
        "steps": str(steps),
        "beta_percent": repr(schedule.beta_percent),
        "lr": repr(lr),
        "seed": str(seed),
    })
    return model.to_checkpoint(meta)


def grad_check(model: ToyModel, batch: tuple, epsilon: float = 1e-5,
               per_tensor: bool = False) -> float | dict[str, float]:
    """Worst relative error between backprop and central differences.

    ``batch`` is ``(X, y, task_id)``. For each tensor the error is
    ``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)``
    (0 when both vanish); the maximum over tensors is returned, or the
    per-tensor dict with ``per_tensor=True``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    X, y, task_id = batch
    _, analytic = model.loss_and_grads(X, y, task_id)
    probe = model.copy()
    errors = {}
    for name, value in probe.params.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = probe.loss(X, y, task_id)
            flat[i] = orig - epsilon
            down = probe.loss(X, y, task_id)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * epsilon)
        a = analytic[name]
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric))
        errors[name] = 0.0 if scale == 0 else float(np.linalg.norm(a - numeric) / scale)
    return errors if per_tensor else max(errors.values(), default=0.0)


def task_accuracy(model: ToyModel, spec: ToyTaskSpec, split: str = "val") -> float:
    X, y = make_task_data(spec)[split]
    return float(np.mean(model.predict(X, spec.task_id) == y))


def eval_toy(ckpt: Checkpoint, tasks: Sequence[ToyTaskSpec | str] | None = None,
             split: str = "val") -> MetricTable:
    """Per-task accuracy as a higher-is-better metric table.

    Anchors: chance accuracy ``1/n_classes`` as baseline, 1.0 as SOTA.
    ``tasks`` defaults to every task with a head in ``ckpt``.
    """
    model = ToyModel.from_checkpoint(ckpt)
    specs = model.tasks if tasks is None else [
        model.task(t if isinstance(t, str) else t.task_id) for t in tasks
    ]
    rows = [
        MetricRow(s.task_id, "acc", "higher_better", task_accuracy(model, s, split),
                  1.0 / s.n_classes, 1.0)
        for s in specs
    ]
    return MetricTable(rows)
