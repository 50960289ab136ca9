"""End-to-end workflows: alpha sweeps and config-driven toy pipelines."""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Sequence

from .diagnostics import DEFAULT_RIDGE, drift_report, llfc_verify
from .merge import DEFAULT_ALPHA, DEFAULT_TRIM, interpolate, linear_merge, sequential_step, ties_merge
from .schedule import make_schedule
from .superb import MetricTable, merge_anchors, superb_score, task_breakdown
from .tensor_store import Checkpoint, dumps_checkpoint, save_checkpoint
from .toy import ToyTaskSpec, eval_toy, finetune_toy, make_task_data, pretrain_toy

__all__ = [
    "PipelineError",
    "sweep_alpha",
    "write_sweep_csv",
    "run_pipeline",
    "checkpoint_digest",
    "file_digest",
    "DEFAULT_PIPELINE",
]

SWEEP_ALPHAS = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)

# Reference toy setup: task A is fine-tuned, task B measures cross-task drift.
DEFAULT_PIPELINE = {
    "seed": 1,
    "model": {"d_hidden": 32, "n_layers": 3, "activation": "tanh"},
    "tasks": [
        {"task_id": "A", "input_dim": 16, "coords": [0, 1, 2], "rule": "quadrant"},
        {"task_id": "B", "input_dim": 16, "coords": [4, 5], "rule": "quadrant"},
    ],
    "pretrain": {"steps": 100, "lr": 0.05, "batch_size": 64},
    "finetune": [{"task": "A", "steps": 3000, "lr": 0.075, "beta": 10.0}],
    "strategy": "single",
    "alpha": DEFAULT_ALPHA,
    "sweep": {"alphas": list(SWEEP_ALPHAS)},
    "llfc": {"alphas": [0.25, 0.5, 0.75], "probe_task": "A", "ridge": DEFAULT_RIDGE},
    "diag": {"probe_task": "A"},
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def checkpoint_digest(ckpt: Checkpoint) -> str:
    return hashlib.sha256(dumps_checkpoint(ckpt)).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _score_table(table: MetricTable, anchors: list[dict] | None) -> MetricTable:
    if anchors is None:
        return table
    return merge_anchors([{"task": r.task, "metric": r.metric, "value": r.value} for r in table],
                         anchors)


def sweep_alpha(
    base: Checkpoint,
    ft: Checkpoint,
    alphas: Sequence[float] = SWEEP_ALPHAS,
    tasks: Sequence[str] | None = None,
    anchors: list[dict] | None = None,
    keep_dir=None,
) -> list[dict]:
    """Evaluate ``interpolate(base, ft, alpha)`` for each alpha.

    Rows are ``{"alpha", "metrics": {task: value}, "score"}``. Anchors default
    to the toy ones (chance and 1.0); merged checkpoints are written to
    ``keep_dir`` when given.
    """
    rows = []
    for alpha in alphas:
        merged = interpolate(base, ft, alpha)
        if keep_dir is not None:
            Path(keep_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(merged, Path(keep_dir) / f"merged_alpha{alpha:g}.ckpt")
        table = _score_table(eval_toy(merged, tasks), anchors)
        rows.append({
            "alpha": float(alpha),
            "metrics": {r.task: r.value for r in table},
            "score": superb_score(table),
        })
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    tasks = list(rows[0]["metrics"]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", *tasks, "score"])
        for r in rows:
            w.writerow([r["alpha"], *(r["metrics"][t] for t in tasks), r["score"]])


def _dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve_config(config: dict) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_PIPELINE))
    for key, value in config.items():
        cfg[key] = value
    seed = int(cfg["seed"])
    tasks = []
    for i, t in enumerate(cfg["tasks"]):
        t = dict(t)
        # task data seeds derive from the top-level seed unless pinned
        t.setdefault("seed", seed * 100 + i + 1)
        tasks.append(t)
    cfg["tasks"] = tasks
    if cfg["strategy"] not in ("single", "sequential", "linear", "ties"):
        raise PipelineError("config", f"unknown strategy {cfg['strategy']!r}")
    if cfg["strategy"] == "single" and len(cfg["finetune"]) != 1:
        raise PipelineError("config", "strategy 'single' needs exactly one finetune entry")
    if not cfg["finetune"]:
        raise PipelineError("config", "finetune list is empty")
    return cfg


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except PipelineError:
                raise
            except Exception as exc:  # re-tag with the failing stage
                raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc
        return inner
    return wrap


def run_pipeline(config: dict, out_dir=None) -> dict:
    """Pretrain -> schedule -> fine-tune -> merge -> eval/sweep/diag/llfc.

    ``config`` keys override :data:`DEFAULT_PIPELINE`. Every seed derives from
    ``config["seed"]``. Returns a summary dict with checkpoint digests (and
    artifact paths when ``out_dir`` is given).
    """
    try:
        cfg = _resolve_config(config)
        specs = [ToyTaskSpec.from_dict(t) for t in cfg["tasks"]]
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError("config", f"{type(exc).__name__}: {exc}") from exc
    seed = int(cfg["seed"])
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, str] = {}
    digests: dict[str, str] = {}

    def emit(name: str, ckpt: Checkpoint) -> None:
        digests[name] = checkpoint_digest(ckpt)
        if out is not None:
            path = out / f"{name}.ckpt"
            save_checkpoint(ckpt, path)
            artifacts[name] = str(path)

    pre = cfg["pretrain"]
    model_cfg = cfg["model"]
    theta0 = _stage("pretrain")(pretrain_toy)(
        specs, pre["steps"], seed,
        d_hidden=model_cfg["d_hidden"], n_layers=model_cfg["n_layers"],
        lr=pre["lr"], batch_size=pre.get("batch_size", 64),
        activation=model_cfg.get("activation", "tanh"),
    )
    emit("pretrain", theta0)

    alpha = float(cfg["alpha"])
    strategy = cfg["strategy"]
    current = theta0
    fine_tuned = []
    for i, stage in enumerate(cfg["finetune"]):
        steps = int(stage["steps"])
        sched = _stage("schedule")(make_schedule)(theta0.manifest, steps, stage.get("beta", 10.0))
        if out is not None:
            sched.save(out / f"schedule_{i}_{stage['task']}.json")
        init = current if strategy == "sequential" else theta0
        ft = _stage("finetune")(finetune_toy)(
            init, stage["task"], sched, steps, stage.get("lr", 0.05), seed + 1 + i,
            batch_size=stage.get("batch_size", 64),
        )
        emit(f"ft_{i}_{stage['task']}", ft)
        fine_tuned.append(ft)
        if strategy == "sequential":
            current = _stage("merge")(sequential_step)(current, ft, alpha)
            emit(f"seq_{i}", current)

    merge = _stage("merge")
    if strategy == "single":
        merged = merge(interpolate)(theta0, fine_tuned[0], alpha)
    elif strategy == "linear":
        merged = merge(linear_merge)(theta0, fine_tuned, alpha)
    elif strategy == "ties":
        merged = merge(ties_merge)(theta0, fine_tuned, alpha,
                                   cfg.get("trim_fraction", DEFAULT_TRIM),
                                   cfg.get("per_tensor", False))
    else:
        merged = current
    emit("merged", merged)

    summary: dict = {"config": cfg, "digests": digests}

    def evaluate():
        tables = {}
        for name, ck in [("pretrain", theta0), ("merged", merged)] + [
            (f"ft_{i}", f) for i, f in enumerate(fine_tuned)
        ]:
            t = _score_table(eval_toy(ck), cfg.get("anchors"))
            tables[name] = {"rows": t.to_list(), "per_task": dict(task_breakdown(t)),
                            "score": superb_score(t)}
        return tables

    summary["eval"] = _stage("eval")(evaluate)()
    if out is not None:
        _dump(summary["eval"], out / "eval.json")
        artifacts["eval"] = str(out / "eval.json")

    def probe_inputs(section):
        spec = next(s for s in specs if s.task_id == section.get("probe_task", specs[0].task_id))
        return make_task_data(spec)["probe"][0]

    if strategy == "single" and cfg.get("sweep"):
        rows = _stage("sweep")(sweep_alpha)(theta0, fine_tuned[0], cfg["sweep"]["alphas"],
                                            anchors=cfg.get("anchors"))
        summary["sweep"] = rows
        if out is not None:
            _dump(rows, out / "sweep.json")
            write_sweep_csv(rows, out / "sweep.csv")
            artifacts["sweep"] = str(out / "sweep.json")

    if cfg.get("diag"):
        probe = probe_inputs(cfg["diag"])
        diag = {
            name: _stage("diag")(drift_report)(theta0, ck, probe).to_dict()
            for name, ck in [("merged", merged), ("ft_0", fine_tuned[0])]
        }
        summary["diag"] = diag
        if out is not None:
            _dump(diag, out / "diag.json")
            artifacts["diag"] = str(out / "diag.json")

    if strategy == "single" and cfg.get("llfc"):
        sec = cfg["llfc"]
        rep = _stage("llfc")(llfc_verify)(theta0, fine_tuned[0], sec["alphas"],
                                          probe_inputs(sec), sec.get("ridge", DEFAULT_RIDGE))
        summary["llfc"] = rep.rows
        if out is not None:
            _dump(rep.to_dict(), out / "llfc.json")
            rep.write_csv(out / "llfc.csv")
            artifacts["llfc"] = str(out / "llfc.json")

    summary["artifacts"] = artifacts
    return summary
