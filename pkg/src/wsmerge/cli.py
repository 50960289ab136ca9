"""Command-line entry point (``wsmerge <subcommand>``).

Every subcommand that writes an artifact also writes ``<artifact>.run.json``
with the command, resolved arguments, input/output digests and wall time.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import DEFAULT_RIDGE, drift_report, llfc_verify
from .merge import DEFAULT_ALPHA, DEFAULT_TRIM, MergeRecipe, apply_recipe
from .pipeline import (
    PipelineError,
    SWEEP_ALPHAS,
    file_digest,
    run_pipeline,
    sweep_alpha,
    write_sweep_csv,
)
from .schedule import FreezeSchedule, make_schedule
from .superb import merge_anchors, superb_score, task_breakdown
from .tensor_store import CheckpointError, load_checkpoint, save_checkpoint
from .toy import ToyTaskSpec, eval_toy, finetune_toy, make_task_data, pretrain_toy


class _Run:
    """Collects inputs/outputs of one invocation for its run record."""

    def __init__(self, args):
        self.args = args
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self.t0 = time.perf_counter()

    def path(self, p) -> Path:
        p = Path(p)
        if not p.is_absolute() and self.args.out_dir:
            p = Path(self.args.out_dir) / p
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def read(self, p):
        self.inputs.append(str(p))
        return p

    def wrote(self, p):
        self.outputs.append(str(p))
        return p

    def record(self) -> None:
        if not self.outputs:
            return
        config = {k: v for k, v in vars(self.args).items() if k != "func"}
        rec = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "config": config,
            "seed": self.args.seed,
            "inputs": {p: file_digest(p) for p in self.inputs if Path(p).is_file()},
            "outputs": {p: file_digest(p) for p in self.outputs if Path(p).is_file()},
            "wall_time_s": time.perf_counter() - self.t0,
            "version": __version__,
        }
        target = Path(self.outputs[0])
        with open(target.with_name(target.name + ".run.json"), "w") as fh:
            json.dump(rec, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load(run: _Run, path, allow_nonfinite=False):
    return load_checkpoint(run.read(path), allow_nonfinite=allow_nonfinite)


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _load_probe(run: _Run, path) -> np.ndarray:
    """Probe file: ``{"inputs": [[...]]}``, a bare list of rows, or
    ``{"task": <task spec>, "split": "probe"}``."""
    with open(run.read(path)) as fh:
        d = json.load(fh)
    if isinstance(d, list):
        return np.asarray(d, dtype=np.float64)
    if "inputs" in d:
        return np.asarray(d["inputs"], dtype=np.float64)
    spec = ToyTaskSpec.from_dict(d["task"])
    return make_task_data(spec)[d.get("split", "probe")][0]


def _load_tasks(run: _Run, path) -> list[ToyTaskSpec]:
    with open(run.read(path)) as fh:
        d = json.load(fh)
    items = d["tasks"] if isinstance(d, dict) else d
    return [ToyTaskSpec.from_dict(t) for t in items]


# -- subcommands --------------------------------------------------------------

def cmd_merge(args, run):
    if args.recipe:
        recipe = MergeRecipe.load(run.read(args.recipe))
    else:
        if not args.base or not args.inputs:
            raise SystemExit("merge: need --recipe or --base and at least one --in")
        recipe = MergeRecipe(args.method, [args.base, *args.inputs], args.alpha,
                             args.trim, args.per_tensor, args.out)
    out = args.out or recipe.output
    if not out:
        raise SystemExit("merge: no output path (--out or recipe 'output')")
    ckpts = [_load(run, p) for p in recipe.inputs]
    merged = apply_recipe(recipe, ckpts)
    path = run.wrote(run.path(out))
    save_checkpoint(merged, path)
    _dump(recipe.to_dict(), path.with_name(path.name + ".recipe.json"))
    print(f"wrote {path}")


def cmd_schedule(args, run):
    if args.manifest:
        with open(run.read(args.manifest)) as fh:
            manifest = json.load(fh)
        manifest = manifest.get("manifest", manifest)
    else:
        manifest = _load(run, args.ckpt).manifest
    sched = make_schedule(manifest, args.steps, args.beta)
    path = run.wrote(run.path(args.out))
    sched.save(path)
    print(f"wrote {path}")


def cmd_train_toy(args, run):
    if args.init is None:
        if not args.tasks:
            raise SystemExit("train-toy: pretraining (no --init) needs --tasks")
        ckpt = pretrain_toy(_load_tasks(run, args.tasks), args.steps, args.seed,
                            d_hidden=args.hidden, n_layers=args.layers, lr=args.lr,
                            batch_size=args.batch_size)
    else:
        if not args.task:
            raise SystemExit("train-toy: fine-tuning needs --task")
        theta0 = _load(run, args.init)
        if args.schedule:
            sched = FreezeSchedule.load(run.read(args.schedule))
        else:
            sched = make_schedule(theta0.manifest, args.steps, args.beta)
        ckpt = finetune_toy(theta0, args.task, sched, args.steps, args.lr, args.seed,
                            batch_size=args.batch_size)
    path = run.wrote(run.path(args.out))
    save_checkpoint(ckpt, path)
    print(f"wrote {path}")


def cmd_eval_toy(args, run):
    table = eval_toy(_load(run, args.ckpt), args.task or None, args.split)
    result = {"rows": table.to_list(), "per_task": dict(task_breakdown(table)),
              "score": superb_score(table)}
    if args.out:
        path = run.wrote(run.path(args.out))
        _dump(result, path)
    print(json.dumps(result, indent=2))


def cmd_diag(args, run):
    rep = drift_report(_load(run, args.a), _load(run, args.b), _load_probe(run, args.probe))
    path = run.wrote(run.path(args.out))
    _dump(rep.to_dict(), path)
    if args.csv:
        rep.write_csv(run.wrote(run.path(args.csv)))
    print(f"wrote {path}")


def cmd_llfc(args, run):
    rep = llfc_verify(_load(run, args.base), _load(run, args.ft), _floats(args.alphas),
                      _load_probe(run, args.probe), args.ridge)
    path = run.wrote(run.path(args.out))
    _dump(rep.to_dict(), path)
    if args.csv:
        rep.write_csv(run.wrote(run.path(args.csv)))
    for r in rep.rows:
        print(f"alpha={r['alpha']:.3g} layer={r['layer']} b0={r['b0']:.4f} "
              f"b1={r['b1']:.4f} r2={r['r2']:.4f}")


def cmd_score(args, run):
    with open(run.read(args.metrics)) as fh:
        metrics = json.load(fh)
    if isinstance(metrics, dict):
        metrics = metrics["rows"]
    anchors = []
    if args.anchors:
        with open(run.read(args.anchors)) as fh:
            anchors = json.load(fh)
    table = merge_anchors(metrics, anchors)
    result = {"score": superb_score(table), "per_task": dict(task_breakdown(table))}
    if args.out:
        _dump(result, run.wrote(run.path(args.out)))
    print(f"score: {result['score']:.2f}")
    for task, phi in result["per_task"].items():
        print(f"  {task}: {phi:.4f}")


def cmd_sweep(args, run):
    anchors = None
    if args.anchors:
        with open(run.read(args.anchors)) as fh:
            anchors = json.load(fh)
    keep = run.path(args.keep_dir) if args.keep_dir else None
    rows = sweep_alpha(_load(run, args.base), _load(run, args.ft), _floats(args.alphas),
                       args.task or None, anchors, keep)
    path = run.wrote(run.path(args.out))
    _dump(rows, path)
    if args.csv:
        write_sweep_csv(rows, run.wrote(run.path(args.csv)))
    for r in rows:
        print(f"alpha={r['alpha']:.3g} score={r['score']:.2f} " +
              " ".join(f"{t}={v:.4f}" for t, v in r["metrics"].items()))


def cmd_pipeline(args, run):
    config = {}
    if args.config:
        with open(run.read(args.config)) as fh:
            config = json.load(fh)
    if args.seed_given:
        config["seed"] = args.seed
    out_dir = Path(args.out_dir or config.pop("out_dir", "pipeline_out"))
    summary = run_pipeline(config, out_dir)
    args.seed = summary["config"]["seed"]
    path = run.wrote(out_dir / "summary.json")
    for p in summary["artifacts"].values():
        run.wrote(p)
    _dump(summary, path)
    ev = summary["eval"]
    print(f"pretrain score {ev['pretrain']['score']:.2f} -> merged {ev['merged']['score']:.2f}")
    for name, digest in summary["digests"].items():
        print(f"  {name}: {digest[:16]}")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="top-level seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="BLAS/OpenMP thread limit")
    common.add_argument("--out-dir", default=argparse.SUPPRESS,
                        help="directory for relative output paths")

    p = argparse.ArgumentParser(prog="wsmerge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(func=func)
        return sp

    def merge_args(sp, method=None):
        if method is None:
            sp.add_argument("--method", choices=MergeRecipe.METHODS, default="interpolate")
        else:
            sp.set_defaults(method=method)
        sp.add_argument("--alpha", type=float, default=DEFAULT_ALPHA,
                        help=f"interpolation weight (default {DEFAULT_ALPHA})")
        sp.add_argument("--trim", type=float, default=DEFAULT_TRIM,
                        help=f"TIES: kept fraction of each task vector (default {DEFAULT_TRIM})")
        sp.add_argument("--per-tensor", action="store_true",
                        help="TIES: trim per tensor instead of one global cutoff")
        sp.add_argument("--base", help="pre-trained checkpoint")
        sp.add_argument("--in", dest="inputs", action="append", default=[],
                        help="fine-tuned checkpoint (repeatable; order = chain order for sequential)")
        sp.add_argument("--recipe", help="JSON merge recipe instead of flags")
        sp.add_argument("--out")

    merge_args(add("merge", cmd_merge, "merge checkpoints"))
    merge_args(add("ties", cmd_merge, "TIES merge"), "ties")
    merge_args(add("sequential", cmd_merge, "sequential interpolation chain"), "sequential")

    sp = add("schedule", cmd_schedule, "write a freeze schedule")
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--beta", type=float, default=10.0, help="head-only warm-up percent")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--manifest", help="manifest JSON (or checkpoint header JSON)")
    g.add_argument("--ckpt", help="take the manifest from this checkpoint")
    sp.add_argument("--out", required=True)

    sp = add("train-toy", cmd_train_toy, "pretrain (no --init) or fine-tune the toy model (frozen front, head warm-up)")
    sp.add_argument("--task", help="task id to fine-tune (must have a head in --init)")
    sp.add_argument("--tasks", help="task spec JSON list (pretraining)")
    sp.add_argument("--init", help="theta0 checkpoint to fine-tune")
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--beta", type=float, default=10.0)
    sp.add_argument("--schedule", help="schedule JSON; overrides --beta")
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--hidden", type=int, default=32)
    sp.add_argument("--layers", type=int, default=3)
    sp.add_argument("--out", required=True)

    sp = add("eval-toy", cmd_eval_toy, "per-task accuracy of a toy checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--task", action="append", default=[])
    sp.add_argument("--split", default="val", choices=["train", "val", "probe"])
    sp.add_argument("--out")

    sp = add("diag", cmd_diag, "feature similarity and weight distortion")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--probe", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")

    sp = add("llfc", cmd_llfc, "layerwise linear feature connectivity check")
    sp.add_argument("--base", required=True)
    sp.add_argument("--ft", required=True)
    sp.add_argument("--alphas", default="0.25,0.5,0.75")
    sp.add_argument("--probe", required=True)
    sp.add_argument("--ridge", type=float, default=DEFAULT_RIDGE,
                    help="ridge penalty relative to the feature Gram scale")
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")

    sp = add("score", cmd_score, "SUPERB-style score from metrics + anchors")
    sp.add_argument("--metrics", required=True)
    sp.add_argument("--anchors")
    sp.add_argument("--out")

    sp = add("sweep", cmd_sweep, "evaluate interpolations over a list of alphas")
    sp.add_argument("--base", required=True)
    sp.add_argument("--ft", required=True)
    sp.add_argument("--alphas", default=",".join(f"{a:g}" for a in SWEEP_ALPHAS))
    sp.add_argument("--task", action="append", default=[])
    sp.add_argument("--anchors")
    sp.add_argument("--keep-dir", help="also save each merged checkpoint here")
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")

    sp = add("pipeline", cmd_pipeline, "run the config-driven end-to-end toy pipeline")
    sp.add_argument("--config", help="pipeline JSON (keys override the built-in defaults)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    run = _Run(args)
    try:
        if args.threads:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                args.func(args, run)
        else:
            args.func(args, run)
    except (CheckpointError, PipelineError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if run.outputs:
            print("partial outputs: " + ", ".join(run.outputs), file=sys.stderr)
        return 1
    run.record()
    return 0


if __name__ == "__main__":
    sys.exit(main())
