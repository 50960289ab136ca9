"""
Checkpoints, task vectors and merging
=====================================

Build two tiny checkpoints by hand, write them to the binary container,
read them back, and combine them with the three merge operators.
"""

import tempfile
from pathlib import Path

import numpy as np

from wsmerge.merge import interpolate, linear_merge, task_vector, ties_merge
from wsmerge.tensor_store import Checkpoint, check_compat, load_checkpoint, save_checkpoint

rng = np.random.default_rng(0)

# every tensor belongs to exactly one manifest group
manifest = {"downsampling": ["conv.w"], "layer.0": ["enc.w"], "head": ["out.w"]}
base = Checkpoint({"conv.w": rng.normal(size=(4, 3)),
                   "enc.w": rng.normal(size=(3, 3)),
                   "out.w": rng.normal(size=3)}, manifest, {"provenance": "pretrain"})

# two "fine-tuned" variants: frozen conv, small moves elsewhere
fine = []
for k in range(2):
    t = {n: v.copy() for n, v in base.tensors.items()}
    t["enc.w"] += 0.1 * rng.normal(size=(3, 3))
    t["out.w"] += 0.3 * rng.normal(size=3)
    fine.append(Checkpoint(t, manifest, {"provenance": f"ft{k}"}))

# round trip through the container format
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "base.ckpt"
    save_checkpoint(base, path)
    print("file size:", path.stat().st_size, "bytes")
    back = load_checkpoint(path)
    print("round trip identical:", back.equals(base))

print("compatible:", check_compat(base, fine[0]).compatible)

# the task vector is just the difference
tau = task_vector(base, fine[0])
print("task vector norms:", {n: round(float(np.linalg.norm(v)), 4) for n, v in tau.items()})

# interpolation walks from the base (alpha=0) to the fine-tuned model (alpha=1)
for alpha in (0.0, 0.25, 1.0):
    m = interpolate(base, fine[0], alpha)
    print(f"alpha={alpha:<5} out.w={np.round(m.tensors['out.w'], 3)}")

# with several fine-tuned models: mean of task vectors, or TIES
lin = linear_merge(base, fine, alpha=0.5)
ties = ties_merge(base, fine, alpha=0.5, trim_fraction=0.5)
print("linear out.w:", np.round(lin.tensors["out.w"], 3))
print("ties   out.w:", np.round(ties.tensors["out.w"], 3))
print("ties provenance:", ties.meta["provenance"])
