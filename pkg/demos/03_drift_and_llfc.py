"""
Feature drift and layerwise linear connectivity
===============================================

How far do the per-layer features move during fine-tuning, and are the
features of an interpolated model a linear mix of the endpoint features?
"""

from wsmerge.diagnostics import drift_report, llfc_verify
from wsmerge.merge import interpolate
from wsmerge.pipeline import DEFAULT_PIPELINE
from wsmerge.schedule import make_schedule
from wsmerge.toy import ToyTaskSpec, finetune_toy, make_task_data, pretrain_toy

tasks = [ToyTaskSpec.from_dict({**t, "seed": 101 + i})
         for i, t in enumerate(DEFAULT_PIPELINE["tasks"])]
theta0 = pretrain_toy(tasks, steps=100, seed=1)
ft = finetune_toy(theta0, "A", make_schedule(theta0.manifest, 3000, 10), 3000, lr=0.075, seed=2)

# fixed probe inputs, never used for training
probe = make_task_data(tasks[0])["probe"][0]
print("probe shape:", probe.shape)

for name, ck in [("alpha=0.25", interpolate(theta0, ft, 0.25)), ("fine-tuned", ft)]:
    rep = drift_report(theta0, ck, probe)
    print(f"\n{name}: weight distortion {rep.weight_distortion:.3e}")
    for layer in rep.layers:
        print(f"  layer {layer['layer']}: cosine {layer['cosine']:.4f}  l2 {layer['l2']:.4f}")

# fit f_alpha ~ b0 f0 + b1 f1 per layer after Procrustes alignment;
# a perfectly linear path gives (1 - alpha, alpha) with R^2 = 1
rep = llfc_verify(theta0, ft, [0.25, 0.5, 0.75], probe)
print(f"\n{'alpha':>6} {'layer':>5} {'b0':>7} {'b1':>7} {'R2':>7}")
for r in rep.rows:
    print(f"{r['alpha']:>6.2f} {r['layer']:>5} {r['b0']:>7.3f} {r['b1']:>7.3f} {r['r2']:>7.3f}")
