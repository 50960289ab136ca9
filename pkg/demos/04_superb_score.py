"""
Aggregating benchmark metrics into one score
============================================

Each metric is mapped linearly so that the baseline sits at 0 and the
state of the art at 1 (lower-is-better metrics simply have sota < baseline).
Metrics are averaged per task, tasks are averaged, and the result is x1000.
"""

from wsmerge.superb import MetricTable, merge_anchors, superb_score, task_breakdown

anchors = [
    {"task": "PR", "metric": "PER", "direction": "lower_better", "baseline": 80.0, "sota": 3.0},
    {"task": "ER", "metric": "ACC", "direction": "higher_better", "baseline": 0.25, "sota": 0.80},
    {"task": "SD", "metric": "DER", "direction": "lower_better", "baseline": 20.0, "sota": 4.0},
    {"task": "SV", "metric": "EER", "direction": "lower_better", "baseline": 15.0, "sota": 3.0},
    {"task": "SV", "metric": "minDCF", "direction": "lower_better", "baseline": 1.0, "sota": 0.2},
]

measured = [
    {"task": "PR", "metric": "PER", "value": 5.0},
    {"task": "ER", "metric": "ACC", "value": 0.66},
    {"task": "SD", "metric": "DER", "value": 6.0},
    {"task": "SV", "metric": "EER", "value": 5.5},
    {"task": "SV", "metric": "minDCF", "value": 0.35},
]

table = merge_anchors(measured, anchors)
for task, phi in task_breakdown(table).items():
    print(f"{task}: {phi:.4f}")
print(f"score: {superb_score(table):.2f}")

# beating the sota pushes a task above 1; nothing is clamped
measured[1]["value"] = 0.85
print(f"with ER above sota: {superb_score(merge_anchors(measured, anchors)):.2f}")

# tables round trip through plain lists of dicts
again = MetricTable.from_list(table.to_list())
print("round trip equal:", again == table)
