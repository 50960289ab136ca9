import numpy as np
import pytest

from wsmerge.schedule import make_schedule
from wsmerge.tensor_store import Checkpoint, CheckpointError, dumps_checkpoint
from wsmerge.toy import (
    ToyModel,
    ToyTaskSpec,
    eval_toy,
    finetune_toy,
    grad_check,
    init_toy,
    make_task_data,
    pretrain_toy,
    task_accuracy,
)

from _helpers import numeric_grad


@pytest.fixture(scope="module")
def theta0(task_specs):
    return pretrain_toy(task_specs, 100, seed=1)


def test_task_labels_balanced_and_splits_disjoint():
    spec = ToyTaskSpec("q", 8, (1, 3), n_train=3000, n_val=3000, n_probe=300, seed=4)
    data = make_task_data(spec)
    counts = np.bincount(data["val"][1], minlength=4) / 3000
    np.testing.assert_allclose(counts, 0.25, atol=0.03)
    tr = {r.tobytes() for r in data["train"][0]}
    assert not tr & {r.tobytes() for r in data["probe"][0]}
    np.testing.assert_array_equal(spec.label(data["val"][0]), data["val"][1])

    am = ToyTaskSpec("m", 8, (0, 1, 2), rule="argmax")
    assert am.n_classes == 3
    assert am.label(np.array([[0.1, 2.0, -1, 0, 0, 0, 0, 0]]))[0] == 1


@pytest.mark.parametrize("kw", [{"coords": (9,)}, {"coords": ()}, {"coords": (1, 1)},
                                {"rule": "xor"}])
def test_task_spec_validation(kw):
    with pytest.raises(ValueError):
        ToyTaskSpec(**{"task_id": "t", "input_dim": 4, "coords": (0,), **kw})


def test_manifest_matches_params(task_specs):
    m = init_toy(task_specs, d_hidden=8, n_layers=2)
    ck = m.to_checkpoint()
    grouped = sorted(n for members in ck.manifest.values() for n in members)
    assert grouped == sorted(m.params)
    assert ck.layer_groups() == ["layer.0", "layer.1"]
    back = ToyModel.from_checkpoint(ck)
    assert back.tasks == m.tasks


def test_pretrain_deterministic(task_specs):
    a = pretrain_toy(task_specs, 20, seed=3)
    b = pretrain_toy(task_specs, 20, seed=3)
    c = pretrain_toy(task_specs, 20, seed=4)
    assert dumps_checkpoint(a) == dumps_checkpoint(b)
    assert dumps_checkpoint(a) != dumps_checkpoint(c)


def test_pretrain_rejects_zero_steps(task_specs):
    with pytest.raises(ValueError):
        pretrain_toy(task_specs, 0)


def test_pretrain_lowers_every_task_loss(task_specs):
    hist = []
    pretrain_toy(task_specs, 100, seed=1, history=hist)
    (_, before), (_, after) = hist
    for tid in before:
        assert after[tid] < before[tid]


def test_finetune_contract(theta0, task_specs):
    steps = 400
    sched = make_schedule(theta0.manifest, steps, 10)
    snaps = {}

    def cb(step, trainable, params):
        if step in (sched.warmup_steps, steps):
            snaps[step] = {k: v.copy() for k, v in params.items()}

    ft = finetune_toy(theta0, "A", sched, steps, 0.05, seed=2, callback=cb)
    for name in theta0.manifest["downsampling"]:
        assert ft.tensors[name].tobytes() == theta0.tensors[name].tobytes()
    boundary = snaps[sched.warmup_steps]
    for group, names in theta0.manifest.items():
        for name in names:
            same = boundary[name].tobytes() == theta0.tensors[name].tobytes()
            assert same == (group != "head"), name
    m0, m1 = ToyModel.from_checkpoint(theta0), ToyModel.from_checkpoint(ft)
    spec = task_specs[0]
    assert task_accuracy(m1, spec) > task_accuracy(m0, spec)


def test_finetune_errors(theta0, task_specs):
    sched = make_schedule(theta0.manifest, 10, 10)
    with pytest.raises(ValueError):
        finetune_toy(theta0, "A", sched, 11)
    with pytest.raises(KeyError):
        finetune_toy(theta0, "C", sched, 10)
    other = ToyTaskSpec("A", 16, (7,), seed=5)
    with pytest.raises(CheckpointError):
        finetune_toy(theta0, other, sched, 10)
    broken = theta0.copy()
    broken.tensors["head.b"] = np.zeros(3)
    with pytest.raises(CheckpointError, match="schema"):
        finetune_toy(broken, "A", sched, 10)


def test_frozen_group_update_is_masked(theta0):
    # huge lr: any leaked gradient would move the frozen tensors visibly
    sched = make_schedule(theta0.manifest, 20, 100)
    ft = finetune_toy(theta0, "B", sched, 20, lr=50.0, seed=0)
    for group, names in theta0.manifest.items():
        for name in names:
            same = ft.tensors[name].tobytes() == theta0.tensors[name].tobytes()
            assert same == (group != "head")


def test_grad_check_f64(theta0, task_specs):
    model = ToyModel.from_checkpoint(theta0)
    X, y = make_task_data(task_specs[1])["train"]
    assert grad_check(model, (X[:16], y[:16], "B"), 1e-5) < 1e-5


def test_grad_check_independent_oracle(task_specs):
    model = init_toy(task_specs, d_hidden=5, n_layers=2, seed=9)
    X, y = make_task_data(task_specs[0])["train"]
    X, y = X[:7], y[:7]
    _, g = model.loss_and_grads(X, y, "A")
    for name in ("front.w", "layer.1.b", "head.w"):
        num = numeric_grad(lambda: model.loss(X, y, "A"), model.params[name])
        np.testing.assert_allclose(g[name], num, rtol=1e-6, atol=1e-9)


def test_grad_check_zero_model():
    spec = ToyTaskSpec("z", 4, (0, 1))
    model = init_toy([spec], d_hidden=3, n_layers=2)
    for v in model.params.values():
        v[...] = 0.0
    X = np.zeros((5, 4))
    y = np.zeros(5, dtype=int)
    _, g = model.loss_and_grads(X, y, "z")
    for name, grad in g.items():
        if name != "head.b":
            assert not grad.any(), name
    errors = grad_check(model, (X, y, "z"), 1e-5, per_tensor=True)
    assert all(e == 0.0 for name, e in errors.items() if name != "head.b")
    assert errors["head.b"] < 1e-8


def test_grad_check_catches_wrong_backprop(task_specs, monkeypatch):
    model = init_toy(task_specs, d_hidden=4, n_layers=1, seed=2)
    X, y = make_task_data(task_specs[0])["train"]
    real = ToyModel.loss_and_grads

    def broken(self, *a):
        loss, g = real(self, *a)
        g["layer.0.w"] = g["layer.0.w"] * 1.01
        return loss, g

    monkeypatch.setattr(ToyModel, "loss_and_grads", broken)
    assert grad_check(model, (X[:8], y[:8], "A"), 1e-5) > 1e-3


def test_grad_check_rejects_bad_eps(task_specs):
    with pytest.raises(ValueError):
        grad_check(init_toy(task_specs, 4, 1), (np.zeros((1, 16)), np.zeros(1, int), "A"), 0)


def test_eval_chance_level():
    spec = ToyTaskSpec("c", 10, (2, 5), n_train=64, n_val=4000, seed=11)
    table = eval_toy(init_toy([spec], seed=3).to_checkpoint())
    assert abs(table.value("c") - 0.25) <= 0.05
    r = table.rows[0]
    assert (r.direction, r.baseline, r.sota) == ("higher_better", 0.25, 1.0)


def test_eval_deterministic_and_improves(theta0):
    assert eval_toy(theta0) == eval_toy(theta0)
    sched = make_schedule(theta0.manifest, 500, 10)
    ft = finetune_toy(theta0, "A", sched, 500, 0.05, seed=2)
    assert eval_toy(ft, ["A"]).value("A") > eval_toy(theta0, ["A"]).value("A")


def test_eval_schema_mismatch():
    with pytest.raises(CheckpointError):
        eval_toy(Checkpoint({"w": np.zeros(2)}, {"downsampling": [], "head": ["w"]}))
