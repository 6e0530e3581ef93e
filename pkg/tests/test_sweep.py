import math

import numpy as np
import pytest

from yopo.adversary import AdversaryConfig, PerturbationBall
from yopo.bounds import BoundConstants
from yopo.dataio import synth_gaussians
from yopo.dynsys import NetworkSpec
from yopo.numerics import make_rng
from yopo.sweep import SweepCell, SweepPlan, cell_seed, degradation, grid, run_cell, run_sweep, summarize
from yopo.trainer import EvalConfig, TrainConfig


def _norm(row):
    return {k: ("nan" if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items() if k != "seconds"}


@pytest.fixture(scope="module")
def setup():
    ds = synth_gaussians(make_rng(0, "sweep"), 300, 6, 2, 4.0)
    tr, ev = ds.split(200)
    spec = NetworkSpec((6, 8, 2), ("tanh", "linear"))
    base = TrainConfig(batch_size=20, gamma=0.3, adversary=AdversaryConfig(init="uniform", step_rule="normalized"),
                       ball=PerturbationBall("linf", 0.05), seed=3)
    plan = SweepPlan(spec, base, epochs=1.0, eval_cfg=EvalConfig(steps=5))
    return plan, tr, ev


def test_cell_seeds_depend_only_on_key():
    a = cell_seed(0, SweepCell(5, 2, 1))
    assert a == cell_seed(0, SweepCell(5, 2, 1))
    assert len({cell_seed(0, c) for c in grid([1, 5], [1, 2, 3], 2)}) == 12
    assert cell_seed(1, SweepCell(5, 2, 1)) != a


def test_single_cell(setup):
    plan, tr, ev = setup
    row = run_cell(plan, SweepCell(2, 3), tr.inputs, tr.labels, ev.inputs, ev.labels)
    assert row["status"] == "ok"
    assert row["backprops"] == 10 * 20 * 2
    assert row["alpha"] == pytest.approx(0.05 / 12)
    assert 0 <= row["robust_acc"] <= row["clean_acc"] <= 1
    assert math.isnan(row["error_hat"])


def test_order_independence(setup):
    plan, tr, ev = setup
    cells = grid([1, 2], [1, 3])
    a = run_sweep(plan, cells, tr.inputs, tr.labels, ev.inputs, ev.labels)
    b = run_sweep(plan, cells[::-1], tr.inputs, tr.labels, ev.inputs, ev.labels)
    key = lambda r: (r["m"], r["n"], r["replicate"])
    strip = _norm
    assert sorted(map(strip, a), key=key) == sorted(map(strip, b), key=key)
    # a cell does not care which other cells are in the grid
    solo = run_sweep(plan, [SweepCell(2, 3)], tr.inputs, tr.labels, ev.inputs, ev.labels)[0]
    assert strip(solo) == strip([r for r in a if key(r) == (2, 3, 0)][0])


def test_parallel_equals_serial(setup):
    plan, tr, ev = setup
    cells = grid([1], [1, 2])
    strip = lambda rows: [_norm(r) for r in rows]
    assert strip(run_sweep(plan, cells, tr.inputs, tr.labels, ev.inputs, ev.labels, jobs=2)) == \
        strip(run_sweep(plan, cells, tr.inputs, tr.labels, ev.inputs, ev.labels))


def test_failed_cell_is_recorded(setup):
    plan, tr, ev = setup
    bad = SweepPlan(plan.spec, plan.base.__class__(**{**plan.base.__dict__, "batch_size": 1000}), 1.0)
    row = run_cell(bad, SweepCell(1, 1), tr.inputs, tr.labels, ev.inputs, ev.labels)
    assert row["status"] == "failed" and "batch size" in row["message"]


def test_bound_columns(setup):
    plan, tr, ev = setup
    c = BoundConstants(K=1.0, T=2, mu=0.5, L_eta_eta=1.0, alpha=0.1)
    p2 = SweepPlan(plan.spec, plan.base, 0.5, eval_cfg=EvalConfig(steps=2), constants=c)
    row = run_cell(p2, SweepCell(1, 2), tr.inputs, tr.labels, ev.inputs, ev.labels)
    assert np.isfinite(row["error_hat"]) and row["error_hat_no_alpha_sq"] > row["error_hat"]
    assert np.isfinite(row["training_bound_rhs"])


def test_duplicate_cells_rejected(setup):
    plan, tr, ev = setup
    with pytest.raises(ValueError):
        run_sweep(plan, [SweepCell(1, 1), SweepCell(1, 1)], tr.inputs, tr.labels, ev.inputs, ev.labels)


def test_summary_and_degradation():
    rows = [{"m": 5, "n": n, "replicate": r, "status": "ok", "robust_acc": acc, "clean_acc": 0.9}
            for n, accs in ((1, (0.5, 0.6)), (5, (0.7, 0.7)), (20, (0.4, 0.5))) for r, acc in enumerate(accs)]
    rows.append({"m": 5, "n": 20, "replicate": 2, "status": "failed", "robust_acc": math.nan, "clean_acc": math.nan})
    s = summarize(rows)
    assert [r["n"] for r in s] == [1, 5, 20] and s[2]["replicates"] == 2
    best, last, gap = degradation(s, 5, 20)
    assert best == pytest.approx(0.7) and last == pytest.approx(0.45) and gap == pytest.approx(0.25)
    with pytest.raises(ValueError):
        degradation(s, 5, 10)
