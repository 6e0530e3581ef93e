"""Grid sweeps: one training run plus a PGD evaluation per (m, n, replicate) cell.

Each cell derives its own seed from (base seed, m, n, replicate), so results do
not depend on execution order or on which other cells are in the grid.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
import logging
import math
import time
import zlib

import numpy as np

from .adversary import AdversaryConfig
from .bounds import error_term, training_bound_rhs
from .dynsys import init_params
from .errors import YopoError
from .numerics import make_rng
from .trainer import EvalConfig, evaluate, init_state, targets_for, train

log = logging.getLogger(__name__)

SWEEP_FIELDS = ("m", "n", "replicate", "seed", "alpha", "robust_acc", "clean_acc", "robust_loss", "clean_loss",
                "final_train_robust_loss", "backprops", "error_hat", "error_hat_no_alpha_sq", "training_bound_rhs",
                "seconds", "status", "message")


@dataclass(frozen=True)
class SweepCell:
    m: int
    n: int
    replicate: int = 0

    @property
    def key(self):
        return (self.m, self.n, self.replicate)


def cell_seed(base_seed, cell):
    label = f"cell:{cell.m}:{cell.n}:{cell.replicate}".encode()
    return int(np.random.SeedSequence(base_seed, spawn_key=(zlib.crc32(label),)).generate_state(1)[0])


def grid(ms, ns, replicates=1):
    return [SweepCell(m, n, r) for m in ms for n in ns for r in range(replicates)]


@dataclass(frozen=True)
class SweepPlan:
    """Everything a cell needs besides its (m, n, replicate) key."""

    spec: object
    base: object  # TrainConfig; its adversary m, n and seed are overridden per cell
    epochs: float = 1.0
    alpha: float = None  # None: per-cell default radius / (4 n)
    eval_cfg: EvalConfig = EvalConfig()
    constants: object = None  # BoundConstants for the error / rate columns


def run_cell(plan, cell, x_train, y_train, x_eval, y_eval):
    t0 = time.perf_counter()
    seed = cell_seed(plan.base.seed, cell)
    adv = replace(plan.base.adversary, m=cell.m, n=cell.n, alpha=plan.alpha)
    cfg = replace(plan.base, adversary=adv, seed=seed)
    row = {"m": cell.m, "n": cell.n, "replicate": cell.replicate, "seed": seed,
           "alpha": adv.step_size(cfg.ball)}
    nan = math.nan
    try:
        params = init_params(plan.spec, make_rng(seed, "init"))
        state = init_state(plan.spec, params, cfg, len(x_train))
        steps = int(round(plan.epochs * state.sampler.batches_per_epoch))
        yt = targets_for(plan.spec, y_train)
        records = train(state, x_train, yt, steps)
        ev = evaluate(plan.spec, state.params, x_eval, targets_for(plan.spec, y_eval), cfg.ball, plan.eval_cfg)
        tail = records[-max(1, len(records) // 10):]
        row.update(robust_acc=ev.robust_acc, clean_acc=ev.clean_acc, robust_loss=ev.robust_loss,
                   clean_loss=ev.clean_loss,
                   final_train_robust_loss=float(np.mean([r.robust_loss for r in tail])) if records else nan,
                   backprops=state.backprops, status="ok", message="")
    except (YopoError, ValueError, ArithmeticError) as exc:
        row.update(robust_acc=nan, clean_acc=nan, robust_loss=nan, clean_loss=nan, final_train_robust_loss=nan,
                   backprops=0, status="failed", message=f"{type(exc).__name__}: {exc}")
    row.update(_bound_columns(plan, cell, len(x_train)))
    row["seconds"] = time.perf_counter() - t0
    return row


def _bound_columns(plan, cell, n_train):
    out = {"error_hat": math.nan, "error_hat_no_alpha_sq": math.nan, "training_bound_rhs": math.nan}
    c = plan.constants
    if c is None:
        return out
    try:
        out["error_hat"] = error_term(c, cell.m, cell.n)
        out["error_hat_no_alpha_sq"] = error_term(c, cell.m, cell.n, include_alpha_sq=False)
        steps = max(1, int(round(plan.epochs * (n_train // plan.base.batch_size))))
        out["training_bound_rhs"] = training_bound_rhs(c, cell.m, cell.n, steps)
    except YopoError as exc:
        log.warning("bound columns unavailable for cell %s: %s", cell.key, exc)
    return out


def _run_one(args):
    return run_cell(*args)


def run_sweep(plan, cells, x_train, y_train, x_eval, y_eval, jobs=1, on_row=None):
    """Rows in the order of ``cells`` regardless of completion order."""
    keys = [c.key for c in cells]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate sweep cells")
    work = [(plan, c, x_train, y_train, x_eval, y_eval) for c in cells]
    results = {}
    if jobs <= 1:
        for c, w in zip(cells, work):
            results[c.key] = _run_one(w)
            if on_row:
                on_row(results[c.key])
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for c, row in zip(cells, pool.map(_run_one, work)):
                results[c.key] = row
                if on_row:
                    on_row(row)
    return [results[k] for k in keys]


def summarize(rows):
    """Mean robust/clean accuracy per (m, n) over replicates, sorted by (m, n)."""
    groups = {}
    for r in rows:
        if r["status"] == "ok":
            groups.setdefault((r["m"], r["n"]), []).append(r)
    out = []
    for (m, n), rs in sorted(groups.items()):
        out.append({"m": m, "n": n, "replicates": len(rs),
                    "robust_acc": float(np.mean([r["robust_acc"] for r in rs])),
                    "clean_acc": float(np.mean([r["clean_acc"] for r in rs]))})
    return out


def degradation(summary_rows, m, n_last):
    """(best mean robust acc over n, mean robust acc at n_last, gap) for a fixed m."""
    rs = {r["n"]: r["robust_acc"] for r in summary_rows if r["m"] == m}
    if n_last not in rs:
        raise ValueError(f"no cell for m={m}, n={n_last}")
    best = max(rs.values())
    return best, rs[n_last], best - rs[n_last]
