"""Command-line entry point: ``yopo {train,attack,verify,sweep,bounds}``.

Exit codes: 0 ok, 1 a check or criterion failed, 2 usage or format error,
3 numeric error.  Logs go to stderr; machine-readable output goes to the
files under ``--out`` (or stdout where noted).
"""
import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bounds, dataio, diagnostics
from .adversary import AdversaryConfig, PerturbationBall, yopo_attack
from .dynsys import NetworkSpec, init_params, predict
from .errors import FormatError, NumericError, UsageError, YopoError
from .numerics import make_rng
from .sweep import SWEEP_FIELDS, SweepPlan, degradation, grid, run_sweep, summarize
from .trainer import EvalConfig, TrainConfig, evaluate, init_state, targets_for, train_step

log = logging.getLogger("yopo")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


def _ints(s):
    """Comma-separated integers; ``a-b`` expands to the inclusive range."""
    out = []
    try:
        for v in (v.strip() for v in s.split(",")):
            if not v:
                continue
            lo, sep, hi = v.partition("-")
            out.extend(range(int(lo), int(hi) + 1) if sep and lo else [int(v)])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers or ranges, got {s!r}") from None
    return out


def _strs(s):
    return [v.strip() for v in s.split(",") if v.strip()]


# shared flags

def add_model_flags(p):
    g = p.add_argument_group("model and data")
    g.add_argument("--config", type=Path, help="JSON document with network/train/data sections; flags override it")
    g.add_argument("--data", choices=("mnist", "synth", "idx"), help="dataset (default mnist)")
    g.add_argument("--data-dir", type=Path, help=f"MNIST subset directory (default ${dataio.DATA_DIR_ENV} or ./data)")
    g.add_argument("--images", type=Path, help="IDX images file for --data idx")
    g.add_argument("--labels", type=Path, help="IDX labels file for --data idx")
    g.add_argument("--train-size", type=int, help="leading samples used for training; the rest is the eval split")
    g.add_argument("--synth-size", type=int, help="synthetic samples (train + eval)")
    g.add_argument("--synth-dim", type=int)
    g.add_argument("--synth-classes", type=int)
    g.add_argument("--margin", type=float, help="synthetic class-mean separation")
    g.add_argument("--layers", type=_ints, help="layer widths, e.g. 784,128,128,10")
    g.add_argument("--activations", type=_strs, help="one name, or one per layer")
    g.add_argument("--loss", choices=("cross_entropy", "quadratic"))


def add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--m", type=int, help="full sweeps per step")
    g.add_argument("--n", type=int, help="frozen-costate updates per sweep")
    g.add_argument("--alpha", type=float, help="adversary step size (default eps / (4 n))")
    g.add_argument("--step-rule", choices=("gradient", "normalized"))
    g.add_argument("--init", choices=("uniform", "zero"))
    g.add_argument("--selection", choices=("last", "min_grad_norm"))
    g.add_argument("--attack-mode", choices=("yopo", "pgd"))
    g.add_argument("--gamma", type=float, help="SGD step size")
    g.add_argument("--gamma-rule", choices=("constant", "theory"))
    g.add_argument("--eps", type=float, help="perturbation radius")
    g.add_argument("--norm", choices=("linf", "l2"))
    g.add_argument("--batch", type=int, help="minibatch size")
    g.add_argument("--steps", type=int)
    g.add_argument("--epochs", type=float, help="alternative to --steps")
    g.add_argument("--seed", type=int)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--eval-steps", type=int, help="PGD steps of the evaluation attack (default 40)")


DEFAULT_DATA = {"kind": "mnist", "train_size": 8000, "synth_size": 1500, "synth_dim": 10, "synth_classes": 2,
                "margin": 4.0, "synth_train": 1000}


def _load_config_file(path):
    if path is None:
        return {}
    doc = dataio.read_json(path)
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object")
    unknown = set(doc) - {"network", "train", "data", "epochs"}
    if unknown:
        raise FormatError(f"{path}: unknown sections {sorted(unknown)}")
    return doc


def resolve_data(args, doc):
    d = {**DEFAULT_DATA, **doc.get("data", {})}
    for flag, key in (("data", "kind"), ("train_size", "train_size"), ("synth_size", "synth_size"),
                      ("synth_dim", "synth_dim"), ("synth_classes", "synth_classes"), ("margin", "margin")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    for flag in ("data_dir", "images", "labels"):
        v = getattr(args, flag, None)
        if v is not None:
            d[flag] = str(v)
    return d


def load_data(d, seed):
    """(train, eval) datasets for a resolved data section."""
    kind = d["kind"]
    if kind == "synth":
        ds = dataio.synth_gaussians(make_rng(seed, "synth"), d["synth_size"], d["synth_dim"], d["synth_classes"],
                                    d["margin"])
        n_train = min(d["synth_train"], d["synth_size"] - 1)
        return ds.split(n_train)
    if kind == "idx":
        if "images" not in d or "labels" not in d:
            raise UsageError("--data idx needs --images and --labels")
        ds = dataio.load_idx(d["images"], d["labels"])
    else:
        ds = dataio.load_mnist_subset(d.get("data_dir"))
    if d["train_size"] >= len(ds):
        raise UsageError(f"train size {d['train_size']} leaves no eval samples out of {len(ds)}")
    return ds.split(d["train_size"])


def resolve_spec(args, doc, data):
    net = dict(doc.get("network", {}))
    if getattr(args, "layers", None) is not None:
        net["layer_dims"] = args.layers
    if getattr(args, "activations", None) is not None:
        acts = args.activations
        net["activations"] = acts[0] if len(acts) == 1 else acts
    if getattr(args, "loss", None) is not None:
        net["loss_kind"] = args.loss
    if "layer_dims" not in net:
        if data["kind"] == "synth":
            net["layer_dims"] = [data["synth_dim"], 16, data["synth_classes"]]
        else:
            net["layer_dims"] = [784, 128, 128, 10]
    if "activations" not in net:
        T = len(net["layer_dims"]) - 1
        net["activations"] = ["tanh"] * (T - 1) + ["linear"]
    net.setdefault("loss_kind", "cross_entropy")
    return NetworkSpec.from_dict(net)


def resolve_train(args, doc):
    base = TrainConfig.from_dict(doc.get("train", {}))
    adv = base.adversary
    adv = replace(adv, **{k: getattr(args, f) for k, f in (("m", "m"), ("n", "n"), ("alpha", "alpha"),
                                                            ("step_rule", "step_rule"), ("init", "init"),
                                                            ("selection", "selection"))
                          if getattr(args, f, None) is not None})
    ball = base.ball
    if getattr(args, "eps", None) is not None or getattr(args, "norm", None) is not None:
        ball = PerturbationBall(args.norm or ball.norm, ball.radius if args.eps is None else args.eps)
    changes = {"adversary": adv, "ball": ball}
    for key, flag in (("gamma", "gamma"), ("gamma_rule", "gamma_rule"), ("batch_size", "batch"),
                      ("steps", "steps"), ("seed", "seed"), ("eval_every", "eval_every"),
                      ("attack_mode", "attack_mode")):
        v = getattr(args, flag, None)
        if v is not None:
            changes[key] = v
    return replace(base, **changes)


def _epochs(args, doc):
    if getattr(args, "epochs", None) is not None:
        return args.epochs
    return doc.get("epochs")


def _eval_cfg(args):
    steps = getattr(args, "eval_steps", None)
    return EvalConfig() if steps is None else EvalConfig(steps=steps)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# train

def cmd_train(args):
    doc = _load_config_file(args.config)
    data = resolve_data(args, doc)
    if args.resume is not None:
        # the sampler needs the dataset size, so read the header first for the seed
        cfg = dataio.load_checkpoint(args.resume).config
        if args.steps is not None:
            cfg = replace(cfg, steps=args.steps)
    else:
        cfg = resolve_train(args, doc)
    train_ds, eval_ds = load_data(data, cfg.seed)
    if args.resume is not None:
        state = dataio.load_checkpoint(args.resume, len(train_ds))
        state.config = cfg
        spec = state.spec
    else:
        spec = resolve_spec(args, doc, data)
        state = init_state(spec, init_params(spec, make_rng(cfg.seed, "init")), cfg, len(train_ds))
    if train_ds.dim != spec.input_dim:
        raise UsageError(f"data dimension {train_ds.dim} does not match network input {spec.input_dim}")
    epochs = _epochs(args, doc)
    total = cfg.steps
    if epochs is not None and args.steps is None:
        total = int(round(epochs * state.sampler.batches_per_epoch))
        state.config = replace(state.config, steps=total)
    if state.gamma is None:
        state.gamma = _theory_gamma(state, train_ds, total)
    out = _out_dir(args)
    metrics = out / "metrics.csv"
    ckpt = out / "checkpoint.ckpt"
    dataio.write_json(out / "config.json", {"network": spec.to_dict(), "train": state.config.to_dict(),
                                              "data": data, "epochs": epochs})
    if args.resume is None or not metrics.exists():
        dataio.write_metrics(metrics, [])
    y_train = targets_for(spec, train_ds.labels)
    y_eval = targets_for(spec, eval_ds.labels)
    evals = []
    log.info("training %s for %d steps (starting at %d)", "-".join(map(str, spec.layer_dims)), total, state.step)
    try:
        while state.step < total:
            rec = train_step(state, train_ds.inputs, y_train)
            dataio.write_metrics(metrics, [rec], append=True)
            if state.config.eval_every and state.step % state.config.eval_every == 0:
                ev = evaluate(spec, state.params, eval_ds.inputs, y_eval, state.config.ball, _eval_cfg(args))
                evals.append({"step": state.step, **ev.__dict__})
                log.info("step %d: eval clean %.4f robust %.4f", state.step, ev.clean_acc, ev.robust_acc)
            if args.checkpoint_every and state.step % args.checkpoint_every == 0:
                dataio.save_checkpoint(ckpt, state)
    finally:
        dataio.save_checkpoint(ckpt, state)
        if evals:
            dataio.write_rows(out / "evals.csv", evals, ["step", "clean_acc", "robust_acc", "robust_loss", "clean_loss"])
    if args.final_eval:
        ev = evaluate(spec, state.params, eval_ds.inputs, y_eval, state.config.ball, _eval_cfg(args))
        dataio.write_json(out / "eval.json", {"step": state.step, **ev.__dict__})
        log.info("final eval: clean %.4f robust %.4f", ev.clean_acc, ev.robust_acc)
    log.info("wrote %s and %s", metrics, ckpt)
    return EXIT_OK


def _theory_gamma(state, train_ds, N):
    rng = make_rng(state.config.seed, "theory-gamma")
    idx = rng.permutation(len(train_ds))[:min(len(train_ds), 4 * state.config.batch_size)]
    c, details = bounds.estimate_constants(state.spec, state.params, train_ds.inputs[idx],
                                           targets_for(state.spec, train_ds.labels[idx]), state.config.ball, rng,
                                           batch_size=state.config.batch_size)
    if not c.mu > 0:
        raise UsageError(f"theory step-size rule needs a positive concavity estimate, measured {details['mu_raw']:.3g}")
    gamma = bounds.theory_step_size(c, max(N, 1))
    log.info("theory step size: %.4g", gamma)
    return gamma


# attack

def cmd_attack(args):
    state = dataio.load_checkpoint(args.checkpoint)
    spec, cfg = state.spec, state.config
    doc = _load_config_file(args.config)
    data = resolve_data(args, doc)
    _, eval_ds = load_data(data, cfg.seed)
    ball = PerturbationBall(args.norm or cfg.ball.norm, cfg.ball.radius if args.eps is None else args.eps)
    y = targets_for(spec, eval_ds.labels)
    if args.limit:
        eval_ds = eval_ds.subset(slice(0, args.limit))
        y = y[:args.limit]
    if args.mode == "pgd":
        ev = evaluate(spec, state.params, eval_ds.inputs, y, ball, EvalConfig(steps=args.steps, step_frac=args.step_frac))
        report = {"mode": "pgd", "steps": args.steps, "step_frac": args.step_frac, **ev.__dict__}
    else:
        adv = AdversaryConfig(args.m, args.n, args.alpha, "zero", "last", args.step_rule)
        res = yopo_attack(spec, state.params, eval_ds.inputs, y, ball, adv)
        pred = np.argmax(predict(spec, state.params, eval_ds.inputs, res.eta_hat), axis=-1)
        clean = np.argmax(predict(spec, state.params, eval_ds.inputs), axis=-1)
        report = {"mode": "yopo", **adv.to_dict(), "clean_acc": float(np.mean(clean == eval_ds.labels)),
                  "robust_acc": float(np.mean(pred == eval_ds.labels)), "backprops_per_sample": res.backprops}
    report.update(eps=ball.radius, norm=ball.norm, samples=len(eval_ds))
    out = _out_dir(args)
    dataio.write_json(out / "attack.json", report)
    log.info("clean %.4f robust %.4f", report["clean_acc"], report["robust_acc"])
    return EXIT_OK


# verify

def _verdict(name, ok, detail=""):
    log.info("%s %s%s", "PASS" if ok else "FAIL", name, f": {detail}" if detail else "")
    return ok


def verify_gradients(args, out):
    rows = diagnostics.gradient_check_suite(args.nets, args.seed, tol=args.tol)
    dataio.write_rows(out / "gradients.csv", rows, list(rows[0]))
    bad = [r for r in rows if not r["passed"]]
    for r in bad:
        log.error("net %d (%s, %s) failed: %s", r["net"], r["dims"], r["activations"],
                  {k: v for k, v in r.items() if k.startswith("rel_err")})
    worst = max(max(r["rel_err_costate"], r["rel_err_theta"], r["rel_err_eta"]) for r in rows)
    dataio.write_json(out / "gradients.json", {"nets": len(rows), "failed": len(bad), "worst_rel_error": worst})
    return _verdict("gradients", not bad, f"{len(rows) - len(bad)}/{len(rows)} nets, worst rel. error {worst:.2e}")


def _instance(name, seed):
    if name == "linear":
        return diagnostics.linear_instance(seed)
    if name == "concave":
        spec, params, x0, y, _, _, _, _ = diagnostics.default_concave_instance()
        return spec, params, x0, y
    return diagnostics.tanh_instance(seed)


def _diag_cfg(args):
    return AdversaryConfig(args.m, args.n, args.alpha, "zero")


def verify_drift(args, out):
    spec, params, x0, y = _instance(args.instance, args.seed)
    ball = PerturbationBall(args.norm, args.eps)
    rep = diagnostics.measure_drift(spec, params, x0, y, ball, _diag_cfg(args))
    dataio.write_rows(out / "drift.csv", rep.rows(), ["j", "l", "drift", "alpha", "n"])
    dataio.write_json(out / "drift.json", rep.summary())
    ok = _verdict("drift zero at l=0", bool(np.all(rep.drift[:, 0] == 0)))
    if args.instance == "linear":
        ok &= _verdict("drift zero on linear instance", bool(np.all(rep.drift == 0)))
    ok &= _verdict("costate recursion", rep.gronwall_violations == 0,
                   f"{rep.gronwall_violations} violations in {rep.gronwall_checks} checks")
    log.info("conformance %.3f against C'=%.3g, fitted C'=%.3g", rep.conformance, rep.C_prime_closed, rep.C_prime_fit)
    return ok


def verify_oracle(args, out):
    spec, params, x0, y = _instance(args.instance, args.seed)
    ball = PerturbationBall(args.norm, args.eps)
    constants = None
    if args.instance == "concave":
        spec, params, x0, y, ball, mu, L, _ = diagnostics.default_concave_instance()
        cfg = _diag_cfg(args)
        K, _ = bounds.estimate_K(spec, params, x0[None], np.zeros((1, x0.size)), y[None])
        constants = bounds.BoundConstants(K=K, T=spec.depth, mu=mu, L_eta_eta=L, D_X=ball.diameter(x0.size),
                                          alpha=cfg.step_size(ball))
    rep = diagnostics.measure_oracle_error(spec, params, x0, y, ball, _diag_cfg(args), constants=constants)
    dataio.write_rows(out / "oracle.csv", rep.rows(), ["j", "l", "error", "drift", "K_drift"])
    dataio.write_json(out / "oracle.json", rep.summary())
    ok = _verdict("oracle error zero at l=0", bool(np.all(rep.error[:, 0] == 0)))
    ok &= _verdict("oracle error <= K * drift", rep.bound_holds, f"worst ratio {rep.worst_ratio:.3g}")
    if args.instance == "linear":
        ok &= _verdict("oracle error zero on linear instance", bool(np.all(rep.error == 0)))
    if constants is not None:
        log.info("sandwich: %d violations in %d checks (delta %.3g)", rep.sandwich_violations, rep.sandwich_checks,
                 rep.sandwich_delta)
    return ok


def verify_adversary_curve(args, out):
    spec, params, x0, y, ball, mu, L, _ = diagnostics.default_concave_instance()
    alpha = args.alpha if args.alpha is not None else 1.0 / L
    K, _ = bounds.estimate_K(spec, params, x0[None], np.zeros((1, x0.size)), y[None])
    c = bounds.BoundConstants(K=K, T=spec.depth, mu=mu, L_eta_eta=L, D_X=ball.diameter(x0.size), alpha=alpha)
    cells = [(m, 1) for m in range(1, args.max_m + 1)]
    budget = [(args.budget, 1), (1, args.budget)]
    rows = diagnostics.adversary_convergence_curve(spec, params, x0, y, ball, cells + budget, alpha, c)
    dataio.write_rows(out / "adversary_curve.csv", rows, ["m", "n", "measured", "bound", "violated"])
    slope, _, r2 = diagnostics.loglinear_fit([r["m"] for r in rows[:len(cells)]],
                                             [r["measured"] for r in rows[:len(cells)]])
    b1, bn = rows[len(cells)]["measured"], rows[len(cells) + 1]["measured"]
    dataio.write_json(out / "adversary_curve.json", {"r2": r2, "slope": slope, "mu": mu, "L_eta_eta": L,
                                                     "budget": args.budget, "budget_n1": b1, "budget_nmax": bn,
                                                     "violations": sum(bool(r["violated"]) for r in rows)})
    ok = _verdict("geometric decay in m", r2 >= 0.9 and slope < 0, f"R^2 {r2:.4f}, slope {slope:.3f}")
    ok &= _verdict("budget: n=budget no better than n=1", bn >= b1, f"{bn:.3g} vs {b1:.3g}")
    return ok


VERIFY_SUITES = {"gradients": verify_gradients, "drift": verify_drift, "oracle": verify_oracle,
                 "adversary-curve": verify_adversary_curve}


def cmd_verify(args):
    out = _out_dir(args)
    ok = VERIFY_SUITES[args.suite](args, out)
    return EXIT_OK if ok else EXIT_FAILED


# sweep

def cmd_sweep(args):
    doc = _load_config_file(args.config)
    data = resolve_data(args, doc)
    spec = resolve_spec(args, doc, data)
    cfg = resolve_train(args, doc)
    train_ds, eval_ds = load_data(data, cfg.seed)
    epochs = _epochs(args, doc) or 1.0
    constants = bounds.BoundConstants.from_dict(dataio.read_json(args.constants)) if args.constants else None
    plan = SweepPlan(spec, cfg, epochs, cfg.adversary.alpha, _eval_cfg(args), constants)
    cells = grid(args.ms, args.ns, args.replicates)
    out = _out_dir(args)
    log.info("sweep: %d cells, %g epochs each, %d jobs", len(cells), epochs, args.jobs)

    def progress(row):
        log.info("cell m=%d n=%d rep=%d: %s robust %.4f clean %.4f (%.1fs)", row["m"], row["n"], row["replicate"],
                 row["status"], row["robust_acc"], row["clean_acc"], row["seconds"])

    rows = run_sweep(plan, cells, train_ds.inputs, train_ds.labels, eval_ds.inputs, eval_ds.labels,
                     jobs=args.jobs, on_row=progress)
    dataio.write_rows(out / "sweep.csv", rows, SWEEP_FIELDS)
    summary = summarize(rows)
    dataio.write_rows(out / "summary.csv", summary, ["m", "n", "replicates", "robust_acc", "clean_acc"])
    for m in args.ms:
        try:
            best, last, gap = degradation(summary, m, max(args.ns))
            log.info("m=%d: best mean robust acc %.4f, at n=%d %.4f (gap %.4f)", m, best, max(args.ns), last, gap)
        except ValueError:
            pass
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        log.error("cell m=%d n=%d rep=%d failed: %s", r["m"], r["n"], r["replicate"], r["message"])
    return EXIT_FAILED if failed else EXIT_OK


# bounds

def _estimate_for_bounds(args):
    if args.instance is not None:
        spec, params, x0, y = _instance(args.instance, args.seed)
        if args.instance == "concave":
            spec, params, x0, y, ball, _, _, _ = diagnostics.default_concave_instance()
        else:
            ball = PerturbationBall(args.norm, args.eps)
        x, yy = x0[None], y[None] if np.ndim(y) else np.atleast_1d(y)
        alpha = args.alpha if args.alpha is not None else 0.0
        return bounds.estimate_constants(spec, params, x, yy, ball, make_rng(args.seed, "bounds"), probes=args.probes,
                                         alpha=alpha, batch_size=1)
    if args.checkpoint is None:
        raise UsageError("--estimate needs --checkpoint or --instance")
    state = dataio.load_checkpoint(args.checkpoint)
    doc = _load_config_file(args.config)
    data = resolve_data(args, doc)
    train_ds, _ = load_data(data, state.config.seed)
    rng = make_rng(args.seed, "bounds")
    idx = rng.permutation(len(train_ds))[:min(len(train_ds), args.sample)]
    ball = state.config.ball
    alpha = args.alpha if args.alpha is not None else state.config.adversary.step_size(ball)
    return bounds.estimate_constants(state.spec, state.params, train_ds.inputs[idx],
                                     targets_for(state.spec, train_ds.labels[idx]), ball, rng, probes=args.probes,
                                     alpha=alpha, batch_size=state.config.batch_size)


def cmd_bounds(args):
    details = {}
    if args.constants is not None:
        c = bounds.BoundConstants.from_dict(dataio.read_json(args.constants))
        c.validate()
    elif args.estimate:
        c, details = _estimate_for_bounds(args)
        log.info("estimated mu %.4g (raw %.4g), L_eta_eta %.4g, K %.4g", c.mu, details["mu_raw"], c.L_eta_eta, c.K)
    else:
        raise UsageError("give --constants FILE or --estimate")
    inc = not args.no_alpha_sq
    report = {"constants": c.to_dict(), "details": details, "include_alpha_sq": inc, "N": args.N}
    rows = []
    try:
        c.validate()
    except UsageError as exc:
        report.update(valid=False, message=str(exc), training_bound_rhs=math.inf, finite_rhs=False)
        _emit_bounds(args, report, rows)
        log.error("constants cannot feed the bounds: %s", exc)
        return EXIT_FAILED
    for m in args.ms:
        for n in args.ns:
            e1, e2 = bounds.error_terms(c, m, n, inc)
            row = {"m": m, "n": n, "error": e1 + e2, "contraction_term": e1, "frozen_term": e2,
                   "error_no_alpha_sq": bounds.error_term(c, m, n, False),
                   "training_bound_rhs": bounds.training_bound_rhs(c, m, n, args.N, inc)}
            row["crossover_condition"] = bounds.optimal_n_condition(c, m, n, inc) if c.mu < c.L_eta_eta else math.nan
            rows.append(row)
    convex = all(bounds.second_difference_in_n(c, m, n, inc) >= -1e-12 for m in args.ms for n in args.ns if n >= 2)
    cross = {str(m): bounds.crossover_n(c, m, include_alpha_sq=inc) for m in args.ms} if c.mu < c.L_eta_eta else {}
    rhs = [r["training_bound_rhs"] for r in rows]
    finite = all(math.isfinite(v) for v in rhs)
    report.update(valid=True, crossover_n=cross, convex_in_n=convex, finite_rhs=finite,
                  training_bound_rhs=min(rhs) if rhs else math.nan, smoothness_L=bounds.smoothness_L(c))
    _emit_bounds(args, report, rows)
    log.info("crossover n*: %s; convex in n: %s; finite rhs: %s", cross, convex, finite)
    return EXIT_OK if finite and convex else EXIT_FAILED


BOUND_FIELDS = ["m", "n", "error", "contraction_term", "frozen_term", "error_no_alpha_sq", "training_bound_rhs",
                "crossover_condition"]


def _emit_bounds(args, report, rows):
    if args.out is None:
        w = sys.stdout
        w.write(",".join(BOUND_FIELDS) + "\n")
        for r in rows:
            w.write(",".join(repr(float(r[k])) if k not in ("m", "n") else str(r[k]) for k in BOUND_FIELDS) + "\n")
        return
    out = _out_dir(args)
    dataio.write_rows(out / "bounds.csv", rows, BOUND_FIELDS)
    dataio.write_json(out / "bounds.json", report)


# parser

def build_parser():
    ap = argparse.ArgumentParser(prog="yopo", description="YOPO-m-n adversarial training and its diagnostics.")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    ap.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model, write metrics CSV and a checkpoint")
    add_model_flags(p)
    add_train_flags(p)
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--final-eval", action="store_true", help="PGD evaluation on the eval split at the end")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack a checkpoint on the eval split")
    add_model_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=("pgd", "yopo"), default="pgd")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--step-frac", type=float, default=0.1, help="PGD step as a fraction of eps")
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--alpha", type=float)
    p.add_argument("--step-rule", choices=("gradient", "normalized"), default="normalized")
    p.add_argument("--eps", type=float)
    p.add_argument("--norm", choices=("linf", "l2"))
    p.add_argument("--limit", type=int, default=0, help="attack only the first N eval samples")
    p.add_argument("--out", default="attack")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify", help="run a diagnostic suite; exit 0 iff its hard checks pass")
    p.add_argument("suite", choices=sorted(VERIFY_SUITES))
    p.add_argument("--instance", choices=("tanh", "linear", "concave"), default="tanh")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nets", type=int, default=50, help="random nets for the gradients suite")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--norm", choices=("linf", "l2"), default="linf")
    p.add_argument("--max-m", type=int, default=12)
    p.add_argument("--budget", type=int, default=20, help="m*n budget of the paired comparison")
    p.add_argument("--out", default="verify")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="train and evaluate one model per (m, n, replicate) cell")
    add_model_flags(p)
    add_train_flags(p)
    p.add_argument("--ms", type=_ints, default=[5])
    p.add_argument("--ns", type=_ints, default=[1, 2, 5, 10, 20])
    p.add_argument("--replicates", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--constants", type=Path, help="BoundConstants JSON for the error/rate columns")
    p.add_argument("--out", default="sweep")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bounds", help="evaluate the error term, the rate bound and the crossover n")
    add_model_flags(p)
    p.add_argument("--constants", type=Path, help="BoundConstants JSON")
    p.add_argument("--estimate", action="store_true", help="estimate constants from --checkpoint or --instance")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--instance", choices=("tanh", "linear", "concave"))
    p.add_argument("--sample", type=int, default=64, help="data samples used for estimation")
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--alpha", type=float)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--norm", choices=("linf", "l2"), default="linf")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ms", type=_ints, default=[5])
    p.add_argument("--ns", type=_ints, default=list(range(1, 21)))
    p.add_argument("--N", type=int, default=1000, help="training steps in the rate bound")
    p.add_argument("--no-alpha-sq", action="store_true", help="drop the alpha^2 factor of the frozen-costate term")
    p.add_argument("--out", default=None, help="output directory (default: CSV table on stdout)")
    p.set_defaults(func=cmd_bounds)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    except (UsageError, FormatError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except YopoError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, TypeError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
