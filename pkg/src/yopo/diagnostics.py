"""Desk-scale measurements of the frozen-costate error structure.

All measurements are per sample with unscaled costates (scale 1).
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .adversary import AdversaryConfig, PerturbationBall, yopo_attack
from .bounds import (BoundConstants, adversary_bound, closed_form_C_prime, estimate_K, layer_jacobian,
                     oracle_delta)
from .dynsys import NetworkSpec, Params, adversarial_objective, forward, init_params, layer_map, loss, random_spec, random_target
from .hamiltonian import backward, grad_eta, grad_theta, state_gradients, sweep
from .numerics import central_diff, make_rng, rel_error

ROUNDING_SLACK = 1e-12


@dataclass
class DriftReport:
    drift: np.ndarray  # (m, n): ||p1(eta^{j,0}) - p1(eta^{j,l})||
    alpha: float
    m: int
    n: int
    max_drift: float
    slope_ell: float  # least-squares slope of drift against l
    C_prime_fit: float  # max drift / (alpha (n-1))
    K_hat: float
    C_prime_closed: float
    conformance: float  # fraction of cells with drift <= C'_closed alpha (n-1)
    gronwall_checks: int = 0
    gronwall_violations: int = 0

    def rows(self):
        return [{"j": j, "l": l, "drift": float(self.drift[j, l]), "alpha": self.alpha, "n": self.n}
                for j in range(self.m) for l in range(self.n)]

    def summary(self):
        return {k: v for k, v in self.__dict__.items() if k != "drift"}


@dataclass
class OracleReport:
    error: np.ndarray  # (m, n): ||frozen direction - fresh gradient||
    drift: np.ndarray
    K_hat: float
    alpha: float
    m: int
    n: int
    C_fit: float  # max error / (alpha (n-1))
    bound_holds: bool  # error <= K_hat * drift at every iterate
    worst_ratio: float  # max error / (K_hat drift) over cells with nonzero drift
    sandwich_delta: float = float("nan")
    sandwich_checks: int = 0
    sandwich_violations: int = 0
    max_violation: float = 0.0
    sandwich_delta_fit: float = float("nan")
    sandwich_violations_fit: int = 0

    def rows(self):
        return [{"j": j, "l": l, "error": float(self.error[j, l]), "drift": float(self.drift[j, l]),
                 "K_drift": float(self.K_hat * self.drift[j, l])}
                for j in range(self.m) for l in range(self.n)]

    def summary(self):
        return {k: v for k, v in self.__dict__.items() if k not in ("error", "drift")}


def _instrumented(spec, params, x0, y, ball, cfg, rng, eta0):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1:
        raise ValueError("diagnostics work on one sample at a time")
    if rng is None:
        rng = make_rng(0, "diagnostics")
    return yopo_attack(spec, params, x0, y, ball, cfg, rng=rng, eta0=eta0, instrument=True, keep_iterates=True)


def _K_over_iterates(spec, params, x0, y, iterates):
    etas = np.array(iterates)
    xs = np.broadcast_to(x0, etas.shape)
    ys = np.array([y] * len(iterates))
    return estimate_K(spec, params, xs, etas, ys)[0]


def _gronwall(spec, params, x0, y, res, cfg, K_floor):
    """Check the per-layer costate-difference recursion on every (j, l) cell.

    K is the larger of ``K_floor`` and the Jacobian secants measured on the
    very pairs being compared, and at least 1 (the costate magnitude bound
    K + K^2 + ... <= (T-t+1) K^{T-t+1} needs K >= 1).
    """
    T = spec.depth
    checks = violations = 0
    K_used = max(K_floor, 1.0)
    cells = []
    for j in range(cfg.m):
        base = res.iterates[j * cfg.n]
        tr0, co0 = sweep(spec, params, x0, base, y)
        for ell in range(1, cfg.n):
            trl, col = sweep(spec, params, x0, res.iterates[j * cfg.n + ell], y)
            for t in range(1, T):
                dx = np.linalg.norm(tr0.states[t] - trl.states[t])
                if dx > 0:
                    J0 = layer_jacobian(spec, params, t, tr0.pre[t])
                    Jl = layer_jacobian(spec, params, t, trl.pre[t])
                    K_used = max(K_used, float(np.linalg.norm(J0 - Jl, 2)) / dx)
            cells.append((tr0, co0, trl, col))
    for tr0, co0, trl, col in cells:
        K = K_used
        dT = np.linalg.norm(co0.p(T) - col.p(T))
        checks += 1
        if dT > K * np.linalg.norm(tr0.states[T] - trl.states[T]) * (1 + ROUNDING_SLACK) + ROUNDING_SLACK:
            violations += 1
        for t in range(1, T):
            lhs = np.linalg.norm(co0.p(t) - col.p(t))
            rhs = ((K ** (T - t + 1) * (T - t) + K) * np.linalg.norm(tr0.states[t] - trl.states[t])
                   + K * np.linalg.norm(co0.p(t + 1) - col.p(t + 1)))
            checks += 1
            if lhs > rhs * (1 + ROUNDING_SLACK) + ROUNDING_SLACK:
                violations += 1
    return checks, violations, K_used


def measure_drift(spec, params, x0, y, ball, cfg, rng=None, eta0=None, gronwall=True):
    res = _instrumented(spec, params, x0, y, ball, cfg, rng, eta0)
    alpha = cfg.step_size(ball)
    drift = res.drift
    ell = np.broadcast_to(np.arange(cfg.n), drift.shape)
    denom = float(np.sum(ell * ell))
    slope = float(np.sum(ell * drift) / denom) if denom > 0 else 0.0
    K = _K_over_iterates(spec, params, np.asarray(x0, dtype=np.float64), y, res.iterates)
    checks = violations = 0
    if gronwall and cfg.n > 1:
        checks, violations, K = _gronwall(spec, params, np.asarray(x0, dtype=np.float64), y, res, cfg, K)
    C_closed = closed_form_C_prime(max(K, 1.0), spec.depth)
    budget = C_closed * alpha * (cfg.n - 1)
    conformance = float(np.mean(drift <= budget * (1 + ROUNDING_SLACK)))
    fit = float(np.max(drift) / (alpha * (cfg.n - 1))) if cfg.n > 1 else 0.0
    return DriftReport(drift, alpha, cfg.m, cfg.n, float(np.max(drift)), slope, fit, K, C_closed, conformance,
                       checks, violations)


def drift_alpha_sweep(spec, params, x0, y, ball, cfg, alphas, eta0=None):
    """Max drift for each alpha (same start), and the ratios between consecutive alphas."""
    out = []
    for a in alphas:
        c = AdversaryConfig(cfg.m, cfg.n, a, "zero" if eta0 is None else cfg.init, cfg.selection, cfg.step_rule)
        out.append(measure_drift(spec, params, x0, y, ball, c, eta0=eta0, gronwall=False).max_drift)
    ratios = [out[k + 1] / out[k] if out[k] > 0 else math.nan for k in range(len(out) - 1)]
    return out, ratios


def _neg_objective(spec, params, x0, y):
    return lambda eta: -float(adversarial_objective(spec, params, x0, y, eta))


def measure_oracle_error(spec, params, x0, y, ball, cfg, rng=None, eta0=None, constants=None,
                         sandwich_points=8):
    """Frozen-vs-fresh gradient error at every inner iterate, plus the oracle sandwich check.

    The sandwich is checked on f = -A (convex side) with the frozen direction
    g(y) = grad_eta(y, frozen p1) as the oracle output:
    (mu/4)|x-y|^2 - delta <= f(x) - f(y) - <g(y), x-y> <= L_eta_eta |x-y|^2 + delta,
    i.e. a (delta, mu/2, 2 L_eta_eta) oracle with delta allowed on both sides.
    """
    rng = rng if rng is not None else make_rng(0, "oracle")
    x0 = np.asarray(x0, dtype=np.float64)
    res = _instrumented(spec, params, x0, y, ball, cfg, rng, eta0)
    alpha = cfg.step_size(ball)
    K = _K_over_iterates(spec, params, x0, y, res.iterates)
    err, drift = res.oracle_error, res.drift
    bound = K * drift
    holds = bool(np.all(err <= bound * (1 + ROUNDING_SLACK) + ROUNDING_SLACK))
    nz = drift > 0
    worst = float(np.max(err[nz] / bound[nz])) if np.any(nz) else 0.0
    fit = float(np.max(err) / (alpha * (cfg.n - 1))) if cfg.n > 1 else 0.0
    rep = OracleReport(err, drift, K, alpha, cfg.m, cfg.n, fit, holds, worst)
    if constants is not None:
        f = _neg_objective(spec, params, x0, y)
        delta = oracle_delta(constants, cfg.n)
        c_fit = BoundConstants(**{**constants.to_dict(), "C": fit, "provenance": {}})
        delta_fit = oracle_delta(c_fit, cfg.n)
        checks = viol = viol_fit = 0
        worst_v = 0.0
        for j in range(cfg.m):
            _, co = sweep(spec, params, x0, res.iterates[j * cfg.n], y)
            for ell in range(cfg.n):
                yv = res.iterates[j * cfg.n + ell]
                g = grad_eta(spec, params, x0, yv, co.p1)
                fy = f(yv)
                for _ in range(sandwich_points):
                    xv = ball.sample(rng, yv.shape)
                    r2 = float(np.sum((xv - yv) ** 2))
                    mid = f(xv) - fy - float(g @ (xv - yv))
                    lo = constants.mu / 4.0 * r2
                    hi = constants.L_eta_eta * r2
                    v = max(lo - delta - mid, mid - hi - delta, 0.0)
                    vf = max(lo - delta_fit - mid, mid - hi - delta_fit, 0.0)
                    checks += 1
                    viol += v > ROUNDING_SLACK
                    viol_fit += vf > ROUNDING_SLACK
                    worst_v = max(worst_v, v)
        rep.sandwich_delta, rep.sandwich_checks, rep.sandwich_violations = delta, checks, int(viol)
        rep.max_violation, rep.sandwich_delta_fit, rep.sandwich_violations_fit = worst_v, delta_fit, int(viol_fit)
    return rep


def adversary_convergence_curve(spec, params, x0, y, ball, grid, alpha, constants=None, eta0=None,
                                include_alpha_sq=True):
    """Min fresh ||grad_eta A||^2 over the iterates of each YOPO-(m, n) cell, with the bound if constants are given."""
    x0 = np.asarray(x0, dtype=np.float64)
    if not grid:
        raise ValueError("empty (m, n) grid")
    if eta0 is None:
        eta0 = np.zeros_like(x0)
    rows = []
    for m, n in grid:
        cfg = AdversaryConfig(m, n, alpha, "zero", "min_grad_norm")
        res = yopo_attack(spec, params, x0, y, ball, cfg, eta0=eta0)
        measured = float(np.min(res.fresh_grad_norms) ** 2)
        row = {"m": m, "n": n, "measured": measured}
        if constants is not None:
            b = adversary_bound(constants, m, n, include_alpha_sq)
            row["bound"] = b
            row["violated"] = measured > b
        rows.append(row)
    return rows


def loglinear_fit(xs, ys):
    """Least-squares fit of log(y) against x; returns (slope, intercept, R^2)."""
    xs = np.asarray(xs, dtype=np.float64)
    ly = np.log(np.asarray(ys, dtype=np.float64))
    A = np.vstack([xs, np.ones_like(xs)]).T
    coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
    pred = A @ coef
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), float(coef[1]), r2


# constructed strongly concave instance

def concave_instance(A, x0, target, radius):
    """Linear one-layer network x_T = A (x0 + eta) with the concave loss -0.5 ||x_T - target||^2.

    The adversarial objective is an exact quadratic with Hessian -A^T A, so
    mu = lambda_min(A^T A) and L_eta_eta = lambda_max(A^T A).
    Returns (spec, params, x0, target, ball, mu, L).
    """
    A = np.asarray(A, dtype=np.float64)
    spec = NetworkSpec((A.shape[1], A.shape[0]), ("linear",), "neg_quadratic")
    params = Params([A.copy()], [np.zeros(A.shape[0])])
    ev = np.linalg.eigvalsh(A.T @ A)
    return spec, params, np.asarray(x0, dtype=np.float64), np.asarray(target, dtype=np.float64), \
        PerturbationBall("l2", radius), float(ev[0]), float(ev[-1])


def default_concave_instance():
    """2-d instance with mu = 1, L_eta_eta = 4 and an interior maximizer."""
    A = np.diag([2.0, 1.0])
    x0 = np.array([0.5, -0.25])
    # maximizer eta* solves A(x0 + eta) = target
    eta_star = np.array([0.3, 0.2])
    target = A @ (x0 + eta_star)
    return concave_instance(A, x0, target, radius=1.0) + (eta_star,)


def tanh_instance(seed=0, dims=(4, 6, 5, 3), loss_kind="cross_entropy", weight_scale=2.0):
    """A small random tanh network and one sample, used by drift/oracle checks.

    ``weight_scale`` multiplies the default initialization; the default 2
    makes the costate move visibly with eta.
    """
    rng = make_rng(seed, "tanh-instance")
    spec = NetworkSpec(dims, "tanh", loss_kind)
    params = init_params(spec, rng)
    # scale up so the costate actually moves with eta
    params = Params([weight_scale * W for W in params.weights], [rng.normal(scale=0.3, size=b.shape) for b in params.biases])
    x0 = rng.uniform(0, 1, size=dims[0])
    y = random_target(spec, rng)
    return spec, params, x0, y


def linear_instance(seed=0, dims=(4, 5, 3)):
    """All-linear network with a linear loss: the costate does not depend on eta."""
    rng = make_rng(seed, "linear-instance")
    spec = NetworkSpec(dims, "linear", "linear")
    params = init_params(spec, rng)
    x0 = rng.uniform(0, 1, size=dims[0])
    c = rng.normal(size=dims[-1])
    return spec, params, x0, c


# gradient checks

def _loss_from_state(spec, params, t, xt, y):
    """Phi(x_T) + sum_{s >= t} R_s(x_s, theta_s) as a function of the state x_t."""
    x = xt
    total = 0.0
    for s in range(t, spec.depth):
        total += float(spec.reg_weights[s] * 0.5 * params.layer_flat(s) @ params.layer_flat(s))
        total += float(spec.state_reg_weights[s] * 0.5 * x @ x)
        x = layer_map(spec, params, s, x)
    return total + float(loss(spec, x, y))


def check_gradients(spec, params, x0, y, eta, h=None):
    """Max relative errors of costate-derived gradients against central differences."""
    out = {}
    traj, co = sweep(spec, params, x0, eta, y)
    worst = 0.0
    for t in range(1, spec.depth + 1):
        fd = central_diff(lambda v: _loss_from_state(spec, params, t, v, y), traj.states[t], h)
        worst = max(worst, rel_error(-co.p(t), fd))
    out["costate"] = worst
    theta = params.flat()
    f_theta = lambda th: float(adversarial_objective(spec, Params.from_flat(spec, th), x0, y, eta))
    out["theta"] = rel_error(grad_theta(spec, params, traj, co).flat(), central_diff(f_theta, theta, h))
    f_eta = lambda e: float(adversarial_objective(spec, params, x0, y, e))
    out["eta"] = rel_error(-grad_eta(spec, params, x0, eta, co.p1), central_diff(f_eta, eta, h))
    return out


def gradient_check_suite(n_nets=50, seed=0, max_depth=4, max_dim=8, tol=1e-5, with_regularizers=True):
    """Random small nets: -p_t, grad_theta and fresh grad_eta against finite differences."""
    rows = []
    for k in range(n_nets):
        rng = make_rng(seed, "gradcheck", k)
        spec = random_spec(rng, max_depth=max_depth, max_dim=max_dim)
        if with_regularizers and k % 3 == 2:
            T = spec.depth
            spec = NetworkSpec(spec.layer_dims, spec.activations, spec.loss_kind,
                               tuple(rng.uniform(0, 0.2, T)), tuple(rng.uniform(0, 0.2, T)))
        params = init_params(spec, rng)
        params = Params(params.weights, [rng.normal(scale=0.2, size=b.shape) for b in params.biases])
        x0 = rng.uniform(0, 1, size=spec.input_dim)
        eta = rng.uniform(-0.1, 0.1, size=spec.input_dim)
        y = random_target(spec, rng)
        errs = check_gradients(spec, params, x0, y, eta)
        worst = max(errs.values())
        rows.append({"net": k, "dims": "-".join(map(str, spec.layer_dims)), "activations": ",".join(spec.activations),
                     "loss": spec.loss_kind, **{f"rel_err_{k2}": v for k2, v in errs.items()},
                     "passed": worst <= tol})
    return rows
