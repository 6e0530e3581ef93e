"""Closed-form convergence quantities for YOPO-m-n and empirical estimates of their constants.

Notation follows the rest of the package: ``L_eta_eta`` is the smoothness of
the adversarial objective in eta, ``mu`` its strong-concavity modulus,
``L_theta_eta`` the Lipschitz constant of grad_theta A in eta, and so on.
``q = 1 - mu / L_eta_eta`` is the per-update contraction factor.

The error term carries an ``include_alpha_sq`` switch.  With it on (the
default) the frozen-costate penalty is ``(2 C^2 / L_eta_eta) alpha^2 (n-1)^2 (...)``;
off, the alpha^2 factor is dropped.
"""
from dataclasses import asdict, dataclass, field, replace
import math

import numpy as np

from .adversary import pgd_attack
from .dynsys import ACTIVATIONS, Params, forward, loss, loss_grad
from .errors import NumericError, UsageError
from .hamiltonian import backward, grad_eta, grad_theta, sweep
from .numerics import make_rng

CONSTANT_FIELDS = ("K", "T", "mu", "L_eta_eta", "L_theta_eta", "L_eta_theta", "L_theta_theta",
                   "sigma", "D_X", "Delta", "alpha", "C_prime", "C")


def closed_form_C_prime(K, T):
    """C' = K^{T+1} (K^T + T(T-1) K^{2T-2} + T K^{2T})."""
    return K ** (T + 1) * (K ** T + T * (T - 1) * K ** (2 * T - 2) + T * K ** (2 * T))


@dataclass
class BoundConstants:
    K: float = 1.0
    T: int = 1
    mu: float = 1.0
    L_eta_eta: float = 1.0
    L_theta_eta: float = 1.0
    L_eta_theta: float = 1.0
    L_theta_theta: float = 1.0
    sigma: float = 0.0
    D_X: float = 1.0
    Delta: float = 1.0
    alpha: float = 0.1
    C_prime: float = None
    C: float = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.C_prime is None:
            self.C_prime = closed_form_C_prime(self.K, self.T)
        if self.C is None:
            self.C = self.K * self.C_prime
        for name in CONSTANT_FIELDS:
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise UsageError(f"constant {name} = {v} must be finite and nonnegative")

    def validate(self, strict_alpha=False):
        """Raise UsageError when the constants cannot feed the bounds."""
        if not self.mu > 0:
            raise UsageError(f"mu = {self.mu} must be positive")
        if self.mu > self.L_eta_eta:
            raise UsageError(f"mu = {self.mu} exceeds L_eta_eta = {self.L_eta_eta}")
        if strict_alpha and not self.alpha < 1.0 / self.L_eta_eta:
            raise UsageError(f"alpha = {self.alpha} is not below 1/L_eta_eta = {1.0 / self.L_eta_eta}")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(CONSTANT_FIELDS) | {"provenance"}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown constant keys: {sorted(unknown)}")
        return cls(**d)


def smoothness_L(c):
    """Smoothness of the robust loss: L_theta_theta + L_theta_eta * L_eta_theta / mu."""
    if not c.mu > 0:
        raise UsageError("smoothness_L needs mu > 0")
    return c.L_theta_theta + c.L_theta_eta * c.L_eta_theta / c.mu


def _frozen_factor(c):
    return (2.0 / c.mu) + 1.0 / (2.0 * c.L_eta_eta)


def error_terms(c, m, n, include_alpha_sq=True):
    """(contraction term, frozen-costate term) of the error E(m, n)."""
    if m < 1 or n < 1:
        raise UsageError("m and n must be >= 1")
    c.validate()
    q = 1.0 - c.mu / c.L_eta_eta
    first = c.D_X * c.L_eta_eta ** 2 * q ** (m * n + 1)
    second = (2.0 * c.C ** 2 / c.L_eta_eta) * _frozen_factor(c) * (n - 1) ** 2
    if include_alpha_sq:
        second *= c.alpha ** 2
    return first, second


def error_term(c, m, n, include_alpha_sq=True):
    first, second = error_terms(c, m, n, include_alpha_sq)
    return first + second


def adversary_bound(c, m, n, include_alpha_sq=True):
    """Bound on ||grad_eta A(eta_hat)||^2 after YOPO-m-n; same expression as error_term."""
    return error_term(c, m, n, include_alpha_sq)


def oracle_delta(c, n):
    """delta of the (delta, mu/2, 2 L_eta_eta) oracle: C^2 alpha^2 (n-1)^2 (2/mu + 1/(2 L_eta_eta))."""
    c.validate()
    return c.C ** 2 * c.alpha ** 2 * (n - 1) ** 2 * _frozen_factor(c)


def training_bound_rhs(c, m, n, N, include_alpha_sq=True):
    """4 sigma sqrt(L Delta / N) + (5 L_theta_eta^2 / mu) E(m, n)."""
    if N < 1:
        raise UsageError("N must be >= 1")
    L = smoothness_L(c)
    return 4.0 * c.sigma * math.sqrt(L * c.Delta / N) + (5.0 * c.L_theta_eta ** 2 / c.mu) * error_term(c, m, n, include_alpha_sq)


def optimal_n_condition(c, m, n, include_alpha_sq=True):
    """LHS - RHS of the crossover inequality for growing n.

    Positive means dE/dn < 0 at this n (a larger n still helps); the first n
    where it turns nonpositive is the crossover.
    """
    c.validate()
    if not c.mu < c.L_eta_eta:
        raise UsageError("the crossover condition needs mu < L_eta_eta (log of zero otherwise)")
    q = 1.0 - c.mu / c.L_eta_eta
    lhs = -math.log(q) * c.D_X * c.L_eta_eta ** 2 * m * q ** (m * n + 1)
    rhs = (4.0 * c.C ** 2 / c.L_eta_eta) * _frozen_factor(c) * (n - 1)
    if include_alpha_sq:
        rhs *= c.alpha ** 2
    return lhs - rhs


def crossover_n(c, m, n_max=10_000, include_alpha_sq=True):
    """Smallest n >= 1 at which optimal_n_condition is <= 0 (``n_max`` if none)."""
    lo, hi = 1, n_max
    if optimal_n_condition(c, m, lo, include_alpha_sq) <= 0:
        return 1
    if optimal_n_condition(c, m, hi, include_alpha_sq) > 0:
        return n_max
    # the condition is decreasing in n: bisect
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if optimal_n_condition(c, m, mid, include_alpha_sq) > 0:
            lo = mid
        else:
            hi = mid
    return hi


def second_difference_in_n(c, m, n, include_alpha_sq=True):
    if n < 2:
        raise UsageError("second difference needs n >= 2")
    return (error_term(c, m, n + 1, include_alpha_sq) - 2.0 * error_term(c, m, n, include_alpha_sq)
            + error_term(c, m, n - 1, include_alpha_sq))


def theory_step_size(c, N):
    """gamma = min(1/L, sqrt(Delta / (L sigma^2 N)))."""
    L = smoothness_L(c)
    if c.sigma == 0 or c.Delta == 0:
        return 1.0 / L if c.Delta else 0.0
    return min(1.0 / L, math.sqrt(c.Delta / (L * c.sigma ** 2 * N)))


def random_constants(rng, T_max=4):
    """Random valid constant set with mu < L_eta_eta (used by property checks)."""
    L_ee = float(10 ** rng.uniform(-1, 2))
    mu = L_ee * float(rng.uniform(0.01, 0.99))
    K = float(rng.uniform(0.2, 1.5))
    T = int(rng.integers(1, T_max + 1))
    return BoundConstants(
        K=K, T=T, mu=mu, L_eta_eta=L_ee,
        L_theta_eta=float(10 ** rng.uniform(-1, 1)), L_eta_theta=float(10 ** rng.uniform(-1, 1)),
        L_theta_theta=float(10 ** rng.uniform(-1, 1)), sigma=float(rng.uniform(0, 2)),
        D_X=float(10 ** rng.uniform(-1, 1)), Delta=float(rng.uniform(0.1, 5)),
        alpha=float(rng.uniform(0.05, 0.99) / L_ee),
    )


# empirical estimation

class _Sample:
    """Per-sample gradient oracles for one (x0, y) pair, scale 1."""

    def __init__(self, spec, params, x0, y):
        self.spec, self.params, self.x0, self.y = spec, params, x0, y
        self.theta = params.flat()

    def _params(self, theta):
        return self.params if theta is None else Params.from_flat(self.spec, theta)

    def grad_eta(self, eta, theta=None):
        p = self._params(theta)
        _, co = sweep(self.spec, p, self.x0, eta, self.y)
        return -grad_eta(self.spec, p, self.x0, eta, co.p1)

    def grad_theta(self, eta, theta=None):
        p = self._params(theta)
        traj, co = sweep(self.spec, p, self.x0, eta, self.y)
        return grad_theta(self.spec, p, traj, co).flat()


def _unit(rng, dim):
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _power(matvec, dim, rng, iters):
    v = _unit(rng, dim)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        nw = np.linalg.norm(w)
        if nw == 0 or not np.isfinite(nw):
            return 0.0
        lam = nw
        v = w / nw
    return float(lam)


def _sym_extremes(hvp, dim, rng, iters):
    """Largest |eigenvalue| and the smallest eigenvalue of a symmetric operator."""
    top = _power(hvp, dim, rng, iters)
    shifted = _power(lambda v: top * v - hvp(v), dim, rng, iters)
    return top, top - shifted


def layer_jacobian(spec, params, t, z):
    act, dact = ACTIVATIONS[spec.activations[t]]
    return dact(z, act(z))[:, None] * params.weights[t]


def loss_hessian_norm(spec, xT):
    kind = spec.loss_kind
    if kind == "cross_entropy":
        s = np.exp(xT - np.max(xT))
        s /= s.sum()
        return float(np.max(np.abs(np.linalg.eigvalsh(np.diag(s) - np.outer(s, s)))))
    if kind in ("quadratic", "neg_quadratic"):
        return 1.0
    return 0.0


def estimate_K(spec, params, xs, etas, y):
    """One K bounding every Lipschitz quantity involved, maxed over sampled points.

    ``xs``/``etas``/``y`` are per-point rows.  Layer Jacobian spectral norms bound
    the local Lipschitz constant of f_t; Jacobian secants along consecutive
    points bound that of grad_x f_t; ||grad Phi|| and the Hessian norm of Phi
    cover the loss; the state regularizer weights cover grad_x R_t.
    """
    parts = {"layers": 0.0, "layer_jac_lipschitz": 0.0, "loss": 0.0, "loss_grad": 0.0,
             "state_reg": max(spec.state_reg_weights)}
    prev = None
    for i in range(xs.shape[0]):
        traj = forward(spec, params, xs[i], etas[i])
        jacs = [layer_jacobian(spec, params, t, traj.pre[t]) for t in range(spec.depth)]
        for J in jacs:
            parts["layers"] = max(parts["layers"], float(np.linalg.norm(J, 2)))
        gphi = loss_grad(spec, traj.output, y[i])
        parts["loss"] = max(parts["loss"], float(np.linalg.norm(gphi)))
        parts["loss_grad"] = max(parts["loss_grad"], loss_hessian_norm(spec, traj.output))
        if prev is not None:
            for t in range(spec.depth):
                dx = np.linalg.norm(traj.layer_input(t) - prev[0].layer_input(t))
                if dx > 1e-12:
                    ratio = float(np.linalg.norm(jacs[t] - prev[1][t], 2)) / dx
                    parts["layer_jac_lipschitz"] = max(parts["layer_jac_lipschitz"], ratio)
        prev = (traj, jacs)
    return max(parts.values()), parts


def estimate_constants(spec, params, x, y, ball, rng=None, probes=20, alpha=0.0, batch_size=None,
                       theta_radius=1e-3, power_iters=30, pgd_steps=10, hvp_step=1e-5, power_centers=3):
    """Probe a model on a data sample and return (BoundConstants, details).

    All fields except T, D_X and alpha are estimates from random probing:
    secant ratios on random pairs inside the ball (or a theta-ball of radius
    ``theta_radius * max(1, ||theta||)``), sharpened by power iteration on
    finite-difference Hessian-vector products at a few probe centers.  They are
    not certified bounds; ``mu`` may come out <= 0 when the objective is not
    concave in eta, and it is reported as measured.
    """
    if probes < 1:
        raise UsageError("probes must be >= 1")
    rng = rng if rng is not None else make_rng(0, "estimate")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y)
    if spec.loss_kind == "cross_entropy":
        y = np.atleast_1d(y)
    else:
        y = np.atleast_2d(y)
    S, d = x.shape
    theta = params.flat()
    r_theta = theta_radius * max(1.0, float(np.linalg.norm(theta)))

    L_ee, mu, L_te, L_et, L_tt = 0.0, math.inf, 0.0, 0.0, 0.0
    k_points, k_etas, k_y = [], [], []
    used = 0
    for k in range(probes):
        i = int(rng.integers(S))
        s = _Sample(spec, params, x[i], y[i])
        e1, e2 = ball.sample(rng, (d,)), ball.sample(rng, (d,))
        de = float(np.linalg.norm(e1 - e2))
        dth = r_theta * _unit(rng, theta.size)
        k_points += [x[i], x[i]]
        k_etas += [e1, e2]
        k_y += [y[i], y[i]]
        if de > 1e-12:
            g1, g2 = s.grad_eta(e1), s.grad_eta(e2)
            L_ee = max(L_ee, float(np.linalg.norm(g1 - g2)) / de)
            mu = min(mu, -float((g1 - g2) @ (e1 - e2)) / de ** 2)
            L_te = max(L_te, float(np.linalg.norm(s.grad_theta(e1) - s.grad_theta(e2))) / de)
            used += 1
        th1, th2 = theta + dth, theta - dth
        dt = 2.0 * r_theta
        L_et = max(L_et, float(np.linalg.norm(s.grad_eta(e1, th1) - s.grad_eta(e1, th2))) / dt)
        L_tt = max(L_tt, float(np.linalg.norm(s.grad_theta(e1, th1) - s.grad_theta(e1, th2))) / dt)

    for k in range(min(power_centers, probes)):
        i = int(rng.integers(S))
        s = _Sample(spec, params, x[i], y[i])
        e0 = ball.sample(rng, (d,))
        h = hvp_step

        def hvp_eta(v):
            return (s.grad_eta(e0 + h * v) - s.grad_eta(e0 - h * v)) / (2 * h)

        def hvp_theta(v):
            return (s.grad_theta(e0, theta + h * v) - s.grad_theta(e0, theta - h * v)) / (2 * h)

        def cross(v):  # (d_theta x d_eta)^T (d_theta x d_eta) v
            w = (s.grad_theta(e0 + h * v) - s.grad_theta(e0 - h * v)) / (2 * h)
            return (s.grad_eta(e0, theta + h * w) - s.grad_eta(e0, theta - h * w)) / (2 * h)

        # hvp_eta is the Hessian of A; -A is the convex side, so flip the sign
        top, low = _sym_extremes(lambda v: -hvp_eta(v), d, rng, power_iters)
        L_ee = max(L_ee, top)
        mu = min(mu, low)
        L_tt = max(L_tt, _power(hvp_theta, theta.size, rng, power_iters))
        c_norm = math.sqrt(max(_power(cross, d, rng, power_iters), 0.0))
        L_te = max(L_te, c_norm)
        L_et = max(L_et, c_norm)
        k_points.append(x[i])
        k_etas.append(e0)
        k_y.append(y[i])

    if used == 0 and ball.radius > 0:
        raise NumericError("every eta probe was degenerate")
    K, k_parts = estimate_K(spec, params, np.array(k_points), np.array(k_etas), np.array(k_y))

    # sigma and Delta at a fresh-costate PGD perturbation
    if ball.radius > 0:
        eta = pgd_attack(spec, params, x, y, ball, pgd_steps, ball.radius / 4.0, init="zero",
                         step_rule="normalized").eta_last
    else:
        eta = np.zeros_like(x)
    traj = forward(spec, params, x, eta)
    Delta = float(np.mean(loss(spec, traj.output, y)))
    B = batch_size or S
    if S > 1:
        per = np.array([grad_theta(spec, params, forward(spec, params, x[i], eta[i]),
                                   backward(spec, params, forward(spec, params, x[i], eta[i]), y[i])).flat()
                        for i in range(S)])
        var = float(np.mean(np.sum((per - per.mean(axis=0)) ** 2, axis=1)))
        sigma = math.sqrt(var / B)
    else:
        sigma = 0.0

    mu_val = float(mu) if math.isfinite(mu) else 0.0
    details = {"K_parts": k_parts, "mu_raw": mu_val, "probes_used": used, "batch_size": B}
    T = spec.depth
    c = BoundConstants(
        K=K, T=T, mu=max(mu_val, 0.0), L_eta_eta=L_ee, L_theta_eta=L_te, L_eta_theta=L_et,
        L_theta_theta=L_tt, sigma=sigma, D_X=ball.diameter(d), Delta=max(Delta, 0.0), alpha=alpha,
        provenance={**{f: "estimated" for f in CONSTANT_FIELDS}, "T": "exact", "D_X": "exact", "alpha": "assumed"},
    )
    return c, details


def with_constants(c, **changes):
    out = replace(c, **changes)
    if "K" in changes or "T" in changes:
        if "C_prime" not in changes:
            out.C_prime = closed_form_C_prime(out.K, out.T)
        if "C" not in changes:
            out.C = out.K * out.C_prime
    return out
