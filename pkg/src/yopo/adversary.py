"""Inner maximization over the perturbation ball.

Both attacks climb the adversarial objective A(eta) = Phi(F(x0 + eta)) + sum R_t,
i.e. they step along ``-grad_eta`` (descent on H_0).  ``pgd_attack`` refreshes the
costate before every update; ``yopo_attack`` refreshes it once per block of ``n``
updates and reuses the frozen first-layer costate in between.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericError, UsageError
from .hamiltonian import grad_eta, sweep

NORMS = ("linf", "l2")
INITS = ("uniform", "zero")
SELECTIONS = ("last", "min_grad_norm")
STEP_RULES = ("gradient", "normalized")


@dataclass(frozen=True)
class PerturbationBall:
    norm: str = "linf"
    radius: float = 0.1

    def __post_init__(self):
        if self.norm not in NORMS:
            raise UsageError(f"unknown norm {self.norm!r}; expected one of {NORMS}")
        if not self.radius >= 0 or not np.isfinite(self.radius):
            raise UsageError("ball radius must be a finite nonnegative number")

    def project(self, v):
        v = np.asarray(v, dtype=np.float64)
        eps = self.radius
        if self.norm == "linf":
            return np.clip(v, -eps, eps)
        nrm = np.linalg.norm(v, axis=-1, keepdims=True)
        # rescaling can land a few ulps past eps; treating that band as inside keeps projection idempotent
        factor = np.where(nrm > eps * (1.0 + 8 * np.finfo(np.float64).eps), eps / np.where(nrm > 0, nrm, 1.0), 1.0)
        return v * factor

    def contains(self, v, rtol=1e-12):
        v = np.asarray(v, dtype=np.float64)
        slack = self.radius * (1.0 + rtol)
        if self.norm == "linf":
            return bool(np.all(np.abs(v) <= slack))
        return bool(np.all(np.linalg.norm(v, axis=-1) <= slack))

    def diameter(self, dim):
        if self.norm == "linf":
            return 2.0 * self.radius * np.sqrt(dim)
        return 2.0 * self.radius

    def sample(self, rng, shape):
        """Uniform draw from the ball; ``shape`` ends with the input dimension."""
        eps = self.radius
        if self.norm == "linf":
            return rng.uniform(-eps, eps, size=shape)
        d = shape[-1]
        g = rng.normal(size=shape)
        g /= np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-300)
        r = eps * rng.uniform(size=shape[:-1] + (1,)) ** (1.0 / d)
        return g * r

    def to_dict(self):
        return {"norm": self.norm, "radius": self.radius}


def project(ball, v):
    return ball.project(v)


@dataclass(frozen=True)
class AdversaryConfig:
    """YOPO-m-n schedule: ``m`` full sweeps, each followed by ``n`` frozen-costate updates.

    ``alpha=None`` resolves to ``radius / (4 n)``.  ``step_rule="normalized"``
    steps along the steepest-ascent direction of the ball's norm (sign for l-inf,
    unit vector for l2) instead of the raw gradient.
    """

    m: int = 1
    n: int = 1
    alpha: float = None
    init: str = "uniform"
    selection: str = "last"
    step_rule: str = "gradient"

    def __post_init__(self):
        if int(self.m) < 1 or int(self.n) < 1:
            raise UsageError("m and n must be >= 1")
        if self.alpha is not None and not self.alpha > 0:
            raise UsageError("alpha must be positive")
        if self.init not in INITS:
            raise UsageError(f"unknown init {self.init!r}")
        if self.selection not in SELECTIONS:
            raise UsageError(f"unknown selection {self.selection!r}")
        if self.step_rule not in STEP_RULES:
            raise UsageError(f"unknown step rule {self.step_rule!r}")

    def step_size(self, ball):
        if self.alpha is not None:
            return float(self.alpha)
        return ball.radius / (4.0 * self.n)

    def to_dict(self):
        return {"m": self.m, "n": self.n, "alpha": self.alpha, "init": self.init,
                "selection": self.selection, "step_rule": self.step_rule}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("m", "n", "alpha", "init", "selection", "step_rule") if k in d})


@dataclass
class AdversaryResult:
    eta_hat: np.ndarray
    eta_last: np.ndarray
    grad_norms: np.ndarray  # norm of the update direction, one row per update
    backprops: int  # full backward sweeps the algorithm itself performed (per sample)
    fresh_grad_norms: np.ndarray = None  # (m, n, ...) fresh ||grad A|| at eta^{j, l+1}
    drift: np.ndarray = None  # (m, n, ...) ||p1(eta^{j,0}) - p1(eta^{j,l})||
    oracle_error: np.ndarray = None  # (m, n, ...) ||frozen direction - fresh gradient||
    iterates: list = field(default=None, repr=False)


def _initial_eta(ball, x0, init, rng, eta0):
    if eta0 is not None:
        eta0 = np.asarray(eta0, dtype=np.float64)
        if eta0.shape != x0.shape:
            raise UsageError(f"eta0 shape {eta0.shape} != x0 shape {x0.shape}")
        return ball.project(eta0)
    if init == "zero" or ball.radius == 0:
        return np.zeros_like(x0)
    if rng is None:
        raise UsageError("uniform initialization needs an rng")
    return ball.sample(rng, x0.shape)


def ascent_step(ball, eta, direction, alpha, rule):
    # direction is grad_eta, so ascent on A is the minus sign
    if rule == "gradient":
        u = -direction
    elif ball.norm == "linf":
        u = -np.sign(direction)
    else:
        nrm = np.linalg.norm(direction, axis=-1, keepdims=True)
        u = -direction / np.where(nrm > 0, nrm, 1.0)
    new = ball.project(eta + alpha * u)
    if not np.all(np.isfinite(new)):
        raise NumericError("non-finite adversary iterate")
    if not ball.contains(new):
        raise NumericError("adversary iterate left the perturbation ball")
    return new


def _fresh_p1(spec, params, x0, eta, y, scale, index):
    try:
        return sweep(spec, params, x0, eta, y, scale)[1].p1
    except NumericError as exc:
        raise NumericError(f"{exc} at adversary iterate {index}") from exc


def pgd_attack(spec, params, x0, y, ball, steps, alpha, *, init="zero", rng=None, eta0=None,
               scale=1.0, step_rule="gradient", selection="last", keep_iterates=False):
    """Projected gradient ascent with a fresh costate at every step."""
    if steps < 1:
        raise UsageError("steps must be >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    eta = _initial_eta(ball, x0, init, rng, eta0)
    iterates = [eta] if keep_iterates else None
    norms = []
    best_eta, best_norm = eta, None
    for k in range(steps):
        p1 = _fresh_p1(spec, params, x0, eta, y, scale, k)
        g = grad_eta(spec, params, x0, eta, p1)
        norms.append(np.linalg.norm(g, axis=-1))
        eta = ascent_step(ball, eta, g, alpha, step_rule)
        if keep_iterates:
            iterates.append(eta)
        if selection == "min_grad_norm":
            fn = np.linalg.norm(grad_eta(spec, params, x0, eta, _fresh_p1(spec, params, x0, eta, y, scale, k + 1)), axis=-1)
            best_eta, best_norm = _keep_best(best_eta, best_norm, eta, fn)
    eta_hat = eta if selection == "last" else best_eta
    return AdversaryResult(eta_hat, eta, np.array(norms), steps, iterates=iterates)


def _keep_best(best_eta, best_norm, eta, norm):
    if best_norm is None:
        return eta, norm
    better = norm < best_norm
    if np.ndim(better) == 0:
        return (eta, norm) if better else (best_eta, best_norm)
    return np.where(better[..., None], eta, best_eta), np.where(better, norm, best_norm)


def yopo_attack(spec, params, x0, y, ball, cfg, *, rng=None, eta0=None, scale=1.0,
                instrument=False, keep_iterates=False):
    """YOPO-m-n adversary.

    Each outer step j runs one full sweep at eta^{j,0} to get the costate p1,
    then makes n projected updates using grad_eta evaluated at the current
    eta with that frozen p1.

    ``instrument=True`` additionally computes a fresh costate at every inner
    iterate (extra sweeps, not counted in ``backprops``) to log the costate
    drift, the oracle error, and the fresh gradient norms; it is also switched
    on by ``selection="min_grad_norm"``, which needs the fresh norms.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    alpha = cfg.step_size(ball)
    track = instrument or cfg.selection == "min_grad_norm"
    eta = _initial_eta(ball, x0, cfg.init, rng, eta0)
    iterates = [eta] if keep_iterates else None
    norms = []
    drift, oracle, fresh = ([], [], []) if track else (None, None, None)
    best_eta, best_norm = eta, None
    for j in range(cfg.m):
        p1 = _fresh_p1(spec, params, x0, eta, y, scale, j * cfg.n)
        if track:
            drift_j, oracle_j, fresh_j = [], [], []
            p1_here = p1
        for ell in range(cfg.n):
            g = grad_eta(spec, params, x0, eta, p1)
            if track:
                if ell > 0:
                    p1_here = _fresh_p1(spec, params, x0, eta, y, scale, j * cfg.n + ell)
                g_fresh = grad_eta(spec, params, x0, eta, p1_here)
                drift_j.append(np.linalg.norm(p1 - p1_here, axis=-1))
                oracle_j.append(np.linalg.norm(g - g_fresh, axis=-1))
            norms.append(np.linalg.norm(g, axis=-1))
            eta = ascent_step(ball, eta, g, alpha, cfg.step_rule)
            if keep_iterates:
                iterates.append(eta)
            if track:
                p1_next = _fresh_p1(spec, params, x0, eta, y, scale, j * cfg.n + ell + 1)
                fn = np.linalg.norm(grad_eta(spec, params, x0, eta, p1_next), axis=-1)
                fresh_j.append(fn)
                best_eta, best_norm = _keep_best(best_eta, best_norm, eta, fn)
        if track:
            drift.append(drift_j)
            oracle.append(oracle_j)
            fresh.append(fresh_j)
    eta_hat = best_eta if cfg.selection == "min_grad_norm" else eta
    res = AdversaryResult(eta_hat, eta, np.array(norms), cfg.m, iterates=iterates)
    if track:
        res.drift = np.array(drift)
        res.oracle_error = np.array(oracle)
        res.fresh_grad_norms = np.array(fresh)
    return res


def pgd_config(steps, alpha, step_rule="gradient", init="zero"):
    """The AdversaryConfig that makes yopo_attack equivalent to ``steps`` PGD steps."""
    return AdversaryConfig(m=steps, n=1, alpha=alpha, init=init, step_rule=step_rule)


def with_alpha(cfg, alpha):
    return replace(cfg, alpha=alpha)
