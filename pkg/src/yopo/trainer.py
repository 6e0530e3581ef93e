"""Outer loop of YOPO-m-n adversarial training.

One step: draw a minibatch, run the adversary per sample with the terminal
costate scaled by 1/B, then take one gradient step on theta at the chosen
perturbations.  Randomness comes from labeled substreams of the config seed:
``("batch", epoch)`` for shuffling and ``("adversary", step)`` for the
perturbation init, so a run can be resumed from (params, step, sampler state).
"""
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adversary import AdversaryConfig, PerturbationBall, ascent_step, pgd_attack, yopo_attack
from .dynsys import Params, forward, loss
from .errors import NumericError, UsageError
from .hamiltonian import backward, grad_eta, grad_theta, sweep
from .numerics import make_rng

METRIC_FIELDS = ("step", "clean_loss", "robust_loss", "grad_norm", "clean_acc", "robust_acc", "backprops", "wall_ms")


@dataclass
class MetricsRecord:
    step: int
    clean_loss: float
    robust_loss: float
    grad_norm: float
    clean_acc: float
    robust_acc: float
    backprops: int
    wall_ms: float

    def astuple(self):
        return tuple(getattr(self, f) for f in METRIC_FIELDS)


@dataclass(frozen=True)
class EvalConfig:
    """Fresh-costate PGD used for reporting robust accuracy."""

    steps: int = 40
    step_frac: float = 0.1  # step = step_frac * radius
    step_rule: str = "normalized"
    chunk: int = 1000


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 50
    steps: int = 100
    gamma: float = 0.1
    gamma_rule: str = "constant"  # or "theory"
    adversary: AdversaryConfig = field(default_factory=AdversaryConfig)
    ball: PerturbationBall = field(default_factory=PerturbationBall)
    seed: int = 0
    eval_every: int = 0
    attack_mode: str = "yopo"  # "pgd" runs m fresh-costate steps instead (reference)

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.steps < 0:
            raise UsageError("steps must be >= 0")
        if self.gamma < 0:
            raise UsageError("gamma must be nonnegative")
        if self.gamma_rule not in ("constant", "theory"):
            raise UsageError(f"unknown gamma rule {self.gamma_rule!r}")
        if self.attack_mode not in ("yopo", "pgd"):
            raise UsageError(f"unknown attack mode {self.attack_mode!r}")

    def to_dict(self):
        d = asdict(self)
        d["adversary"] = self.adversary.to_dict()
        d["ball"] = self.ball.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "adversary" in d:
            d["adversary"] = AdversaryConfig.from_dict(d["adversary"])
        if "ball" in d:
            d["ball"] = PerturbationBall(**d["ball"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class EpochSampler:
    """Minibatches drawn without replacement; each epoch is a fresh permutation.

    The trailing partial batch of an epoch is dropped.
    """

    def __init__(self, n_items, batch_size, seed, epoch=0, cursor=0):
        if batch_size > n_items:
            raise UsageError(f"batch size {batch_size} exceeds dataset size {n_items}")
        if batch_size < 1:
            raise UsageError("batch size must be >= 1")
        self.n_items = n_items
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.cursor = cursor
        self._perm = self._permutation(epoch)

    def _permutation(self, epoch):
        return make_rng(self.seed, "batch", epoch).permutation(self.n_items)

    def next_batch(self):
        if self.cursor + self.batch_size > self.n_items:
            self.epoch += 1
            self.cursor = 0
            self._perm = self._permutation(self.epoch)
        idx = self._perm[self.cursor:self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return idx

    def state(self):
        return {"epoch": self.epoch, "cursor": self.cursor}

    @property
    def batches_per_epoch(self):
        return self.n_items // self.batch_size


def sample_batch(rng, n_items, batch_size):
    """One minibatch of distinct indices drawn with ``rng``."""
    if batch_size > n_items:
        raise UsageError(f"batch size {batch_size} exceeds dataset size {n_items}")
    return rng.permutation(n_items)[:batch_size]


def targets_for(spec, labels):
    """Labels for cross-entropy; one-hot rows for the vector-valued losses."""
    labels = np.asarray(labels)
    if spec.loss_kind == "cross_entropy":
        return labels
    out = np.zeros(labels.shape + (spec.output_dim,))
    np.put_along_axis(out, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return out


@dataclass
class TrainState:
    spec: object
    params: Params
    config: TrainConfig
    step: int = 0
    sampler: EpochSampler = None
    gamma: float = None
    backprops: int = 0


def init_state(spec, params, config, n_items):
    sampler = EpochSampler(n_items, config.batch_size, config.seed)
    gamma = config.gamma if config.gamma_rule == "constant" else None
    return TrainState(spec, params, config, 0, sampler, gamma)


def run_adversary(spec, params, x, y, cfg, rng, scale=1.0):
    adv = cfg.adversary
    if cfg.attack_mode == "pgd":
        return pgd_attack(spec, params, x, y, cfg.ball, adv.m, adv.step_size(cfg.ball), init=adv.init,
                          rng=rng, scale=scale, step_rule=adv.step_rule, selection=adv.selection)
    return yopo_attack(spec, params, x, y, cfg.ball, adv, rng=rng, scale=scale)


def train_step(state, x_all, y_all):
    """Advance ``state`` by one YOPO-m-n step on the next minibatch; returns the step's metrics."""
    cfg = state.config
    if state.gamma is None:
        raise UsageError("gamma is unresolved; estimate it with bounds.theory_step_size first")
    t0 = time.perf_counter()
    idx = state.sampler.next_batch()
    x, y = x_all[idx], y_all[idx]
    B = len(idx)
    spec, params = state.spec, state.params
    rng = make_rng(cfg.seed, "adversary", state.step)
    try:
        adv = run_adversary(spec, params, x, y, cfg, rng, scale=B)
        traj = forward(spec, params, x, adv.eta_hat)
        co = backward(spec, params, traj, y, scale=B)
    except NumericError as exc:
        raise NumericError(f"{exc} (training step {state.step})") from exc
    g = grad_theta(spec, params, traj, co)
    gflat = g.flat()
    gnorm = float(np.linalg.norm(gflat))
    if not np.isfinite(gnorm):
        raise NumericError(f"non-finite parameter gradient at training step {state.step}")
    robust_loss = float(np.mean(loss(spec, traj.output, y)))
    robust_acc = _accuracy(spec, traj.output, y)
    clean_out = forward(spec, params, x).output
    clean_loss = float(np.mean(loss(spec, clean_out, y)))
    clean_acc = _accuracy(spec, clean_out, y)
    if state.gamma != 0.0:
        state.params = Params.from_flat(spec, params.flat() - state.gamma * gflat)
    state.step += 1
    bp = B * adv.backprops
    state.backprops += bp
    wall = (time.perf_counter() - t0) * 1000.0
    return MetricsRecord(state.step, clean_loss, robust_loss, gnorm, clean_acc, robust_acc, bp, wall)


def _accuracy(spec, out, y):
    pred = np.argmax(out, axis=-1)
    labels = y if spec.loss_kind == "cross_entropy" else np.argmax(y, axis=-1)
    return float(np.mean(pred == labels))


def train(state, x_all, y_all, steps=None, on_record=None):
    steps = state.config.steps if steps is None else steps
    records = []
    for _ in range(steps):
        rec = train_step(state, x_all, y_all)
        records.append(rec)
        if on_record is not None:
            on_record(rec, state)
    return records


@dataclass
class EvalResult:
    clean_acc: float
    robust_acc: float
    robust_loss: float
    clean_loss: float


def evaluate(spec, params, x_all, y_all, ball, eval_cfg=EvalConfig()):
    """Clean accuracy at eta = 0 and robust accuracy under fresh-costate PGD from eta = 0.

    A sample counts as robust only if it is classified correctly at every PGD
    iterate, the clean point included.
    """
    x_all = np.asarray(x_all, dtype=np.float64)
    S = x_all.shape[0]
    clean_ok = np.zeros(S, dtype=bool)
    robust_ok = np.zeros(S, dtype=bool)
    rloss = np.zeros(S)
    closs = np.zeros(S)
    alpha = eval_cfg.step_frac * ball.radius
    labels_all = y_all if spec.loss_kind == "cross_entropy" else np.argmax(y_all, axis=-1)
    for lo in range(0, S, eval_cfg.chunk):
        sl = slice(lo, min(S, lo + eval_cfg.chunk))
        x, y, lab = x_all[sl], y_all[sl], labels_all[sl]
        out = forward(spec, params, x).output
        closs[sl] = loss(spec, out, y)
        ok = np.argmax(out, axis=-1) == lab
        clean_ok[sl] = ok
        if ball.radius > 0 and alpha > 0:
            eta = np.zeros_like(x)
            for _ in range(eval_cfg.steps):
                traj, co = sweep(spec, params, x, eta, y)
                ok &= np.argmax(traj.output, axis=-1) == lab
                eta = ascent_step(ball, eta, grad_eta(spec, params, x, eta, co.p1), alpha, eval_cfg.step_rule)
            out = forward(spec, params, x, eta).output
            ok &= np.argmax(out, axis=-1) == lab
            rloss[sl] = loss(spec, out, y)
        else:
            rloss[sl] = closs[sl]
        robust_ok[sl] = ok
    return EvalResult(float(np.mean(clean_ok)), float(np.mean(robust_ok)), float(np.mean(rloss)), float(np.mean(closs)))


def robust_loss_estimate(spec, params, x_all, y_all, ball, steps=10, step_rule="normalized"):
    """Mean loss at a fresh-costate PGD perturbation: a lower estimate of R(theta)."""
    if ball.radius == 0:
        return float(np.mean(loss(spec, forward(spec, params, x_all).output, y_all)))
    res = pgd_attack(spec, params, x_all, y_all, ball, steps, ball.radius / 4.0, init="zero", step_rule=step_rule)
    return float(np.mean(loss(spec, forward(spec, params, x_all, res.eta_last).output, y_all)))


def with_gamma(state, gamma):
    state.gamma = float(gamma)
    return state


def clone_config(cfg, **changes):
    return replace(cfg, **changes)
