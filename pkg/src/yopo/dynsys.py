"""A feed-forward network viewed as the discrete-time system x_{t+1} = f_t(x_t, theta_t).

Every layer map is affine-then-activation, ``f_t(x) = act_t(W_t x + b_t)``.
The input layer sees the perturbed state ``x_0 + eta``.  Arrays may carry a
leading batch axis; all per-sample quantities are computed row-wise.
"""
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericError, UsageError
from .numerics import make_rng

LOSS_KINDS = ("cross_entropy", "quadratic", "neg_quadratic", "linear")


def _elu(z):
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _elu_prime(z, a):
    return np.where(z > 0, 1.0, a + 1.0)


def _sigmoid(z):
    # split on sign so exp never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# name -> (activation(z), derivative given (z, activation(z)))
ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "sigmoid": (_sigmoid, lambda z, a: a * (1.0 - a)),
    "elu": (_elu, _elu_prime),
    "linear": (lambda z: z, lambda z, a: np.ones_like(z)),
}


@dataclass(frozen=True)
class NetworkSpec:
    """Layer sizes n_0..n_T, one activation per layer, the terminal loss and regularizers.

    ``reg_weights[t]`` multiplies ``0.5 * ||theta_t||^2`` and ``state_reg_weights[t]``
    multiplies ``0.5 * ||x_t||^2`` inside the running cost R_t.
    """

    layer_dims: tuple
    activations: tuple = ()
    loss_kind: str = "cross_entropy"
    reg_weights: tuple = ()
    state_reg_weights: tuple = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise UsageError(f"need at least two positive layer dims, got {self.layer_dims}")
        T = len(dims) - 1
        acts = self.activations
        if isinstance(acts, str):
            acts = (acts,) * T
        acts = tuple(acts) if acts else ("tanh",) * T
        if len(acts) != T:
            raise UsageError(f"{len(acts)} activations for {T} layers")
        for a in acts:
            if a == "relu":
                raise UsageError("relu is not differentiable at 0; use tanh, sigmoid, elu or linear")
            if a not in ACTIVATIONS:
                raise UsageError(f"unknown activation {a!r}")
        if self.loss_kind not in LOSS_KINDS:
            raise UsageError(f"unknown loss kind {self.loss_kind!r}")
        reg = _per_layer(self.reg_weights, T, "reg_weights")
        sreg = _per_layer(self.state_reg_weights, T, "state_reg_weights")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "activations", acts)
        object.__setattr__(self, "reg_weights", reg)
        object.__setattr__(self, "state_reg_weights", sreg)

    @property
    def depth(self):
        return len(self.layer_dims) - 1

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    def to_dict(self):
        return {
            "layer_dims": list(self.layer_dims),
            "activations": list(self.activations),
            "loss_kind": self.loss_kind,
            "reg_weights": list(self.reg_weights),
            "state_reg_weights": list(self.state_reg_weights),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            layer_dims=tuple(d["layer_dims"]),
            activations=tuple(d.get("activations", ())),
            loss_kind=d.get("loss_kind", "cross_entropy"),
            reg_weights=tuple(d.get("reg_weights", ())),
            state_reg_weights=tuple(d.get("state_reg_weights", ())),
        )


def _per_layer(w, T, name):
    if isinstance(w, (int, float)):
        w = (float(w),) * T
    w = tuple(float(v) for v in w) if len(w) else (0.0,) * T
    if len(w) != T:
        raise UsageError(f"{name}: {len(w)} entries for {T} layers")
    if min(w) < 0:
        raise UsageError(f"{name} must be nonnegative")
    return w


@dataclass
class Params:
    """Per-layer weights ``W_t`` (n_{t+1} x n_t) and biases ``b_t`` (n_{t+1})."""

    weights: list
    biases: list

    @property
    def depth(self):
        return len(self.weights)

    def layout(self):
        """(offset, size) of each layer's [W_t, b_t] block in the flat vector."""
        out, off = [], 0
        for W, b in zip(self.weights, self.biases):
            size = W.size + b.size
            out.append((off, size))
            off += size
        return out

    @property
    def size(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def layer_flat(self, t):
        return np.concatenate([self.weights[t].ravel(), self.biases[t]])

    def flat(self):
        return np.concatenate([self.layer_flat(t) for t in range(self.depth)])

    @classmethod
    def from_flat(cls, spec, vec):
        vec = np.asarray(vec, dtype=np.float64)
        dims = spec.layer_dims
        expected = sum(dims[t + 1] * dims[t] + dims[t + 1] for t in range(spec.depth))
        if vec.shape != (expected,):
            raise UsageError(f"flat parameter vector has shape {vec.shape}, expected ({expected},)")
        weights, biases, off = [], [], 0
        for t in range(spec.depth):
            r, c = dims[t + 1], dims[t]
            weights.append(vec[off:off + r * c].reshape(r, c).copy())
            off += r * c
            biases.append(vec[off:off + r].copy())
            off += r
        return cls(weights, biases)

    def copy(self):
        return Params([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def check(self, spec):
        dims = spec.layer_dims
        if self.depth != spec.depth:
            raise UsageError(f"params have {self.depth} layers, spec has {spec.depth}")
        for t, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[t + 1], dims[t]) or b.shape != (dims[t + 1],):
                raise UsageError(f"layer {t}: W{W.shape}, b{b.shape} do not match dims {dims[t]}->{dims[t + 1]}")


def init_params(spec, rng=None, seed=0):
    """Glorot-uniform weights, zero biases."""
    if rng is None:
        rng = make_rng(seed, "init")
    dims = spec.layer_dims
    weights, biases = [], []
    for t in range(spec.depth):
        lim = np.sqrt(6.0 / (dims[t] + dims[t + 1]))
        weights.append(rng.uniform(-lim, lim, size=(dims[t + 1], dims[t])))
        biases.append(np.zeros(dims[t + 1]))
    return Params(weights, biases)


@dataclass
class StateTrajectory:
    """States x_0..x_T plus the cached pre-activations z_t = W_t x_t + b_t.

    ``states[0]`` is the clean input; ``layer_input(0)`` is the shifted ``x_0 + eta``.
    """

    states: list
    pre: list
    shifted: np.ndarray
    eta: np.ndarray = field(repr=False, default=None)

    def layer_input(self, t):
        return self.shifted if t == 0 else self.states[t]

    @property
    def output(self):
        return self.states[-1]


def _check_input(spec, a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim not in (1, 2) or a.shape[-1] != spec.input_dim:
        raise UsageError(f"{name} has shape {a.shape}, expected trailing dim {spec.input_dim}")
    return a


def layer_map(spec, params, t, x):
    act, _ = ACTIVATIONS[spec.activations[t]]
    return act(x @ params.weights[t].T + params.biases[t])


def forward(spec, params, x0, eta=None):
    x0 = _check_input(spec, x0, "x0")
    if eta is None:
        shifted = x0
        eta = np.zeros_like(x0)
    else:
        eta = _check_input(spec, eta, "eta")
        shifted = x0 + eta
    states, pre = [x0], []
    x = shifted
    for t in range(spec.depth):
        act, _ = ACTIVATIONS[spec.activations[t]]
        z = x @ params.weights[t].T + params.biases[t]
        x = act(z)
        pre.append(z)
        states.append(x)
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite network output")
    return StateTrajectory(states, pre, shifted, eta)


def compose(spec, params, x):
    """Direct nested evaluation f_{T-1}(... f_0(x, theta_0) ...), no caching."""
    for t in range(spec.depth):
        x = layer_map(spec, params, t, x)
    return x


def _check_labels(spec, xT, y):
    if spec.loss_kind == "cross_entropy":
        y = np.asarray(y)
        if not np.issubdtype(y.dtype, np.integer):
            if np.any(y != np.round(y)):
                raise UsageError("cross-entropy labels must be integers")
            y = y.astype(np.int64)
        if y.shape != xT.shape[:-1]:
            raise UsageError(f"labels of shape {y.shape} for outputs of shape {xT.shape}")
        if np.any(y < 0) or np.any(y >= xT.shape[-1]):
            raise UsageError(f"label out of range [0, {xT.shape[-1]})")
        return y
    y = np.asarray(y, dtype=np.float64)
    if y.shape != xT.shape:
        raise UsageError(f"targets of shape {y.shape} for outputs of shape {xT.shape}")
    return y


def _log_softmax(z):
    zmax = np.max(z, axis=-1, keepdims=True)
    s = z - zmax
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def loss(spec, xT, y):
    """Terminal loss Phi(x_T, y); one value per row for batched input."""
    xT = np.asarray(xT, dtype=np.float64)
    if xT.shape[-1] != spec.output_dim:
        raise UsageError(f"output of shape {xT.shape}, expected trailing dim {spec.output_dim}")
    y = _check_labels(spec, xT, y)
    kind = spec.loss_kind
    if kind == "cross_entropy":
        lp = _log_softmax(xT)
        return -np.take_along_axis(lp, y[..., None], axis=-1)[..., 0]
    if kind == "quadratic":
        return 0.5 * np.sum((xT - y) ** 2, axis=-1)
    if kind == "neg_quadratic":
        return -0.5 * np.sum((xT - y) ** 2, axis=-1)
    return np.sum(xT * y, axis=-1)


def loss_grad(spec, xT, y):
    """Gradient of Phi with respect to x_T, row-wise."""
    xT = np.asarray(xT, dtype=np.float64)
    y = _check_labels(spec, xT, y)
    kind = spec.loss_kind
    if kind == "cross_entropy":
        g = np.exp(_log_softmax(xT))
        np.put_along_axis(g, y[..., None], np.take_along_axis(g, y[..., None], axis=-1) - 1.0, axis=-1)
        return g
    if kind == "quadratic":
        return xT - y
    if kind == "neg_quadratic":
        return y - xT
    return np.broadcast_to(y, xT.shape).copy()


def predict(spec, params, x0, eta=None):
    return np.argmax(forward(spec, params, x0, eta).output, axis=-1)


def regularizer(spec, params, t):
    """Control part of R_t: reg_weights[t] * 0.5 * ||theta_t||^2."""
    if not 0 <= t < spec.depth:
        raise UsageError(f"layer index {t} outside [0, {spec.depth})")
    lam = spec.reg_weights[t]
    if lam == 0.0:
        return 0.0
    th = params.layer_flat(t)
    return lam * 0.5 * float(th @ th)


def running_cost(spec, params, traj, t):
    """R_t(x_t, theta_t) per sample, including the state term on the clean x_t."""
    x = traj.states[t]
    r = regularizer(spec, params, t)
    lam = spec.state_reg_weights[t]
    if lam:
        return r + lam * 0.5 * np.sum(x * x, axis=-1)
    return r + np.zeros(x.shape[:-1])


def total_loss(spec, params, x0, y, eta=None):
    """Phi(x_T, y) + sum_t R_t(x_t, theta_t), per sample."""
    traj = forward(spec, params, x0, eta)
    J = loss(spec, traj.output, y)
    for t in range(spec.depth):
        J = J + running_cost(spec, params, traj, t)
    return J


def adversarial_objective(spec, params, x0, y, eta):
    """The per-sample objective the adversary maximizes over eta."""
    return total_loss(spec, params, x0, y, eta)


def random_spec(rng, max_depth=4, max_dim=8, activations=("tanh", "sigmoid", "elu"), losses=("cross_entropy", "quadratic")):
    T = int(rng.integers(1, max_depth + 1))
    dims = tuple(int(d) for d in rng.integers(1, max_dim + 1, size=T + 1))
    loss_kind = str(rng.choice(losses))
    if loss_kind == "cross_entropy" and dims[-1] < 2:
        dims = dims[:-1] + (2,)
    acts = tuple(str(rng.choice(activations)) for _ in range(T))
    return NetworkSpec(dims, acts, loss_kind)


def random_target(spec, rng, batch: Sequence[int] = ()):
    if spec.loss_kind == "cross_entropy":
        return rng.integers(0, spec.output_dim, size=tuple(batch))
    return rng.normal(size=tuple(batch) + (spec.output_dim,))
