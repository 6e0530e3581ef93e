"""Layer Hamiltonians and the backward costate sweep.

Sign convention: the terminal costate is ``p_T = -grad Phi(x_T) / scale``, so
``-p_t`` is the gradient of the (scaled) per-sample objective with respect to
``x_t``.  ``scale`` is 1 for per-sample work and the batch size inside training.

The costate recursion is explicit: H_t is linear in p, so grad_p H_t = f_t does
not depend on p and the forward sweep never needs the costates.
"""
from dataclasses import dataclass

import numpy as np

from .dynsys import ACTIVATIONS, Params, forward, layer_map, loss_grad
from .errors import NumericError, UsageError


@dataclass
class CostateTrajectory:
    costates: list  # costates[t - 1] is p_t, t = 1..T
    scale: float = 1.0

    def p(self, t):
        if not 1 <= t <= len(self.costates):
            raise UsageError(f"costate index {t} outside [1, {len(self.costates)}]")
        return self.costates[t - 1]

    @property
    def p1(self):
        return self.costates[0]


def _running_cost_theta(spec, params, t):
    lam = spec.reg_weights[t]
    if lam == 0.0:
        return 0.0
    th = params.layer_flat(t)
    return lam * 0.5 * float(th @ th)


def _running_cost_x(spec, t, x):
    lam = spec.state_reg_weights[t]
    if lam == 0.0:
        return np.zeros(np.shape(x)[:-1])
    return lam * 0.5 * np.sum(x * x, axis=-1)


def _check_layer_args(spec, t, x, p):
    dims = spec.layer_dims
    if not 0 <= t < spec.depth:
        raise UsageError(f"layer index {t} outside [0, {spec.depth})")
    if np.shape(x)[-1] != dims[t] or np.shape(p)[-1] != dims[t + 1]:
        raise UsageError(f"layer {t}: x has dim {np.shape(x)[-1]}, p has dim {np.shape(p)[-1]}; expected {dims[t]}, {dims[t + 1]}")


def hamiltonian_t(spec, params, t, x, p):
    """H_t(x, p, theta) = p . f_t(x, theta_t) - R_t(x, theta_t)."""
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    _check_layer_args(spec, t, x, p)
    f = layer_map(spec, params, t, x)
    return np.sum(p * f, axis=-1) - _running_cost_theta(spec, params, t) - _running_cost_x(spec, t, x)


def hamiltonian_0(spec, params, x0, p1, eta):
    """H_0(x, p, theta, eta) = p . f_0(x + eta, theta_0) - R_0(x, theta_0)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if eta.shape != x0.shape:
        raise UsageError(f"eta shape {eta.shape} != x0 shape {x0.shape}")
    _check_layer_args(spec, 0, x0, p1)
    f = layer_map(spec, params, 0, x0 + eta)
    return np.sum(p1 * f, axis=-1) - _running_cost_theta(spec, params, 0) - _running_cost_x(spec, 0, x0)


def hamiltonian_grad_p(spec, params, t, x):
    """grad_p H_t = f_t(x, theta_t); independent of p."""
    return layer_map(spec, params, t, x)


def _act_prime(spec, t, z, a):
    return ACTIVATIONS[spec.activations[t]][1](z, a)


def backward(spec, params, traj, y, scale=1.0):
    """Costates p_T..p_1 for a trajectory produced by ``forward`` with these params."""
    T = spec.depth
    if len(traj.states) != T + 1 or len(traj.pre) != T:
        raise UsageError("trajectory depth does not match the network")
    for t in range(T):
        if traj.pre[t].shape[-1] != spec.layer_dims[t + 1]:
            raise UsageError(f"trajectory layer {t} has width {traj.pre[t].shape[-1]}")
    inv = 1.0 / scale
    p = -inv * loss_grad(spec, traj.output, y)
    costates = [p]
    for t in range(T - 1, 0, -1):
        d = _act_prime(spec, t, traj.pre[t], traj.states[t + 1]) * p
        p = d @ params.weights[t]
        lam = spec.state_reg_weights[t]
        if lam:
            p = p - inv * lam * traj.states[t]
        costates.append(p)
    costates.reverse()
    if not np.all(np.isfinite(costates[0])):
        raise NumericError("non-finite costate")
    return CostateTrajectory(costates, scale)


def sweep(spec, params, x0, eta, y, scale=1.0):
    """One full forward + backward pass."""
    traj = forward(spec, params, x0, eta)
    return traj, backward(spec, params, traj, y, scale)


def grad_eta(spec, params, x0, eta, p1):
    """(grad_eta f_0(x0 + eta, theta_0))^T p1, evaluated at the given eta.

    With the fresh costate of this eta the ascent direction of the adversarial
    objective is ``-grad_eta``.  Any ``p1`` is accepted; a stale one gives the
    frozen-costate update.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    if eta.shape != x0.shape or x0.shape[-1] != spec.input_dim:
        raise UsageError(f"x0 {x0.shape} / eta {eta.shape} do not match input dim {spec.input_dim}")
    if p1.shape[-1] != spec.layer_dims[1] or p1.shape[:-1] != x0.shape[:-1]:
        raise UsageError(f"p1 has shape {p1.shape}")
    W, b = params.weights[0], params.biases[0]
    z = (x0 + eta) @ W.T + b
    a = ACTIVATIONS[spec.activations[0]][0](z)
    return (_act_prime(spec, 0, z, a) * p1) @ W


def grad_theta(spec, params, traj, costates):
    """Gradient of (Phi + sum_t R_t) / scale with respect to every theta_t, summed over the batch.

    The costates MUST be the fresh ones for ``traj``; a stale set is not
    detectable here and silently gives a wrong gradient.
    """
    T = spec.depth
    x_in = traj.layer_input(0)
    nsamples = 1 if x_in.ndim == 1 else x_in.shape[0]
    reg_factor = nsamples / costates.scale
    gW, gb = [], []
    for t in range(T):
        d = _act_prime(spec, t, traj.pre[t], traj.states[t + 1]) * costates.p(t + 1)
        xt = traj.layer_input(t)
        if d.ndim == 1:
            W_grad = -np.outer(d, xt)
            b_grad = -d
        else:
            W_grad = -(d.T @ xt)
            b_grad = -np.sum(d, axis=0)
        lam = spec.reg_weights[t]
        if lam:
            W_grad = W_grad + reg_factor * lam * params.weights[t]
            b_grad = b_grad + reg_factor * lam * params.biases[t]
        gW.append(W_grad)
        gb.append(b_grad)
    return Params(gW, gb)


def state_gradients(spec, params, x0, y, eta=None):
    """-p_t for t = 1..T: gradient of the per-sample objective with respect to each state."""
    traj, co = sweep(spec, params, x0, eta, y)
    return [-c for c in co.costates]
