"""Small dense-array helpers shared by the rest of the package.

Everything is float64. Vectors and matrices are plain numpy arrays; the
helpers here add the dimension/finiteness checks the rest of the code relies on.
"""
import zlib

import numpy as np

from .errors import NumericError, UsageError

DEFAULT_FD_STEP = 1e-6


def as_vec(v, name="vector"):
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise UsageError(f"{name} must be a nonempty 1-d array, got shape {a.shape}")
    return a


def as_mat(m, name="matrix"):
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise UsageError(f"{name} must be a nonempty 2-d array, got shape {a.shape}")
    return a


def check_finite(a, what="value"):
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite {what}")
    return a


def matvec(m, v):
    m = as_mat(m, "m")
    v = as_vec(v, "v")
    if m.shape[1] != v.shape[0]:
        raise UsageError(f"matvec: {m.shape} matrix against dim-{v.shape[0]} vector")
    return m @ v


def central_diff(f, x, h=None):
    """Central finite-difference gradient of a scalar function.

    ``h`` defaults to ``1e-6 * max(1, ||x||_inf)``.
    """
    x = as_vec(x, "x")
    if h is None:
        h = DEFAULT_FD_STEP * max(1.0, float(np.max(np.abs(x))))
    if not h > 0:
        raise UsageError("finite-difference step must be positive")
    g = np.empty_like(x)
    xp = x.copy()
    for i in range(x.size):
        xp[i] = x[i] + h
        fp = float(f(xp))
        xp[i] = x[i] - h
        fm = float(f(xp))
        xp[i] = x[i]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a, b, floor=1e-8):
    """max |a-b| / max(max|b|, floor): one number per comparison."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.max(np.abs(b), initial=0.0)), floor)
    return float(np.max(np.abs(a - b), initial=0.0)) / scale


def _label_key(label):
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    return int(label)


def make_rng(seed, *labels):
    """Deterministic generator for ``seed`` and a path of labels.

    ``make_rng(7, "init")`` and ``make_rng(7, "adversary", 12)`` draw from
    independent streams; the same arguments always give the same stream.
    """
    if seed < 0:
        raise UsageError("seed must be nonnegative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_label_key(l) for l in labels))
    return np.random.Generator(np.random.PCG64(ss))


def rng_state(rng):
    return rng.bit_generator.state


def rng_from_state(state):
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
