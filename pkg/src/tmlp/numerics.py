"""Dense arithmetic helpers, Adam, and a central-difference gradient oracle.

Matrices are ``(rows, cols)`` numpy arrays and vectors are 1-D arrays. The
batched helpers take sample-major arrays of shape ``(n, dim)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import OptimizerError, OracleError, ShapeError


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{what} contains non-finite values")


def matmul_add(W, x, b):
    """Return ``W @ x + b`` for a single vector ``x``."""
    W = np.asarray(W)
    x = np.asarray(x)
    b = np.asarray(b)
    if W.ndim != 2 or x.ndim != 1 or b.ndim != 1 or W.shape[1] != x.shape[0] or W.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_add: W{W.shape} @ x{x.shape} + b{b.shape} is not defined")
    return W @ x + b


def batched_affine(X, W, b):
    """Sample-major affine map: row ``n`` of the result is ``W @ X[n] + b``."""
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"batched_affine: X{X.shape}, W{W.shape}, b{b.shape} are incompatible")
    out = X @ W.T
    out += b
    return out


def sine_activation(z, omega0):
    if omega0 <= 0:
        raise ValueError(f"omega0 must be positive, got {omega0}")
    z = np.asarray(z)
    _check_finite(z, "sine_activation input")
    return np.sin(omega0 * z)


def hadamard(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    return a * b


@dataclass
class AdamState:
    """Moment buffers for :func:`adam_step`. Owned by a single trainer."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, size, dtype=np.float64, **hyper):
        return cls(np.zeros(size, dtype=dtype), np.zeros(size, dtype=dtype), **hyper)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied to ``params`` in place.

    Returns ``params`` for convenience. ``state`` is advanced by one step.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not (params.shape == grads.shape == state.first_moment.shape == state.second_moment.shape):
        raise ShapeError(
            f"adam_step: params{params.shape}, grads{grads.shape}, "
            f"moments{state.first_moment.shape}/{state.second_moment.shape} disagree"
        )
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        i = int(bad[0])
        raise OptimizerError(f"non-finite gradient at index {i}: {grads[i]!r}", index=i)

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    m, v = state.first_moment, state.second_moment
    m *= b1
    m += (1.0 - b1) * grads
    v *= b2
    v += (1.0 - b2) * (grads * grads)

    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    m_hat = m / bc1
    denom = np.sqrt(v / bc2)
    denom += state.epsilon
    params -= (lr * m_hat / denom).astype(params.dtype, copy=False)
    return params


def finite_difference_gradient(loss_fn, params, h=1e-5):
    """Central-difference gradient of a scalar ``loss_fn`` at ``params``.

    Always evaluated in binary64. ``loss_fn`` receives a fresh perturbed copy.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    p = np.array(params, dtype=np.float64)
    grad = np.empty_like(p)
    for i in range(p.size):
        orig = p[i]
        p[i] = orig + h
        f_plus = float(loss_fn(p.copy()))
        p[i] = orig - h
        f_minus = float(loss_fn(p.copy()))
        p[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise OracleError(f"loss is non-finite when perturbing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
