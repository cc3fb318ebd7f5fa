"""Sigmoid helpers and the quadratic lower bound on the logistic likelihood."""

import numpy as np
from scipy.special import expit

sigmoid = expit


def log_sigmoid(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def jaakkola_lambda(a):
    """lambda(a) = (sigmoid(a) - 1/2) / (2a), continuous at a = 0 where it equals 1/8."""
    a = np.asarray(a, dtype=float)
    small = np.abs(a) < 1e-4
    safe = np.where(small, 1.0, a)
    # tanh form avoids the cancellation in sigmoid(a) - 1/2
    out = np.where(small, 0.125 - a * a / 96.0, np.tanh(safe / 2.0) / (4.0 * safe))
    return out if out.ndim else float(out)


def log_bound_h(y, t, xi):
    """ln h(y, t, xi) with h the quadratic-exponential lower bound of exp(y t) sigmoid(-y)."""
    y = np.asarray(y, dtype=float)
    xi = np.asarray(xi, dtype=float)
    return (
        y * np.asarray(t, dtype=float)
        + log_sigmoid(xi)
        - 0.5 * (y + xi)
        - jaakkola_lambda(xi) * (y * y - xi * xi)
    )


def logistic_bound_h(y, t, xi):
    out = np.exp(log_bound_h(y, t, xi))
    return out if out.ndim else float(out)


def logistic_likelihood(y, t):
    """Exact exp(y t) sigmoid(-y), i.e. p(t | y) for t in {0, 1}."""
    y = np.asarray(y, dtype=float)
    out = np.exp(y * np.asarray(t, dtype=float) + log_sigmoid(-y))
    return out if out.ndim else float(out)
