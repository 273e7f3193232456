"""Numerically stable log-space probability primitives.

Everything here works on scalars or numpy arrays and never leaves log space
unless the caller asks for a probability.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def log_poisson_pmf(rate, count):
    """Log of the Poisson probability mass ``rate**count * exp(-rate) / count!``.

    Parameters
    ----------
    rate : float or array_like
        Strictly positive Poisson rate.
    count : int or array_like
        Nonnegative integer count.

    Returns
    -------
    float or ndarray
    """
    rate = np.asarray(rate, dtype=float)
    count = np.asarray(count)
    if np.any(~(rate > 0)):
        raise ValueError("Poisson rate must be strictly positive")
    if np.any(count < 0):
        raise ValueError("Poisson count must be nonnegative")
    if np.any(count != np.floor(count)):
        raise ValueError("Poisson count must be an integer")
    out = count * np.log(rate) - rate - gammaln(count + 1.0)
    return float(out) if out.ndim == 0 else out


def log_poisson_pmf_from_log_rate(log_rate, count):
    """Poisson log-pmf parameterized by the log-rate; no argument checks.

    Used on hot paths where ``log_rate`` comes from a linear predictor and
    ``count`` has already been validated.
    """
    return count * log_rate - np.exp(log_rate) - gammaln(count + 1.0)


def log_sum_exp(terms, axis=None):
    """``log(sum(exp(terms)))`` computed by factoring out the maximum.

    Returns exactly ``-inf`` when every term is ``-inf``.
    """
    terms = np.asarray(terms, dtype=float)
    if terms.size == 0:
        raise ValueError("log_sum_exp of an empty vector is undefined")
    m = np.max(terms, axis=axis, keepdims=True)
    # all -inf slices: shift by 0 so exp() gives zeros instead of nan
    shift = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(terms - shift), axis=axis, keepdims=True)) + shift
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(logits, axis=-1):
    """Normalized exponentials of ``logits``; shift invariant."""
    logits = np.asarray(logits, dtype=float)
    if logits.size == 0:
        raise ValueError("softmax of an empty vector is undefined")
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax requires finite logits")
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=float)
    z = logits - np.max(logits, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def log_normal_density(x, mean, sd):
    """Log density of a normal distribution with the given mean and sd."""
    sd = np.asarray(sd, dtype=float)
    if np.any(~(sd > 0)):
        raise ValueError("normal sd must be strictly positive")
    z = (np.asarray(x, dtype=float) - mean) / sd
    out = -np.log(sd) - LOG_SQRT_2PI - 0.5 * z * z
    return float(out) if np.ndim(out) == 0 else out


def log_lognormal_density(x, meanlog, sdlog):
    """Log density of a log-normal variable ``x > 0``; ``-inf`` for ``x <= 0``."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        lx = np.log(x)
        out = np.where(x > 0, log_normal_density(lx, meanlog, sdlog) - lx, -np.inf)
    return float(out) if out.ndim == 0 else out


def log_exponential_density(x, mean):
    """Log density of an exponential distribution parameterized by its mean."""
    if not mean > 0:
        raise ValueError("exponential mean must be strictly positive")
    x = np.asarray(x, dtype=float)
    out = np.where(x >= 0, -math.log(mean) - x / mean, -np.inf)
    return float(out) if out.ndim == 0 else out


def logistic_sigmoid(z):
    """``1 / (1 + exp(-z))`` without overflow for large ``|z|``."""
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def log_sigmoid(z):
    """``log(sigmoid(z)) = -softplus(-z)``."""
    out = -np.logaddexp(0.0, -np.asarray(z, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def logit(p):
    p = np.asarray(p, dtype=float)
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


def log_logistic_pdf(t, loc, scale):
    """Log density of the logistic distribution with location ``loc``, scale ``scale``."""
    z = (np.asarray(t, dtype=float) - loc) / scale
    return -np.log(scale) - np.logaddexp(0.0, z) - np.logaddexp(0.0, -z)


def log_categorical(k, logits):
    """Log probability of category ``k`` under ``softmax(logits)``."""
    return float(log_softmax(logits)[k])
