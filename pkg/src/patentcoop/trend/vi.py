"""Mean-field variational inference for the trend model, and forecasting.

The surrogate posterior is a product of independent normals over the
unconstrained coordinates ``(log L, m1, m2, log s1, log s2, mix_logit)``.
Gradients of the ELBO use the location-scale reparameterization.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from ..graph import EventSeries, from_days, to_days
from .model import (
    UNCONSTRAINED_NAMES,
    TrendParams,
    TrendPosterior,
    TrendPrior,
    _as_days,
    log_likelihood_and_grad,
)

log = logging.getLogger(__name__)

LOG_2PI_E = math.log(2.0 * math.pi * math.e)
# optimizer coordinates: midpoints move in years, everything else as is
_COORD_SCALE = np.array([1.0, 365.25, 365.25, 1.0, 1.0, 1.0])
_MAX_CHUNK_CELLS = 2_000_000


class VIDivergenceError(RuntimeError):
    """The variational objective stayed non-finite; ``history`` holds the trace."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


@dataclass
class VariationalPosterior:
    """Independent normals over the unconstrained trend coordinates."""

    mean: np.ndarray
    sd: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.sd = np.asarray(self.sd, dtype=float)
        if self.mean.shape != self.sd.shape or self.mean.ndim != 1:
            raise ValueError("mean and sd must be vectors of equal length")
        if np.any(~(self.sd > 0)):
            raise ValueError("surrogate sds must be strictly positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.mean + self.sd * rng.standard_normal((n, self.mean.size))

    def entropy(self) -> float:
        return float(np.sum(np.log(self.sd)) + 0.5 * self.mean.size * LOG_2PI_E)

    def ordered(self) -> "VariationalPosterior":
        """Swap curve labels so the first curve has the earlier mean midpoint."""
        if self.mean.size != 6 or self.mean[1] <= self.mean[2]:
            return self
        perm = [0, 2, 1, 4, 3, 5]
        mean, sd = self.mean[perm].copy(), self.sd[perm].copy()
        mean[5] = -mean[5]
        return VariationalPosterior(mean, sd)

    def point(self) -> TrendParams:
        return TrendParams.from_unconstrained(self.mean)

    def constrained_moments(self) -> dict[str, dict[str, float]]:
        """Mean and sd of the natural-scale parameters under the surrogate."""
        mu, sd = self.mean, self.sd
        out = {}
        for k, name in ((0, "capacity_L"), (3, "scale_1"), (4, "scale_2")):
            m = math.exp(mu[k] + 0.5 * sd[k] ** 2)
            out[name] = {"mean": m, "sd": m * math.sqrt(math.expm1(sd[k] ** 2))}
        for k, name in ((1, "midpoint_1"), (2, "midpoint_2")):
            out[name] = {"mean": float(mu[k]), "sd": float(sd[k]),
                         "mean_date": from_days(mu[k]).date().isoformat()}
        # logit-normal moments by Gauss-Hermite quadrature
        nodes, weights = np.polynomial.hermite_e.hermegauss(64)
        weights = weights / weights.sum()
        p = 1.0 / (1.0 + np.exp(-(mu[5] + sd[5] * nodes)))
        m1 = float(weights @ p)
        out["p1"] = {"mean": m1, "sd": math.sqrt(max(float(weights @ p ** 2) - m1 ** 2, 0.0))}
        return out

    def to_dict(self) -> dict:
        return {
            "unconstrained": {
                n: {"mean": float(m), "sd": float(s)}
                for n, m, s in zip(UNCONSTRAINED_NAMES, self.mean, self.sd)
            },
            "constrained": self.constrained_moments(),
        }

    @classmethod
    def from_dict(cls, data) -> "VariationalPosterior":
        block = data["unconstrained"]
        return cls(np.array([block[n]["mean"] for n in UNCONSTRAINED_NAMES]),
                   np.array([block[n]["sd"] for n in UNCONSTRAINED_NAMES]))


def monte_carlo_elbo(log_joint: Callable[[np.ndarray], np.ndarray], surrogate: VariationalPosterior,
                     n_mc: int, rng: np.random.Generator, chunk: int = 1024) -> float:
    """``E_q[log p(theta, data)] + H[q]`` with ``n_mc`` reparameterized draws.

    ``log_joint`` maps an ``(S, d)`` batch to ``S`` log densities. The
    entropy of the independent normals is exact.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    total = 0.0
    done = 0
    while done < n_mc:
        k = min(chunk, n_mc - done)
        eps = rng.standard_normal((k, surrogate.mean.size))
        vals = np.asarray(log_joint(surrogate.mean + surrogate.sd * eps), dtype=float)
        total += float(np.sum(vals))
        done += k
    value = total / n_mc + surrogate.entropy()
    if not math.isfinite(value):
        raise FloatingPointError(f"non-finite ELBO estimate from {n_mc} draws")
    return value


def _chunk_size(n_events: int) -> int:
    return max(1, min(4096, _MAX_CHUNK_CELLS // max(n_events, 1)))


def elbo_estimate(surrogate: VariationalPosterior, events, prior: TrendPrior | None = None,
                  n_mc: int = 16384, rng: np.random.Generator | None = None) -> float:
    """Monte Carlo ELBO of the trend posterior; ``events=None`` leaves only the prior."""
    target = TrendPosterior(events, prior)
    rng = rng if rng is not None else np.random.default_rng()
    return monte_carlo_elbo(lambda U: target.batch(U)[0], surrogate, n_mc, rng,
                            chunk=_chunk_size(target.times.size))


def expected_log_likelihood(surrogate: VariationalPosterior, events, eps: np.ndarray) -> float:
    """Average process log likelihood of ``events`` over fixed standard-normal draws ``eps``."""
    times = events.times if isinstance(events, EventSeries) else np.asarray(events, dtype=float)
    chunk = _chunk_size(times.size)
    total = 0.0
    for start in range(0, eps.shape[0], chunk):
        U = surrogate.mean + surrogate.sd * eps[start:start + chunk]
        total += float(np.sum(log_likelihood_and_grad(U, times)[0]))
    return total / eps.shape[0]


# -- fitting ---------------------------------------------------------------

@dataclass
class VIConfig:
    n_mc: int = 16384
    grad_samples: int = 16
    validation_cutoff: str | float = "2020-09-01"
    max_iters: int = 20000
    eval_interval: int = 200
    learning_rate: float = 0.01
    patience: int = 1
    seed: int = 0
    n_starts: int = 24


@dataclass
class VIResult:
    surrogate: VariationalPosterior
    elbo: float
    validation_history: list[float] = field(default_factory=list)
    iterations: int = 0
    map_estimate: np.ndarray | None = None
    n_train: int = 0
    n_validation: int = 0


def _starting_points(times: np.ndarray, prior: TrendPrior, n_starts: int, rng) -> np.ndarray:
    """Data-driven starts: curves around the observed span with varied growth."""
    t_first, t_last = times[0], times[-1]
    n = times.size
    span = t_last - t_first
    starts = []
    for k in range(n_starts):
        growth = (1.5, 3.0, 6.0, 12.0)[k % 4]
        late_shift = (0.5, 2.0, 4.0)[(k // 4) % 3] * 365.25
        p_early = (0.1, 0.4)[(k // 12) % 2]
        jitter = rng.normal(0.0, 0.05, 6)
        starts.append([
            math.log(growth * n) + jitter[0],
            t_first + 0.6 * span + jitter[1] * span,
            t_last + late_shift + jitter[2] * 365.25,
            math.log(0.2 * span) + jitter[3],
            math.log(max(0.05 * span, 30.0)) + jitter[4],
            math.log(p_early / (1.0 - p_early)) + jitter[5],
        ])
    return np.array(starts)


def find_map(posterior: TrendPosterior, starts: np.ndarray) -> np.ndarray:
    """Best L-BFGS optimum of the log posterior over several starting points."""
    scale = _COORD_SCALE

    def neg(eta):
        val, grad = posterior(eta * scale)
        if not math.isfinite(val):
            return 1e300, np.zeros_like(eta)
        return -val, -grad * scale

    best, best_val = None, -math.inf
    for u0 in starts:
        res = minimize(neg, u0 / scale, jac=True, method="L-BFGS-B",
                       options={"maxiter": 2000, "gtol": 1e-8})
        val = -float(res.fun)
        if math.isfinite(val) and val > best_val:
            best, best_val = res.x * scale, val
    if best is None:
        raise VIDivergenceError("no finite posterior mode found from any start")
    return best


def laplace_sds(posterior: TrendPosterior, u: np.ndarray) -> np.ndarray:
    """``1 / sqrt(diag(H))`` of the negative log posterior Hessian at ``u``.

    For a Gaussian target this is exactly the mean-field optimum, which makes
    it a good initial surrogate width.
    """
    d = u.size
    H = np.empty((d, d))
    for k in range(d):
        h = 1e-4 * _COORD_SCALE[k]
        e = np.zeros(d)
        e[k] = h
        H[:, k] = -(posterior(u + e)[1] - posterior(u - e)[1]) / (2 * h)
    diag = np.diag(0.5 * (H + H.T))
    return np.where(diag > 0, 1.0 / np.sqrt(np.abs(diag)), _COORD_SCALE * 0.1)


class _Adam:
    def __init__(self, lr, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def ascend(self, params, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return params + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def fit_vi(events: EventSeries, prior: TrendPrior | None = None,
           config: VIConfig | None = None) -> VIResult:
    """Fit the mean-field surrogate with validation-based early stopping.

    Events before ``config.validation_cutoff`` train the ELBO; the remainder
    scores the surrogate's expected log likelihood every
    ``config.eval_interval`` iterations. Training stops once that score fails
    to improve ``config.patience`` times in a row and the best surrogate seen
    is returned.
    """
    prior = prior or TrendPrior()
    config = config or VIConfig()
    cutoff = _as_days(config.validation_cutoff)
    times = events.times if isinstance(events, EventSeries) else np.sort(np.asarray(events, float))
    k = int(np.searchsorted(times, cutoff, side="left"))
    train, valid = times[:k], times[k:]
    if train.size == 0 or valid.size == 0:
        raise ValueError(f"validation cutoff leaves {train.size} training and "
                         f"{valid.size} validation events; both must be nonempty")

    root = np.random.SeedSequence(config.seed)
    rng_init, rng_grad, rng_eval, rng_elbo = (np.random.default_rng(s) for s in root.spawn(4))
    posterior = TrendPosterior(train, prior)

    u_map = find_map(posterior, _starting_points(train, prior, config.n_starts, rng_init))
    sd0 = laplace_sds(posterior, u_map)
    log.info("MAP start %s, Laplace sds %s", u_map, sd0)

    # optimizer state: scaled means and log sds
    eta = u_map / _COORD_SCALE
    rho = np.log(sd0)
    adam = _Adam(config.learning_rate, (2, 6))
    eval_eps = rng_eval.standard_normal((config.n_mc, 6))

    def current():
        return VariationalPosterior(eta * _COORD_SCALE, np.exp(rho))

    best = current()
    best_score = expected_log_likelihood(best, valid, eval_eps)
    history = [best_score]
    bad_intervals = strikes = 0
    interval_values = []
    it = 0
    for it in range(1, config.max_iters + 1):
        with np.errstate(all="ignore"):
            sd = np.exp(rho)
            eps = rng_grad.standard_normal((config.grad_samples, 6))
            U = eta * _COORD_SCALE + sd * eps
            vals, grads = posterior.batch(U)
            g_mu = grads.mean(axis=0)
            g_rho = (grads * eps).mean(axis=0) * sd + 1.0
        interval_values.append(float(vals.mean()))
        if np.all(np.isfinite(g_mu)) and np.all(np.isfinite(g_rho)):
            step = adam.ascend(np.stack([eta, rho]), np.stack([g_mu * _COORD_SCALE, g_rho]))
            eta, rho = step[0], step[1]

        if it % config.eval_interval:
            continue
        with np.errstate(over="ignore"):
            finite = np.all(np.isfinite(interval_values)) and np.all(np.isfinite(np.exp(rho)))
        interval_values = []
        if not finite:
            bad_intervals += 1
            if bad_intervals >= 3:
                raise VIDivergenceError(
                    f"ELBO non-finite for 3 consecutive intervals (iteration {it})", history)
            continue
        bad_intervals = 0
        score = expected_log_likelihood(current(), valid, eval_eps)
        history.append(score)
        log.info("iter %d validation %.4f", it, score)
        if score > best_score:
            best, best_score, strikes = current(), score, 0
        else:
            strikes += 1
            if strikes >= config.patience:
                break

    surrogate = best.ordered()
    elbo = elbo_estimate(surrogate, train, prior, config.n_mc, rng_elbo)
    return VIResult(surrogate, elbo, history, it, u_map, train.size, valid.size)


# -- forecasting -------------------------------------------------------------

@dataclass
class Forecast:
    times: np.ndarray
    cumulative_mean: np.ndarray
    cumulative_lo: np.ndarray
    cumulative_hi: np.ndarray
    rate_mean: np.ndarray  # (n_times, 2)
    rate_lo: np.ndarray
    rate_hi: np.ndarray
    total_rate_mean: np.ndarray


def forecast(posterior: VariationalPosterior, grid, n_draws: int = 4000,
             rng: np.random.Generator | None = None) -> Forecast:
    """Posterior mean and 95% band of the cumulative rate and both curve rates."""
    grid = np.array([_as_days(g) for g in np.atleast_1d(grid)], dtype=float)
    if grid.size == 0:
        raise ValueError("forecast grid is empty")
    rng = rng if rng is not None else np.random.default_rng()
    U = posterior.sample(rng, n_draws)
    # keep curve 1 as the early curve draw by draw
    swap = U[:, 1] > U[:, 2]
    U[swap] = U[swap][:, [0, 2, 1, 4, 3, 5]] * np.array([1, 1, 1, 1, 1, -1])
    L = np.exp(U[:, :1])
    s1, s2 = np.exp(U[:, 3:4]), np.exp(U[:, 4:5])
    p1 = 1.0 / (1.0 + np.exp(-U[:, 5:6]))
    z1 = (grid[None, :] - U[:, 1:2]) / s1
    z2 = (grid[None, :] - U[:, 2:3]) / s2
    sig1, sig2 = expit(z1), expit(z2)
    cum = L * (p1 * sig1 + (1 - p1) * sig2)
    r1 = L * p1 * sig1 * (1 - sig1) / s1
    r2 = L * (1 - p1) * sig2 * (1 - sig2) / s2
    q = lambda a: np.quantile(a, [0.025, 0.975], axis=0)  # noqa: E731
    cq, q1, q2 = q(cum), q(r1), q(r2)
    return Forecast(
        times=grid,
        cumulative_mean=cum.mean(axis=0),
        cumulative_lo=cq[0],
        cumulative_hi=cq[1],
        rate_mean=np.column_stack([r1.mean(axis=0), r2.mean(axis=0)]),
        rate_lo=np.column_stack([q1[0], q2[0]]),
        rate_hi=np.column_stack([q1[1], q2[1]]),
        total_rate_mean=(r1 + r2).mean(axis=0),
    )


def monthly_grid(start_days: float, end="2030-01-01") -> np.ndarray:
    """First day of every month from the month of ``start_days`` up to ``end``."""
    first = from_days(start_days)
    stop = to_days(end)
    year, month = first.year, first.month
    out = []
    while True:
        t = to_days(f"{year:04d}-{month:02d}-01")
        if t > stop:
            break
        out.append(t)
        month += 1
        if month == 13:
            year, month = year + 1, 1
    return np.array(out)


FORECAST_COLUMNS = ("time", "lambda_mean", "lambda_lo", "lambda_hi", "rate1_mean", "rate1_lo",
                    "rate1_hi", "rate2_mean", "rate2_lo", "rate2_hi", "total_rate_mean")


def write_forecast_csv(fc: Forecast, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FORECAST_COLUMNS)
        for k, t in enumerate(fc.times):
            row = [t, fc.cumulative_mean[k], fc.cumulative_lo[k], fc.cumulative_hi[k],
                   fc.rate_mean[k, 0], fc.rate_lo[k, 0], fc.rate_hi[k, 0],
                   fc.rate_mean[k, 1], fc.rate_lo[k, 1], fc.rate_hi[k, 1], fc.total_rate_mean[k]]
            writer.writerow([repr(float(v)) for v in row])


def write_surrogate_json(result: VIResult | VariationalPosterior, path: str | Path, extra=None) -> None:
    surrogate = result.surrogate if isinstance(result, VIResult) else result
    payload = surrogate.to_dict()
    if isinstance(result, VIResult):
        payload["fit"] = {
            "elbo": result.elbo,
            "iterations": result.iterations,
            "validation_history": result.validation_history,
            "n_train": result.n_train,
            "n_validation": result.n_validation,
        }
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_surrogate_json(path: str | Path) -> VariationalPosterior:
    with open(path, encoding="utf-8") as fh:
        return VariationalPosterior.from_dict(json.load(fh))


__all__ = [
    "Forecast", "VIConfig", "VIDivergenceError", "VIResult", "VariationalPosterior",
    "elbo_estimate", "expected_log_likelihood", "find_map", "fit_vi", "forecast",
    "laplace_sds", "monte_carlo_elbo", "monthly_grid", "write_forecast_csv",
    "write_surrogate_json", "read_surrogate_json",
]
