"""Two-logistic cumulative rate and the inhomogeneous Poisson process likelihood.

Time is measured in real-valued days since 1970-01-01. The expected number of
events up to ``t`` is

    Lambda(t) = L * (p1 * sigmoid((t - m1) / s1) + (1 - p1) * sigmoid((t - m2) / s2))

and the event rate is its derivative, a scaled mixture of logistic densities.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.special import expit, log_expit

from .. import stats
from ..graph import EventSeries, from_days, to_days

DAYS_PER_YEAR = 365.25
UNCONSTRAINED_NAMES = ("ln_capacity", "midpoint_1", "midpoint_2", "ln_scale_1", "ln_scale_2", "mix_logit")


@dataclass(frozen=True)
class TrendParams:
    """Capacity ``L``, midpoints and scales (days) and the first-curve mixing logit."""

    capacity_L: float
    midpoint_1: float
    midpoint_2: float
    scale_1: float
    scale_2: float
    mix_logit: float

    def __post_init__(self):
        if not (self.capacity_L > 0 and self.scale_1 > 0 and self.scale_2 > 0):
            raise ValueError("capacity and scales must be strictly positive")
        if not all(math.isfinite(getattr(self, f.name)) for f in fields(self)):
            raise ValueError("trend parameters must be finite")

    @property
    def p1(self) -> float:
        return float(stats.logistic_sigmoid(self.mix_logit))

    @classmethod
    def from_p1(cls, capacity_L, midpoint_1, midpoint_2, scale_1, scale_2, p1) -> "TrendParams":
        if not 0.0 < p1 < 1.0:
            raise ValueError("p1 must lie strictly between 0 and 1")
        return cls(capacity_L, _as_days(midpoint_1), _as_days(midpoint_2), scale_1, scale_2,
                   float(stats.logit(p1)))

    def to_unconstrained(self) -> np.ndarray:
        return np.array([math.log(self.capacity_L), self.midpoint_1, self.midpoint_2,
                         math.log(self.scale_1), math.log(self.scale_2), self.mix_logit])

    @classmethod
    def from_unconstrained(cls, u) -> "TrendParams":
        u = np.asarray(u, dtype=float)
        return cls(math.exp(u[0]), float(u[1]), float(u[2]), math.exp(u[3]), math.exp(u[4]), float(u[5]))

    def ordered(self) -> "TrendParams":
        """Same curve with component 1 as the earlier-midpoint logistic."""
        if self.midpoint_1 <= self.midpoint_2:
            return self
        return TrendParams(self.capacity_L, self.midpoint_2, self.midpoint_1,
                           self.scale_2, self.scale_1, -self.mix_logit)

    # duck-typed interface used by process_log_likelihood
    def log_rate(self, t):
        return log_rate(self, t)

    def cumulative(self, t):
        return mixture_cumulative_rate(self, t)

    def cumulative_difference(self, t_a, t_b):
        return cumulative_difference(self, t_a, t_b)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["p1"] = self.p1
        out["midpoint_1_date"] = from_days(self.midpoint_1).date().isoformat()
        out["midpoint_2_date"] = from_days(self.midpoint_2).date().isoformat()
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrendParams":
        """Build from a mapping; midpoints may be ISO dates, ``p1`` may replace ``mix_logit``."""
        try:
            mix = data["mix_logit"] if "mix_logit" in data else float(stats.logit(float(data["p1"])))
            return cls(
                float(data["capacity_L"]),
                _as_days(data["midpoint_1"]),
                _as_days(data["midpoint_2"]),
                float(data["scale_1"]),
                float(data["scale_2"]),
                float(mix),
            )
        except KeyError as exc:
            raise ValueError(f"missing trend parameter {exc.args[0]!r}") from None


def _as_days(value) -> float:
    if isinstance(value, (int, float)):
        return float(value)
    return to_days(value)


#: Posterior means of the full-data trend fit.
TABLE3_MEANS = TrendParams.from_p1(
    capacity_L=50288.0,
    midpoint_1="2015-02-12",
    midpoint_2="2024-07-26",
    scale_1=3342.0,
    scale_2=666.0,
    p1=0.123,
)


def logistic_cumulative(L, t0, s, t):
    """Single logistic cumulative rate ``L * sigmoid((t - t0) / s)``."""
    if not (L > 0 and s > 0):
        raise ValueError("capacity and scale must be strictly positive")
    return L * stats.logistic_sigmoid((np.asarray(t, dtype=float) - t0) / s)


def mixture_cumulative_rate(params: TrendParams, t):
    """Expected number of events up to time ``t`` under the two-curve mixture."""
    t = np.asarray(t, dtype=float)
    p1 = params.p1
    out = params.capacity_L * (
        p1 * expit((t - params.midpoint_1) / params.scale_1)
        + (1.0 - p1) * expit((t - params.midpoint_2) / params.scale_2)
    )
    return float(out) if out.ndim == 0 else out


def _sigmoid_difference(za, zb):
    """``sigmoid(zb) - sigmoid(za)`` without cancellation in the upper tail."""
    za, zb = np.asarray(za, dtype=float), np.asarray(zb, dtype=float)
    upper = (za > 0) & (zb > 0)
    return np.where(upper, expit(-za) - expit(-zb), expit(zb) - expit(za))


def cumulative_difference(params: TrendParams, t_a, t_b):
    """``Lambda(t_b) - Lambda(t_a)`` evaluated in closed form."""
    p1 = params.p1
    d1 = _sigmoid_difference((t_a - params.midpoint_1) / params.scale_1,
                             (t_b - params.midpoint_1) / params.scale_1)
    d2 = _sigmoid_difference((t_a - params.midpoint_2) / params.scale_2,
                             (t_b - params.midpoint_2) / params.scale_2)
    out = params.capacity_L * (p1 * d1 + (1.0 - p1) * d2)
    return float(out) if np.ndim(out) == 0 else out


def component_log_rates(params: TrendParams, t):
    """Log rate of each curve, shape ``t.shape + (2,)``."""
    t = np.asarray(t, dtype=float)
    lp1, lp2 = stats.log_sigmoid(params.mix_logit), stats.log_sigmoid(-params.mix_logit)
    lc = math.log(params.capacity_L)
    c1 = lc + lp1 + stats.log_logistic_pdf(t, params.midpoint_1, params.scale_1)
    c2 = lc + lp2 + stats.log_logistic_pdf(t, params.midpoint_2, params.scale_2)
    return np.stack([c1, c2], axis=-1)


def log_rate(params: TrendParams, t):
    out = np.logaddexp.reduce(component_log_rates(params, t), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def rate(params: TrendParams, t):
    """Event rate (events per day): the derivative of the cumulative rate."""
    out = np.exp(log_rate(params, t))
    return float(out) if np.ndim(out) == 0 else out


def component_rates(params: TrendParams, t):
    return np.exp(component_log_rates(params, t))


def process_log_likelihood(model, events: EventSeries) -> float:
    """Inhomogeneous Poisson process log likelihood of the event times.

    ``sum_i log rate(t_i) - (Lambda(t_n) - Lambda(t_1))`` where ``t_1`` and
    ``t_n`` are the first and last events. ``model`` needs ``log_rate(t)`` and
    either ``cumulative_difference(a, b)`` or ``cumulative(t)``.
    """
    times = events.times if isinstance(events, EventSeries) else np.asarray(events, dtype=float)
    if times.size == 0:
        raise ValueError("need at least one event")
    with np.errstate(divide="ignore"):
        log_r = np.asarray(model.log_rate(times), dtype=float)
    if np.any(np.isnan(log_r)):
        return -math.inf
    t1, tn = float(times[0]), float(times[-1])
    if hasattr(model, "cumulative_difference"):
        integral = float(model.cumulative_difference(t1, tn))
    else:
        integral = float(model.cumulative(tn)) - float(model.cumulative(t1))
    return float(np.sum(log_r)) - integral


# -- priors ----------------------------------------------------------------

@dataclass(frozen=True)
class TrendPrior:
    """Log-normal capacity, normal midpoints, exponential scales, normal mixing logit."""

    capacity_meanlog: float = 26.0
    capacity_sdlog: float = 4.0
    midpoint_mean: float = to_days("2011-01-01")
    midpoint_sd: float = 27.0 * DAYS_PER_YEAR
    scale_mean: float = 50000.0
    mix_logit_mean: float = 1.0
    mix_logit_sd: float = 1.0

    def __post_init__(self):
        for name in ("capacity_sdlog", "midpoint_sd", "scale_mean", "mix_logit_sd"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrendPrior":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown trend prior keys: {sorted(unknown)}")
        values = dict(data)
        if "midpoint_mean" in values:
            values["midpoint_mean"] = _as_days(values["midpoint_mean"])
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    def sample_unconstrained(self, rng: np.random.Generator, size=None) -> np.ndarray:
        shape = () if size is None else (size,)
        return np.stack([
            rng.normal(self.capacity_meanlog, self.capacity_sdlog, shape),
            rng.normal(self.midpoint_mean, self.midpoint_sd, shape),
            rng.normal(self.midpoint_mean, self.midpoint_sd, shape),
            np.log(rng.exponential(self.scale_mean, shape)),
            np.log(rng.exponential(self.scale_mean, shape)),
            rng.normal(self.mix_logit_mean, self.mix_logit_sd, shape),
        ], axis=-1)


def trend_log_prior(u, prior: TrendPrior | None = None):
    """Prior log density in unconstrained coordinates (log-transform Jacobians included)."""
    u = np.asarray(u, dtype=float)
    lp = _log_prior_and_grad(np.atleast_2d(u), prior or TrendPrior())[0]
    return float(lp[0]) if u.ndim == 1 else lp


def _log_prior_and_grad(U: np.ndarray, prior: TrendPrior):
    a, m1, m2, v1, v2, w = U.T
    lam = 1.0 / prior.scale_mean
    log_lam = math.log(lam)
    lp = (
        stats.log_normal_density(a, prior.capacity_meanlog, prior.capacity_sdlog)
        + stats.log_normal_density(m1, prior.midpoint_mean, prior.midpoint_sd)
        + stats.log_normal_density(m2, prior.midpoint_mean, prior.midpoint_sd)
        + (log_lam - lam * np.exp(v1) + v1)
        + (log_lam - lam * np.exp(v2) + v2)
        + stats.log_normal_density(w, prior.mix_logit_mean, prior.mix_logit_sd)
    )
    grad = np.column_stack([
        -(a - prior.capacity_meanlog) / prior.capacity_sdlog ** 2,
        -(m1 - prior.midpoint_mean) / prior.midpoint_sd ** 2,
        -(m2 - prior.midpoint_mean) / prior.midpoint_sd ** 2,
        1.0 - lam * np.exp(v1),
        1.0 - lam * np.exp(v2),
        -(w - prior.mix_logit_mean) / prior.mix_logit_sd ** 2,
    ])
    return np.atleast_1d(lp), grad


def log_likelihood_and_grad(U: np.ndarray, times: np.ndarray):
    """Process log likelihood and its gradient for a batch of unconstrained points.

    ``U`` has shape ``(S, 6)``; returns arrays of shape ``(S,)`` and ``(S, 6)``.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    times = np.asarray(times, dtype=float)
    S = U.shape[0]
    if times.size == 0:
        return np.zeros(S), np.zeros((S, 6))
    a, m1, m2, v1, v2, w = (U[:, k:k + 1] for k in range(6))
    s1, s2 = np.exp(v1), np.exp(v2)
    t = times[None, :]
    z1 = (t - m1) / s1
    z2 = (t - m2) / s2
    lp1, lp2 = log_expit(w), log_expit(-w)
    # log logistic density: -log s - softplus(z) - softplus(-z)
    c1 = lp1 - v1 + log_expit(z1) + log_expit(-z1)
    c2 = lp2 - v2 + log_expit(z2) + log_expit(-z2)
    lse = np.logaddexp(c1, c2)
    n = times.size
    sum_log_rate = n * a[:, 0] + lse.sum(axis=1)
    r1 = np.exp(c1 - lse)
    r2 = 1.0 - r1
    tanh1 = 2.0 * expit(z1) - 1.0
    tanh2 = 2.0 * expit(z2) - 1.0
    g_m1 = (r1 * tanh1).sum(axis=1) / s1[:, 0]
    g_m2 = (r2 * tanh2).sum(axis=1) / s2[:, 0]
    g_v1 = (r1 * (z1 * tanh1 - 1.0)).sum(axis=1)
    g_v2 = (r2 * (z2 * tanh2 - 1.0)).sum(axis=1)
    p1 = expit(w[:, 0])
    g_w = r1.sum(axis=1) - n * p1

    # integral term between first and last event
    ta, tb = times[0], times[-1]
    L = np.exp(a[:, 0])
    p2 = 1.0 - p1
    za1, zb1 = (ta - m1[:, 0]) / s1[:, 0], (tb - m1[:, 0]) / s1[:, 0]
    za2, zb2 = (ta - m2[:, 0]) / s2[:, 0], (tb - m2[:, 0]) / s2[:, 0]
    d1 = _sigmoid_difference(za1, zb1)
    d2 = _sigmoid_difference(za2, zb2)
    integral = L * (p1 * d1 + p2 * d2)

    def dens(z):
        e = expit(z)
        return e * (1.0 - e)

    ga1, gb1 = dens(za1), dens(zb1)
    ga2, gb2 = dens(za2), dens(zb2)
    di_m1 = -L * p1 * (gb1 - ga1) / s1[:, 0]
    di_m2 = -L * p2 * (gb2 - ga2) / s2[:, 0]
    di_v1 = -L * p1 * (gb1 * zb1 - ga1 * za1)
    di_v2 = -L * p2 * (gb2 * zb2 - ga2 * za2)
    di_w = L * p1 * p2 * (d1 - d2)

    ll = sum_log_rate - integral
    grad = np.column_stack([
        n - integral,
        g_m1 - di_m1,
        g_m2 - di_m2,
        g_v1 - di_v1,
        g_v2 - di_v2,
        g_w - di_w,
    ])
    return ll, grad


class TrendPosterior:
    """Unnormalized log posterior over unconstrained trend parameters.

    Calling an instance with a 6-vector returns ``(log_density, gradient)``;
    :meth:`batch` evaluates many points at once.
    """

    dimension = 6
    names = UNCONSTRAINED_NAMES

    def __init__(self, events, prior: TrendPrior | None = None):
        if events is None:
            times = np.empty(0)
        elif isinstance(events, EventSeries):
            times = events.times
        else:
            times = np.sort(np.asarray(events, dtype=float))
        self.times = times
        self.prior = prior or TrendPrior()

    def batch(self, U):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        lp, gp = _log_prior_and_grad(U, self.prior)
        ll, gl = log_likelihood_and_grad(U, self.times)
        return lp + ll, gp + gl

    def __call__(self, u):
        val, grad = self.batch(np.asarray(u, dtype=float)[None, :])
        return float(val[0]), grad[0]


# -- simulation --------------------------------------------------------------

def _segment_bounds(params: TrendParams, edges: np.ndarray) -> np.ndarray:
    """Upper bound of the rate on each segment between consecutive ``edges``.

    Each logistic density is unimodal, so its maximum over a segment is at the
    midpoint if covered and otherwise at the nearer end; summing the two
    per-curve maxima bounds the total rate.
    """
    lo, hi = edges[:-1], edges[1:]
    bound = np.zeros(lo.size)
    p = (params.p1, 1.0 - params.p1)
    for (m, s), pk in zip(((params.midpoint_1, params.scale_1), (params.midpoint_2, params.scale_2)), p):
        nearest = np.clip(m, lo, hi)
        bound += params.capacity_L * pk * np.exp(stats.log_logistic_pdf(nearest, m, s))
    return bound


def simulate(params: TrendParams, window, rng: np.random.Generator, n_segments: int = 512) -> EventSeries:
    """Draw event times on ``window`` by thinning a piecewise-constant majorant.

    Candidate points come from a homogeneous process with the per-segment
    rate bound and are kept with probability ``rate(t) / bound``.
    """
    t_a, t_b = (_as_days(w) for w in window)
    if t_a > t_b:
        raise ValueError("window start must not exceed window end")
    if t_a == t_b:
        return EventSeries(np.empty(0), (t_a, t_b))
    edges = np.linspace(t_a, t_b, n_segments + 1)
    bound = _segment_bounds(params, edges)
    widths = np.diff(edges)
    counts = rng.poisson(bound * widths)
    seg = np.repeat(np.arange(n_segments), counts)
    cand = edges[seg] + rng.random(seg.size) * widths[seg]
    keep = rng.random(seg.size) * bound[seg] < rate(params, cand)
    return EventSeries(np.sort(cand[keep]), (t_a, t_b))


def write_params_json(params: TrendParams, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params.to_dict(), fh, indent=2)
        fh.write("\n")


def read_params_json(path: str | Path) -> TrendParams:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, Mapping):
        raise ValueError("trend parameter file must hold a JSON object")
    return TrendParams.from_dict(data)
