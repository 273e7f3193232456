"""Three-component Poisson regression mixture over country pairs.

For a pair of countries with fractional patent counts ``C_i`` and ``C_j`` the
feature is ``x = log(C_i * C_j)`` and the cooperation count ``y`` follows

    y ~ sum_k pi_k Poisson(exp(alpha_k * x + beta_k)),   alpha_0 = 0,

with ``pi = softmax(logits)``. Component 0 does not scale with the feature and
stands for the absence of a lasting relation; components 1 and 2 are the
average and strong relation types.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numba
import numpy as np
from scipy.special import gammaln

from . import stats
from .graph import CooperationGraph

PARAM_NAMES = ("alpha1", "alpha2", "beta0", "beta1", "beta2", "logit0", "logit1", "logit2")
N_COMPONENTS = 3


@dataclass(frozen=True)
class RelationalParams:
    """Slopes, intercepts and mixing logits; the slope of component 0 is fixed at 0."""

    alpha1: float
    alpha2: float
    beta0: float
    beta1: float
    beta2: float
    logit0: float = 0.0
    logit1: float = 0.0
    logit2: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.to_array()):
            raise ValueError("relational parameters must be finite")

    @property
    def alphas(self) -> np.ndarray:
        return np.array([0.0, self.alpha1, self.alpha2])

    @property
    def betas(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2])

    @property
    def logits(self) -> np.ndarray:
        return np.array([self.logit0, self.logit1, self.logit2])

    @property
    def mixing(self) -> np.ndarray:
        return stats.softmax(self.logits)

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=float)

    @classmethod
    def from_array(cls, values) -> "RelationalParams":
        values = np.asarray(values, dtype=float)
        if values.shape != (len(PARAM_NAMES),):
            raise ValueError(f"expected {len(PARAM_NAMES)} parameters")
        return cls(*map(float, values))


#: Posterior means reported for the full 1990-2021 data set.
TABLE1_MEANS = RelationalParams(
    alpha1=0.719, alpha2=0.955, beta0=-8.146, beta1=-8.044, beta2=-7.966,
    logit0=-0.186, logit1=0.818, logit2=-0.613,
)


@dataclass(frozen=True)
class PairObservation:
    i: str
    j: str
    x: float
    y: int

    def __post_init__(self):
        if not math.isfinite(self.x):
            raise ValueError("pair feature must be finite")
        if self.y < 0 or int(self.y) != self.y:
            raise ValueError("cooperation count must be a nonnegative integer")


@dataclass(frozen=True)
class NormalHyper:
    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ValueError(f"prior sd must be positive, got {self.sd}")


def _hyper(mean, sd):
    return field(default_factory=lambda: NormalHyper(mean, sd))


@dataclass(frozen=True)
class RelationalPrior:
    """Independent normal priors; defaults are the full-data choices."""

    alpha1: NormalHyper = _hyper(0.5, 0.5)
    alpha2: NormalHyper = _hyper(0.5, 0.5)
    beta0: NormalHyper = _hyper(-8.0, 3.0)
    beta1: NormalHyper = _hyper(-8.0, 3.0)
    beta2: NormalHyper = _hyper(-8.0, 3.0)
    logit0: NormalHyper = _hyper(0.0, 2.0)
    logit1: NormalHyper = _hyper(0.0, 2.0)
    logit2: NormalHyper = _hyper(0.0, 2.0)

    @property
    def means(self) -> np.ndarray:
        return np.array([getattr(self, n).mean for n in PARAM_NAMES])

    @property
    def sds(self) -> np.ndarray:
        return np.array([getattr(self, n).sd for n in PARAM_NAMES])

    def with_overrides(self, **overrides) -> "RelationalPrior":
        """Replace hyperparameters, e.g. ``with_overrides(beta0=(-10, 3))``."""
        changes = {}
        for name, value in overrides.items():
            if name not in PARAM_NAMES:
                raise ValueError(f"unknown parameter {name!r}")
            if isinstance(value, NormalHyper):
                changes[name] = value
            elif isinstance(value, Mapping):
                old = getattr(self, name)
                changes[name] = NormalHyper(float(value.get("mean", old.mean)),
                                            float(value.get("sd", old.sd)))
            else:
                mean, sd = value
                changes[name] = NormalHyper(float(mean), float(sd))
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {n: asdict(getattr(self, n)) for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, data: Mapping) -> "RelationalPrior":
        return cls().with_overrides(**{k: v for k, v in data.items()})

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.normal(self.means, self.sds)


# -- likelihood building blocks ----------------------------------------------

def component_log_rate(params: RelationalParams, x, k: int):
    """``alpha_k * x + beta_k`` with ``alpha_0 = 0``."""
    if k not in (0, 1, 2):
        raise ValueError(f"component index must be 0, 1 or 2, got {k}")
    return params.alphas[k] * np.asarray(x, dtype=float) + params.betas[k]


def poisson_mixture_log_pmf(y, log_rates, log_weights):
    """``log sum_k w_k Poisson(y | exp(log_rates_k))`` for any number of components.

    ``log_rates`` has shape ``(..., K)``; ``log_weights`` broadcasts against it.
    """
    terms = _log_joint(y, log_rates, log_weights)
    return stats.log_sum_exp(terms, axis=-1)


def poisson_mixture_responsibilities(y, log_rates, log_weights):
    """Posterior component probabilities of a Poisson mixture observation."""
    terms = _log_joint(y, log_rates, log_weights)
    norm = stats.log_sum_exp(terms, axis=-1)
    if np.any(~np.isfinite(norm)):
        raise FloatingPointError("all mixture components have zero probability")
    resp = np.exp(terms - np.expand_dims(norm, -1))
    # huge |log terms| leave ~1e-11 slack after exp; renormalize explicitly
    return resp / resp.sum(axis=-1, keepdims=True)


def _log_joint(y, log_rates, log_weights):
    y = np.asarray(y, dtype=float)
    log_rates = np.asarray(log_rates, dtype=float)
    with np.errstate(divide="ignore"):
        log_weights = np.asarray(log_weights, dtype=float)
    y = np.expand_dims(y, -1)
    return log_weights + stats.log_poisson_pmf_from_log_rate(log_rates, y)


def _log_rates(params: RelationalParams, x):
    x = np.asarray(x, dtype=float)
    return np.expand_dims(x, -1) * params.alphas + params.betas


def mixture_log_likelihood(params: RelationalParams, obs: PairObservation) -> float:
    """Log probability of the pair's cooperation count under the mixture."""
    log_w = stats.log_softmax(params.logits)
    return float(poisson_mixture_log_pmf(obs.y, _log_rates(params, obs.x), log_w))


def responsibilities(params: RelationalParams, obs: PairObservation) -> np.ndarray:
    """Posterior probability of each relation type for one pair."""
    log_w = stats.log_softmax(params.logits)
    return poisson_mixture_responsibilities(obs.y, _log_rates(params, obs.x), log_w)


def relational_log_prior(params: RelationalParams, prior: RelationalPrior | None = None) -> float:
    prior = prior or RelationalPrior()
    return float(np.sum(stats.log_normal_density(params.to_array(), prior.means, prior.sds)))


# -- observations ------------------------------------------------------------

def pair_observations(graph: CooperationGraph, include_others: bool = True) -> list[PairObservation]:
    """Every unordered pair of countries with positive fractional counts.

    Pairs without cooperation patents are included with ``y = 0``.
    """
    eligible = graph.eligible_countries()
    if not include_others:
        eligible = [c for c in eligible if c != "Others"]
    out = []
    for a, b in itertools.combinations(sorted(eligible), 2):
        x = math.log(graph.nodes[a]) + math.log(graph.nodes[b])
        out.append(PairObservation(a, b, x, graph.edge_count(a, b)))
    return out


@dataclass(frozen=True)
class PairData:
    """Columnar form of a list of :class:`PairObservation`."""

    x: np.ndarray
    y: np.ndarray
    pairs: tuple[tuple[str, str], ...] = ()

    @classmethod
    def from_observations(cls, observations: Sequence[PairObservation]) -> "PairData":
        return cls(
            x=np.array([o.x for o in observations], dtype=float),
            y=np.array([o.y for o in observations], dtype=float),
            pairs=tuple((o.i, o.j) for o in observations),
        )

    def __len__(self):
        return self.x.size


@numba.njit(cache=True)
def _mixture_loglik_grad(theta, x, y, lgamma_y1, grad):
    """Sum of pair log likelihoods; adds the gradient into ``grad`` in place."""
    a1, a2, b0, b1, b2 = theta[0], theta[1], theta[2], theta[3], theta[4]
    l0, l1, l2 = theta[5], theta[6], theta[7]
    lmax = max(l0, l1, l2)
    lse = lmax + math.log(math.exp(l0 - lmax) + math.exp(l1 - lmax) + math.exp(l2 - lmax))
    lw0, lw1, lw2 = l0 - lse, l1 - lse, l2 - lse
    total = 0.0
    g_a1 = g_a2 = g_b0 = g_b1 = g_b2 = 0.0
    r0s = r1s = r2s = 0.0
    for n in range(x.size):
        xn, yn = x[n], y[n]
        e0 = b0
        e1 = a1 * xn + b1
        e2 = a2 * xn + b2
        # cap keeps exp() finite; such components carry zero responsibility anyway
        m0 = math.exp(min(e0, 700.0))
        m1 = math.exp(min(e1, 700.0))
        m2 = math.exp(min(e2, 700.0))
        t0 = lw0 + yn * e0 - m0
        t1 = lw1 + yn * e1 - m1
        t2 = lw2 + yn * e2 - m2
        tm = max(t0, t1, t2)
        w0 = math.exp(t0 - tm)
        w1 = math.exp(t1 - tm)
        w2 = math.exp(t2 - tm)
        s = w0 + w1 + w2
        total += tm + math.log(s) - lgamma_y1[n]
        r0, r1, r2 = w0 / s, w1 / s, w2 / s
        d0 = r0 * (yn - m0)
        d1 = r1 * (yn - m1)
        d2 = r2 * (yn - m2)
        g_a1 += d1 * xn
        g_a2 += d2 * xn
        g_b0 += d0
        g_b1 += d1
        g_b2 += d2
        r0s += r0
        r1s += r1
        r2s += r2
    npairs = x.size
    grad[0] += g_a1
    grad[1] += g_a2
    grad[2] += g_b0
    grad[3] += g_b1
    grad[4] += g_b2
    grad[5] += r0s - npairs * math.exp(lw0)
    grad[6] += r1s - npairs * math.exp(lw1)
    grad[7] += r2s - npairs * math.exp(lw2)
    return total


class RelationalPosterior:
    """Unnormalized log posterior over the 8 parameters with analytic gradient.

    Instances are callables ``theta -> (log_density, gradient)`` usable as a
    sampler target. Parameter order is :data:`PARAM_NAMES`.
    """

    dimension = len(PARAM_NAMES)
    names = PARAM_NAMES

    def __init__(self, observations, prior: RelationalPrior | None = None,
                 allow_empty: bool = False):
        if not isinstance(observations, PairData):
            observations = PairData.from_observations(list(observations))
        if len(observations) == 0 and not allow_empty:
            raise ValueError("the relational posterior needs at least one pair")
        self.data = observations
        self.prior = prior or RelationalPrior()
        self._prior_mean = self.prior.means
        self._prior_prec = 1.0 / self.prior.sds ** 2
        self._prior_const = -float(np.sum(np.log(self.prior.sds))) - len(PARAM_NAMES) * stats.LOG_SQRT_2PI
        self._x = observations.x
        self._y = observations.y
        self._lgamma = gammaln(self._y + 1.0)

    def log_likelihood(self, theta) -> float:
        grad = np.zeros(len(PARAM_NAMES))
        return _mixture_loglik_grad(np.asarray(theta, dtype=float), self._x, self._y,
                                    self._lgamma, grad)

    def __call__(self, theta):
        return self._evaluate(np.asarray(theta, dtype=float))

    def _evaluate(self, theta):
        diff = theta - self._prior_mean
        log_prior = self._prior_const - 0.5 * float(np.sum(diff * diff * self._prior_prec))
        grad = -diff * self._prior_prec
        if self._x.size == 0:
            return log_prior, grad
        loglik = _mixture_loglik_grad(theta, self._x, self._y, self._lgamma, grad)
        if not math.isfinite(loglik):
            return -math.inf, np.full(len(PARAM_NAMES), np.nan)
        return log_prior + loglik, grad

    def initial_point(self, rng: np.random.Generator) -> np.ndarray:
        """Prior draw, shrunk halfway to the prior mean to avoid extreme tails."""
        return self._prior_mean + 0.5 * (self.prior.sample(rng) - self._prior_mean)

    def __getstate__(self):
        return {"data": self.data, "prior": self.prior}

    def __setstate__(self, state):
        self.__init__(state["data"], state["prior"], allow_empty=True)


def log_posterior(params: RelationalParams, observations, prior: RelationalPrior | None = None,
                  ) -> tuple[float, np.ndarray]:
    """Log prior plus mixture log likelihood over all pairs, with its gradient.

    With no observations this is the log prior alone.
    """
    observations = list(observations) if not isinstance(observations, PairData) else observations
    return RelationalPosterior(observations, prior, allow_empty=True)(params.to_array())


# -- post-processing of draws ------------------------------------------------

def relabel_draws(draws: np.ndarray) -> np.ndarray:
    """Order components 1 and 2 by slope within every draw (label switching).

    Component 0 is structurally distinct and never moves.
    """
    draws = np.array(draws, dtype=float, copy=True)
    swap = draws[:, 0] > draws[:, 1]
    for a, b in ((0, 1), (3, 4), (6, 7)):
        tmp = draws[swap, a].copy()
        draws[swap, a] = draws[swap, b]
        draws[swap, b] = tmp
    return draws


def _as_draw_matrix(posterior_samples) -> np.ndarray:
    draws = getattr(posterior_samples, "draws", posterior_samples)
    if isinstance(draws, RelationalParams):
        return draws.to_array()[None, :]
    if isinstance(draws, Iterable) and not isinstance(draws, np.ndarray):
        draws = [d.to_array() if isinstance(d, RelationalParams) else d for d in draws]
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[1] != len(PARAM_NAMES):
        raise ValueError(f"draws must have {len(PARAM_NAMES)} columns")
    return draws


@dataclass(frozen=True)
class RelationClass:
    relation_type: int
    probabilities: np.ndarray


def mean_responsibilities(posterior_samples, observations, chunk: int = 2048) -> np.ndarray:
    """Responsibilities averaged over posterior draws, shape ``(n_pairs, 3)``."""
    draws = _as_draw_matrix(posterior_samples)
    if draws.shape[0] == 0:
        raise ValueError("need at least one posterior draw")
    data = observations if isinstance(observations, PairData) else PairData.from_observations(list(observations))
    total = np.zeros((len(data), N_COMPONENTS))
    for start in range(0, draws.shape[0], chunk):
        d = draws[start:start + chunk]
        alphas = np.column_stack([np.zeros(len(d)), d[:, 0], d[:, 1]])
        log_rates = data.x[None, :, None] * alphas[:, None, :] + d[:, None, 2:5]
        log_w = stats.log_softmax(d[:, 5:8])[:, None, :]
        resp = poisson_mixture_responsibilities(data.y[None, :], log_rates, log_w)
        total += resp.sum(axis=0)
    return total / draws.shape[0]


def classify_relations(posterior_samples, observations) -> dict[tuple[str, str], RelationClass]:
    """Most probable relation type per pair from posterior-averaged responsibilities.

    Ties go to the lower component index.
    """
    data = observations if isinstance(observations, PairData) else PairData.from_observations(list(observations))
    probs = mean_responsibilities(posterior_samples, data)
    out = {}
    for pair, p in zip(data.pairs, probs):
        out[pair] = RelationClass(int(np.argmax(p)), p)
    return out


MIN_PRIOR_SAMPLES = 100


def posterior_as_prior(posterior_samples, min_samples: int = MIN_PRIOR_SAMPLES,
                       **overrides) -> RelationalPrior:
    """Moment-match each marginal of the draws to a normal prior.

    Extra keyword arguments override individual hyperparameters, e.g.
    ``beta0=(-10.0, 3.0)``.
    """
    draws = _as_draw_matrix(posterior_samples)
    if draws.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} draws, got {draws.shape[0]}")
    means = draws.mean(axis=0)
    sds = draws.std(axis=0, ddof=1)
    bad = [n for n, s in zip(PARAM_NAMES, sds) if not s > 0]
    if bad:
        raise ValueError(f"degenerate marginal (sd = 0) for {', '.join(bad)}")
    prior = RelationalPrior(**{n: NormalHyper(float(m), float(s))
                               for n, m, s in zip(PARAM_NAMES, means, sds)})
    return prior.with_overrides(**overrides) if overrides else prior


# -- synthetic data ----------------------------------------------------------

def simulate_pairs(params: RelationalParams, x, rng: np.random.Generator):
    """Draw planted component labels and counts for features ``x``."""
    x = np.asarray(x, dtype=float)
    z = rng.choice(N_COMPONENTS, size=x.size, p=params.mixing)
    y = rng.poisson(np.exp(params.alphas[z] * x + params.betas[z]))
    return z, y


def synthetic_graph(params: RelationalParams, rng: np.random.Generator,
                    countries: Sequence[str] | None = None,
                    count_range: tuple[float, float] = (1.0, 5000.0)):
    """Graph with log-uniform node counts and mixture-generated edge counts.

    Returns ``(graph, labels)`` where ``labels`` maps each pair to its planted
    component.
    """
    from .graph import COUNTRY_UNIVERSE

    countries = tuple(countries or COUNTRY_UNIVERSE)
    lo, hi = np.log(count_range[0]), np.log(count_range[1])
    counts = np.exp(rng.uniform(lo, hi, size=len(countries)))
    nodes = dict(zip(countries, map(float, counts)))
    pairs = list(itertools.combinations(sorted(countries), 2))
    x = np.array([math.log(nodes[a]) + math.log(nodes[b]) for a, b in pairs])
    z, y = simulate_pairs(params, x, rng)
    edges = {p: int(c) for p, c in zip(pairs, y) if c > 0}
    graph = CooperationGraph(nodes=nodes, edges=edges, country_universe=countries)
    return graph, dict(zip(pairs, map(int, z)))


# -- exports -----------------------------------------------------------------

def write_summary_json(summary: Mapping, path: str | Path, extra: Mapping | None = None) -> None:
    payload = {"parameters": summary}
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False, allow_nan=True)
        fh.write("\n")


def write_classification_csv(classes: Mapping[tuple[str, str], RelationClass], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["country_a", "country_b", "type", "p0", "p1", "p2"])
        for (a, b), cls in sorted(classes.items()):
            writer.writerow([a, b, cls.relation_type, *(repr(float(p)) for p in cls.probabilities)])


def write_prior_json(prior: RelationalPrior, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(prior.to_dict(), fh, indent=2)
        fh.write("\n")


def read_prior_json(path: str | Path) -> RelationalPrior:
    with open(path, encoding="utf-8") as fh:
        return RelationalPrior.from_dict(json.load(fh))
