"""No-U-Turn Hamiltonian Monte Carlo over a differentiable log density.

A target is any callable ``target(q) -> (log_density, gradient)`` with a
``dimension`` attribute. Targets may also define ``initial_point(rng)``; it is
used to draw overdispersed chain starts.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .adaptation import DualAveraging, WelfordVariance, warmup_windows

MAX_DELTA_H = 1000.0


class TargetDensity(Protocol):
    dimension: int

    def __call__(self, q: np.ndarray) -> tuple[float, np.ndarray]: ...


class SamplingQualityError(RuntimeError):
    """Too many divergent transitions; the finished samples are attached."""

    def __init__(self, message: str, samples: "PosteriorSamples", n_divergent: int):
        super().__init__(message)
        self.samples = samples
        self.n_divergent = n_divergent


@dataclass
class ChainConfig:
    n_chains: int = 16
    n_samples: int = 4000
    n_warmup: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    metric: str = "identity"  # "identity", "diag" or "dense"
    max_divergence_fraction: float = 0.05
    n_jobs: int = 1

    def __post_init__(self):
        if self.n_chains < 1 or self.n_samples < 1 or self.n_warmup < 1:
            raise ValueError("n_chains, n_samples and n_warmup must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be positive")
        if self.metric not in ("identity", "diag", "dense"):
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class PosteriorSamples:
    """Post-warmup draws of all chains, concatenated chain by chain."""

    draws: np.ndarray
    chain_ids: np.ndarray
    n_chains: int
    log_density: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    step_sizes: np.ndarray
    names: tuple[str, ...] = ()
    inv_metrics: list = field(default_factory=list)
    warmup_divergences: int = 0

    @property
    def n_samples(self) -> int:
        """Draws per chain."""
        return self.draws.shape[0] // self.n_chains

    @property
    def dimension(self) -> int:
        return self.draws.shape[1]

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())

    def chains(self) -> np.ndarray:
        """Draws reshaped to ``(n_chains, n_samples, dimension)``."""
        return self.draws.reshape(self.n_chains, self.n_samples, self.dimension)

    def chain_matrix(self, index: int) -> np.ndarray:
        return self.chains()[:, :, index]

    def with_draws(self, draws: np.ndarray) -> "PosteriorSamples":
        """Copy with transformed draws (e.g. relabeled) and identical provenance."""
        out = PosteriorSamples(**{**self.__dict__})
        out.draws = np.asarray(draws, dtype=float)
        return out


def leapfrog(position, momentum, step_size, target, grad=None, inv_metric=None):
    """One velocity-Verlet step of Hamiltonian dynamics.

    Returns ``(position, momentum, log_density, gradient)``. A non-finite
    log density or gradient at the new point is reported as
    ``log_density = -inf`` so callers can flag a divergence.
    """
    if grad is None:
        _, grad = target(position)
    p = momentum + 0.5 * step_size * grad
    if inv_metric is None:
        q = position + step_size * p
    elif inv_metric.ndim == 1:
        q = position + step_size * (inv_metric * p)
    else:
        q = position + step_size * (inv_metric @ p)
    logp, new_grad = target(q)
    if not (math.isfinite(logp) and np.all(np.isfinite(new_grad))):
        return q, p, -math.inf, new_grad
    p = p + 0.5 * step_size * new_grad
    return q, p, float(logp), new_grad


@dataclass
class TransitionInfo:
    accept_stat: float
    tree_depth: int
    n_leapfrog: int
    divergent: bool


class NUTSKernel:
    """Multinomial NUTS with the generalized no-U-turn criterion.

    The trajectory doubles forward or backward at random until the momentum
    sums along either full subtree (and across the join of subtrees) point
    against each other, or ``max_tree_depth`` is reached. The new state is
    drawn from the trajectory with weights ``exp(-H)``, biased towards the
    most recently added subtree.
    """

    def __init__(self, target, inv_metric=None, max_tree_depth: int = 10):
        self.target = target
        self.max_tree_depth = max_tree_depth
        self.set_metric(inv_metric if inv_metric is not None else np.ones(target.dimension))

    def set_metric(self, inv_metric: np.ndarray) -> None:
        inv_metric = np.asarray(inv_metric, dtype=float)
        self.inv_metric = inv_metric
        if inv_metric.ndim == 1:
            self._momentum_scale = 1.0 / np.sqrt(inv_metric)
            self._velocity = lambda p: inv_metric * p
        else:
            self._momentum_scale = np.linalg.cholesky(np.linalg.inv(inv_metric))
            self._velocity = lambda p: inv_metric @ p

    def sample_momentum(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.inv_metric.shape[0])
        if self.inv_metric.ndim == 1:
            return self._momentum_scale * z
        return self._momentum_scale @ z

    def kinetic(self, p: np.ndarray) -> float:
        return 0.5 * float(p @ self._velocity(p))

    # -- trajectory -------------------------------------------------------

    def _leaf(self, q, p, grad, _logp, eps):
        vel = self._velocity
        p_half = p + (0.5 * eps) * grad
        q = q + eps * vel(p_half)
        logp, grad = self.target(q)
        self._n_leapfrog += 1
        if not math.isfinite(logp) or not np.all(np.isfinite(grad)):
            self._divergent = True
            return None
        p = p_half + (0.5 * eps) * grad
        p_sharp = vel(p)
        h = -logp + 0.5 * float(p @ p_sharp)
        log_w = self._h0 - h
        if not math.isfinite(h) or -log_w > MAX_DELTA_H:
            self._divergent = True
        self._sum_metro += 1.0 if log_w > 0 else math.exp(log_w)
        if self._divergent:
            return None
        return (q, p, grad, logp), log_w, p_sharp

    def _build(self, state, depth, eps):
        """Build a subtree of ``2**depth`` leapfrog steps from ``state``.

        Returns ``None`` when the subtree is invalid (divergent or U-turned),
        otherwise ``(edge, proposal, log_w, rho, p_beg, p_end, ps_beg, ps_end)``.
        """
        if depth == 0:
            leaf = self._leaf(*state, eps)
            if leaf is None:
                return None
            z, log_w, ps = leaf
            p = z[1]
            return z, z, log_w, p, p, p, ps, ps

        init = self._build(state, depth - 1, eps)
        if init is None:
            return None
        edge, prop_init, lw_init, rho_init, p_beg, p_init_end, ps_beg, ps_init_end = init
        final = self._build(edge, depth - 1, eps)
        if final is None:
            return None
        edge, prop_final, lw_final, rho_final, p_final_beg, p_end, ps_final_beg, ps_end = final

        lw_sub = _logaddexp(lw_init, lw_final)
        if self._rng.random() < math.exp(lw_final - lw_sub):
            proposal = prop_final
        else:
            proposal = prop_init
        rho = rho_init + rho_final
        if not (_no_uturn(ps_beg, ps_end, rho)
                and _no_uturn(ps_beg, ps_final_beg, rho_init + p_final_beg)
                and _no_uturn(ps_init_end, ps_end, rho_final + p_init_end)):
            return None
        return edge, proposal, lw_sub, rho, p_beg, p_end, ps_beg, ps_end

    def transition(self, q, logp, grad, step_size, rng):
        """One NUTS transition from ``q``; returns ``(q, logp, grad, info)``."""
        self._rng = rng
        self._n_leapfrog = 0
        self._sum_metro = 0.0
        self._divergent = False

        p0 = self.sample_momentum(rng)
        ps0 = self._velocity(p0)
        self._h0 = -logp + 0.5 * float(p0 @ ps0)

        start = (q, p0, grad, logp)
        fwd = bck = start
        p_ff = p_fb = p_bf = p_bb = p0
        ps_ff = ps_fb = ps_bf = ps_bb = ps0
        rho = p0
        sample = start
        log_w_total = 0.0
        depth = 0
        while depth < self.max_tree_depth:
            if rng.random() > 0.5:
                rho_bck, p_bf, ps_bf = rho, p_ff, ps_ff
                sub = self._build(fwd, depth, step_size)
                if sub is None:
                    break
                fwd, proposal, lw_sub, rho_fwd, p_fb, p_ff, ps_fb, ps_ff = sub
            else:
                rho_fwd, p_fb, ps_fb = rho, p_bb, ps_bb
                sub = self._build(bck, depth, -step_size)
                if sub is None:
                    break
                bck, proposal, lw_sub, rho_bck, p_bf, p_bb, ps_bf, ps_bb = sub
            depth += 1
            # biased progressive sampling towards the new subtree
            if lw_sub > log_w_total or rng.random() < math.exp(lw_sub - log_w_total):
                sample = proposal
            log_w_total = _logaddexp(log_w_total, lw_sub)

            rho = rho_bck + rho_fwd
            if not (_no_uturn(ps_bb, ps_ff, rho)
                    and _no_uturn(ps_bb, ps_fb, rho_bck + p_fb)
                    and _no_uturn(ps_bf, ps_ff, rho_fwd + p_bf)):
                break

        info = TransitionInfo(
            accept_stat=self._sum_metro / max(self._n_leapfrog, 1),
            tree_depth=depth,
            n_leapfrog=self._n_leapfrog,
            divergent=self._divergent,
        )
        return sample[0], sample[3], sample[2], info


def _logaddexp(a: float, b: float) -> float:
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def _no_uturn(ps_minus, ps_plus, rho) -> bool:
    return float(ps_plus @ rho) > 0.0 and float(ps_minus @ rho) > 0.0


def nuts_step(current, step_size, target, rng, inv_metric=None, max_tree_depth=10):
    """Single NUTS transition from the position ``current``.

    Returns ``(next_position, info)``. Divergent trajectories are recorded in
    ``info.divergent``; the state sampled before the divergence is returned.
    """
    kernel = NUTSKernel(target, inv_metric, max_tree_depth)
    logp, grad = target(np.asarray(current, dtype=float))
    if not math.isfinite(logp):
        raise ValueError("current position has non-finite log density")
    q, _, _, info = kernel.transition(np.asarray(current, dtype=float), logp, grad, step_size, rng)
    return q, info


def find_reasonable_step_size(q, logp, grad, kernel: NUTSKernel, rng, initial=1.0):
    """Double or halve the step until one leapfrog's acceptance crosses 1/2."""
    eps = initial
    p = kernel.sample_momentum(rng)
    h0 = -logp + kernel.kinetic(p)

    def delta(eps):
        _, p1, lp1, _ = leapfrog(q, p, eps, kernel.target, grad, kernel.inv_metric)
        if not math.isfinite(lp1):
            return -math.inf
        return h0 - (-lp1 + kernel.kinetic(p1))

    log_half = math.log(0.5)
    d = delta(eps)
    direction = 1 if d > log_half else -1
    for _ in range(60):
        if not direction * d > direction * log_half:
            break
        eps *= 2.0 ** direction
        d = delta(eps)
    return eps


@dataclass
class _ChainResult:
    draws: np.ndarray
    log_density: np.ndarray
    accept_stat: np.ndarray
    tree_depth: np.ndarray
    n_leapfrog: np.ndarray
    divergent: np.ndarray
    warmup_divergences: int
    step_size: float
    inv_metric: np.ndarray


def run_chain(target, config: ChainConfig, seed, init: np.ndarray) -> _ChainResult:
    """Warm up and sample a single chain from ``init``."""
    rng = np.random.default_rng(seed)
    d = target.dimension
    q = np.array(init, dtype=float)
    logp, grad = target(q)
    if not math.isfinite(logp):
        raise ValueError("initial point has non-finite log density")

    dense = config.metric == "dense"
    kernel = NUTSKernel(target, np.eye(d) if dense else np.ones(d), config.max_tree_depth)
    eps = find_reasonable_step_size(q, logp, grad, kernel, rng)
    da = DualAveraging(eps, config.target_accept)
    windows = warmup_windows(config.n_warmup) if config.metric != "identity" else []
    window_start = {a: b for a, b in windows}
    window_end = {b for _, b in windows}
    estimator = WelfordVariance(d, dense=dense)
    collecting = False

    n = config.n_samples
    draws = np.empty((n, d))
    out_logp = np.empty(n)
    accept = np.empty(n)
    depth = np.empty(n, dtype=np.int16)
    nleap = np.empty(n, dtype=np.int32)
    divergent = np.zeros(n, dtype=bool)
    warm_div = 0

    for it in range(config.n_warmup):
        q, logp, grad, info = kernel.transition(q, logp, grad, eps, rng)
        warm_div += info.divergent
        eps = da.update(info.accept_stat)
        if it in window_start:
            collecting = True
        if collecting:
            estimator.add(q)
        if it in window_end:
            collecting = False
            kernel.set_metric(estimator.regularized())
            estimator.reset()
            eps = find_reasonable_step_size(q, logp, grad, kernel, rng, eps)
            da.restart(eps)
    eps = da.final_step_size

    for k in range(n):
        q, logp, grad, info = kernel.transition(q, logp, grad, eps, rng)
        draws[k] = q
        out_logp[k] = logp
        accept[k] = info.accept_stat
        depth[k] = info.tree_depth
        nleap[k] = info.n_leapfrog
        divergent[k] = info.divergent
    return _ChainResult(draws, out_logp, accept, depth, nleap, divergent, warm_div,
                        eps, kernel.inv_metric.copy())


def chain_seeds(seed: int, n_chains: int) -> list[np.random.SeedSequence]:
    """Independent per-chain streams split from one master seed."""
    return np.random.SeedSequence(seed).spawn(n_chains)


def initial_points(target, n_chains: int, seed: int, init=None) -> np.ndarray:
    """Starting points: supplied ``init``, ``target.initial_point`` draws, or U(-2, 2)."""
    d = target.dimension
    if init is not None:
        init = np.asarray(init, dtype=float)
        if init.ndim == 1:
            init = np.tile(init, (n_chains, 1))
        if init.shape != (n_chains, d):
            raise ValueError(f"init must have shape ({n_chains}, {d})")
        return init
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
    maker = getattr(target, "initial_point", None)
    out = np.empty((n_chains, d))
    for c in range(n_chains):
        for _ in range(100):
            q = np.asarray(maker(rng), dtype=float) if maker else rng.uniform(-2, 2, d)
            if math.isfinite(target(q)[0]):
                break
        else:
            raise ValueError("could not find a finite initial point")
        out[c] = q
    return out


def _run_chain_args(args):
    return run_chain(*args)


def run_chains(target, config: ChainConfig | None = None, init=None,
               names: Sequence[str] = ()) -> PosteriorSamples:
    """Run ``config.n_chains`` independent chains and pool the retained draws.

    Each chain gets its own RNG stream derived from ``(config.seed, chain)``,
    so results do not depend on ``n_jobs``. Raises
    :class:`SamplingQualityError` when more than
    ``config.max_divergence_fraction`` of post-warmup transitions diverge.
    """
    config = config or ChainConfig()
    starts = initial_points(target, config.n_chains, config.seed, init)
    seeds = chain_seeds(config.seed, config.n_chains)
    jobs = [(target, config, s, x0) for s, x0 in zip(seeds, starts)]
    if config.n_jobs > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=config.n_jobs) as pool:
            results = list(pool.map(_run_chain_args, jobs))
    else:
        results = [run_chain(*job) for job in jobs]

    samples = PosteriorSamples(
        draws=np.concatenate([r.draws for r in results]),
        chain_ids=np.repeat(np.arange(config.n_chains), config.n_samples),
        n_chains=config.n_chains,
        log_density=np.concatenate([r.log_density for r in results]),
        accept_stat=np.concatenate([r.accept_stat for r in results]),
        tree_depth=np.concatenate([r.tree_depth for r in results]),
        n_leapfrog=np.concatenate([r.n_leapfrog for r in results]),
        divergent=np.concatenate([r.divergent for r in results]),
        step_sizes=np.array([r.step_size for r in results]),
        names=tuple(names),
        inv_metrics=[r.inv_metric for r in results],
        warmup_divergences=sum(r.warmup_divergences for r in results),
    )
    n_div = samples.n_divergent
    if n_div > config.max_divergence_fraction * samples.draws.shape[0]:
        raise SamplingQualityError(
            f"{n_div} of {samples.draws.shape[0]} post-warmup transitions diverged",
            samples, n_div)
    return samples

