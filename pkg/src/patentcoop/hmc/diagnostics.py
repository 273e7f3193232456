"""Convergence diagnostics and posterior summaries."""

from __future__ import annotations

import csv
import math
import warnings
from pathlib import Path

import numpy as np

from .nuts import PosteriorSamples


def _as_chain_matrix(samples, index: int | None) -> np.ndarray:
    if isinstance(samples, PosteriorSamples):
        return samples.chain_matrix(index)
    arr = np.asarray(samples, dtype=float)
    if arr.ndim == 3:
        return arr[:, :, index]
    if arr.ndim != 2:
        raise ValueError("expected a (n_chains, n_draws) array or PosteriorSamples")
    return arr


def split_rhat(chains: np.ndarray) -> float:
    """Split-chain potential scale reduction of a ``(n_chains, n_draws)`` array.

    Every chain is cut in half (the middle draw is dropped for odd lengths)
    and the classic between/within variance ratio is computed on the halves.
    Returns ``inf`` with a warning when the within-chain variance is zero.
    """
    chains = np.asarray(chains, dtype=float)
    m, n = chains.shape
    if m < 2 or n < 4:
        raise ValueError("split R-hat needs at least 2 chains of 4 draws")
    half = n // 2
    split = np.vstack([chains[:, :half], chains[:, n - half:]])
    within = split.var(axis=1, ddof=1).mean()
    between = half * split.mean(axis=1).var(ddof=1)
    if not within > 0:
        warnings.warn("zero within-chain variance; R-hat is undefined", RuntimeWarning,
                      stacklevel=2)
        return math.inf
    var_plus = (half - 1) / half * within + between / half
    return float(math.sqrt(var_plus / within))


def potential_scale_reduction(samples, index: int | None = None) -> float:
    """Split R-hat for parameter ``index`` of ``samples``.

    ``samples`` is a :class:`PosteriorSamples`, a ``(chains, draws, dim)``
    array, or a ``(chains, draws)`` array (``index`` ignored).
    """
    return split_rhat(_as_chain_matrix(samples, index))


def summarize(samples, names=None) -> dict[str, dict[str, float]]:
    """Mean, sd, 2.5/50/97.5% quantiles and split R-hat per parameter.

    Quantiles use linear interpolation between order statistics. R-hat is
    ``nan`` when chain structure is unavailable or too short.
    """
    if isinstance(samples, PosteriorSamples):
        draws = samples.draws
        names = names or samples.names
    else:
        draws = np.asarray(samples, dtype=float)
        if draws.ndim == 1:
            draws = draws[:, None]
    if draws.shape[0] == 0:
        raise ValueError("no samples to summarize")
    d = draws.shape[1]
    names = list(names) if names else [f"x{k}" for k in range(d)]
    q = np.quantile(draws, [0.025, 0.5, 0.975], axis=0)
    sd = draws.std(axis=0, ddof=1) if draws.shape[0] > 1 else np.zeros(d)
    out = {}
    for k, name in enumerate(names):
        rhat = math.nan
        if isinstance(samples, PosteriorSamples) and samples.n_chains >= 2 and samples.n_samples >= 4:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rhat = potential_scale_reduction(samples, k)
        out[name] = {
            "mean": float(draws[:, k].mean()),
            "sd": float(sd[k]),
            "q2.5": float(q[0, k]),
            "q50": float(q[1, k]),
            "q97.5": float(q[2, k]),
            "r_hat": rhat,
        }
    return out


def write_draws_csv(samples: PosteriorSamples, path: str | Path, names=None) -> None:
    """One row per draw: parameter columns followed by the chain id."""
    names = list(names or samples.names or [f"x{k}" for k in range(samples.dimension)])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names + ["chain"])
        for row, chain in zip(samples.draws, samples.chain_ids):
            writer.writerow([repr(float(v)) for v in row] + [int(chain)])


def read_draws_csv(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Returns ``(names, draws, chain_ids)`` from :func:`write_draws_csv` output."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "chain":
            raise ValueError("draws file must end with a 'chain' column")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError("draws file holds no draws")
    data = np.array(rows, dtype=float)
    return header[:-1], data[:, :-1], data[:, -1].astype(int)
