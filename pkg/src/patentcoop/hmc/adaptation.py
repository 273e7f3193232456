"""Step-size and metric adaptation used during warmup."""

from __future__ import annotations

import math

import numpy as np


class DualAveraging:
    """Nesterov dual averaging on ``log(step_size)``.

    ``update`` takes the acceptance statistic of the last transition and moves
    the log step size so the running acceptance approaches ``target_accept``.
    Constants follow the usual NUTS defaults (gamma=0.05, t0=10, kappa=0.75).
    """

    def __init__(self, step_size: float, target_accept: float = 0.8,
                 gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        if not 0.0 < target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        self.target_accept = target_accept
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.counter = 0
        self.h_bar = 0.0
        self.log_step = math.log(step_size)
        self.log_step_bar = 0.0

    def update(self, accept_stat: float) -> float:
        """Feed one acceptance statistic; returns the step size to use next."""
        accept_stat = min(1.0, accept_stat) if math.isfinite(accept_stat) else 0.0
        self.counter += 1
        t = self.counter
        eta = 1.0 / (t + self.t0)
        self.h_bar = (1.0 - eta) * self.h_bar + eta * (self.target_accept - accept_stat)
        self.log_step = self.mu - math.sqrt(t) / self.gamma * self.h_bar
        w = t ** -self.kappa
        self.log_step_bar = w * self.log_step + (1.0 - w) * self.log_step_bar
        return math.exp(self.log_step)

    @property
    def step_size(self) -> float:
        return math.exp(self.log_step)

    @property
    def final_step_size(self) -> float:
        """The averaged iterate, which is what gets frozen after warmup."""
        return math.exp(self.log_step_bar)


def adapt_step_size(history, target_accept: float = 0.8, initial_step: float = 1.0):
    """Step-size schedule produced by dual averaging over ``history``.

    ``history`` is a sequence of per-transition acceptance statistics; the
    returned array holds the step size used after each update.
    """
    da = DualAveraging(initial_step, target_accept)
    return np.array([da.update(float(a)) for a in history])


class WelfordVariance:
    """Streaming mean and (co)variance for metric estimation."""

    def __init__(self, dim: int, dense: bool = False):
        self.dim, self.dense = dim, dense
        self.reset()

    def reset(self):
        self.n = 0
        self.mean = np.zeros(self.dim)
        self.m2 = np.zeros((self.dim, self.dim)) if self.dense else np.zeros(self.dim)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        if self.dense:
            self.m2 += np.outer(x - self.mean, delta)
        else:
            self.m2 += (x - self.mean) * delta

    def regularized(self) -> np.ndarray:
        """Sample variance shrunk towards a small multiple of the identity."""
        n = self.n
        cov = self.m2 / max(n - 1, 1)
        w = n / (n + 5.0)
        if self.dense:
            return w * cov + 1e-3 * (5.0 / (n + 5.0)) * np.eye(self.dim)
        return w * cov + 1e-3 * (5.0 / (n + 5.0))


def warmup_windows(n_warmup: int, init_buffer: int = 75, term_buffer: int = 50,
                   base_window: int = 25) -> list[tuple[int, int]]:
    """Slow metric-adaptation windows as ``(first, last)`` iteration indices.

    Mirrors the common fast/slow/fast schedule: an initial step-size-only
    buffer, doubling slow windows, and a terminal step-size-only buffer.
    Short warmups fall back to 15%/75%/10% proportions.
    """
    if n_warmup < 20:
        return []
    if init_buffer + base_window + term_buffer > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    windows = []
    start, size = init_buffer, base_window
    last = n_warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end - 1))
        start, size = end, 2 * size
    return windows
