"""Forward noising and reverse denoising, plus the simplified noise-prediction loss.

Signal batches are ``(B, L)`` float arrays. Step indices ``t`` are 1-based,
either a scalar or one index per batch item.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .schedule import NoiseSchedule

NoisePredictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class DenoiseTrace:
    """States ``x_t`` recorded while sampling, ``t`` strictly decreasing."""

    snapshots: list = field(default_factory=list)

    def record(self, t: int, x: np.ndarray) -> None:
        if self.snapshots and t >= self.snapshots[-1][0]:
            raise ValueError("trace steps must be strictly decreasing")
        self.snapshots.append((int(t), np.array(x, copy=True)))

    @property
    def steps(self) -> list[int]:
        return [t for t, _ in self.snapshots]

    def to_csv(self, path, final: Optional[np.ndarray] = None) -> None:
        """Write rows ``(t, series_index, sample_index, value)``.

        ``final`` (the generated ``x_0``) is appended with ``t = 0``.
        """
        rows = list(self.snapshots)
        if final is not None:
            rows.append((0, final))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "series_index", "sample_index", "value"])
            for t, x in rows:
                for i, series in enumerate(np.atleast_2d(x)):
                    for j, v in enumerate(series):
                        w.writerow([t, i, j, repr(float(v))])


def _check_batch(*arrays: np.ndarray) -> None:
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"shape mismatch: {shape} vs {a.shape}")


def _per_item(values: np.ndarray, x: np.ndarray) -> np.ndarray:
    # broadcast per-item (or scalar) coefficients over trailing axes of x
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    if values.shape[0] != x.shape[0]:
        raise ValueError(f"got {values.shape[0]} step indices for batch of {x.shape[0]}")
    return values.reshape(values.shape + (1,) * (x.ndim - 1))


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form draw of ``x_t`` given ``x_0`` and the injected noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_batch(x0, eps)
    ab = _per_item(schedule.alpha_bars[schedule.index(t)], x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_sample_iterative(x0, eps_sequence, schedule: NoiseSchedule) -> np.ndarray:
    """Apply the one-step forward recurrence ``T`` times."""
    x = np.asarray(x0, dtype=np.float64)
    if len(eps_sequence) != schedule.total_steps:
        raise ValueError(
            f"need {schedule.total_steps} noise batches, got {len(eps_sequence)}"
        )
    for a, eps in zip(schedule.alphas, eps_sequence):
        eps = np.asarray(eps, dtype=np.float64)
        _check_batch(x, eps)
        x = np.sqrt(a) * x + np.sqrt(1.0 - a) * eps
    return x


def posterior_mean(x_t, t, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_batch(x_t, eps_hat)
    i = schedule.index(t)
    a = _per_item(schedule.alphas[i], x_t)
    ab = _per_item(schedule.alpha_bars[i], x_t)
    return (x_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)


def p_sample_step(eps_hat, x_t, t: int, z, schedule: NoiseSchedule) -> np.ndarray:
    """One reverse step ``x_t -> x_{t-1}``; ``z`` must be zero at ``t = 1``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    z = np.zeros_like(x_t) if z is None else np.asarray(z, dtype=np.float64)
    _check_batch(x_t, z)
    t_arr = np.asarray(t)
    if np.any(t_arr == 1) and np.any(z[t_arr == 1] if t_arr.ndim else z):
        raise ValueError("the final reverse step (t = 1) takes no noise")
    mean = posterior_mean(x_t, t, eps_hat, schedule)
    sigma = _per_item(np.sqrt(schedule.reverse_vars[schedule.index(t)]), x_t)
    return mean + sigma * z


def item_rng(seed: int, item: int) -> np.random.Generator:
    """Independent generator for batch item ``item`` of a sampling call.

    Streams depend only on ``(seed, item)``, so splitting a request into
    several calls with matching ``item_offset`` reproduces the same series.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(item,)))


def sample(
    model: NoisePredictor,
    schedule: NoiseSchedule,
    count: int,
    length: int,
    seed: int,
    trace_every: Optional[int] = None,
    item_offset: int = 0,
    stochastic: bool = True,
):
    """Generate ``count`` series by running the reverse chain from ``t = T``.

    Returns ``(x0, trace)``; ``trace`` is ``None`` unless ``trace_every`` is set.
    ``stochastic=False`` sets ``z = 0`` at every step (posterior-mean path).
    """
    if count < 0 or length < 1:
        raise ValueError(f"invalid count/length: {count}, {length}")
    if trace_every is not None and trace_every < 1:
        raise ValueError("trace_every must be positive")
    trace = DenoiseTrace() if trace_every else None
    if count == 0:
        return np.zeros((0, length)), trace
    rngs = [item_rng(seed, item_offset + i) for i in range(count)]
    x = np.stack([r.standard_normal(length) for r in rngs])
    T = schedule.total_steps
    for t in range(T, 0, -1):
        if trace is not None and ((T - t) % trace_every == 0 or t == 1):
            trace.record(t, x)
        eps_hat = np.asarray(model(x, np.full(count, t, dtype=np.int64)), dtype=np.float64)
        if eps_hat.shape != x.shape:
            raise ValueError(f"model returned shape {eps_hat.shape}, expected {x.shape}")
        z = None
        if t > 1:
            z = np.stack([r.standard_normal(length) for r in rngs])
            if not stochastic:
                z = np.zeros_like(z)
        x = p_sample_step(eps_hat, x, t, z, schedule)
    return x, trace


def loss_simple(eps, eps_hat) -> float:
    """Mean squared error between injected and predicted noise."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_batch(eps, eps_hat)
    if eps.size == 0:
        return 0.0
    return float(np.mean((eps - eps_hat) ** 2))
