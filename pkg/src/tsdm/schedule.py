"""Linear beta noise schedule for the forward diffusion process."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step diffusion coefficients.

    Arrays are stored 0-indexed; the public step index ``t`` runs over
    ``1..total_steps`` and is converted with :meth:`index`.
    """

    total_steps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    reverse_vars: np.ndarray = field(repr=False)

    def index(self, t):
        """Map step index (or array of indices) in [1, T] to storage index."""
        arr = np.asarray(t)
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ValueError(f"step index must be integral, got {t!r}")
            arr = arr.astype(np.int64)
        if arr.size and (arr.min() < 1 or arr.max() > self.total_steps):
            raise ValueError(f"step index out of range [1, {self.total_steps}]: {t!r}")
        return arr - 1

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.betas, self.alphas, self.alpha_bars, self.reverse_vars):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


def linear_beta_schedule(
    total_steps: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    if int(total_steps) != total_steps or total_steps < 2:
        raise ValueError(f"total_steps must be an integer >= 2, got {total_steps!r}")
    total_steps = int(total_steps)
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start < beta_end < 1, got ({beta_start!r}, {beta_end!r})"
        )
    i = np.arange(total_steps, dtype=np.float64)
    betas = beta_start + i * (beta_end - beta_start) / (total_steps - 1)
    betas[-1] = beta_end
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    if not (alpha_bars[-1] > 0.0 and np.all(np.diff(alpha_bars) < 0)):
        raise ValueError(
            f"alpha_bar underflows in double precision for T={total_steps}, "
            f"betas [{beta_start}, {beta_end}]"
        )
    for a in (betas, alphas, alpha_bars):
        a.setflags(write=False)
    return NoiseSchedule(
        total_steps=total_steps,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        # fixed reverse variance sigma_t^2 = beta_t
        reverse_vars=betas,
    )


def alpha_bar_at(schedule: NoiseSchedule, t: int) -> float:
    return float(schedule.alpha_bars[schedule.index(t)])
