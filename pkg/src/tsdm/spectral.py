"""Single-sided magnitude spectra with per-bin box statistics and peak matching.

Frequencies are DFT bin indices, i.e. cycles per record.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

UNMATCHED = math.inf


@dataclass
class Spectrum:
    magnitudes: np.ndarray
    bin_unit: str = "cycles-per-record"

    def __len__(self):
        return len(self.magnitudes)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "magnitude"])
            for k, m in enumerate(self.magnitudes):
                w.writerow([k, repr(float(m))])


@dataclass
class SpectrumSummary:
    minimum: np.ndarray
    q1: np.ndarray
    median: np.ndarray
    q3: np.ndarray
    maximum: np.ndarray
    outliers: list = field(default_factory=list)  # per bin: array of outlying values

    def __len__(self):
        return len(self.median)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "min", "q1", "median", "q3", "max", "outlier_count"])
            for k in range(len(self)):
                w.writerow(
                    [k]
                    + [repr(float(a[k])) for a in (self.minimum, self.q1, self.median, self.q3, self.maximum)]
                    + [len(self.outliers[k])]
                )


class Peaks(list):
    """``(bin, magnitude)`` pairs; ``complete`` is False if fewer than requested."""

    def __init__(self, items=(), complete=True):
        list.__init__(self, items)
        self.complete = complete

    @property
    def bins(self) -> list:
        return [b for b, _ in self]


def magnitude_spectrum(signal, window: str | None = None) -> Spectrum:
    """Amplitude spectrum scaled so a unit sine on bin ``k`` reads 1.0 at ``k``."""
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D signal, got shape {x.shape}")
    n = x.shape[0]
    if n < 2 or n % 2:
        raise ValueError(f"signal length must be even and >= 2, got {n}")
    if window == "hann":
        x = x * np.hanning(n)
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    mag = np.abs(np.fft.rfft(x)) / n
    mag[1:-1] *= 2.0
    return Spectrum(mag)


def magnitude_spectra(series, window: str | None = None) -> np.ndarray:
    """Row-wise :func:`magnitude_spectrum` for an ``(N, L)`` array."""
    x = np.asarray(series, dtype=np.float64)
    return np.array([magnitude_spectrum(row, window).magnitudes for row in x]).reshape(
        x.shape[0], x.shape[1] // 2 + 1
    )


def dominant_peaks(spectrum, k: int = 1, min_bin: int = 1) -> Peaks:
    """The ``k`` largest strict local maxima at bins ``>= min_bin``.

    Sorted by magnitude, descending; equal magnitudes go to the lower bin first.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    m = np.asarray(getattr(spectrum, "magnitudes", spectrum), dtype=np.float64)
    cands = []
    for b in range(max(min_bin, 0), len(m)):
        left = m[b - 1] if b > 0 else -np.inf
        right = m[b + 1] if b + 1 < len(m) else -np.inf
        if m[b] > left and m[b] > right:
            cands.append((b, float(m[b])))
    cands.sort(key=lambda p: (-p[1], p[0]))
    return Peaks(cands[:k], complete=len(cands) >= k)


def _quantile_type7(sorted_vals: np.ndarray, q: float) -> np.ndarray:
    # sorted_vals: (n, bins) sorted along axis 0
    n = sorted_vals.shape[0]
    h = (n - 1) * q
    lo = int(math.floor(h))
    hi = min(lo + 1, n - 1)
    return sorted_vals[lo] + (h - lo) * (sorted_vals[hi] - sorted_vals[lo])


def spectrum_summary(spectra) -> SpectrumSummary:
    """Per-bin five-number summary with 1.5 IQR outliers."""
    rows = [np.asarray(getattr(s, "magnitudes", s), dtype=np.float64) for s in spectra]
    if not rows:
        raise ValueError("need at least one spectrum")
    if len({len(r) for r in rows}) > 1:
        raise ValueError("spectra have different lengths")
    arr = np.sort(np.stack(rows), axis=0)
    q1 = _quantile_type7(arr, 0.25)
    med = _quantile_type7(arr, 0.5)
    q3 = _quantile_type7(arr, 0.75)
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = [
        arr[(arr[:, b] < lo_fence[b]) | (arr[:, b] > hi_fence[b]), b] for b in range(arr.shape[1])
    ]
    return SpectrumSummary(arr[0], q1, med, q3, arr[-1], outliers)


def average_spectrum(dataset, window: str | None = None) -> Spectrum:
    series = np.asarray(getattr(dataset, "series", dataset), dtype=np.float64)
    if series.ndim != 2 or series.shape[0] == 0:
        raise ValueError("average_spectrum needs a nonempty (N, L) dataset")
    return Spectrum(magnitude_spectra(series, window).mean(axis=0))


def peak_match_error(generated, target_bins, n_peaks: int | None = None) -> list:
    """Relative bin offset from each target to the nearest dominant peak.

    Peaks considered are the ``n_peaks`` largest (default: one per target).
    Targets with no peak at all get :data:`UNMATCHED`.
    """
    m = np.asarray(getattr(generated, "magnitudes", generated), dtype=np.float64)
    targets = list(target_bins)
    for b in targets:
        if not 0 < b < len(m):
            raise ValueError(f"target bin {b} outside spectrum range (0, {len(m)})")
    peaks = dominant_peaks(m, n_peaks or max(len(targets), 1)).bins
    errors = []
    for b in targets:
        if not peaks:
            errors.append(UNMATCHED)
            continue
        p = min(peaks, key=lambda q: (abs(q - b), q))
        errors.append(abs(p - b) / b)
    return errors
