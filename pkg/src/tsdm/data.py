"""Synthetic sine datasets plus their normalization and file formats."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"TSDM"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files."""


@dataclass
class LabeledDataset:
    series: np.ndarray  # (N, L)
    labels: Optional[list] = None
    norm_info: Optional[float] = None
    phases: Optional[np.ndarray] = None  # generator phases, not persisted

    def __post_init__(self):
        self.series = np.asarray(self.series)
        if self.series.ndim != 2:
            raise ValueError(f"series must be 2-D (N, L), got shape {self.series.shape}")
        if self.labels is not None:
            self.labels = [str(x) for x in self.labels]
            if len(self.labels) != self.series.shape[0]:
                raise ValueError(
                    f"{len(self.labels)} labels for {self.series.shape[0]} series"
                )
        if not np.all(np.isfinite(self.series)):
            raise ValueError("dataset contains non-finite values")

    @property
    def sample_count(self) -> int:
        return self.series.shape[0]

    @property
    def length(self) -> int:
        return self.series.shape[1]

    def __len__(self):
        return self.sample_count

    def classes(self) -> list:
        """Distinct labels in order of first appearance."""
        return list(dict.fromkeys(self.labels or []))

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        labels = [self.labels[i] for i in idx] if self.labels is not None else None
        return LabeledDataset(self.series[idx], labels, self.norm_info)

    def select_label(self, label: str) -> "LabeledDataset":
        if self.labels is None:
            raise ValueError("dataset has no labels")
        return self.subset([i for i, lab in enumerate(self.labels) if lab == label])


def concat(datasets: Sequence[LabeledDataset]) -> LabeledDataset:
    datasets = list(datasets)
    if not datasets:
        raise ValueError("nothing to concatenate")
    lengths = {d.length for d in datasets}
    if len(lengths) > 1:
        raise ValueError(f"length mismatch: {sorted(lengths)}")
    labeled = [d.labels is not None for d in datasets]
    if any(labeled) and not all(labeled):
        raise ValueError("cannot mix labeled and unlabeled datasets")
    labels = sum((d.labels for d in datasets), []) if all(labeled) else None
    return LabeledDataset(np.concatenate([d.series for d in datasets]), labels)


def _check_counts(n_series, length):
    if int(n_series) != n_series or n_series < 1:
        raise ValueError(f"n_series must be a positive integer, got {n_series!r}")
    if int(length) != length or length < 1:
        raise ValueError(f"length must be a positive integer, got {length!r}")


def gen_multi_frequency(
    freqs: Sequence[float],
    n_series: int,
    length: int,
    seed: int = 0,
    label: Optional[str] = None,
) -> LabeledDataset:
    """Sum of unit sines ``sin(2 pi k phi + b)`` with ``phi = i / length``.

    Each series draws its own phase for every component, uniform in
    ``[0, 2 pi)``. Frequencies are in cycles per record.
    """
    freqs = [float(k) for k in freqs]
    if not freqs or any(k <= 0 for k in freqs):
        raise ValueError(f"frequencies must be positive, got {freqs}")
    if len(set(freqs)) != len(freqs):
        raise ValueError(f"frequencies must be distinct, got {freqs}")
    _check_counts(n_series, length)
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(n_series, len(freqs)))
    phi = np.arange(length) / length
    series = np.zeros((n_series, length))
    for j, k in enumerate(freqs):
        series += np.sin(2.0 * np.pi * k * phi[None, :] + phases[:, j : j + 1])
    labels = [label] * n_series if label is not None else None
    return LabeledDataset(series, labels, phases=phases)


def gen_single_frequency(
    k1: float, n_series: int, length: int, seed: int = 0, label: Optional[str] = None
) -> LabeledDataset:
    return gen_multi_frequency([k1], n_series, length, seed, label)


# normalization


def normalize(ds: LabeledDataset) -> LabeledDataset:
    """Scale by the global max-abs value so the data lie in ``[-1, 1]``."""
    if ds.sample_count == 0:
        raise ValueError("cannot normalize an empty dataset")
    scale = float(np.max(np.abs(ds.series)))
    if scale == 0.0:
        raise ValueError("all-zero dataset has no normalization scale")
    return replace(ds, series=ds.series / scale, norm_info=scale, phases=None)


def denormalize(ds: LabeledDataset) -> LabeledDataset:
    if ds.norm_info is None:
        raise ValueError("dataset carries no normalization scale")
    return replace(ds, series=ds.series * ds.norm_info, norm_info=None, phases=None)


# binary format


def binary_size(n_series: int, length: int, labels: Optional[Sequence[str]] = None) -> int:
    block = len("\n".join(labels).encode("utf-8")) if labels else 0
    return _HEADER.size + 4 + block + 4 * n_series * length


def to_bytes(ds: LabeledDataset) -> bytes:
    block = "\n".join(ds.labels).encode("utf-8") if ds.labels else b""
    n, length = ds.series.shape
    parts = [
        _HEADER.pack(MAGIC, VERSION, n, length),
        struct.pack("<I", len(block)),
        block,
        np.ascontiguousarray(ds.series, dtype="<f4").tobytes(),
    ]
    return b"".join(parts)


def from_bytes(buf: bytes) -> LabeledDataset:
    if len(buf) < _HEADER.size + 4:
        raise DatasetFormatError(f"truncated header: {len(buf)} bytes")
    magic, version, n, length = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported format version {version}")
    (block_len,) = struct.unpack_from("<I", buf, _HEADER.size)
    off = _HEADER.size + 4
    if len(buf) < off + block_len:
        raise DatasetFormatError("truncated label block")
    block = buf[off : off + block_len]
    off += block_len
    expected = 4 * n * length
    if len(buf) - off < expected:
        raise DatasetFormatError(
            f"truncated payload: {len(buf) - off} of {expected} bytes"
        )
    if len(buf) - off > expected:
        raise DatasetFormatError(f"{len(buf) - off - expected} trailing bytes after payload")
    series = np.frombuffer(buf, dtype="<f4", count=n * length, offset=off)
    series = series.reshape(n, length).astype(np.float32)
    labels = None
    if block_len:
        try:
            labels = block.decode("utf-8").split("\n")
        except UnicodeDecodeError as e:
            raise DatasetFormatError(f"label block is not UTF-8: {e}") from None
        if len(labels) != n:
            raise DatasetFormatError(f"{len(labels)} labels for {n} series")
    return LabeledDataset(series, labels)


# CSV format: one series per row, optional leading "label:<name>" cell


def _write_csv(ds: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for i, row in enumerate(ds.series):
            cells = [f"{float(v):.9g}" for v in row]
            if ds.labels is not None:
                cells.insert(0, f"label:{ds.labels[i]}")
            w.writerow(cells)


def _read_csv(path) -> LabeledDataset:
    rows, labels = [], []
    with open(path, newline="") as fh:
        for lineno, cells in enumerate(csv.reader(fh), start=1):
            if not cells:
                continue
            label = None
            if cells[0].startswith("label:"):
                label = cells[0][len("label:") :]
                cells = cells[1:]
            labels.append(label)
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                bad = next(c for c in cells if not _is_float(c))
                raise DatasetFormatError(
                    f"line {lineno}: non-numeric cell {bad!r}"
                ) from None
            if len(rows[-1]) != len(rows[0]):
                raise DatasetFormatError(
                    f"line {lineno}: ragged row ({len(rows[-1])} values, expected {len(rows[0])})"
                )
    if not rows:
        raise DatasetFormatError("empty CSV dataset")
    if any(lab is None for lab in labels) and any(lab is not None for lab in labels):
        raise DatasetFormatError("label column present on some rows only")
    return LabeledDataset(np.array(rows), labels if labels[0] is not None else None)


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "binary"):
            raise ValueError(f"unknown dataset format {fmt!r}")
        return fmt
    return "csv" if str(path).lower().endswith(".csv") else "binary"


def save_dataset(ds: LabeledDataset, path, fmt: Optional[str] = None) -> None:
    if _infer_format(path, fmt) == "csv":
        _write_csv(ds, path)
    else:
        Path(path).write_bytes(to_bytes(ds))


def load_dataset(path, fmt: Optional[str] = None) -> LabeledDataset:
    if _infer_format(path, fmt) == "csv":
        return _read_csv(path)
    buf = Path(path).read_bytes()
    if not buf:
        raise DatasetFormatError(f"{path}: empty file")
    return from_bytes(buf)
