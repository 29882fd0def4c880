"""Random-timestep noise-prediction training with Adam, plus checkpoint files."""

from __future__ import annotations

import csv
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import LabeledDataset
from .schedule import DEFAULT_BETA_END, DEFAULT_BETA_START, NoiseSchedule, linear_beta_schedule
from .unet1d import Params, UNetConfig, init_params, loss_and_gradients, param_shapes

log = logging.getLogger(__name__)

CKPT_MAGIC = b"TSDC"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 10
    epochs: int = 200
    total_steps: int = 3000
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    learning_rate: float = 2e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    ema_decay: float = 0.0  # 0 disables the parameter moving average
    checkpoint_every: int = 0  # epochs; 0 disables periodic checkpoints

    def validate(self) -> None:
        for k in ("batch_size", "total_steps"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")
        if self.epochs < 0 or self.checkpoint_every < 0:
            raise ValueError("epochs and checkpoint_every must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def schedule(self) -> NoiseSchedule:
        return linear_beta_schedule(self.total_steps, self.beta_start, self.beta_end)


@dataclass
class TrainReport:
    history: list = field(default_factory=list)  # (step, loss)
    epoch_seconds: list = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    raw_params: Optional[dict] = None  # optimizer weights when an average is returned

    @property
    def losses(self) -> np.ndarray:
        return np.array([loss for _, loss in self.history])

    def loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for step, loss in self.history:
                w.writerow([step, repr(loss)])


class Adam:
    def __init__(self, params: Params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: Params, grads: Params) -> None:
        """In-place update; a zero gradient leaves a parameter untouched."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def clip_global_norm(grads: Params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def sample_timesteps(rng: np.random.Generator, total_steps: int, size: int) -> np.ndarray:
    return rng.integers(1, total_steps + 1, size=size)


def train(
    dataset: LabeledDataset,
    config: TrainConfig,
    unet_config: UNetConfig,
    checkpoint_path=None,
    params: Optional[Params] = None,
    log_every: int = 0,
):
    """Fit the noise predictor to one (normalized) class of series.

    Returns ``(params, report)``. Each epoch visits the data in a fresh
    permutation; every batch gets uniform random steps and fresh noise.
    With ``ema_decay > 0`` the returned and checkpointed weights are the
    exponential moving average of the optimizer weights.
    """
    config.validate()
    if dataset.norm_info is None:
        raise ValueError("training data must be normalized first (norm_info missing)")
    if dataset.length != unet_config.length:
        raise ValueError(f"dataset length {dataset.length} != model length {unet_config.length}")
    n = dataset.sample_count
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    schedule = config.schedule()
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(unet_config, config.seed)
    opt = Adam(params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    report = TrainReport()
    x = np.asarray(dataset.series, dtype=np.float64)
    step = 0
    ema = {k: v.copy() for k, v in params.items()} if config.ema_decay else None
    last_good = {k: v.copy() for k, v in params.items()}

    def exported():
        return ema if ema is not None else params

    def write(path):
        save_checkpoint(exported(), unet_config, schedule, dataset.norm_info, path)
        report.checkpoint_path = str(path)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            t = sample_timesteps(rng, schedule.total_steps, len(idx))
            eps = rng.standard_normal((len(idx), dataset.length))
            try:
                loss, grads = loss_and_gradients(params, unet_config, x[idx], t, eps, schedule)
            except FloatingPointError as e:
                if checkpoint_path is not None:
                    save_checkpoint(last_good, unet_config, schedule, dataset.norm_info, checkpoint_path)
                    report.checkpoint_path = str(checkpoint_path)
                raise TrainingDiverged(f"step {step}: {e}") from e
            clip_global_norm(grads, config.grad_clip)
            opt.step(params, grads)
            report.history.append((step, loss))
            step += 1
            if ema is not None:
                # warm-up keeps early averages from clinging to the initialization
                d = min(config.ema_decay, (1.0 + step) / (10.0 + step))
                for k, v in params.items():
                    ema[k] *= d
                    ema[k] += (1.0 - d) * v
            if log_every and step % log_every == 0:
                recent = report.losses[-log_every:]
                log.info("step %d  loss %.4f", step, float(np.mean(recent)))
        report.epoch_seconds.append(time.perf_counter() - t0)
        if checkpoint_path is not None:
            last_good = {k: v.copy() for k, v in exported().items()}
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                write(checkpoint_path)
    if checkpoint_path is not None:
        write(checkpoint_path)
    if ema is not None:
        report.raw_params = params
        return ema, report
    return params, report


# checkpoint format


def checkpoint_bytes(params: Params, unet_config: UNetConfig, schedule: NoiseSchedule, norm_info) -> bytes:
    shapes = param_shapes(unet_config)
    if list(shapes) != list(params):
        raise ValueError("parameter names do not match the configuration")
    cfg = unet_config.to_json().encode("utf-8")
    scale = math.nan if norm_info is None else float(norm_info)
    out = [
        CKPT_MAGIC,
        struct.pack("<IIddd", CKPT_VERSION, schedule.total_steps, schedule.beta_start, schedule.beta_end, scale),
        struct.pack("<I", len(cfg)),
        cfg,
        struct.pack("<I", len(params)),
    ]
    for name, arr in params.items():
        if tuple(arr.shape) != tuple(shapes[name]):
            raise ValueError(f"{name}: shape {arr.shape} != {shapes[name]}")
        bname = name.encode("utf-8")
        out.append(struct.pack("<H", len(bname)))
        out.append(bname)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(params, unet_config, schedule, norm_info, path) -> None:
    data = checkpoint_bytes(params, unet_config, schedule, norm_info)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {self.off}")
        vals = struct.unpack_from(fmt, self.buf, self.off)
        self.off += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {self.off}")
        b = self.buf[self.off : self.off + n]
        self.off += n
        return b


def parse_checkpoint(buf: bytes):
    r = _Reader(buf)
    if r.raw(4) != CKPT_MAGIC:
        raise CheckpointFormatError("bad checkpoint magic")
    version, T, beta_start, beta_end, scale = r.take("<IIddd")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.take("<I")
    try:
        config = UNetConfig.from_json(r.raw(cfg_len).decode("utf-8"))
    except (ValueError, TypeError) as e:
        raise CheckpointFormatError(f"bad config block: {e}") from None
    schedule = linear_beta_schedule(T, beta_start, beta_end)
    shapes = param_shapes(config)
    (count,) = r.take("<I")
    if count != len(shapes):
        raise CheckpointFormatError(f"{count} tensors in file, config implies {len(shapes)}")
    params = {}
    for _ in range(count):
        (nlen,) = r.take("<H")
        name = r.raw(nlen).decode("utf-8")
        (rank,) = r.take("<B")
        dims = r.take(f"<{rank}I")
        if name not in shapes or tuple(dims) != tuple(shapes[name]):
            raise CheckpointFormatError(f"tensor {name!r} {dims} does not match config")
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(r.raw(4 * n), dtype="<f4").reshape(dims)
        params[name] = arr.astype(config.dtype)
    if r.off != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.off} trailing bytes")
    if list(params) != list(shapes):
        raise CheckpointFormatError("tensor order does not match config")
    norm_info = None if math.isnan(scale) else scale
    return params, config, schedule, norm_info


def load_checkpoint(path):
    """Returns ``(params, unet_config, schedule, norm_info)``."""
    return parse_checkpoint(Path(path).read_bytes())


def train_config_dict(config: TrainConfig) -> dict:
    return asdict(config)
