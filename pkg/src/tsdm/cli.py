"""``tsdm`` command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

import os

if os.environ.get("TSDM_DETERMINISTIC") == "1":
    # single-threaded BLAS keeps reduction order fixed across runs
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = "1"

import argparse
import json
import secrets
import struct
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, svg
from .data import (
    DatasetFormatError,
    LabeledDataset,
    concat,
    gen_multi_frequency,
    load_dataset,
    normalize,
    save_dataset,
)
from .diagnosis import AugmentPlan, CnnConfig, ab_compare, expand_small_sample
from .diffusion import sample
from .spectral import average_spectrum, dominant_peaks, magnitude_spectra, spectrum_summary
from .trainer import CheckpointFormatError, TrainConfig, TrainingDiverged, load_checkpoint, train
from .unet1d import UNetConfig, UNetPredictor


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """All module configs in one canonical JSON document."""

    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    seed: Optional[int] = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"unet", "train", "cnn", "seed"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            UNetConfig.from_dict(d.get("unet", {})),
            TrainConfig.from_dict(d.get("train", {})),
            CnnConfig.from_dict(d.get("cnn", {})),
            d.get("seed"),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {
            "unet": json.loads(self.unet.to_json()),
            "train": asdict(self.train),
            "cnn": {**asdict(self.cnn), "filters": list(self.cnn.filters)},
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _resolve_seed(flag: Optional[int], config_seed: Optional[int] = None) -> int:
    if flag is not None:
        return flag
    if config_seed is not None:
        return config_seed
    return secrets.randbits(31)


def _stamp(out_dir: Path, command: str, seed, resolved: dict) -> None:
    doc = {
        "command": command,
        "seed": seed,
        "version": __version__,
        "deterministic": os.environ.get("TSDM_DETERMINISTIC") == "1",
        "config": resolved,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _parent(path) -> Path:
    return Path(path).resolve().parent


def _freqs(text: str) -> list:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad frequency list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty frequency list")
    return [int(v) if v.is_integer() else v for v in vals]


# commands


def cmd_gen_data(args) -> None:
    if args.mode == "single" and len(args.freqs) != 1:
        raise UsageError("--mode single takes exactly one frequency")
    seed = _resolve_seed(args.seed)
    ds = gen_multi_frequency(args.freqs, args.n, args.len, seed=seed, label=args.label)
    save_dataset(LabeledDataset(ds.series, ds.labels), args.out, args.format)
    _stamp(_parent(args.out), "gen-data", seed, {
        "mode": args.mode, "freqs": args.freqs, "n": args.n, "len": args.len,
        "label": args.label, "out": str(args.out), "format": args.format,
    })


def cmd_train(args) -> None:
    run = RunConfig.load(args.config)
    seed = _resolve_seed(args.seed, run.seed)
    run.seed = seed
    run.train.seed = seed
    ds = load_dataset(args.data)
    if args.label is not None:
        ds = ds.select_label(args.label)
    unet = run.unet
    if unet.length != ds.length:
        unet = UNetConfig.from_dict({**json.loads(unet.to_json()), "length": ds.length})
        run.unet = unet
    _, report = train(normalize(ds), run.train, unet, checkpoint_path=args.out_ckpt)
    loss_csv = args.loss_csv or str(args.out_ckpt) + ".loss.csv"
    report.loss_csv(loss_csv)
    _stamp(_parent(args.out_ckpt), "train", seed, {
        **run.to_dict(), "data": str(args.data), "label": args.label,
        "out_ckpt": str(args.out_ckpt), "loss_csv": loss_csv,
    })


def cmd_sample(args) -> None:
    params, cfg, sched, scale = load_checkpoint(args.ckpt)
    seed = _resolve_seed(args.seed)
    x, trace = sample(UNetPredictor(params, cfg), sched, args.count, cfg.length, seed, trace_every=args.trace_every)
    x = x * (1.0 if scale is None else scale)
    labels = [args.label] * args.count if args.label else None
    save_dataset(LabeledDataset(x, labels), args.out, args.format)
    extra = {}
    if args.trace_every:
        trace_csv = str(args.out) + ".trace.csv"
        trace.to_csv(trace_csv, final=x)
        extra["trace_csv"] = trace_csv
        if args.svg and args.count:
            series = [snap[0] for _, snap in trace.snapshots] + [x[0]]
            names = [f"t={t}" for t in trace.steps] + ["t=0"]
            Path(str(args.out) + ".trace.svg").write_text(line_plot_stack(series, names))
    _stamp(_parent(args.out), "sample", seed, {
        "ckpt": str(args.ckpt), "count": args.count, "trace_every": args.trace_every,
        "out": str(args.out), "unet": json.loads(cfg.to_json()),
        "schedule": {"total_steps": sched.total_steps, "beta_start": sched.beta_start, "beta_end": sched.beta_end},
        **extra,
    })


def line_plot_stack(series, names) -> str:
    # offset each snapshot so the denoising progression reads top to bottom
    rows = [np.asarray(s, dtype=float) for s in series]
    span = max(float(np.ptp(r)) for r in rows) or 1.0
    shifted = [r - i * span for i, r in enumerate(rows)]
    return svg.line_plot(shifted, "denoising trace (first series)", names)


def cmd_spectrum(args) -> None:
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spectra = magnitude_spectra(ds.series, args.window)
    with open(out / "spectra.csv", "w") as fh:
        fh.write("series_index," + ",".join(f"bin{k}" for k in range(spectra.shape[1])) + "\n")
        for i, row in enumerate(spectra):
            fh.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
    written = ["spectra.csv"]
    if args.summary:
        summ = spectrum_summary(spectra)
        summ.to_csv(out / "summary.csv")
        written.append("summary.csv")
        if args.svg:
            (out / "summary.svg").write_text(svg.box_plot(summ, "magnitude spectrum box plot"))
    if args.avg:
        avg = average_spectrum(ds, args.window)
        avg.to_csv(out / "average.csv")
        written.append("average.csv")
        if args.svg:
            (out / "average.svg").write_text(svg.line_plot([avg.magnitudes], "average magnitude spectrum"))
    if args.peaks:
        with open(out / "peaks.csv", "w") as fh:
            fh.write("series_index,rank,bin,magnitude\n")
            for i, row in enumerate(spectra):
                for r, (b, m) in enumerate(dominant_peaks(row, args.peaks), start=1):
                    fh.write(f"{i},{r},{b},{m!r}\n")
        written.append("peaks.csv")
    _stamp(out, "spectrum", None, {
        "data": str(args.data), "summary": args.summary, "avg": args.avg,
        "peaks": args.peaks, "window": args.window, "outputs": written,
    })


def cmd_augment(args) -> None:
    seed = _resolve_seed(args.seed)
    plan = AugmentPlan.load(args.plan, seed=seed)
    ds = expand_small_sample(plan)
    save_dataset(ds, args.out, args.format)
    _stamp(_parent(args.out), "augment", seed, {
        "plan": json.loads(plan.to_json()), "out": str(args.out), "count": ds.sample_count,
    })


def cmd_diagnose(args) -> None:
    run = RunConfig.load(args.config)
    seed = _resolve_seed(args.seed, run.seed)
    small = load_dataset(args.train)
    generated = load_dataset(args.augmented)
    test = load_dataset(args.test)
    for name, d in (("--train", small), ("--augmented", generated), ("--test", test)):
        if d.labels is None:
            raise ValueError(f"{name} dataset has no labels")
    augmented = generated if args.replace else concat([small, generated])
    report = ab_compare(small, augmented, test, run.cnn, n_seeds=args.seeds, base_seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    run.seed = seed
    _stamp(out, "diagnose", seed, {
        **run.to_dict(), "train": str(args.train), "augmented": str(args.augmented),
        "test": str(args.test), "seeds": args.seeds, "replace": args.replace,
    })
    print(
        f"small median {report.small_median:.4f}  augmented median {report.augmented_median:.4f}  "
        f"improvement {100 * report.relative_improvement:+.3f}%"
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsdm", description="Diffusion generator for 1-D vibration signals")
    p.add_argument("--version", action="version", version=f"tsdm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def fmt(sp):
        sp.add_argument("--format", choices=["binary", "csv"], default=None,
                        help="dataset format (default: by suffix, .csv or binary)")

    g = sub.add_parser("gen-data", help="generate a synthetic sine dataset")
    g.add_argument("--mode", choices=["single", "multi"], required=True)
    g.add_argument("--freqs", type=_freqs, required=True, help="comma-separated cycles per record")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--len", type=int, default=2048)
    g.add_argument("--seed", type=int)
    g.add_argument("--label")
    g.add_argument("--out", required=True)
    fmt(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a noise predictor on one class")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--loss-csv")
    t.add_argument("--label", help="train on this class only")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate series from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--trace-every", type=int, default=None)
    s.add_argument("--label")
    s.add_argument("--svg", action="store_true")
    s.add_argument("--out", required=True)
    fmt(s)
    s.set_defaults(func=cmd_sample)

    sp = sub.add_parser("spectrum", help="spectral reports for a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--summary", action="store_true")
    sp.add_argument("--avg", action="store_true")
    sp.add_argument("--peaks", type=int, default=0)
    sp.add_argument("--window", choices=["hann"], default=None)
    sp.add_argument("--svg", action="store_true")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_spectrum)

    a = sub.add_parser("augment", help="expand a small sample from per-class checkpoints")
    a.add_argument("--plan", required=True)
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    fmt(a)
    a.set_defaults(func=cmd_augment)

    d = sub.add_parser("diagnose", help="A/B compare small vs augmented training")
    d.add_argument("--train", required=True, help="small labeled training set")
    d.add_argument("--augmented", required=True, help="generated labeled set")
    d.add_argument("--test", required=True)
    d.add_argument("--seeds", type=int, default=5)
    d.add_argument("--config", help="run config JSON (cnn section)")
    d.add_argument("--seed", type=int, help="base seed")
    d.add_argument("--replace", action="store_true", help="augmented arm uses generated data only")
    d.add_argument("--out", required=True, help="output directory")
    d.set_defaults(func=cmd_diagnose)
    return p


RUNTIME_ERRORS = (
    ValueError, OSError, FloatingPointError, DatasetFormatError,
    CheckpointFormatError, TrainingDiverged, struct.error,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("n", "len", "count", "peaks", "seeds", "trace_every"):
        v = getattr(args, name, None)
        if v is not None and v < 0:
            parser.error(f"--{name.replace('_', '-')} must be nonnegative")
    try:
        args.func(args)
    except UsageError as e:
        parser.error(str(e))
    except RUNTIME_ERRORS as e:
        print(f"tsdm: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
