"""Small-sample augmentation protocol and a baseline 1D CNN fault classifier.

One diffusion model per class expands a small labeled training set; a CNN is
trained on the small set and on the expanded set and compared on a common
test set.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .data import LabeledDataset, concat
from .diffusion import sample
from .trainer import Adam, load_checkpoint
from .unet1d import UNetPredictor


# augmentation plan


@dataclass
class PlanEntry:
    label: str
    checkpoint: str
    count: int
    small_sample_count: Optional[int] = None


@dataclass
class AugmentPlan:
    entries: list
    seed: int = 0

    def validate(self) -> None:
        labels = [e.label for e in self.entries]
        if not labels:
            raise ValueError("augment plan has no classes")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate classes in plan: {labels}")
        for e in self.entries:
            if int(e.count) != e.count or e.count < 1:
                raise ValueError(f"class {e.label!r}: generated count must be positive, got {e.count}")
            if not e.checkpoint:
                raise ValueError(f"class {e.label!r} has no checkpoint")

    @property
    def total(self) -> int:
        return sum(e.count for e in self.entries)

    def to_json(self) -> str:
        doc = {}
        for e in self.entries:
            d = {"checkpoint": e.checkpoint, "count": e.count}
            if e.small_sample_count is not None:
                d["small_sample_count"] = e.small_sample_count
            doc[e.label] = d
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str, base_dir=None, seed: int = 0) -> "AugmentPlan":
        doc = json.loads(text)
        if not isinstance(doc, dict):
            raise ValueError("augment plan must be a JSON object mapping class -> entry")
        entries = []
        for label, d in doc.items():
            unknown = set(d) - {"checkpoint", "count", "small_sample_count"}
            if unknown:
                raise ValueError(f"class {label!r}: unknown keys {sorted(unknown)}")
            ckpt = d.get("checkpoint", "")
            if ckpt and base_dir is not None and not Path(ckpt).is_absolute():
                ckpt = str(Path(base_dir) / ckpt)
            entries.append(PlanEntry(label, ckpt, d.get("count", 0), d.get("small_sample_count")))
        plan = cls(entries, seed)
        plan.validate()
        return plan

    @classmethod
    def load(cls, path, seed: int = 0) -> "AugmentPlan":
        return cls.from_json(Path(path).read_text(), base_dir=Path(path).parent, seed=seed)


def expand_small_sample(plan: AugmentPlan, schedule=None, unet_config=None, chunk: int = 50) -> LabeledDataset:
    """Sample ``count`` series per class from that class's checkpoint.

    Output is denormalized with each checkpoint's stored scale and labeled
    by class, classes in plan order. ``schedule``/``unet_config``, when
    given, must match what the checkpoints store.
    """
    plan.validate()
    models = []
    for e in plan.entries:
        if not Path(e.checkpoint).exists():
            raise FileNotFoundError(f"class {e.label!r}: checkpoint {e.checkpoint} not found")
        params, cfg, sched, scale = load_checkpoint(e.checkpoint)
        if unet_config is not None and cfg.length != unet_config.length:
            raise ValueError(f"class {e.label!r}: model length {cfg.length} != {unet_config.length}")
        if schedule is not None and sched.total_steps != schedule.total_steps:
            raise ValueError(f"class {e.label!r}: schedule T={sched.total_steps} != {schedule.total_steps}")
        models.append((e, params, cfg, sched, scale))
    if len({m[2].length for m in models}) > 1:
        raise ValueError("plan mixes models of different series length")
    parts = []
    for ci, (e, params, cfg, sched, scale) in enumerate(models):
        model = UNetPredictor(params, cfg)
        chunks = []
        for start in range(0, e.count, chunk):
            n = min(chunk, e.count - start)
            x, _ = sample(model, sched, n, cfg.length, seed=plan.seed + 1000003 * ci, item_offset=start)
            chunks.append(x)
        series = np.concatenate(chunks) * (1.0 if scale is None else scale)
        parts.append(LabeledDataset(series, [e.label] * e.count))
    return concat(parts)


# CNN baseline


@dataclass
class CnnConfig:
    filters: tuple = (16, 32, 64)
    kernel: int = 9
    stride: int = 2
    dense_width: int = 32
    num_classes: int = 2
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        self.filters = tuple(self.filters)
        if self.num_classes < 2:
            raise ValueError("a classifier needs at least two classes")
        if not self.filters or min(self.filters) < 1 or self.kernel < 1 or self.stride < 1:
            raise ValueError("invalid conv stack")

    @classmethod
    def from_dict(cls, d: dict) -> "CnnConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown CnnConfig keys: {sorted(unknown)}")
        return cls(**d)


def cnn_param_shapes(config: CnnConfig) -> dict:
    shapes, c = {}, 1
    for i, f in enumerate(config.filters):
        shapes[f"conv{i}.w"] = (f, c, config.kernel)
        shapes[f"conv{i}.b"] = (f,)
        c = f
    shapes["dense.w"] = (config.dense_width, c)
    shapes["dense.b"] = (config.dense_width,)
    shapes["head.w"] = (config.num_classes, config.dense_width)
    shapes["head.b"] = (config.num_classes,)
    return shapes


def init_cnn(config: CnnConfig, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in cnn_param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
    return params


def _cnn_logits(tp: dict, config: CnnConfig, x: np.ndarray) -> ag.Tensor:
    h = ag.tensor(np.asarray(x, dtype=np.float32)[:, None, :])
    pad = config.kernel // 2
    for i in range(len(config.filters)):
        h = ag.relu(ag.conv1d(h, tp[f"conv{i}.w"], tp[f"conv{i}.b"], config.stride, pad))
    h = ag.relu(ag.linear(ag.global_avg_pool(h), tp["dense.w"], tp["dense.b"]))
    return ag.linear(h, tp["head.w"], tp["head.b"])


@dataclass
class Classifier:
    params: dict
    config: CnnConfig
    classes: list

    def logits(self, x) -> np.ndarray:
        with ag.no_grad():
            tp = {k: ag.Tensor(v) for k, v in self.params.items()}
            return _cnn_logits(tp, self.config, x).data

    def predict_index(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def predict(self, x) -> list:
        return [self.classes[i] for i in self.predict_index(x)]


def _encode(labels, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[lab] for lab in labels], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"unknown label {e.args[0]!r}; known classes {classes}") from None


def train_classifier(train_set: LabeledDataset, config: CnnConfig, classes: Optional[list] = None):
    """Cross-entropy training with Adam; returns ``(classifier, history)``.

    ``history`` holds one ``{"epoch", "loss", "accuracy"}`` dict per epoch.
    """
    if train_set.labels is None:
        raise ValueError("training set has no labels")
    classes = list(classes) if classes is not None else sorted(set(train_set.labels))
    if len(set(train_set.labels)) < 2:
        raise ValueError("training set holds a single class")
    if len(classes) != config.num_classes:
        config = CnnConfig(**{**asdict(config), "num_classes": len(classes)})
    y = _encode(train_set.labels, classes)
    x = np.asarray(train_set.series, dtype=np.float32)
    params = init_cnn(config, config.seed)
    opt = Adam(params, config.learning_rate)
    rng = np.random.default_rng(config.seed + 1)
    history = []
    n = len(y)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            tp = {k: ag.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
            logits = _cnn_logits(tp, config, x[idx])
            loss = ag.softmax_cross_entropy(logits, y[idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite classifier loss at epoch {epoch}")
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(params[k])) for k, t in tp.items()}
            opt.step(params, grads)
            total += float(loss.data) * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))
        history.append({"epoch": epoch + 1, "loss": total / n, "accuracy": correct / n})
    return Classifier(params, config, classes), history


def evaluate(classifier: Classifier, test_set: LabeledDataset):
    """Returns ``(accuracy, confusion)``; ``confusion[i, j]`` counts true i predicted j."""
    if test_set.labels is None:
        raise ValueError("test set has no labels")
    y = _encode(test_set.labels, classifier.classes)
    pred = classifier.predict_index(test_set.series) if len(y) else np.zeros(0, dtype=np.int64)
    k = len(classifier.classes)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    accuracy = float(np.trace(confusion)) / len(y) if len(y) else 0.0
    return accuracy, confusion


# A/B comparison


@dataclass
class ABReport:
    seeds: list
    small_accuracy: list
    augmented_accuracy: list
    classes: list = field(default_factory=list)

    @property
    def small_median(self) -> float:
        return float(np.median(self.small_accuracy))

    @property
    def augmented_median(self) -> float:
        return float(np.median(self.augmented_accuracy))

    @property
    def differences(self) -> list:
        return [a - s for s, a in zip(self.small_accuracy, self.augmented_accuracy)]

    @property
    def relative_improvement(self) -> float:
        """``(augmented - small) / small`` on the medians, as a fraction."""
        return relative_improvement(self.small_median, self.augmented_median)

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "classes": list(self.classes),
            "small_accuracy": list(self.small_accuracy),
            "augmented_accuracy": list(self.augmented_accuracy),
            "small_median": self.small_median,
            "augmented_median": self.augmented_median,
            "relative_improvement_percent": 100.0 * self.relative_improvement,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "small_accuracy", "augmented_accuracy"])
            for row in zip(self.seeds, self.small_accuracy, self.augmented_accuracy):
                w.writerow(row)


def relative_improvement(small: float, augmented: float) -> float:
    if small <= 0:
        raise ValueError("baseline accuracy must be positive")
    return (augmented - small) / small


def ab_compare(small_set, augmented_set, test_set, config: CnnConfig, n_seeds: int = 5, base_seed: int = 0) -> ABReport:
    """Train one classifier per arm and seed, scoring both on ``test_set``."""
    if n_seeds < 3:
        raise ValueError("need at least 3 seeds")
    classes = sorted(set(small_set.labels) | set(augmented_set.labels))
    seeds = [base_seed + i for i in range(n_seeds)]
    small_acc, aug_acc = [], []
    for s in seeds:
        cfg = CnnConfig(**{**asdict(config), "seed": s, "num_classes": len(classes)})
        for arm, out in ((small_set, small_acc), (augmented_set, aug_acc)):
            clf, _ = train_classifier(arm, cfg, classes)
            out.append(evaluate(clf, test_set)[0])
    return ABReport(seeds, small_acc, aug_acc, classes)
