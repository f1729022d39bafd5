"""Training protocol: stratified split, oversampling, weighted loss, Adadelta,
balanced-accuracy evaluation, repeated runs and first-layer inspection."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import AugmentConfig, augment_arrays
from .compressor import round_half_away
from .core import C2GImage
from .errors import (
    ArchitectureMismatch,
    ClassWithTooFewSamples,
    DataError,
    EmptyDataset,
    SplitDegenerate,
)
from .nn import AdadeltaState, Checkpoint, NetworkSpec, adadelta_step, init_params, loss_and_grads
from .nn.network import first_conv_index, flatten_params, predict_proba, unflatten_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``class_weights`` is ``(weight of label 0, weight of label 1)``; label 1
    is the clinically important class. ``target_accuracy`` stops a run as
    soon as validation balanced accuracy reaches it.
    """

    epochs: int = 1000
    batch_size: int = 32
    class_weights: tuple[float, float] = (1.0, 3.0)
    oversample: bool = True
    split: tuple[float, float] = (2 / 3, 1 / 3)
    runs: int = 10
    seed: int = 0
    same_seed: bool = False
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    rho: float = 0.95
    eps: float = 1e-6
    l1: float = 1e-3
    normalize: bool = True
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise DataError("epochs must be non-negative")
        if self.batch_size < 1 or self.runs < 1:
            raise DataError("batch size and run count must be positive")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise DataError(f"split fractions must be positive and sum to 1, got {self.split}")
        if min(self.class_weights) <= 0:
            raise DataError("class weights must be positive")
        if self.l1 < 0:
            raise DataError("L1 coefficient must be non-negative")
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        object.__setattr__(self, "split", tuple(float(f) for f in self.split))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict() if self.augment else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown training keys: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("augment"), dict):
            d["augment"] = AugmentConfig.from_dict(d["augment"])
        for k in ("class_weights", "split"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass(eq=False)
class Dataset:
    x: np.ndarray
    occ: np.ndarray
    y: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.occ = np.asarray(self.occ, dtype=bool)
        self.y = np.asarray(self.y, dtype=np.int64)
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.y))]

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.occ[idx], self.y[idx], [self.ids[i] for i in idx])

    @classmethod
    def from_images(cls, imgs: Sequence[C2GImage]) -> "Dataset":
        if not imgs:
            raise EmptyDataset("no images")
        labels = [img.label for img in imgs]
        if any(lab is None for lab in labels):
            raise DataError("every training image needs a label")
        return cls(
            np.stack([img.data for img in imgs]),
            np.stack([img.occupancy for img in imgs]),
            np.array(labels),
            [str(img.meta.get("source_id", i)) for i, img in enumerate(imgs)],
        )


# ---------------------------------------------------------------------------
# splitting and resampling


def stratified_split(labels, fractions=(2 / 3, 1 / 3), seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split into (train, validation) index arrays."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise SplitDegenerate("need at least two classes to split (balanced accuracy undefined)")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            raise ClassWithTooFewSamples(f"class {c} has {len(idx)} sample(s); both splits need one")
        idx = rng.permutation(idx)
        n_train = int(round_half_away(len(idx) * fractions[0]))
        n_train = min(max(n_train, 1), len(idx) - 1)
        train.append(idx[:n_train])
        val.append(idx[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def oversample(indices, labels, seed=0) -> np.ndarray:
    """Redraw minority-class members (with replacement) until classes are equal.

    ``labels`` is indexed by the entries of ``indices``. The result is shuffled.
    """
    indices = np.asarray(indices, dtype=np.int64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    by_class = {c: indices[labels[indices] == c] for c in np.unique(labels[indices])}
    target = max(len(v) for v in by_class.values())
    parts = [indices]
    for members in by_class.values():
        if len(members) < target:
            parts.append(rng.choice(members, size=target - len(members), replace=True))
    return rng.permutation(np.concatenate(parts))


# ---------------------------------------------------------------------------
# evaluation


def confusion_matrix(y_true, y_pred, n_classes: int = 2) -> np.ndarray:
    """``cm[true, predicted]`` counts."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean recall over the classes present in ``y_true``."""
    y_true = np.asarray(y_true)
    if len(y_true) == 0:
        raise EmptyDataset("balanced accuracy of an empty set")
    y_pred = np.asarray(y_pred)
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


@dataclass
class Evaluation:
    balanced_accuracy: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {"balanced_accuracy": self.balanced_accuracy, "confusion": self.confusion.tolist()}


def predict(ckpt: Checkpoint, x) -> np.ndarray:
    return predict_proba(ckpt.spec, ckpt.params, ckpt.prepare(x)).argmax(axis=1)


def evaluate(ckpt: Checkpoint, data: Dataset) -> Evaluation:
    if len(data) == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    pred = predict(ckpt, data.x)
    n_classes = ckpt.spec.layers[-1].units
    return Evaluation(balanced_accuracy(data.y, pred), confusion_matrix(data.y, pred, n_classes))


# ---------------------------------------------------------------------------
# training


def channel_scale(x: np.ndarray) -> np.ndarray:
    """Per-channel factor mapping the 99th percentile of nonzero values to 1."""
    scale = np.ones(x.shape[-1], dtype=np.float32)
    for c in range(x.shape[-1]):
        v = x[..., c]
        v = v[v != 0]
        if v.size:
            q = np.percentile(np.abs(v), 99)
            if q > 0:
                scale[c] = 1.0 / q
    return scale


@dataclass
class RunResult:
    seed: int
    balanced_accuracy: float
    confusion: list
    epochs_run: int
    loss_curve: list[float]
    val_curve: list[float]
    train_time_s: float
    reached_target_at: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["timing"] = {"train_time_s": d.pop("train_time_s")}
        return d


def train_model(
    spec: NetworkSpec,
    train: Dataset,
    val: Dataset,
    cfg: TrainConfig,
    seed: int | None = None,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> tuple[Checkpoint, RunResult]:
    """Train one model and report its validation performance.

    Every epoch the (optionally oversampled) training set is shuffled, each
    sample is augmented independently, and Adadelta steps on the weighted,
    L1-regularised cross entropy. Validation data is used as-is.
    """
    seed = cfg.seed if seed is None else seed
    ss = np.random.SeedSequence(seed)
    init_rng, order_rng, aug_rng, drop_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    spec = spec.with_l1(cfg.l1)
    if len(train) == 0:
        raise EmptyDataset("empty training set")

    params = init_params(spec, init_rng, np.float32)
    scale = channel_scale(train.x) if cfg.normalize else None
    ckpt = Checkpoint(spec, params, scale, {"seed": seed})

    order = np.arange(len(train))
    if cfg.oversample:
        order = oversample(order, train.y, seed=int(order_rng.integers(2**31)))
    flat = flatten_params(params)
    state = AdadeltaState.zeros_like(flat, cfg.rho, cfg.eps)

    loss_curve, val_curve = [], []
    reached = None
    ev = evaluate(ckpt, val) if cfg.epochs == 0 else None
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        perm = order_rng.permutation(order)
        total, count = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = train.x[idx]
            if cfg.augment is not None:
                xb = np.stack(
                    [augment_arrays(train.x[i], train.occ[i], cfg.augment, aug_rng)[0] for i in idx]
                )
            if scale is not None:
                xb = xb * scale
            loss, grads = loss_and_grads(
                spec, params, xb, train.y[idx], cfg.class_weights, training=True, rng=drop_rng
            )
            flat, state = adadelta_step(flat, flatten_params(grads), state)
            params = unflatten_params(spec, flat)
            total += loss * len(idx)
            count += len(idx)
        ckpt = Checkpoint(spec, params, scale, {"seed": seed, "epochs": epoch})
        ev = evaluate(ckpt, val)
        loss_curve.append(total / count)
        val_curve.append(ev.balanced_accuracy)
        if on_epoch:
            on_epoch(epoch, loss_curve[-1], ev.balanced_accuracy)
        log.debug("epoch %d loss %.4f val-bacc %.4f", epoch, loss_curve[-1], ev.balanced_accuracy)
        if cfg.target_accuracy is not None and ev.balanced_accuracy >= cfg.target_accuracy:
            reached = epoch
            break
    elapsed = time.perf_counter() - t0

    result = RunResult(
        seed=seed,
        balanced_accuracy=ev.balanced_accuracy,
        confusion=ev.confusion.tolist(),
        epochs_run=len(loss_curve),
        loss_curve=loss_curve,
        val_curve=val_curve,
        train_time_s=elapsed,
        reached_target_at=reached,
    )
    return ckpt, result


def _hms(seconds: float) -> str:
    s = int(round(seconds))
    return f"{s // 3600:02d}:{s % 3600 // 60:02d}:{s % 60:02d}"


@dataclass
class RunReport:
    model_name: str
    image_type: str
    resolution: str
    architecture: str
    runs: list[RunResult]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.balanced_accuracy for r in self.runs])

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def std(self) -> float:
        return float(self.accuracies.std())

    @property
    def mean_train_time_s(self) -> float:
        return float(np.mean([r.train_time_s for r in self.runs]))

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "image_type": self.image_type,
            "resolution": self.resolution,
            "architecture": self.architecture,
            "balanced_accuracy": {"mean": self.mean, "std": self.std},
            "runs": [r.to_dict() for r in self.runs],
            "timing": {"mean_train_time_s": self.mean_train_time_s},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        header = ("Model name", "Image type", "Image res.", "CNN", "Bal. accuracy", "Training time")
        row = (
            self.model_name,
            self.image_type,
            self.resolution,
            self.architecture,
            f"{self.mean:.3f} ({self.std:.3f})",
            _hms(self.mean_train_time_s),
        )
        widths = [max(len(a), len(b)) for a, b in zip(header, row)]
        fmt = "  ".join(f"{{:<{w}}}" for w in widths)
        return "\n".join([fmt.format(*header), fmt.format(*("-" * w for w in widths)), fmt.format(*row)])


def run_seeds(cfg: TrainConfig) -> list[int]:
    if cfg.same_seed:
        return [cfg.seed] * cfg.runs
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(cfg.seed).spawn(cfg.runs)]


def repeat_runs(
    spec: NetworkSpec,
    data: Dataset,
    cfg: TrainConfig,
    model_name: str = "C2G-Net",
    image_type: str = "Cell2Grid",
    resolution: str | None = None,
    keep_best: bool = False,
) -> tuple[RunReport, list[Checkpoint]]:
    """Train ``cfg.runs`` models, each on its own stratified split and seed."""
    runs, ckpts = [], []
    for i, seed in enumerate(run_seeds(cfg)):
        tr, va = stratified_split(data.y, cfg.split, seed)
        ckpt, res = train_model(spec, data.subset(tr), data.subset(va), cfg, seed)
        log.info("run %d/%d seed %d: balanced accuracy %.3f after %d epochs",
                 i + 1, cfg.runs, seed, res.balanced_accuracy, res.epochs_run)
        runs.append(res)
        ckpts.append(ckpt)
    report = RunReport(model_name, image_type, resolution or "", spec.name, runs)
    return report, ckpts


# ---------------------------------------------------------------------------
# first-layer inspection


@dataclass
class WeightInspection:
    weights: np.ndarray  # (filters, channels)
    threshold: float
    channel_names: list[str]

    @property
    def flagged(self) -> list[int]:
        """Filters (0-based) with at least one weight above the threshold,
        compared at the precision the weights are stored in."""
        t = self.weights.dtype.type(self.threshold)
        return [int(i) for i in np.flatnonzero((self.weights > t).any(axis=1))]

    def write_csv(self, path: str | Path) -> None:
        """Header of channel names, then one row per filter."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.channel_names)
            for row in self.weights:
                w.writerow([repr(float(v)) for v in row])

    def heatmap(self, cell: int = 16) -> np.ndarray:
        """RGB raster: positive weights in a black-to-yellow ramp, every
        negative weight in one flat blue."""
        w = self.weights
        top = w.max() if w.size and w.max() > 0 else 1.0
        t = np.clip(w / top, 0, 1)
        rgb = np.stack([t, t, 0.3 * t], axis=-1)
        rgb[w < 0] = (0.15, 0.25, 0.6)
        img = np.round(rgb * 255).astype(np.uint8)
        return img.repeat(cell, axis=0).repeat(cell, axis=1)

    def write_heatmap(self, path: str | Path, cell: int = 16) -> None:
        from PIL import Image

        Image.fromarray(self.heatmap(cell)).save(path, format="PNG")


def inspect_first_layer(ckpt: Checkpoint, threshold: float = 0.004, channel_names=None) -> WeightInspection:
    """Weight table of the first (1x1) convolution, one row per filter."""
    i = first_conv_index(ckpt.spec)
    ly = ckpt.spec.layers[i]
    if ly.kind != "conv" or ly.size != 1:
        raise ArchitectureMismatch("first trainable layer is not a 1x1 convolution")
    W = np.asarray(ckpt.params[i][0])[0, 0].T  # (filters, channels)
    names = list(channel_names or [f"ch{c}" for c in range(W.shape[1])])
    return WeightInspection(W.copy(), threshold, names)
