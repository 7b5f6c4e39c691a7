"""SGD with momentum, cosine learning-rate annealing, augmentation and metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .errors import DataError, NumericError, ParameterError
from .nn import Module
from .runtime import tune_allocator
from .tensor import Tensor

SIDES = {
    "top": (2, 1.0),
    "bottom": (2, -1.0),
    "right": (0, 1.0),
    "left": (0, -1.0),
    "front": (1, 1.0),
    "back": (1, -1.0),
}


# ----------------------------------------------------------------------------
# optimization


@dataclass
class OptimizerState:
    total_epochs: int
    lr_max: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ParameterError(f"total_epochs must be positive, got {self.total_epochs}")
        if not 0 < self.lr_min <= self.lr_max:
            raise ParameterError(f"need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")

    @property
    def lr(self) -> float:
        return cosine_lr(min(self.epoch, self.total_epochs), self)


def cosine_lr(epoch: float, state: OptimizerState) -> float:
    """One half-cosine from ``lr_max`` at epoch 0 to ``lr_min`` at ``total_epochs``."""
    if not 0 <= epoch <= state.total_epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {state.total_epochs}]")
    if epoch == state.total_epochs:
        return state.lr_min
    frac = epoch / state.total_epochs
    return state.lr_min + 0.5 * (state.lr_max - state.lr_min) * (1.0 + math.cos(math.pi * frac))


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState,
             lr: float | None = None) -> None:
    """In place: ``v <- momentum * v + g``; ``p <- p - lr * v``."""
    lr = state.lr if lr is None else lr
    bad = [name for name, g in grads.items() if not np.isfinite(g).all()]
    if bad:
        raise NumericError(f"non-finite gradient for {len(bad)} parameter(s), first: {bad[0]}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        v = state.velocity.get(name)
        v = g.astype(p.dtype, copy=True) if v is None else state.momentum * v + g
        state.velocity[name] = v
        p.data -= lr * v


# ----------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    scale: bool = True
    scale_range: tuple[float, float] = (0.66, 1.5)
    shift: bool = True
    shift_range: float = 0.2
    jitter: bool = True
    jitter_sigma: float = 0.01
    jitter_clip: float = 0.05

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(scale=False, shift=False, jitter=False)

    @classmethod
    def from_dict(cls, values: dict) -> "AugmentConfig":
        values = dict(values)
        if "scale_range" in values:
            values["scale_range"] = tuple(values["scale_range"])
        return cls(**values)


def augment(points: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random global scale and shift plus clipped per-point jitter.

    Operates on the last axis of ``[..., n, 3]``; each cloud of a batch gets
    its own scale and shift.
    """
    pts = np.array(points, dtype=np.float64)
    lead = pts.shape[:-2]
    if cfg.scale:
        lo, hi = cfg.scale_range
        pts *= rng.uniform(lo, hi, size=lead + (1, 1))
    if cfg.shift:
        pts += rng.uniform(-cfg.shift_range, cfg.shift_range, size=lead + (1, pts.shape[-1]))
    if cfg.jitter:
        noise = rng.normal(0.0, cfg.jitter_sigma, size=pts.shape)
        pts += np.clip(noise, -cfg.jitter_clip, cfg.jitter_clip)
    return pts


# ----------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    overall_accuracy: float = float("nan")
    mean_class_accuracy: float = float("nan")
    per_class_accuracy: list[float] = field(default_factory=list)
    miou: float = float("nan")
    per_shape_iou: list[float] = field(default_factory=list)
    count: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> str:
        if self.per_shape_iou:
            return f"mIoU {self.miou:.4f} over {self.count} shapes"
        return (f"overall accuracy {self.overall_accuracy:.4f}, "
                f"mean class accuracy {self.mean_class_accuracy:.4f} ({self.count} clouds)")


def classification_report(pred, true, num_classes: int | None = None) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise DataError(f"prediction shape {pred.shape} vs label shape {true.shape}")
    if true.size == 0:
        raise ParameterError("cannot score an empty dataset")
    C = int(num_classes if num_classes is not None else true.max() + 1)
    per_class = []
    for c in range(C):
        mask = true == c
        per_class.append(float((pred[mask] == c).mean()) if mask.any() else float("nan"))
    present = [a for a in per_class if not math.isnan(a)]
    return MetricsReport(
        overall_accuracy=float((pred == true).mean()),
        mean_class_accuracy=float(np.mean(present)),
        per_class_accuracy=per_class,
        count=int(true.size),
    )


def miou_shapenet(pred_labels, true_labels, shape_category, part_sets: dict[int, Sequence[int]]) -> MetricsReport:
    """Mean over shapes of the per-shape mean part IoU.

    ``pred_labels``/``true_labels`` are per-shape label vectors (or a single
    vector with a scalar category). A part missing from both prediction and
    truth counts as IoU 1.
    """
    if np.ndim(shape_category) == 0:
        pred_labels, true_labels, shape_category = [pred_labels], [true_labels], [shape_category]
    if not (len(pred_labels) == len(true_labels) == len(shape_category)):
        raise DataError("pred, true and category lists differ in length")
    if not len(shape_category):
        raise ParameterError("cannot score an empty dataset")
    ious = []
    for pred, true, cat in zip(pred_labels, true_labels, shape_category):
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise DataError(f"prediction shape {pred.shape} vs label shape {true.shape}")
        parts = part_sets.get(int(cat))
        if parts is None:
            raise DataError(f"no part set for category {cat}")
        allowed = np.asarray(list(parts))
        for name, arr in (("predicted", pred), ("true", true)):
            outside = ~np.isin(arr, allowed)
            if outside.any():
                raise DataError(f"{name} label {arr[outside][0]} not in the part set of category {cat}")
        # Exact rationals until the end, so hand-computed fixtures round once.
        shape = Fraction(0)
        for part in parts:
            p, t = pred == part, true == part
            union = int(np.logical_or(p, t).sum())
            shape += 1 if union == 0 else Fraction(int(np.logical_and(p, t).sum()), union)
        ious.append(shape / len(parts))
    return MetricsReport(miou=float(sum(ious) / len(ious)), per_shape_iou=[float(v) for v in ious],
                         count=len(ious))


# ----------------------------------------------------------------------------
# evaluation


def _stack(clouds) -> np.ndarray:
    sizes = {c.n for c in clouds}
    if len(sizes) != 1:
        raise DataError(f"clouds in a batch must share a point count, got {sorted(sizes)}")
    return np.stack([c.points for c in clouds])


def predict_classes(model: Module, points: Sequence[np.ndarray], batch_size: int = 32) -> np.ndarray:
    """Eval-mode argmax predictions; clouds of unequal size are run separately."""
    preds = np.empty(len(points), dtype=np.int64)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(points):
        groups.setdefault(p.shape[0], []).append(i)
    for members in groups.values():
        for s in range(0, len(members), batch_size):
            chunk = members[s : s + batch_size]
            logits = model(np.stack([points[i] for i in chunk]), training=False)
            preds[chunk] = np.argmax(logits.data, axis=-1)
    return preds


def evaluate_classification(model: Module, dataset: Dataset, batch_size: int = 32) -> MetricsReport:
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    preds = predict_classes(model, [c.points for c in dataset.clouds], batch_size)
    num_classes = getattr(getattr(model, "cfg", None), "num_classes", None)
    return classification_report(preds, dataset.labels, num_classes)


def _min_points(model: Module) -> int:
    return getattr(getattr(model, "cfg", None), "k", 1)


def random_dropout_eval(model: Module, dataset: Dataset, keep_fraction: float, rng: np.random.Generator,
                        batch_size: int = 32) -> MetricsReport:
    """Evaluate after keeping a uniform random ``keep_fraction`` of every cloud."""
    if not 0 < keep_fraction <= 1:
        raise ParameterError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    if keep_fraction == 1:
        return evaluate_classification(model, dataset, batch_size)
    need = _min_points(model)
    kept = []
    for c in dataset.clouds:
        m = int(round(keep_fraction * c.n))
        if m < need:
            raise ParameterError(f"keeping {m} of {c.n} points leaves fewer than k={need}")
        kept.append(c.points[np.sort(rng.choice(c.n, size=m, replace=False))])
    num_classes = getattr(getattr(model, "cfg", None), "num_classes", None)
    return classification_report(predict_classes(model, kept, batch_size), dataset.labels, num_classes)


def side_drop(points, fraction: float, side: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """Keep the ``round(fraction * n)`` points farthest from the dropped side.

    Sides: top/bottom (+z/-z), right/left (+x/-x), front/back (+y/-y). The
    surviving points keep their original order. ``rng`` is accepted for
    interface symmetry with random dropout; ties break by point index.
    """
    pts = np.asarray(points)
    if side not in SIDES:
        raise ParameterError(f"unknown side {side!r}; choose from {sorted(SIDES)}")
    if not 0 < fraction <= 1:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    m = int(round(fraction * pts.shape[0]))
    if m < 1:
        raise ParameterError(f"keeping {fraction} of {pts.shape[0]} points leaves none")
    axis, sign = SIDES[side]
    order = np.argsort(sign * pts[:, axis], kind="stable")
    return pts[np.sort(order[:m])]


def side_drop_eval(model: Module, dataset: Dataset, fraction: float, side: str, batch_size: int = 32) -> MetricsReport:
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    kept = [side_drop(c.points, fraction, side) for c in dataset.clouds]
    need = _min_points(model)
    if kept[0].shape[0] < need:
        raise ParameterError(f"side drop leaves {kept[0].shape[0]} points, fewer than k={need}")
    num_classes = getattr(getattr(model, "cfg", None), "num_classes", None)
    return classification_report(predict_classes(model, kept, batch_size), dataset.labels, num_classes)


# ----------------------------------------------------------------------------
# training loops


@dataclass
class TrainConfig:
    epochs: int = 250
    batch_size: int = 32
    lr_max: float = 0.1
    lr_min: float = 0.001
    momentum: float = 0.9
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_every: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be positive")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    train_accuracy: float
    test_accuracy: float
    test_mean_class_accuracy: float

    FIELDS = ("epoch", "lr", "loss", "train_accuracy", "test_accuracy", "test_mean_class_accuracy")

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(getattr(self, f))) for f in self.FIELDS[1:]]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("shuffle", "augment", "dropout")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    chunks = [order[s : s + size] for s in range(0, len(order), size)]
    # A one-cloud batch has no batch statistics in its pooled layers.
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train_classifier(
    model: Module,
    train: Dataset,
    cfg: TrainConfig,
    seed: int,
    test: Dataset | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    on_checkpoint: Callable[[int], None] | None = None,
) -> list[EpochRecord]:
    """Mini-batch SGD over ``cfg.epochs`` epochs; returns one record per epoch."""
    if len(train) < 2:
        raise ParameterError("training needs at least two clouds")
    tune_allocator()
    streams = _streams(seed)
    state = OptimizerState(cfg.epochs, cfg.lr_max, cfg.lr_min, cfg.momentum)
    params = model.parameters()
    points = [c.points for c in train.clouds]
    labels = train.labels
    history = []
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        lr = cosine_lr(epoch, state)
        order = streams["shuffle"].permutation(len(train))
        losses, correct = [], 0
        for batch in _batches(order, cfg.batch_size):
            x = augment(np.stack([points[i] for i in batch]), streams["augment"], cfg.augment)
            y = labels[batch]
            with T.Tape() as tape:
                logits = model(x, training=True, rng=streams["dropout"])
                loss = T.softmax_cross_entropy(logits, y)
            g = T.backward(tape, loss)
            sgd_step(params, {n: g[p] for n, p in params.items()}, state, lr)
            losses.append(loss.item() * len(batch))
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
        test_oa = test_mca = float("nan")
        if test is not None and len(test) and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            rep = evaluate_classification(model, test)
            test_oa, test_mca = rep.overall_accuracy, rep.mean_class_accuracy
        rec = EpochRecord(epoch, lr, sum(losses) / len(train), correct / len(train), test_oa, test_mca)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if on_checkpoint is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            on_checkpoint(epoch + 1)
    return history


def _onehot(categories: Sequence[int | None], width: int) -> np.ndarray | None:
    if not width:
        return None
    out = np.zeros((len(categories), width))
    for r, c in enumerate(categories):
        if c is None or not 0 <= c < width:
            raise DataError(f"category {c} outside [0, {width})")
        out[r, c] = 1.0
    return out


def train_segmenter(
    model: Module,
    train: Dataset,
    cfg: TrainConfig,
    seed: int,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> list[EpochRecord]:
    """Per-point cross-entropy training; records carry point accuracy, no test metrics."""
    if len(train) < 2:
        raise ParameterError("training needs at least two clouds")
    tune_allocator()
    streams = _streams(seed)
    state = OptimizerState(cfg.epochs, cfg.lr_max, cfg.lr_min, cfg.momentum)
    params = model.parameters()
    width = model.cfg.category_vector_width
    history = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, state)
        order = streams["shuffle"].permutation(len(train))
        total, correct, seen = 0.0, 0, 0
        for batch in _batches(order, cfg.batch_size):
            clouds = [train.clouds[i] for i in batch]
            x = augment(_stack(clouds), streams["augment"], cfg.augment)
            y = np.concatenate([c.point_labels for c in clouds])
            cat = _onehot([c.category for c in clouds], width)
            with T.Tape() as tape:
                logits = model(x, cat, training=True, rng=streams["dropout"])
                flat = T.reshape(logits, (-1, logits.shape[-1]))
                loss = T.softmax_cross_entropy(flat, y)
            g = T.backward(tape, loss)
            sgd_step(params, {n: g[p] for n, p in params.items()}, state, lr)
            total += loss.item() * y.size
            seen += y.size
            correct += int((np.argmax(flat.data, axis=1) == y).sum())
        rec = EpochRecord(epoch, lr, total / seen, correct / seen, float("nan"), float("nan"))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history


def evaluate_segmentation(model: Module, dataset: Dataset, batch_size: int = 16) -> MetricsReport:
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    width = model.cfg.category_vector_width
    preds = []
    for s in range(0, len(dataset), batch_size):
        clouds = dataset.clouds[s : s + batch_size]
        logits = model(_stack(clouds), _onehot([c.category for c in clouds], width), training=False)
        preds.extend(_restrict(logits.data[i], dataset.part_sets[c.category]) for i, c in enumerate(clouds))
    return miou_shapenet(preds, [c.point_labels for c in dataset.clouds],
                         [c.category for c in dataset.clouds], dataset.part_sets)


def _restrict(logits: np.ndarray, parts: Sequence[int]) -> np.ndarray:
    """Argmax over the labels belonging to the shape's category only."""
    parts = np.asarray(parts)
    return parts[np.argmax(logits[:, parts], axis=1)]
