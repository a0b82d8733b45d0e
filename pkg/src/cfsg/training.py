"""Weighted cross-entropy, class weighting, Adam, plateau LR schedule and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import network as net
from .evaluation import ConfusionMatrix
from .tensor import DTYPE

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class EmptyDatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# loss


def compute_class_weights(pixel_counts) -> np.ndarray:
    """``W_c = max(1, ln(max_i P_i / P_c))`` for per-class pixel counts ``P``.

    The floor of 1 keeps the dominant class (log ratio 0) in the loss.
    """
    counts = np.asarray(pixel_counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("pixel_counts must be a non-empty vector")
    if np.any(counts <= 0):
        missing = [int(i) for i in np.flatnonzero(counts <= 0)]
        raise ValueError(f"classes {missing} have no pixels; merge or drop them before weighting")
    return np.maximum(1.0, np.log(counts.max() / counts))


def weighted_cross_entropy(probabilities: np.ndarray, labels: np.ndarray, weights) -> tuple[float, np.ndarray]:
    """Mean over all pixels of ``-W_y ln p_y`` and its gradient w.r.t. the logits.

    ``probabilities`` is the softmax output (N, C, H, W); ``labels`` is
    (N, H, W) of ints. The gradient is ``W_y (p - onehot(y)) / pixels``.
    """
    n, c, h, w = probabilities.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match {(n, h, w)}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label values must lie in [0, {c})")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (c,):
        raise ValueError(f"need {c} class weights, got {weights.shape}")
    count = n * h * w
    p_true = np.take_along_axis(probabilities, labels[:, None].astype(np.intp), axis=1)[:, 0]
    w_pix = weights[labels]
    loss = float(-(w_pix * np.log(np.maximum(p_true.astype(np.float64), 1e-12))).sum() / count)
    grad = probabilities.astype(np.float64, copy=True)
    np.put_along_axis(grad, labels[:, None].astype(np.intp),
                      np.take_along_axis(grad, labels[:, None].astype(np.intp), axis=1) - 1.0, axis=1)
    grad *= (w_pix / count)[:, None]
    return loss, grad.astype(probabilities.dtype)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> tuple[dict, AdamState]:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p -= step.astype(p.dtype, copy=False)
    return params, state


@dataclass
class PlateauSchedule:
    """Multiply the LR by ``factor`` once the loss has sat still for ``patience`` batches.

    The streak counts the batch that set the current best plus every later
    batch whose loss stays within ``tolerance`` of it, so ``patience``
    identical losses trigger exactly one drop. An improvement of more than
    ``tolerance`` starts a new streak at 1; a clearly worse loss breaks it.
    """

    current_lr: float = 0.005
    patience: int = 10
    factor: float = 0.1
    tolerance: float = 1e-4
    min_lr: float = 0.0
    stall_counter: int = 0
    best: float = math.inf

    def update(self, batch_loss: float) -> "PlateauSchedule":
        if batch_loss < self.best - self.tolerance:
            self.stall_counter = 1
        elif abs(batch_loss - self.best) <= self.tolerance:
            self.stall_counter += 1
        else:
            self.stall_counter = 0
        self.best = min(self.best, batch_loss)
        if self.stall_counter >= self.patience:
            self.current_lr = max(self.current_lr * self.factor, self.min_lr)
            self.stall_counter = 0
        return self


def plateau_update(schedule: PlateauSchedule, batch_loss: float) -> PlateauSchedule:
    return schedule.update(batch_loss)


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    hflip: bool = True
    vflip: bool = True
    rotate90: bool = True
    gamma_jitter: bool = True
    gamma_range: tuple = (0.7, 1.3)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(False, False, False, False)


def augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
            config: AugmentConfig = AugmentConfig()):
    """Random flips / quarter turns (image and mask alike) and gamma jitter (image only).

    ``image`` is (H, W, 3), ``mask`` (H, W). Every toggle draws from ``rng``
    whether or not it is enabled, so the stream stays aligned across configs.
    """
    if image.shape[:2] != mask.shape:
        raise ValueError("image and mask dims differ")
    draws = rng.random(3)
    turns = int(rng.integers(4))
    gamma = float(rng.uniform(*config.gamma_range))
    if config.hflip and draws[0] < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if config.vflip and draws[1] < 0.5:
        image, mask = image[::-1], mask[::-1]
    if config.rotate90 and turns:
        image, mask = np.rot90(image, turns), np.rot90(mask, turns)
    if config.gamma_jitter and draws[2] < 0.5:
        image = np.power(image, gamma, dtype=np.float64).astype(image.dtype)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 24
    initial_lr: float = 0.005
    max_epochs: int = 30
    seed: int = 0
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    class_weights: object = "auto"        # "auto" or explicit sequence
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    plateau_tolerance: float = 1e-4
    min_lr: float = 1e-6
    early_stopping_patience: int = 5

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float
    lr: float


def _stack(samples) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s[0] for s in samples]).transpose(0, 3, 1, 2)
    masks = np.stack([s[1] for s in samples])
    return np.ascontiguousarray(images, dtype=DTYPE), masks.astype(np.int64)


def dataset_class_counts(dataset, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for _, mask in dataset:
        counts += np.bincount(mask.ravel(), minlength=num_classes)[:num_classes]
    return counts


def evaluate_dataset(model: net.Model, dataset, weights, batch_size: int = 16):
    """Infer-mode loss and confusion matrix over ``dataset``."""
    cm = ConfusionMatrix(model.config.num_classes)
    total, pixels = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        images, masks = _stack(dataset[start:start + batch_size])
        trace = net.forward(model, images, "infer")
        loss, _ = weighted_cross_entropy(trace.probabilities, masks, weights)
        total += loss * masks.size
        pixels += masks.size
        cm.accumulate(trace.probabilities.argmax(axis=1), masks)
    return total / max(pixels, 1), cm


def train(dataset, val_dataset, config: TrainConfig, arch: net.ArchitectureConfig | None = None,
          checkpoint_path=None, on_epoch=None):
    """Train a fresh model; returns ``(best_model, history)``.

    ``dataset`` / ``val_dataset`` are sequences of ``(image HxWx3, mask HxW)``.
    The returned model is the one with the lowest validation loss; it is
    also written to ``checkpoint_path`` whenever it improves.
    """
    from .checkpoint import save_checkpoint

    if not dataset or not val_dataset:
        raise EmptyDatasetError("training and validation sets must be non-empty")
    arch = arch or net.ArchitectureConfig()
    for image, _ in list(dataset[:1]) + list(val_dataset[:1]):
        if image.shape[0] % 32 or image.shape[1] % 32:
            raise ValueError(f"tile dims {image.shape[:2]} are not divisible by 32")
    if isinstance(config.class_weights, str):
        weights = compute_class_weights(dataset_class_counts(dataset, arch.num_classes))
    else:
        weights = np.asarray(config.class_weights, dtype=np.float64)
    log.info("class weights %s", np.round(weights, 3).tolist())

    model = net.build_model(arch, config.seed)
    adam = AdamState()
    schedule = PlateauSchedule(config.initial_lr, config.plateau_patience, config.plateau_factor,
                               config.plateau_tolerance, config.min_lr)
    order_rng = np.random.default_rng([config.seed, 1])
    history: list[EpochRecord] = []
    best_loss, best_model, bad_epochs = math.inf, model.copy(), 0

    for epoch in range(1, config.max_epochs + 1):
        order = order_rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = []
            for idx in order[start:start + config.batch_size]:
                rng = np.random.default_rng([config.seed, epoch, int(idx)])
                batch.append(augment(*dataset[idx], rng, config.augmentation))
            images, masks = _stack(batch)
            trace = net.forward(model, images, "train")
            loss, grad = weighted_cross_entropy(trace.probabilities, masks, weights)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = net.backward(model, trace, grad)
            adam_step(model.params, grads, adam, schedule.current_lr)
            schedule.update(loss)
            losses.append(loss)
        val_loss, cm = evaluate_dataset(model, val_dataset, weights)
        record = EpochRecord(epoch, float(np.mean(losses)), val_loss, cm.metrics().mean_iou,
                             schedule.current_lr)
        history.append(record)
        log.info("epoch %d train %.4f val %.4f mIoU %.3f lr %.2g", epoch, record.train_loss,
                 val_loss, record.val_miou, record.lr)
        if on_epoch is not None:
            on_epoch(record, model)
        if val_loss < best_loss:
            best_loss, best_model, bad_epochs = val_loss, model.copy(), 0
            if checkpoint_path is not None:
                save_checkpoint(best_model, checkpoint_path)
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stopping_patience:
                log.info("early stop after %d epochs without improvement", bad_epochs)
                break
    return best_model, history


def write_history_csv(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "val_miou", "lr"])
        for r in history:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_miou), repr(r.lr)])
