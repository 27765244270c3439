"""Class-weighted cross-entropy, Adadelta and the training loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import models
from .data import GLAUCOMA, AugmentConfig, Dataset, augment, model_input
from .errors import ConfigurationError, DimensionError, ParameterError
from .layers import LayerParams
from .tensor import DTYPE, seeded_rng

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassWeights:
    glaucoma: float = 1.0
    normal: float = 1.0

    def __post_init__(self):
        if not (self.glaucoma > 0 and self.normal > 0):
            raise ParameterError(f"class weights must be positive, got {self}")

    def as_array(self) -> np.ndarray:
        # Indexed by class id: GLAUCOMA = 0, NORMAL = 1.
        return np.array([self.glaucoma, self.normal], dtype=np.float64)


def compute_class_weights(n_glaucoma: int, n_normal: int) -> ClassWeights:
    """Balanced inverse-frequency weights N / (2 * n_c)."""
    if n_glaucoma < 1 or n_normal < 1:
        raise ParameterError(f"both class counts must be >= 1, got ({n_glaucoma}, {n_normal})")
    total = n_glaucoma + n_normal
    return ClassWeights(total / (2 * n_glaucoma), total / (2 * n_normal))


def weighted_cross_entropy(p: np.ndarray, label, weights: ClassWeights):
    """Weighted negative log-likelihood of softmax outputs.

    Works on one probability vector with an int label, or on an N x 2 batch
    with an array of labels (then the loss is returned per sample). The
    probability of the true class is floored at 1e-12 before the log. The
    gradient is taken w.r.t. the pre-softmax logits: w_y * (p - onehot(y)).
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pb = p[None] if single else p
    y = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if pb.shape[0] != y.shape[0]:
        raise DimensionError(f"{pb.shape[0]} probability rows for {y.shape[0]} labels")
    w = weights.as_array()[y]
    picked = pb[np.arange(len(y)), y]
    loss = -w * np.log(np.maximum(picked, PROB_FLOOR))
    onehot = np.zeros_like(pb)
    onehot[np.arange(len(y)), y] = 1.0
    d_logits = w[:, None] * (pb - onehot)
    if single:
        return float(loss[0]), d_logits[0]
    return loss, d_logits


@dataclass
class Adadelta:
    """Adadelta with a step-size multiplier.

    Per element::

        Eg2  <- rho * Eg2 + (1 - rho) * g^2
        raw   = -sqrt(Edx2 + eps) / sqrt(Eg2 + eps) * g
        param += lr * raw
        Edx2 <- rho * Edx2 + (1 - rho) * raw^2

    Accumulators track the un-multiplied step, so ``lr`` only rescales what
    is applied.
    """

    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-7
    eg2: dict = field(default_factory=dict)
    edx2: dict = field(default_factory=dict)

    def _slot(self, key, like):
        if key not in self.eg2:
            self.eg2[key] = np.zeros_like(like, dtype=DTYPE)
            self.edx2[key] = np.zeros_like(like, dtype=DTYPE)
        return self.eg2[key], self.edx2[key]

    def update(self, key, param: np.ndarray, grad: np.ndarray) -> None:
        if param.shape != grad.shape:
            raise DimensionError(f"{key}: gradient shape {grad.shape} != parameter shape {param.shape}")
        rho, eps = DTYPE(self.rho), DTYPE(self.eps)
        g = grad.astype(DTYPE, copy=False)
        eg2, edx2 = self._slot(key, param)
        eg2 *= rho
        eg2 += (1 - rho) * g * g
        raw = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
        edx2 *= rho
        edx2 += (1 - rho) * raw * raw
        param += DTYPE(self.lr) * raw

    def step(self, state: models.ModelState, grads: dict) -> models.ModelState:
        """Apply one update to every trainable layer that has a gradient.
        Frozen layers are never touched."""
        for name in sorted(grads):
            if not state.trainable.get(name, False):
                continue
            p: LayerParams = state.params[name]
            gr = grads[name]
            self.update((name, "kernel"), p.kernel, gr.d_kernel)
            self.update((name, "bias"), p.bias, gr.d_bias)
        return state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 16
    lr: float = 0.05
    class_weights: ClassWeights | None = None  # None -> derived from the training counts
    augment: AugmentConfig | None = None
    seed: int = 0
    rho: float = 0.95
    eps: float = 1e-7

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ParameterError(f"lr must be >= 0, got {self.lr}")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    accuracy: float


def fit(
    state: models.ModelState,
    train: Dataset,
    config: TrainConfig,
    callback=None,
) -> tuple[models.ModelState, list[EpochRecord]]:
    """Train ``state`` in place for ``config.epochs`` epochs.

    Each epoch shuffles the samples with a generator keyed by
    (seed, epoch); augmentation draws from (seed, epoch, sample position).
    One Adadelta step is taken per mini-batch on the batch-mean weighted
    loss. ``callback(record, state)`` runs after every epoch.
    """
    if len(train) == 0:
        raise ConfigurationError("training set is empty")
    n_g, n_n = train.class_counts()
    if n_g == 0 or n_n == 0:
        raise ConfigurationError("training set must contain both classes")
    weights = config.class_weights or compute_class_weights(n_g, n_n)
    opt = Adadelta(lr=config.lr, rho=config.rho, eps=config.eps)
    shape = state.spec.input_shape
    samples = list(train.samples)
    labels = train.labels
    aug = config.augment if config.augment is not None and config.augment.factor > 0 else None
    base_inputs = None if aug else np.stack([model_input(s.image, shape) for s in samples])
    dropout_rng = seeded_rng(config.seed, 1)
    trace: list[EpochRecord] = []
    for epoch in range(1, config.epochs + 1):
        order = seeded_rng(config.seed, 0, epoch).permutation(len(samples))
        losses, correct = [], 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            if aug is None:
                xb = base_inputs[idx]
            else:
                xb = np.stack([
                    model_input(augment(samples[i], aug, seeded_rng(config.seed, 2, epoch, int(i))).image, shape)
                    for i in idx
                ])
            yb = labels[idx]
            probs, cache = models.forward(state, xb, training=True, rng=dropout_rng)
            loss, d_logits = weighted_cross_entropy(probs, yb, weights)
            grads = models.backward(state, cache, d_logits / len(idx))
            opt.step(state, grads)
            losses.append(loss)
            correct += int((probs.argmax(axis=1) == yb).sum())
        all_losses = np.concatenate(losses)
        rec = EpochRecord(epoch, float(all_losses.mean()), correct / len(samples))
        trace.append(rec)
        log.info("epoch %d loss %.5f acc %.4f", rec.epoch, rec.loss, rec.accuracy)
        if callback is not None:
            callback(rec, state)
    return state, trace


def predict_dataset(state: models.ModelState, d: Dataset, batch_size: int = 16) -> np.ndarray:
    """Glaucoma probability for every sample of ``d`` in dataset order."""
    shape = state.spec.input_shape
    out = []
    for s in range(0, len(d), batch_size):
        chunk = d.samples[s:s + batch_size]
        x = np.stack([model_input(c.image, shape) for c in chunk])
        p, _ = models.forward(state, x, training=False)
        out.append(p[:, GLAUCOMA])
    return np.concatenate(out) if out else np.zeros(0)

