"""Small feed-forward classifier with explicit forward/backward passes.

The classifier keeps a fixed output head sized to the total class count so
gradient features have a constant dimension across experiences. Training is
mini-batch SGD (optionally Adam) on a weighted cross-entropy loss; the
per-sample gradient of the loss w.r.t. the logits (softmax - onehot) doubles
as the feature space for coreset selection.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_TAG = b"CPM1"


class DimMismatchError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    """Training diverged; caller should reduce the learning rate."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs_phase1: int = 10
    epochs_phase2: int = 5
    weight_decay: float = 0.0
    class_weighting: str = "weighted_loss"  # weighted_loss | upsample | none
    optimizer: str = "sgd"                  # sgd | adam
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.class_weighting not in ("weighted_loss", "upsample", "none"):
            raise ValueError(f"unknown class_weighting {self.class_weighting!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def total_epochs(self):
        return self.epochs_phase1 + self.epochs_phase2


@dataclass
class GradientFeatures:
    values: np.ndarray  # (n, num_classes): softmax - onehot per sample
    ids: np.ndarray     # sample id aligned with each row


class MlpClassifier:
    """ReLU MLP; ``dims`` runs input -> hidden... -> num_output_slots."""

    def __init__(self, dims, seed):
        if len(dims) < 2:
            raise ValueError("need at least input and output dims")
        self.dims = list(int(d) for d in dims)
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-lim, lim, size=fan_out))
        self._adam = None

    @property
    def num_classes(self):
        return self.dims[-1]

    def reset_optimizer(self):
        self._adam = None

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b


def forward(model: MlpClassifier, features):
    """Logits plus the post-activation cache needed for backward."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if x.shape[1] != model.dims[0]:
        raise DimMismatchError(f"expected {model.dims[0]} features, got {x.shape[1]}")
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return h, acts


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_gradients(model, features, labels, sample_weights=None):
    """Weighted mean cross-entropy and gradients for every parameter.

    Returns (loss, [(dW, db) per layer]). Weights default to 1; the loss is
    sum(w * ce) / sum(w), so a zero-weight sample contributes exactly nothing.
    """
    logits, acts = forward(model, features)
    n = logits.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0.0:
        return 0.0, [(np.zeros_like(W), np.zeros_like(b))
                     for W, b in zip(model.weights, model.biases)]
    p = softmax(logits)
    eps = 1e-300
    ce = -np.log(p[np.arange(n), labels] + eps)
    loss = float(np.sum(w * ce) / wsum)

    delta = p.copy()
    delta[np.arange(n), labels] -= 1.0
    delta *= (w / wsum)[:, None]
    grads = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return loss, grads


def class_weights_for(labels, num_classes, mode):
    """Per-class weights for the current pool, renormalized to mean 1."""
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    if mode == "none" or mode == "upsample":
        return np.ones(num_classes)
    present = counts > 0
    w = np.zeros(num_classes)
    w[present] = 1.0 / counts[present]
    w *= present.sum() / w.sum()
    return w


def train_epoch(model, features, labels, weights_per_class, cfg: TrainConfig,
                epoch: int = 0):
    """One seed-shuffled pass of mini-batch updates; returns mean weighted loss."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(features)
    if n == 0:
        raise ValueError("train_epoch needs a nonempty sample set")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed % (2 ** 63), epoch]))

    if cfg.class_weighting == "upsample":
        features, labels = _upsample(features, labels, model.num_classes, rng)
        n = len(features)
    order = rng.permutation(n)
    sample_w = np.asarray(weights_per_class)[labels]

    total_loss = 0.0
    total_w = 0.0
    # divergence is detected via the finite checks below; IEEE overflow on
    # the way to inf/nan is expected there, not worth a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            bw = sample_w[idx]
            loss, grads = loss_and_gradients(model, features[idx], labels[idx], bw)
            if not np.isfinite(loss):
                raise NonFiniteLossError(f"loss diverged at epoch {epoch}")
            _apply_update(model, grads, cfg)
            total_loss += loss * bw.sum()
            total_w += bw.sum()
    return total_loss / total_w if total_w > 0 else 0.0


def _upsample(features, labels, num_classes, rng):
    counts = np.bincount(labels, minlength=num_classes)
    target = counts.max()
    extra = []
    for c in np.where((counts > 0) & (counts < target))[0]:
        pool = np.where(labels == c)[0]
        extra.append(rng.choice(pool, size=target - counts[c], replace=True))
    if not extra:
        return features, labels
    idx = np.concatenate([np.arange(len(labels))] + extra)
    return features[idx], labels[idx]


def _apply_update(model, grads, cfg):
    if cfg.optimizer == "adam":
        if model._adam is None:
            model._adam = {"t": 0,
                           "m": [np.zeros_like(p) for p in model.parameters()],
                           "v": [np.zeros_like(p) for p in model.parameters()]}
        st = model._adam
        st["t"] += 1
        t = st["t"]
    flat = []
    for (dw, db), w, b in zip(grads, model.weights, model.biases):
        flat.append((w, dw))
        flat.append((b, db))
    for j, (p, g) in enumerate(flat):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        if cfg.optimizer == "sgd":
            p -= cfg.learning_rate * g
        else:
            st["m"][j] = cfg.adam_beta1 * st["m"][j] + (1 - cfg.adam_beta1) * g
            st["v"][j] = cfg.adam_beta2 * st["v"][j] + (1 - cfg.adam_beta2) * g * g
            mhat = st["m"][j] / (1 - cfg.adam_beta1 ** t)
            vhat = st["v"][j] / (1 - cfg.adam_beta2 ** t)
            p -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        if not np.all(np.isfinite(p)):
            raise NonFiniteLossError("parameters became non-finite after update")


def last_layer_gradients(model, features, labels, ids=None) -> GradientFeatures:
    """Per-sample loss gradient w.r.t. the logits: softmax - onehot.

    Pure read; never mutates the model. Rows sum to zero by construction.
    """
    logits, _ = forward(model, features)
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != logits.shape[0]:
        raise DimMismatchError("labels length does not match features")
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    if ids is None:
        ids = np.arange(len(labels))
    return GradientFeatures(values=p, ids=np.asarray(ids, dtype=np.int64))


def last_layer_weight_gradients(model, features, labels, ids=None) -> GradientFeatures:
    """Optional feature mode: (softmax - onehot) outer penultimate activations."""
    logits, acts = forward(model, features)
    labels = np.asarray(labels, dtype=np.int64)
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    h = acts[-2]
    outer = (p[:, :, None] * h[:, None, :]).reshape(len(labels), -1)
    if ids is None:
        ids = np.arange(len(labels))
    return GradientFeatures(values=outer, ids=np.asarray(ids, dtype=np.int64))


def evaluate(model, features, clean_labels, num_classes=None):
    """Argmax accuracy per class (NaN where the class is absent) and overall.

    Argmax breaks ties toward the lowest class index.
    """
    labels = np.asarray(clean_labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("evaluate needs a nonempty test set")
    if num_classes is None:
        num_classes = model.num_classes
    logits, _ = forward(model, features)
    pred = np.argmax(logits, axis=1)
    per_class = np.full(num_classes, np.nan)
    for c in range(num_classes):
        mask = labels == c
        if mask.any():
            per_class[c] = float(np.mean(pred[mask] == c))
    overall = float(np.mean(pred == labels))
    return per_class, overall


def save_checkpoint(model: MlpClassifier, path):
    """Versioned binary: tag, layer dims, then parameters in declaration order."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_TAG)
        f.write(struct.pack("<q", len(model.dims)))
        f.write(np.asarray(model.dims, dtype="<i8").tobytes())
        for p in model.parameters():
            f.write(np.asarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpClassifier:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_TAG:
            raise ValueError(f"{path}: not a model checkpoint")
        (ndims,) = struct.unpack("<q", f.read(8))
        dims = np.frombuffer(f.read(8 * ndims), dtype="<i8").tolist()
        model = MlpClassifier(dims, seed=0)
        for p in model.parameters():
            raw = f.read(8 * p.size)
            if len(raw) < 8 * p.size:
                raise ValueError(f"{path}: truncated checkpoint")
            p[...] = np.frombuffer(raw, dtype="<f8").reshape(p.shape)
    return model
