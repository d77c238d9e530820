"""Datasets, noise injection, and class-incremental experience streams.

Datasets are stored column-wise (one features matrix plus label arrays) with
``LabeledSample`` as the per-item view. Observed labels may be corrupted by
``flip_labels``; ``clean_label`` always keeps the ground truth and is never
shown to learners.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
CACHE_TAG = b"CPD1"


class BadConfigError(ValueError):
    pass


class BadMagicError(ValueError):
    pass


class TruncatedFileError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class TooFewClassesError(ValueError):
    pass


@dataclass
class LabeledSample:
    id: int
    features: np.ndarray
    label: int          # observed, possibly corrupted
    clean_label: int    # ground truth, hidden from learners
    perturbed: bool = False


@dataclass
class Dataset:
    features: np.ndarray      # (n, feature_dim) float64
    labels: np.ndarray        # (n,) observed
    clean_labels: np.ndarray  # (n,) ground truth
    perturbed: np.ndarray     # (n,) bool
    num_classes: int

    def __post_init__(self):
        n = len(self.features)
        if not (len(self.labels) == len(self.clean_labels) == len(self.perturbed) == n):
            raise DimensionMismatchError("dataset arrays disagree in length")
        if not np.all(np.isfinite(self.features)):
            raise BadConfigError("features contain non-finite values")
        for arr in (self.labels, self.clean_labels):
            if n and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise BadConfigError("labels out of range for num_classes")

    def __len__(self):
        return len(self.features)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(id=i, features=self.features[i],
                             label=int(self.labels[i]),
                             clean_label=int(self.clean_labels[i]),
                             perturbed=bool(self.perturbed[i]))

    @classmethod
    def from_clean(cls, features, labels, num_classes):
        labels = np.asarray(labels, dtype=np.int64)
        return cls(features=np.asarray(features, dtype=np.float64),
                   labels=labels.copy(), clean_labels=labels.copy(),
                   perturbed=np.zeros(len(labels), dtype=bool),
                   num_classes=num_classes)


@dataclass
class NoiseSpec:
    label_flip_prob: float = 0.0
    instance_noise_fraction: float = 0.0
    pixel_corrupt_prob: float = 0.9
    blend: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("label_flip_prob", "instance_noise_fraction",
                     "pixel_corrupt_prob", "blend"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise BadConfigError(f"{name}={v} outside [0, 1]")


@dataclass
class Experience:
    new_class_ids: tuple
    train_indices: np.ndarray
    test_indices: np.ndarray


@dataclass
class ExperienceStream:
    experiences: list
    class_order: np.ndarray

    def __len__(self):
        return len(self.experiences)


def generate_gaussian_blobs(num_classes, per_class, feature_dim, separation,
                            seed) -> Dataset:
    """Isotropic unit-noise Gaussian blobs, one per class.

    Class c is centered at ``separation`` along axis c; when classes exceed
    the dimension, axes cycle with a growing multiplier so centers stay
    distinct.
    """
    if num_classes < 2 or per_class < 1 or feature_dim < 1:
        raise BadConfigError("num_classes >= 2, per_class >= 1, feature_dim >= 1 required")
    if separation <= 0:
        raise BadConfigError("separation must be positive")
    rng = np.random.default_rng(seed)
    feats = np.empty((num_classes * per_class, feature_dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        center = np.zeros(feature_dim)
        center[c % feature_dim] = separation * (1 + c // feature_dim)
        block = slice(c * per_class, (c + 1) * per_class)
        feats[block] = center + rng.normal(size=(per_class, feature_dim))
        labels[block] = c
    return Dataset.from_clean(feats, labels, num_classes)


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label file pair (big-endian, MNIST layout).

    Pixels are scaled to [0, 1] by /255 and flattened row-major.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = _read_be32(f, 4, images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagicError(f"{images_path}: image magic {magic} != {IDX_IMAGE_MAGIC}")
        raw = f.read(count * rows * cols)
        if len(raw) < count * rows * cols:
            raise TruncatedFileError(f"{images_path}: expected {count * rows * cols} pixels")
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with open(labels_path, "rb") as f:
        magic, n_labels = _read_be32(f, 2, labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise BadMagicError(f"{labels_path}: label magic {magic} != {IDX_LABEL_MAGIC}")
        raw = f.read(n_labels)
        if len(raw) < n_labels:
            raise TruncatedFileError(f"{labels_path}: expected {n_labels} labels")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if count != n_labels:
        raise DimensionMismatchError(f"{count} images but {n_labels} labels")
    num_classes = int(labels.max()) + 1 if n_labels else 0
    return Dataset.from_clean(pixels.astype(np.float64) / 255.0, labels, num_classes)


def write_idx(dataset: Dataset, images_path, labels_path, rows, cols):
    """Write a dataset with pixel features back out as an IDX pair."""
    if rows * cols != dataset.feature_dim:
        raise DimensionMismatchError("rows*cols must equal feature_dim")
    pixels = np.clip(np.rint(dataset.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, len(dataset), rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, len(dataset)))
        f.write(dataset.clean_labels.astype(np.uint8).tobytes())


def _read_be32(f, n, path):
    raw = f.read(4 * n)
    if len(raw) < 4 * n:
        raise TruncatedFileError(f"{path}: truncated header")
    return struct.unpack(f">{n}i", raw)


def flip_labels(ds: Dataset, prob, num_classes, seed, target_classes=None) -> Dataset:
    """Flip each observed label with probability ``prob`` to a uniformly
    chosen different class. Clean labels are untouched.

    ``target_classes`` restricts the replacement labels (e.g. to classes
    already seen in a curriculum); by default any other dataset class can
    be drawn.
    """
    if not 0.0 <= prob <= 1.0:
        raise BadConfigError(f"flip prob {prob} outside [0, 1]")
    rng = np.random.default_rng(seed)
    labels = ds.labels.copy()
    mask = rng.random(len(ds)) < prob
    if mask.any() and target_classes is None:
        draws = rng.integers(0, num_classes - 1, size=int(mask.sum()))
        current = labels[mask]
        labels[mask] = draws + (draws >= current)
    elif mask.any():
        pool = np.asarray(sorted(target_classes), dtype=np.int64)
        if pool.size == 0 or pool.min() < 0 or pool.max() >= num_classes:
            raise BadConfigError("target_classes must be valid class ids")
        for i in np.where(mask)[0]:
            options = pool[pool != labels[i]]
            if options.size:
                labels[i] = rng.choice(options)
    return Dataset(features=ds.features, labels=labels,
                   clean_labels=ds.clean_labels, perturbed=ds.perturbed,
                   num_classes=ds.num_classes)


def perturb_instances(ds: Dataset, spec: NoiseSpec) -> Dataset:
    """Blend salt-and-pepper masks into a fixed-size uniform subset of samples.

    Exactly floor(instance_noise_fraction * n) samples are perturbed:
    each of their pixels is independently replaced (with probability
    ``pixel_corrupt_prob``) by 0 or 1, then blended as
    x' = (1-blend)*x + blend*mask and clipped to [0, 1].
    """
    if len(ds) and (ds.features.min() < 0.0 or ds.features.max() > 1.0):
        raise BadConfigError("perturb_instances expects features in [0, 1]")
    rng = np.random.default_rng(spec.rng_seed)
    count = int(np.floor(spec.instance_noise_fraction * len(ds)))
    features = ds.features.copy()
    perturbed = ds.perturbed.copy()
    if count:
        chosen = rng.choice(len(ds), size=count, replace=False)
        block = features[chosen]
        corrupt = rng.random(block.shape) < spec.pixel_corrupt_prob
        salt = rng.integers(0, 2, size=block.shape).astype(np.float64)
        mask = np.where(corrupt, salt, block)
        block = (1.0 - spec.blend) * block + spec.blend * mask
        features[chosen] = np.clip(block, 0.0, 1.0)
        perturbed[chosen] = True
    return Dataset(features=features, labels=ds.labels,
                   clean_labels=ds.clean_labels, perturbed=perturbed,
                   num_classes=ds.num_classes)


def build_stream(ds_train: Dataset, ds_test: Dataset, seed,
                 first_classes=2, later_classes=1) -> ExperienceStream:
    """Shuffle the class order and partition it into experiences.

    The first experience introduces ``first_classes`` classes and each later
    one ``later_classes``. Train/test membership is grouped by clean label,
    so a flipped sample can carry an observed label from a past or future
    experience.
    """
    if ds_train.num_classes != ds_test.num_classes:
        raise DimensionMismatchError("train/test num_classes disagree")
    if ds_train.feature_dim != ds_test.feature_dim:
        raise DimensionMismatchError("train/test feature_dim disagree")
    if ds_train.num_classes < 2:
        raise TooFewClassesError("need at least 2 classes")
    rng = np.random.default_rng(seed)
    order = rng.permutation(ds_train.num_classes)
    groups = [tuple(order[:first_classes])]
    pos = first_classes
    while pos < len(order):
        groups.append(tuple(order[pos:pos + later_classes]))
        pos += later_classes
    experiences = []
    for cls_ids in groups:
        tr = np.where(np.isin(ds_train.clean_labels, cls_ids))[0]
        te = np.where(np.isin(ds_test.clean_labels, cls_ids))[0]
        experiences.append(Experience(new_class_ids=tuple(int(c) for c in cls_ids),
                                      train_indices=tr, test_indices=te))
    return ExperienceStream(experiences=experiences, class_order=order)


def save_cache(ds: Dataset, path):
    """Binary dataset cache: 4-byte tag, LE-64 header, per-sample records."""
    rec = _record_dtype(ds.feature_dim)
    records = np.empty(len(ds), dtype=rec)
    records["label"] = ds.labels
    records["clean"] = ds.clean_labels
    records["pert"] = ds.perturbed
    records["feat"] = ds.features
    with open(path, "wb") as f:
        f.write(CACHE_TAG)
        f.write(struct.pack("<qqq", ds.num_classes, ds.feature_dim, len(ds)))
        f.write(records.tobytes())


def load_cache(path) -> Dataset:
    with open(path, "rb") as f:
        tag = f.read(4)
        if tag != CACHE_TAG:
            raise BadMagicError(f"{path}: cache tag {tag!r} != {CACHE_TAG!r}")
        header = f.read(24)
        if len(header) < 24:
            raise TruncatedFileError(f"{path}: truncated cache header")
        num_classes, feature_dim, n = struct.unpack("<qqq", header)
        rec = _record_dtype(feature_dim)
        raw = f.read(n * rec.itemsize)
        if len(raw) < n * rec.itemsize:
            raise TruncatedFileError(f"{path}: truncated cache body")
        records = np.frombuffer(raw, dtype=rec)
    return Dataset(features=records["feat"].astype(np.float64),
                   labels=records["label"].astype(np.int64),
                   clean_labels=records["clean"].astype(np.int64),
                   perturbed=records["pert"].astype(bool),
                   num_classes=int(num_classes))


def _record_dtype(feature_dim):
    return np.dtype([("label", "<i8"), ("clean", "<i8"), ("pert", "u1"),
                     ("feat", "<f8", (feature_dim,))])


# ---------------------------------------------------------------------------
# MNIST-style synthetic glyphs: a desk-scale stand-in for image benchmarks.
# Ten geometric stroke patterns rendered at 28x28 with random affine jitter,
# per-sample intensity, and additive pixel noise.

GLYPH_SIZE = 28


def generate_glyph_images(num_classes, per_class, seed, size=GLYPH_SIZE,
                          jitter=3.0, pixel_noise=0.12) -> Dataset:
    """Procedural 10-class glyph images (ring, bars, diagonals, cross, ...).

    Learnable to high accuracy by a small MLP yet varied enough that a
    memorized wrong label costs real test accuracy.
    """
    if not 2 <= num_classes <= 10:
        raise BadConfigError("glyph generator supports 2..10 classes")
    if per_class < 1:
        raise BadConfigError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    half = (size - 1) / 2.0
    ax = np.arange(size) - half
    gx, gy = np.meshgrid(ax, ax, indexing="xy")
    n = num_classes * per_class
    feats = np.empty((n, size * size))
    labels = np.repeat(np.arange(num_classes), per_class).astype(np.int64)
    for i in range(n):
        c = labels[i]
        dx, dy = rng.uniform(-jitter, jitter, size=2)
        scale = rng.uniform(0.85, 1.35)
        angle = rng.uniform(-0.3, 0.3)
        ca, sa = np.cos(angle), np.sin(angle)
        # map image coords back into the glyph's canonical frame
        x = ((gx - dx) * ca + (gy - dy) * sa) / scale
        y = (-(gx - dx) * sa + (gy - dy) * ca) / scale
        img = _glyph_mask(c, x, y, half)
        img = img * rng.uniform(0.65, 1.0)
        img = img + rng.normal(scale=pixel_noise, size=img.shape)
        feats[i] = np.clip(img, 0.0, 1.0).ravel()
    return Dataset.from_clean(feats, labels, num_classes)


def _glyph_mask(c, x, y, half):
    r = np.sqrt(x * x + y * y)
    w = 2.2
    big = half * 0.62
    if c == 0:    # ring
        return _soft(np.abs(r - big * 0.9) < w)
    if c == 1:    # vertical bar
        return _soft((np.abs(x) < w) & (np.abs(y) < big * 1.2))
    if c == 2:    # horizontal bar
        return _soft((np.abs(y) < w) & (np.abs(x) < big * 1.2))
    if c == 3:    # main diagonal
        return _soft((np.abs(x - y) < w * 1.4) & (r < big * 1.5))
    if c == 4:    # anti-diagonal
        return _soft((np.abs(x + y) < w * 1.4) & (r < big * 1.5))
    if c == 5:    # filled square
        return _soft(np.maximum(np.abs(x), np.abs(y)) < big * 0.62)
    if c == 6:    # plus
        return _soft(((np.abs(x) < w) | (np.abs(y) < w)) & (r < big * 1.2))
    if c == 7:    # X
        return _soft(((np.abs(x - y) < w * 1.4) | (np.abs(x + y) < w * 1.4))
                     & (r < big * 1.2))
    if c == 8:    # two horizontal bars
        return _soft(((np.abs(y - big * 0.55) < w) | (np.abs(y + big * 0.55) < w))
                     & (np.abs(x) < big))
    # c == 9: filled disc
    return _soft(r < big * 0.62)


def _soft(mask):
    return mask.astype(np.float64)
