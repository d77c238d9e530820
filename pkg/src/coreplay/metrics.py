"""Accuracy-matrix bookkeeping and the three evaluation metrics.

R[i, j] is the test accuracy on class j after experience i (NaN where a
class has no test data). Forgetting treats each class as a column whose
reference row is the experience that taught it, which covers the paper
curriculum's two-class first experience.
"""

from dataclasses import dataclass, field

import numpy as np


class IncompleteRowError(ValueError):
    pass


class TooFewExperiencesError(ValueError):
    pass


class EmptyStoreError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    values: np.ndarray     # (T, C), NaN = absent
    taught_at: np.ndarray  # (C,) experience index that taught each class, -1 if never

    def __post_init__(self):
        finite = self.values[np.isfinite(self.values)]
        if finite.size and (finite.min() < 0.0 or finite.max() > 1.0):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def num_experiences(self):
        return self.values.shape[0]

    @property
    def num_classes(self):
        return self.values.shape[1]


@dataclass
class PurityRecord:
    clean_counts: dict = field(default_factory=dict)  # class -> clean selected
    total_counts: dict = field(default_factory=dict)  # class -> selected

    @property
    def mean_purity(self):
        fracs = [self.clean_counts[c] / self.total_counts[c]
                 for c in self.total_counts if self.total_counts[c] > 0]
        return float(np.mean(fracs)) if fracs else float("nan")


def average_final_accuracy(m: AccuracyMatrix) -> float:
    """Mean final-row accuracy over all taught classes."""
    taught = np.where(m.taught_at >= 0)[0]
    if taught.size == 0:
        raise IncompleteRowError("no class was ever taught")
    final = m.values[-1, taught]
    if np.any(~np.isfinite(final)):
        raise IncompleteRowError("final row is missing a taught class")
    return float(np.mean(final))


def forgetting(m: AccuracyMatrix) -> float:
    """Mean drop R[taught(j), j] - R[i, j] over later experiences i.

    Negative values indicate backward transfer.
    """
    if m.num_experiences < 2:
        raise TooFewExperiencesError("forgetting needs at least 2 experiences")
    drops = []
    for j in range(m.num_classes):
        tj = int(m.taught_at[j])
        if tj < 0:
            continue
        ref = m.values[tj, j]
        for i in range(tj + 1, m.num_experiences):
            if np.isfinite(ref) and np.isfinite(m.values[i, j]):
                drops.append(ref - m.values[i, j])
    if not drops:
        raise TooFewExperiencesError("no taught-class/later-experience pairs")
    return float(np.mean(drops))


def purity(store, dataset) -> float:
    """Fraction of clean samples per class coreset, averaged over classes.

    A sample counts as clean when its observed label matches the ground
    truth and it carries no instance perturbation. ``store`` maps class id
    to selected sample indices.
    """
    record = purity_record(store, dataset)
    if not record.total_counts:
        raise EmptyStoreError("purity needs a nonempty coreset store")
    return record.mean_purity


def purity_record(store, dataset) -> PurityRecord:
    rec = PurityRecord()
    for cls, ids in store.items():
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            continue
        clean = ((dataset.labels[ids] == dataset.clean_labels[ids])
                 & ~dataset.perturbed[ids])
        rec.clean_counts[int(cls)] = int(clean.sum())
        rec.total_counts[int(cls)] = int(ids.size)
    return rec
