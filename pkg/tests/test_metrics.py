import numpy as np
import pytest

from coreplay.data import NoiseSpec, flip_labels, generate_gaussian_blobs, perturb_instances
from coreplay.metrics import (
    AccuracyMatrix,
    EmptyStoreError,
    IncompleteRowError,
    TooFewExperiencesError,
    average_final_accuracy,
    forgetting,
    purity,
    purity_record,
)


def matrix(values, taught_at):
    return AccuracyMatrix(values=np.array(values, dtype=float),
                          taught_at=np.array(taught_at, dtype=np.int64))


def test_afa_constant_final_row():
    m = matrix([[0.9, 0.9], [0.9, 0.9]], [0, 1])
    assert average_final_accuracy(m) == pytest.approx(0.9)


def test_afa_mixed_final_row():
    m = matrix([[1.0, np.nan], [1.0, 0.0]], [0, 1])
    assert average_final_accuracy(m) == pytest.approx(0.5)


def test_afa_ignores_untaught_classes():
    m = matrix([[1.0, 0.2], [1.0, 0.4]], [0, -1])
    assert average_final_accuracy(m) == pytest.approx(1.0)


def test_afa_incomplete_final_row_raises():
    m = matrix([[1.0, 1.0], [np.nan, 1.0]], [0, 1])
    with pytest.raises(IncompleteRowError):
        average_final_accuracy(m)


def test_afa_invariant_to_class_permutation():
    vals = np.array([[0.8, 0.6, 0.4], [0.7, 0.5, 0.9]])
    taught = np.array([0, 0, 1])
    perm = [2, 0, 1]
    m1 = matrix(vals, taught)
    m2 = matrix(vals[:, perm], taught[perm])
    assert average_final_accuracy(m1) == pytest.approx(average_final_accuracy(m2))


def test_forgetting_total_wipeout_is_one():
    m = matrix([[1.0, np.nan, np.nan],
                [0.0, 1.0, np.nan],
                [0.0, 0.0, 1.0]], [0, 1, 2])
    assert forgetting(m) == pytest.approx(1.0)


def test_forgetting_constant_matrix_is_zero():
    m = matrix([[0.7, 0.7], [0.7, 0.7]], [0, 1])
    assert forgetting(m) == pytest.approx(0.0)


def test_forgetting_hand_enumerated_3x3():
    vals = [[0.9, 0.1, 0.0],
            [0.6, 0.8, 0.1],
            [0.5, 0.7, 0.9]]
    m = matrix(vals, [0, 1, 2])
    # pairs: class0 vs rows 1,2; class1 vs row 2
    expected = ((0.9 - 0.6) + (0.9 - 0.5) + (0.8 - 0.7)) / 3.0
    assert forgetting(m) == pytest.approx(expected)


def test_forgetting_two_class_first_experience_reference():
    # classes 0 and 1 both taught at experience 0
    vals = [[1.0, 0.8, np.nan],
            [0.9, 0.6, 1.0]]
    m = matrix(vals, [0, 0, 1])
    expected = ((1.0 - 0.9) + (0.8 - 0.6)) / 2.0
    assert forgetting(m) == pytest.approx(expected)


def test_forgetting_negative_means_backward_transfer():
    m = matrix([[0.5, np.nan], [0.8, 1.0]], [0, 1])
    assert forgetting(m) == pytest.approx(-0.3)


def test_forgetting_nondecreasing_columns_nonpositive():
    rng = np.random.default_rng(0)
    base = rng.uniform(0.2, 0.6, size=3)
    vals = np.vstack([base, base + 0.1, base + 0.2])
    m = matrix(vals, [0, 1, 2])
    assert forgetting(m) <= 0.0


def test_forgetting_needs_two_experiences():
    with pytest.raises(TooFewExperiencesError):
        forgetting(matrix([[1.0]], [0]))


def test_matrix_rejects_out_of_range():
    with pytest.raises(ValueError):
        matrix([[1.5]], [0])


def test_purity_all_clean():
    ds = generate_gaussian_blobs(3, 10, 2, 5.0, seed=0)
    store = {0: np.arange(5), 1: np.arange(10, 15)}
    assert purity(store, ds) == 1.0


def test_purity_hand_arithmetic():
    ds = generate_gaussian_blobs(2, 4, 2, 5.0, seed=1)
    labels = ds.labels.copy()
    labels[0] = 1  # corrupt one sample of class 0
    labels[4] = 0
    labels[5] = 0  # corrupt two of class 1
    from coreplay.data import Dataset
    noisy = Dataset(features=ds.features, labels=labels,
                    clean_labels=ds.clean_labels, perturbed=ds.perturbed,
                    num_classes=2)
    store = {0: [0, 1, 2, 3], 1: [4, 5, 6, 7]}
    assert purity(store, noisy) == pytest.approx((0.75 + 0.5) / 2.0)


def test_purity_counts_perturbed_as_unclean():
    ds = generate_gaussian_blobs(2, 10, 2, 0.5, seed=2)
    # scale features into [0,1] so instance perturbation accepts them
    from coreplay.data import Dataset
    feats = (ds.features - ds.features.min()) / np.ptp(ds.features)
    ds = Dataset(features=feats, labels=ds.labels, clean_labels=ds.clean_labels,
                 perturbed=ds.perturbed, num_classes=2)
    noisy = perturb_instances(ds, NoiseSpec(instance_noise_fraction=0.5,
                                            rng_seed=3))
    store = {0: np.arange(10), 1: np.arange(10, 20)}
    rec = purity_record(store, noisy)
    expected = {c: int(np.sum(~noisy.perturbed[np.array(store[c])]))
                for c in store}
    assert rec.clean_counts == expected
    assert 0.0 <= purity(store, noisy) <= 1.0


def test_purity_is_one_under_zero_noise_spec():
    ds = generate_gaussian_blobs(3, 6, 2, 5.0, seed=4)
    clean = flip_labels(ds, 0.0, 3, seed=5)
    store = {c: np.where(clean.clean_labels == c)[0][:3] for c in range(3)}
    assert purity(store, clean) == 1.0


def test_purity_empty_store_raises():
    ds = generate_gaussian_blobs(2, 4, 2, 5.0, seed=6)
    with pytest.raises(EmptyStoreError):
        purity({}, ds)
