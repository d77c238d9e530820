"""Acceptance suite: one test per criterion, each printing a PASS line.

The image-scale criteria run a 10-class MNIST-style glyph set (1000 train
per class) written to IDX files and loaded through the real parser, with
an MLP 784-128-10 and two-phase hyperparameters in the supplemental style.
Shared grids are executed once per session through the CLI machinery.
"""

import itertools
import json
import math

import numpy as np
import pytest

from coreplay.bounds import BoundInputs, eval_label_flip_bound, eval_perturbation_bound
from coreplay.cli import run_experiment
from coreplay.coreset import (DissimilarityMatrix, cosine_crust_select,
                              facility_location_value, greedy_select,
                              pairwise_dissimilarity)
from coreplay.data import generate_glyph_images, write_idx
from coreplay.model import MlpClassifier, last_layer_gradients, loss_and_gradients


def _report(criterion, ok, detail):
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, detail


# ----------------------------------------------------------- shared fixtures

@pytest.fixture(scope="session")
def glyph_idx_paths(tmp_path_factory):
    root = tmp_path_factory.mktemp("glyphs")
    train = generate_glyph_images(10, 1000, seed=0)
    test = generate_glyph_images(10, 120, seed=1)
    paths = {
        "train_images": str(root / "train-images.idx"),
        "train_labels": str(root / "train-labels.idx"),
        "test_images": str(root / "test-images.idx"),
        "test_labels": str(root / "test-labels.idx"),
    }
    write_idx(train, paths["train_images"], paths["train_labels"], 28, 28)
    write_idx(test, paths["test_images"], paths["test_labels"], 28, 28)
    return paths


def _mlp_train(weighting, epochs_phase2=10):
    return {"learning_rate": 0.1, "batch_size": 64, "epochs_phase1": 15,
            "epochs_phase2": epochs_phase2, "class_weighting": weighting}


def _glyph_config(paths, noise_kind, levels, coreset_k):
    return {
        "name": f"acceptance-{noise_kind}",
        "dataset": {"kind": "idx", **paths},
        "noise": {"kind": noise_kind, "levels": levels},
        "strategies": [
            {"strategy": "continual_crust", "coreset_k": coreset_k,
             "hidden_dims": [128], "train": _mlp_train("weighted_loss")},
            {"strategy": "random_replay", "coreset_k": coreset_k,
             "hidden_dims": [128], "train": _mlp_train("none")},
        ],
        "seeds": [0, 1, 2],
    }


def _metric(results, strategy, level, field):
    vals = [r["metrics"][field] for r in results
            if r["manifest"]["strategy"] == strategy
            and r["manifest"]["noise_level"] == level
            and r["metrics"][field] is not None]
    return float(np.mean(vals))


@pytest.fixture(scope="session")
def label_noise_grid(glyph_idx_paths, tmp_path_factory):
    out = tmp_path_factory.mktemp("label-noise")
    config = _glyph_config(glyph_idx_paths, "label_flip", [0.0, 0.3, 0.5], 100)
    results, failures = run_experiment(config, str(out), workers=2)
    assert not failures, failures
    return results


@pytest.fixture(scope="session")
def instance_noise_grid(glyph_idx_paths, tmp_path_factory):
    out = tmp_path_factory.mktemp("instance-noise")
    config = _glyph_config(glyph_idx_paths, "instance", [0.8], 40)
    results, failures = run_experiment(config, str(out), workers=2)
    assert not failures, failures
    return results


BLOB_RAY = {"kind": "blobs", "num_classes": 4, "per_class_train": 60,
            "per_class_test": 20, "feature_dim": 1, "separation": 5.0,
            "seed": 0}
BASELINE_TRAIN = {"learning_rate": 0.01, "batch_size": 32, "optimizer": "adam",
                  "epochs_phase1": 40, "epochs_phase2": 0,
                  "class_weighting": "none"}


@pytest.fixture(scope="session")
def baseline_grid(tmp_path_factory):
    out = tmp_path_factory.mktemp("baselines")
    config = {
        "name": "acceptance-baselines",
        "dataset": BLOB_RAY,
        "noise": {"kind": "none", "levels": [0.0]},
        "strategies": [
            {"strategy": "naive", "hidden_dims": [32],
             "train": dict(BASELINE_TRAIN)},
            {"strategy": "cumulative", "hidden_dims": [32],
             "train": dict(BASELINE_TRAIN)},
        ],
        "seeds": [0, 1, 2, 3, 4],
    }
    results, failures = run_experiment(config, str(out), workers=2)
    assert not failures, failures
    return results


# ---------------------------------------------------------------- criteria

def test_criterion_1_greedy_guarantee():
    """(1-1/e) bound on 200 seeded instances plus d0-invariance of the ids."""
    bound = 1.0 - 1.0 / math.e
    worst = np.inf
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(3, 11))
        k = min(int(rng.integers(1, 4)), n)
        d = pairwise_dissimilarity(rng.normal(size=(n, 3)), "euclidean")
        sel = greedy_select(d, k)
        best = max(facility_location_value(d, s)
                   for s in itertools.combinations(range(n), k))
        ratio = sel.objective_value / best if best > 0 else 1.0
        worst = min(worst, ratio)
        assert sel.objective_value >= bound * best - 1e-9
        loose = DissimilarityMatrix(values=d.values, metric=d.metric,
                                    d0=2.0 * d.d0 + 1.0)
        assert np.array_equal(greedy_select(loose, k).ids, sel.ids)
    _report(1, worst >= bound - 1e-12,
            f"worst greedy/optimal ratio {worst:.4f} >= {bound:.4f}")


def test_criterion_2_gradient_correctness():
    """Parameter gradcheck vs central differences; gradient rows sum to 0."""
    model = MlpClassifier([2, 4, 3], seed=0)
    rng = np.random.default_rng(1)
    X = rng.normal(size=(5, 2))
    y = rng.integers(0, 3, 5)
    _, grads = loss_and_gradients(model, X, y)
    h = 1e-6
    max_rel = 0.0
    params = []
    for (dw, db), W, b in zip(grads, model.weights, model.biases):
        params.extend([(W, dw), (b, db)])
    for param, grad in params:
        it = np.nditer(param, flags=["multi_index"])
        while not it.finished:
            ix = it.multi_index
            orig = param[ix]
            param[ix] = orig + h
            lp, _ = loss_and_gradients(model, X, y)
            param[ix] = orig - h
            lm, _ = loss_and_gradients(model, X, y)
            param[ix] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(grad[ix] - fd) / max(abs(fd), abs(grad[ix]), 1e-8)
            max_rel = max(max_rel, rel)
            it.iternext()
    g = last_layer_gradients(model, X, y)
    row_sum = float(np.max(np.abs(g.values.sum(axis=1))))
    _report(2, max_rel <= 1e-4 and row_sum <= 1e-9,
            f"max rel grad error {max_rel:.2e}, max row sum {row_sum:.2e}")


def test_criterion_3_naive_lower_bound(baseline_grid):
    afa = _metric(baseline_grid, "naive", 0.0, "afa")
    forg = _metric(baseline_grid, "naive", 0.0, "forgetting")
    _report(3, abs(afa - 0.25) <= 0.08 and forg >= 0.9,
            f"naive afa {afa:.3f} (target 0.25 +- 0.08), forgetting {forg:.3f} >= 0.9")


def test_criterion_4_cumulative_upper_bound(baseline_grid):
    forg = _metric(baseline_grid, "cumulative", 0.0, "forgetting")
    _report(4, forg <= 0.05, f"cumulative forgetting {forg:.3f} <= 0.05")


def test_criterion_5_label_noise_robustness(label_noise_grid):
    crust_00 = _metric(label_noise_grid, "continual_crust", 0.0, "afa")
    replay_00 = _metric(label_noise_grid, "random_replay", 0.0, "afa")
    crust_05 = _metric(label_noise_grid, "continual_crust", 0.5, "afa")
    replay_05 = _metric(label_noise_grid, "random_replay", 0.5, "afa")
    gap = crust_05 - replay_05
    ok = crust_00 >= 0.85 and replay_00 >= 0.85 and gap >= 0.20
    _report(5, ok, f"afa@0.0 crust {crust_00:.3f} / replay {replay_00:.3f} "
                   f"(>= 0.85); afa@0.5 {crust_05:.3f} vs {replay_05:.3f}, "
                   f"gap {gap:.3f} >= 0.20")


def test_criterion_6_purity(label_noise_grid):
    crust_03 = _metric(label_noise_grid, "continual_crust", 0.3, "purity")
    replay_03 = _metric(label_noise_grid, "random_replay", 0.3, "purity")
    replay_05 = _metric(label_noise_grid, "random_replay", 0.5, "purity")
    ok = (crust_03 >= 0.80 and crust_03 - replay_03 >= 0.08
          and 0.44 <= replay_05 <= 0.56)
    _report(6, ok, f"purity@0.3 crust {crust_03:.3f} (>= 0.80) vs replay "
                   f"{replay_03:.3f} (gap >= 0.08); replay@0.5 {replay_05:.3f} "
                   f"in [0.44, 0.56]")


def test_criterion_7_cosine_outlier_rejection():
    """Constructed bundles: 20 clean-direction + 2 outlier rows, A=3, k=5."""
    outliers_picked = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        clean = np.array([1.0, 0.0, 0.0]) + rng.normal(0, 0.02, size=(20, 3))
        outlier = np.array([0.0, 0.0, 1.0]) + rng.normal(0, 0.02, size=(2, 3))
        rows = np.vstack([clean, outlier])
        sel = cosine_crust_select(rows, 5, k_clusters=3, min_size=3, seed=seed)
        outliers_picked += int(np.sum(np.asarray(sel.ids) >= 20))
        assert len(sel.ids) == 5
    _report(7, outliers_picked == 0,
            f"{outliers_picked} outliers selected across 50 seeded repetitions")


def test_criterion_8_instance_noise_forgetting(instance_noise_grid):
    crust = _metric(instance_noise_grid, "continual_crust", 0.8, "forgetting")
    replay = _metric(instance_noise_grid, "random_replay", 0.8, "forgetting")
    _report(8, crust <= replay - 0.05,
            f"forgetting crust {crust:.3f} <= replay {replay:.3f} - 0.05")


def test_criterion_9_bounds_diagnostics():
    base = BoundInputs(r_min=4.0, sigma_min=0.5, jac_norm=2.0, eps=0.1, k=10,
                       n=100, rho=0.05, delta=0.9, eta=0.01, r0_norm=3.0,
                       nu=1e-3)
    r1 = eval_label_flip_bound(base)
    r2 = eval_perturbation_bound(base)
    reduction = (r2.alpha == r1.alpha and r2.beta == r1.beta
                 and r2.eta_suggested == r1.eta_suggested)

    floors = [eval_label_flip_bound(BoundInputs(**{**base.__dict__, "rho": rho})).iteration_floor
              for rho in np.linspace(0.01, 0.4, 12)]
    rho_monotone = all(a > b for a, b in zip(floors, floors[1:]))

    monotone = True
    for evaluator in (eval_label_flip_bound, eval_perturbation_bound):
        ceil_d = [evaluator(BoundInputs(**{**base.__dict__, "delta": d})).eps_ceiling
                  for d in np.linspace(0.1, 0.9, 9)]
        ceil_k = [evaluator(BoundInputs(**{**base.__dict__, "k": k})).eps_ceiling
                  for k in [2, 4, 8, 16, 32, 64]]
        monotone &= all(b > a for a, b in zip(ceil_d, ceil_d[1:]))
        monotone &= all(b < a for a, b in zip(ceil_k, ceil_k[1:]))

    _report(9, reduction and rho_monotone and monotone,
            f"reduction exact: {reduction}; iteration floor decreasing in rho: "
            f"{rho_monotone}; eps ceiling monotone on grids: {monotone}")


def test_criterion_10_byte_identical_rerun(tmp_path):
    config = {
        "name": "determinism",
        "dataset": {"kind": "blobs", "num_classes": 3, "per_class_train": 40,
                    "per_class_test": 15, "feature_dim": 8, "separation": 6.0,
                    "seed": 3},
        "noise": {"kind": "label_flip", "levels": [0.2]},
        "strategies": [
            {"strategy": "continual_crust", "coreset_k": 12, "hidden_dims": [16],
             "train": {"learning_rate": 0.3, "batch_size": 32,
                       "epochs_phase1": 5, "epochs_phase2": 4}},
            {"strategy": "random_replay", "coreset_k": 12, "hidden_dims": [16],
             "train": {"learning_rate": 0.3, "batch_size": 32,
                       "epochs_phase1": 5, "epochs_phase2": 4,
                       "class_weighting": "none"}},
        ],
        "seeds": [0, 1],
    }
    out1, out2 = tmp_path / "first", tmp_path / "second"
    run_experiment(config, str(out1), workers=1)
    run_experiment(config, str(out2), workers=2)
    b1 = (out1 / "aggregate.csv").read_bytes()
    b2 = (out2 / "aggregate.csv").read_bytes()
    # run records must agree too, apart from wallclock
    recs = []
    for out in (out1, out2):
        acc = []
        for f in sorted((out / "runs").iterdir()):
            rec = json.loads(f.read_text())
            acc.append((f.name, rec["record"]["accuracy_matrix"],
                        rec["record"]["purity_per_experience"]))
        recs.append(acc)
    _report(10, b1 == b2 and recs[0] == recs[1],
            f"aggregate CSV identical: {b1 == b2}; run records identical "
            f"(sans wallclock): {recs[0] == recs[1]}")
