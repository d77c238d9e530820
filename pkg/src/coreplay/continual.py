"""Two-phase class-incremental training loop and the strategy zoo.

Strategies: ``naive`` (new data only), ``cumulative`` (all raw data so far),
``joint`` (one offline run over everything), ``random_replay`` (uniform
buffers picked at experience end), ``continual_crust`` and
``continual_cosine_crust`` (coreset buffers re-selected from last-layer
gradients at the start of every refinement epoch).

Phase 1 trains on the full new-class data plus all stored coresets; phase 2
trains exclusively on the coreset union, re-selecting the current classes'
coresets each epoch. Past-class coresets are never re-selected.
"""

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import coreset as cs
from .bounds import BoundInputs, eval_label_flip_bound, eval_perturbation_bound, measure_inputs
from .data import Dataset, ExperienceStream, NoiseSpec
from .metrics import AccuracyMatrix, purity_record
from .model import (MlpClassifier, TrainConfig, class_weights_for, evaluate,
                    last_layer_gradients, train_epoch)

REPLAY_STRATEGIES = ("random_replay", "continual_crust", "continual_cosine_crust")
ALL_STRATEGIES = ("naive", "cumulative", "joint") + REPLAY_STRATEGIES


class EmptyExperienceError(ValueError):
    pass


@dataclass
class StrategyConfig:
    strategy: str
    train: TrainConfig = field(default_factory=TrainConfig)
    coreset_k: int = 50
    hidden_dims: tuple = (32,)
    k_clusters: Optional[int] = None        # cosine variant; None = heuristic
    min_cluster_size: Optional[int] = None  # cluster-size filter threshold
    selection_seed: int = 0

    def __post_init__(self):
        if self.strategy not in ALL_STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy in REPLAY_STRATEGIES and self.coreset_k < 1:
            raise ValueError("replay strategies need coreset_k >= 1")


@dataclass
class CoresetStore:
    capacity: int
    per_class: dict = field(default_factory=dict)   # class -> train indices
    meta: dict = field(default_factory=dict)        # class -> selection metadata

    def total_stored(self):
        return sum(len(v) for v in self.per_class.values())


@dataclass
class RunRecord:
    accuracy: AccuracyMatrix
    purity_per_experience: list
    wallclock_per_experience: list
    config: dict
    seed: int
    strategy: str
    bounds: Optional[dict] = None

    def to_dict(self):
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "config": self.config,
            "accuracy_matrix": [[None if not np.isfinite(v) else float(v)
                                 for v in row] for row in self.accuracy.values],
            "taught_at": self.accuracy.taught_at.tolist(),
            "purity_per_experience": [None if not np.isfinite(p) else float(p)
                                      for p in self.purity_per_experience],
            "wallclock_per_experience": self.wallclock_per_experience,
            "bounds": self.bounds,
        }


def _select_for_class(model, ds, pool, cfg: StrategyConfig, seed_key):
    grads = last_layer_gradients(model, ds.features[pool], ds.labels[pool],
                                 ids=pool)
    budget = min(cfg.coreset_k, len(pool))
    if cfg.strategy == "continual_crust":
        sel = cs.crust_select(grads, budget)
    else:
        seed = np.random.SeedSequence(seed_key).generate_state(1)[0]
        sel = cs.cosine_crust_select(grads, budget, k_clusters=cfg.k_clusters,
                                     min_size=cfg.min_cluster_size, seed=seed)
    return pool[sel.ids], sel, grads


def run_experience(model, store: CoresetStore, ds_train: Dataset, experience,
                   cfg: StrategyConfig, experience_index, run_seed,
                   audit=None):
    """Train through one experience, refreshing the store for its classes."""
    for c in experience.new_class_ids:
        if c in store.per_class:
            raise ValueError(f"class {c} already has a coreset")
    if len(experience.train_indices) == 0:
        raise EmptyExperienceError("experience has no training data")

    pools = {c: experience.train_indices[
                 ds_train.clean_labels[experience.train_indices] == c]
             for c in experience.new_class_ids}
    new_idx = np.concatenate([pools[c] for c in experience.new_class_ids])
    stored_idx = ([store.per_class[c] for c in sorted(store.per_class)]
                  if store.per_class else [])

    tcfg = cfg.train
    epoch0 = experience_index * tcfg.total_epochs
    model.reset_optimizer()

    if cfg.strategy == "naive":
        phase1_pool = new_idx
    elif cfg.strategy == "cumulative":
        phase1_pool = np.concatenate([new_idx] + stored_idx) if stored_idx else new_idx
    else:
        phase1_pool = np.concatenate([new_idx] + stored_idx) if stored_idx else new_idx

    replay_refines = cfg.strategy in ("continual_crust", "continual_cosine_crust")
    phase1_epochs = tcfg.epochs_phase1 if replay_refines else tcfg.total_epochs
    phase2_epochs = tcfg.epochs_phase2 if replay_refines else 0

    for e in range(phase1_epochs):
        _train_on(model, ds_train, phase1_pool, tcfg, epoch0 + e, audit,
                  experience_index, "phase1")

    last_selection = None
    for e in range(phase2_epochs):
        for c in experience.new_class_ids:
            key = [run_seed % (2 ** 63), experience_index, e, int(c)]
            ids, sel, grads = _select_for_class(model, ds_train, pools[c], cfg, key)
            store.per_class[int(c)] = ids
            store.meta[int(c)] = {"objective": sel.objective_value,
                                  "epoch": epoch0 + phase1_epochs + e}
            last_selection = (grads, sel)
        union = np.concatenate([store.per_class[c] for c in sorted(store.per_class)])
        _train_on(model, ds_train, union, tcfg, epoch0 + phase1_epochs + e,
                  audit, experience_index, "phase2")

    if cfg.strategy == "random_replay":
        rng = np.random.default_rng(
            np.random.SeedSequence([run_seed % (2 ** 63), experience_index, 777]))
        for c in experience.new_class_ids:
            take = min(cfg.coreset_k, len(pools[c]))
            store.per_class[int(c)] = rng.choice(pools[c], size=take, replace=False)
    elif replay_refines and phase2_epochs == 0:
        # degenerate m = n config: select once at experience end
        for c in experience.new_class_ids:
            key = [run_seed % (2 ** 63), experience_index, 0, int(c)]
            ids, sel, grads = _select_for_class(model, ds_train, pools[c], cfg, key)
            store.per_class[int(c)] = ids
            last_selection = (grads, sel)
    elif cfg.strategy == "cumulative":
        # raw accumulation; exempt from the coreset memory contract
        for c in experience.new_class_ids:
            store.per_class[int(c)] = pools[c]

    return last_selection


def _train_on(model, ds, pool, tcfg, epoch_key, audit, experience_index, phase):
    if audit is not None:
        audit(experience_index, phase, epoch_key, np.sort(pool))
    w = class_weights_for(ds.labels[pool], model.num_classes,
                          tcfg.class_weighting)
    train_epoch(model, ds.features[pool], ds.labels[pool], w, tcfg,
                epoch=epoch_key)


def run_curriculum(stream: ExperienceStream, ds_train: Dataset,
                   ds_test: Dataset, cfg: StrategyConfig, seed,
                   noise: Optional[NoiseSpec] = None, audit=None) -> RunRecord:
    """Alternate training and evaluation experiences, filling the R matrix."""
    if len(stream) == 0:
        raise EmptyExperienceError("stream has no experiences")
    num_classes = ds_train.num_classes
    tcfg = replace(cfg.train, seed=seed)
    cfg = replace(cfg, train=tcfg)
    model = MlpClassifier([ds_train.feature_dim, *cfg.hidden_dims, num_classes],
                          seed=seed)
    store = CoresetStore(capacity=cfg.coreset_k)

    T = len(stream)
    R = np.full((T, num_classes), np.nan)
    taught_at = np.full(num_classes, -1, dtype=np.int64)
    purities = []
    wallclock = []
    last_selection = None

    if cfg.strategy == "joint":
        t0 = time.perf_counter()
        all_idx = np.concatenate([e.train_indices for e in stream.experiences])
        for e in range(tcfg.total_epochs):
            _train_on(model, ds_train, all_idx, tcfg, e, audit, 0, "joint")
        per_class, _ = evaluate(model, ds_test.features, ds_test.clean_labels,
                                num_classes)
        R[-1] = per_class
        wallclock = [0.0] * (T - 1) + [time.perf_counter() - t0]
        purities = [float("nan")] * T
        for i, exp in enumerate(stream.experiences):
            for c in exp.new_class_ids:
                taught_at[c] = i
        matrix = AccuracyMatrix(values=R, taught_at=taught_at)
        return RunRecord(accuracy=matrix, purity_per_experience=purities,
                         wallclock_per_experience=wallclock,
                         config=_echo(cfg), seed=seed, strategy=cfg.strategy)

    for i, exp in enumerate(stream.experiences):
        t0 = time.perf_counter()
        sel = run_experience(model, store, ds_train, exp, cfg, i, seed,
                             audit=audit)
        if sel is not None:
            last_selection = sel
        wallclock.append(time.perf_counter() - t0)
        for c in exp.new_class_ids:
            taught_at[c] = i
        per_class, _ = evaluate(model, ds_test.features, ds_test.clean_labels,
                                num_classes)
        R[i] = per_class
        if cfg.strategy in REPLAY_STRATEGIES and store.per_class:
            purities.append(purity_record(store.per_class, ds_train).mean_purity)
        else:
            purities.append(float("nan"))

    matrix = AccuracyMatrix(values=R, taught_at=taught_at)
    bounds = _bounds_block(last_selection, cfg, purities, noise)
    return RunRecord(accuracy=matrix, purity_per_experience=purities,
                     wallclock_per_experience=wallclock, config=_echo(cfg),
                     seed=seed, strategy=cfg.strategy, bounds=bounds)


def _bounds_block(last_selection, cfg, purities, noise):
    """Bound diagnostics from the final experience's last re-selection."""
    if last_selection is None:
        return None
    grads, sel = last_selection
    finite = [p for p in purities if np.isfinite(p)]
    rho = min(max(1.0 - (finite[-1] if finite else 0.0), 1e-3), 1.0)
    base = BoundInputs(rho=rho, delta=1.0, eta=cfg.train.learning_rate)
    inp = measure_inputs(grads, selection=sel, base=base)
    block = {"inputs": {k: (v if np.isfinite(v) else None)
                        for k, v in inp.__dict__.items()
                        if isinstance(v, (int, float))},
             "label_flip": _clean(eval_label_flip_bound(inp).to_dict())}
    if noise is not None and 0.0 < noise.instance_noise_fraction < 1.0:
        inp2 = replace(inp, delta=noise.instance_noise_fraction)
        block["perturbation"] = _clean(eval_perturbation_bound(inp2).to_dict())
    return block


def _clean(d):
    return {k: (None if isinstance(v, float) and not np.isfinite(v) else v)
            for k, v in d.items()}


def _echo(cfg: StrategyConfig):
    return {
        "strategy": cfg.strategy,
        "coreset_k": cfg.coreset_k,
        "hidden_dims": list(cfg.hidden_dims),
        "k_clusters": cfg.k_clusters,
        "min_cluster_size": cfg.min_cluster_size,
        "selection_seed": cfg.selection_seed,
        "train": {k: v for k, v in cfg.train.__dict__.items()},
    }
