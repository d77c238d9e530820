"""Experiment orchestration: config parsing, grid fan-out, result tables.

A config is one JSON file (nested sections, unknown keys rejected). The
grid (strategy x noise level x seed) runs on a bounded worker pool; every
cell writes its run record atomically, and the aggregate CSV is a pure
function of the raw rows so reruns are byte-identical.
"""

import argparse
import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .continual import StrategyConfig, run_curriculum
from .data import (NoiseSpec, build_stream, flip_labels, generate_gaussian_blobs,
                   generate_glyph_images, load_idx, perturb_instances)
from .metrics import (TooFewExperiencesError, average_final_accuracy,
                      forgetting)
from .model import TrainConfig

RUN_SCHEMA = "coreplay-run-v1"
WORKERS_ENV = "COREPLAY_WORKERS"

RAW_COLUMNS = ["strategy", "noise_kind", "noise_level", "seed",
               "afa", "forgetting", "purity", "wallclock_s"]


class ConfigError(ValueError):
    pass


class NoResultsError(ValueError):
    pass


# ------------------------------------------------------------------ config

_DATASET_KEYS = {
    "blobs": {"kind", "num_classes", "per_class_train", "per_class_test",
              "feature_dim", "separation", "seed"},
    "glyphs": {"kind", "num_classes", "per_class_train", "per_class_test",
               "seed"},
    "idx": {"kind", "train_images", "train_labels", "test_images",
            "test_labels", "subset_per_class"},
}
_NOISE_KEYS = {"kind", "levels", "pixel_corrupt_prob", "blend"}
_STRATEGY_KEYS = {"strategy", "coreset_k", "hidden_dims", "train",
                  "k_clusters", "min_cluster_size", "selection_seed"}
_TRAIN_KEYS = {"learning_rate", "batch_size", "epochs_phase1", "epochs_phase2",
               "weight_decay", "class_weighting", "optimizer"}
_TOP_KEYS = {"name", "output_dir", "dataset", "stream", "noise", "strategies",
             "seeds"}
_STREAM_KEYS = {"first_classes", "later_classes"}


def _reject_unknown(section, allowed, where):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def parse_config(raw) -> dict:
    """Validate a config dict (fail loud on unknown keys or bad values)."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown(raw, _TOP_KEYS, "config")
    for key in ("dataset", "strategies", "seeds", "noise"):
        if key not in raw:
            raise ConfigError(f"config is missing required section {key!r}")

    ds = raw["dataset"]
    kind = ds.get("kind")
    if kind not in _DATASET_KEYS:
        raise ConfigError(f"dataset.kind must be one of {sorted(_DATASET_KEYS)}")
    _reject_unknown(ds, _DATASET_KEYS[kind], "dataset")

    noise = raw["noise"]
    _reject_unknown(noise, _NOISE_KEYS, "noise")
    if noise.get("kind") not in ("label_flip", "instance", "none"):
        raise ConfigError("noise.kind must be label_flip | instance | none")
    levels = noise.get("levels", [0.0])
    if not levels:
        raise ConfigError("noise.levels must be nonempty")
    if noise["kind"] == "none" and levels != [0.0]:
        raise ConfigError("noise.kind none implies levels [0.0]")

    strategies = raw["strategies"]
    if not strategies:
        raise ConfigError("strategies must be nonempty")
    for i, s in enumerate(strategies):
        _reject_unknown(s, _STRATEGY_KEYS, f"strategies[{i}]")
        _reject_unknown(s.get("train", {}), _TRAIN_KEYS, f"strategies[{i}].train")
        build_strategy(s)  # raises on bad values

    if not raw["seeds"]:
        raise ConfigError("seeds must be nonempty")
    if "stream" in raw:
        _reject_unknown(raw["stream"], _STREAM_KEYS, "stream")
    return raw


def load_config(path) -> dict:
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_config(raw)


def build_strategy(spec) -> StrategyConfig:
    train = TrainConfig(**spec.get("train", {}))
    return StrategyConfig(
        strategy=spec["strategy"],
        train=train,
        coreset_k=spec.get("coreset_k", 50),
        hidden_dims=tuple(spec.get("hidden_dims", [32])),
        k_clusters=spec.get("k_clusters"),
        min_cluster_size=spec.get("min_cluster_size"),
        selection_seed=spec.get("selection_seed", 0),
    )


def build_datasets(ds_spec):
    kind = ds_spec["kind"]
    if kind == "blobs":
        train = generate_gaussian_blobs(
            ds_spec["num_classes"], ds_spec["per_class_train"],
            ds_spec.get("feature_dim", 2), ds_spec.get("separation", 5.0),
            seed=ds_spec.get("seed", 0))
        test = generate_gaussian_blobs(
            ds_spec["num_classes"], ds_spec["per_class_test"],
            ds_spec.get("feature_dim", 2), ds_spec.get("separation", 5.0),
            seed=ds_spec.get("seed", 0) + 1)
    elif kind == "glyphs":
        train = generate_glyph_images(ds_spec["num_classes"],
                                      ds_spec["per_class_train"],
                                      seed=ds_spec.get("seed", 0))
        test = generate_glyph_images(ds_spec["num_classes"],
                                     ds_spec["per_class_test"],
                                     seed=ds_spec.get("seed", 0) + 1)
    else:
        train = load_idx(ds_spec["train_images"], ds_spec["train_labels"])
        test = load_idx(ds_spec["test_images"], ds_spec["test_labels"])
        per_class = ds_spec.get("subset_per_class")
        if per_class:
            train = _subset_per_class(train, per_class)
    return train, test


def _subset_per_class(ds, per_class):
    keep = []
    for c in range(ds.num_classes):
        keep.append(np.where(ds.clean_labels == c)[0][:per_class])
    idx = np.sort(np.concatenate(keep))
    from .data import Dataset
    return Dataset(features=ds.features[idx], labels=ds.labels[idx],
                   clean_labels=ds.clean_labels[idx],
                   perturbed=ds.perturbed[idx], num_classes=ds.num_classes)


# --------------------------------------------------------------- grid cells

def run_cell(config, strategy_index, noise_level, seed):
    """Execute one (strategy, noise level, seed) cell; returns a result dict."""
    t0 = time.perf_counter()
    spec = config["strategies"][strategy_index]
    cfg = build_strategy(spec)
    train, test = build_datasets(config["dataset"])
    noise_kind = config["noise"]["kind"]
    noise_spec = None
    if noise_kind == "label_flip" and noise_level > 0:
        train = flip_labels(train, noise_level, train.num_classes,
                            seed=np.random.SeedSequence([seed, 101]).generate_state(1)[0])
    elif noise_kind == "instance" and noise_level > 0:
        noise_spec = NoiseSpec(
            instance_noise_fraction=noise_level,
            pixel_corrupt_prob=config["noise"].get("pixel_corrupt_prob", 0.9),
            blend=config["noise"].get("blend", 0.5),
            rng_seed=int(np.random.SeedSequence([seed, 202]).generate_state(1)[0]))
        train = perturb_instances(train, noise_spec)
    stream_cfg = config.get("stream", {})
    stream = build_stream(train, test, seed=seed,
                          first_classes=stream_cfg.get("first_classes", 2),
                          later_classes=stream_cfg.get("later_classes", 1))
    record = run_curriculum(stream, train, test, cfg, seed=seed,
                            noise=noise_spec)
    afa = average_final_accuracy(record.accuracy)
    try:
        forg = forgetting(record.accuracy)
    except TooFewExperiencesError:
        forg = None
    finite_purity = [p for p in record.purity_per_experience if np.isfinite(p)]
    mean_purity = float(np.mean(finite_purity)) if finite_purity else None
    return {
        "schema": RUN_SCHEMA,
        "manifest": {
            "version": __version__,
            "name": config.get("name", "experiment"),
            "strategy": spec["strategy"],
            "noise_kind": noise_kind,
            "noise_level": noise_level,
            "seed": seed,
            "seeds": list(config["seeds"]),
            "config": config,
        },
        "metrics": {
            "afa": afa,
            "forgetting": forg,
            "purity": mean_purity,
            "wallclock_s": time.perf_counter() - t0,
        },
        "record": record.to_dict(),
    }


def _cell_entry(args):
    config, si, level, seed = args
    try:
        return (si, level, seed), run_cell(config, si, level, seed), None
    except Exception as exc:  # recorded, siblings keep running
        return (si, level, seed), None, f"{type(exc).__name__}: {exc}"


def run_experiment(config, output_dir, workers=None):
    """Run the full grid; persist per-run JSON plus raw/aggregate CSVs.

    Returns (results, failures). Cell failures are recorded and reported,
    never fatal to sibling cells.
    """
    os.makedirs(os.path.join(output_dir, "runs"), exist_ok=True)
    cells = [(config, si, level, seed)
             for si in range(len(config["strategies"]))
             for level in config["noise"]["levels"]
             for seed in config["seeds"]]
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_cell_entry, cells))
    else:
        outcomes = [_cell_entry(c) for c in cells]

    results, failures = [], []
    for (si, level, seed), payload, error in outcomes:
        strategy = config["strategies"][si]["strategy"]
        if error is not None:
            failures.append({"strategy": strategy, "noise_level": level,
                             "seed": seed, "error": error})
            continue
        fname = f"{strategy}_{payload['manifest']['noise_kind']}_{level:g}_s{seed}.json"
        _atomic_write(os.path.join(output_dir, "runs", fname),
                      json.dumps(payload, indent=1, sort_keys=True))
        results.append(payload)

    raw_csv = render_raw_csv(results, config)
    _atomic_write(os.path.join(output_dir, "raw.csv"), raw_csv)
    agg_csv = render_aggregate_csv(results, config)
    _atomic_write(os.path.join(output_dir, "aggregate.csv"), agg_csv)
    summary = render_summary(results, config)
    _atomic_write(os.path.join(output_dir, "summary.txt"), summary)
    if failures:
        _atomic_write(os.path.join(output_dir, "failures.json"),
                      json.dumps(failures, indent=1, sort_keys=True))
    return results, failures


def _atomic_write(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


# ------------------------------------------------------------------- tables

def _strategy_order(config):
    return [s["strategy"] for s in config["strategies"]]


def _sorted_results(results, config):
    order = {name: i for i, name in enumerate(_strategy_order(config))}
    return sorted(results, key=lambda r: (
        order.get(r["manifest"]["strategy"], 99),
        r["manifest"]["noise_level"],
        r["manifest"]["seed"]))


def _fmt(x, places=4):
    return "" if x is None else f"{x:.{places}f}"


def render_raw_csv(results, config):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RAW_COLUMNS)
    for r in _sorted_results(results, config):
        m, met = r["manifest"], r["metrics"]
        w.writerow([m["strategy"], m["noise_kind"], f"{m['noise_level']:g}",
                    m["seed"], _fmt(met["afa"]), _fmt(met["forgetting"]),
                    _fmt(met["purity"]), _fmt(met["wallclock_s"])])
    return buf.getvalue()


def _aggregate_rows(results, config):
    groups = {}
    for r in _sorted_results(results, config):
        m = r["manifest"]
        groups.setdefault((m["strategy"], m["noise_kind"], m["noise_level"]),
                          []).append(r["metrics"])
    rows = []
    for (strategy, kind, level), metrics in groups.items():
        row = {"strategy": strategy, "noise_kind": kind, "noise_level": level,
               "n_runs": len(metrics)}
        for field in ("afa", "forgetting", "purity"):
            vals = [m[field] for m in metrics if m[field] is not None]
            row[f"{field}_mean"] = float(np.mean(vals)) if vals else None
            row[f"{field}_std"] = (float(np.std(vals, ddof=1))
                                   if len(vals) > 1 else (0.0 if vals else None))
        rows.append(row)
    return rows


def render_aggregate_csv(results, config):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", "noise_kind", "noise_level", "n_runs",
                "afa_mean", "afa_std", "forgetting_mean", "forgetting_std",
                "purity_mean", "purity_std"])
    for row in _aggregate_rows(results, config):
        w.writerow([row["strategy"], row["noise_kind"],
                    f"{row['noise_level']:g}", row["n_runs"],
                    _fmt(row["afa_mean"]), _fmt(row["afa_std"]),
                    _fmt(row["forgetting_mean"]), _fmt(row["forgetting_std"]),
                    _fmt(row["purity_mean"]), _fmt(row["purity_std"])])
    return buf.getvalue()


def render_summary(results, config):
    """Strategy x noise grid of "mean +- std" for accuracy and forgetting."""
    rows = _aggregate_rows(results, config)
    levels = sorted({r["noise_level"] for r in rows})
    by_key = {(r["strategy"], r["noise_level"]): r for r in rows}
    name_w = max([len(s) for s in _strategy_order(config)] + [8])

    def cell(r, field):
        m, s = r.get(f"{field}_mean"), r.get(f"{field}_std")
        if m is None:
            return "N/A"
        return f"{m:.2f} +-{s:.2f}"

    lines = [f"# {config.get('name', 'experiment')} "
             f"(noise kind: {config['noise']['kind']})", ""]
    for field, label in (("afa", "Final accuracy"), ("forgetting", "Forgetting"),
                         ("purity", "Coreset purity")):
        lines.append(f"## {label}")
        header = "strategy".ljust(name_w) + "".join(
            f"  noise={lv:g}".rjust(14) for lv in levels)
        lines.append(header)
        for strategy in _strategy_order(config):
            row = strategy.ljust(name_w)
            for lv in levels:
                r = by_key.get((strategy, lv))
                row += (cell(r, field) if r else "missing").rjust(14)
            lines.append(row)
        lines.append("")
    return "\n".join(lines)


def summarize_dir(results_dir):
    runs_dir = os.path.join(results_dir, "runs")
    if not os.path.isdir(runs_dir):
        raise NoResultsError(f"{results_dir} has no runs/ directory")
    results = []
    for fname in sorted(os.listdir(runs_dir)):
        if fname.endswith(".json"):
            with open(os.path.join(runs_dir, fname)) as f:
                results.append(json.load(f))
    if not results:
        raise NoResultsError(f"{runs_dir} contains no run records")
    config = results[0]["manifest"]["config"]
    return render_summary(results, config), render_aggregate_csv(results, config)


# ---------------------------------------------------------------------- CLI

_DEMO_TRAIN = {"learning_rate": 0.3, "batch_size": 32,
               "epochs_phase1": 10, "epochs_phase2": 8}
DEMO_CONFIG = {
    "name": "demo",
    "dataset": {"kind": "blobs", "num_classes": 4, "per_class_train": 80,
                "per_class_test": 25, "feature_dim": 8, "separation": 6.0,
                "seed": 0},
    "noise": {"kind": "label_flip", "levels": [0.3]},
    "strategies": [
        {"strategy": "continual_crust", "coreset_k": 20, "hidden_dims": [16],
         "train": dict(_DEMO_TRAIN)},
        {"strategy": "continual_cosine_crust", "coreset_k": 20,
         "hidden_dims": [16], "train": dict(_DEMO_TRAIN)},
        {"strategy": "random_replay", "coreset_k": 20, "hidden_dims": [16],
         "train": dict(_DEMO_TRAIN)},
        {"strategy": "naive", "hidden_dims": [16],
         "train": {**_DEMO_TRAIN, "epochs_phase1": 18, "epochs_phase2": 0}},
    ],
    "seeds": [0, 1],
}


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="coreplay",
        description="Noise-tolerant coreset replay experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--output", default=None)
    p_run.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default ${WORKERS_ENV} or 1)")

    p_sum = sub.add_parser("summarize", help="rebuild tables from run records")
    p_sum.add_argument("results_dir")

    p_val = sub.add_parser("validate", help="check a config file")
    p_val.add_argument("config")

    p_demo = sub.add_parser("demo", help="bundled quick synthetic run")
    p_demo.add_argument("--output", default="coreplay-demo")

    args = parser.parse_args(argv)
    if args.command == "validate":
        try:
            load_config(args.config)
        except ConfigError as e:
            print(f"invalid: {e}", file=sys.stderr)
            return 2
        print("ok")
        return 0
    if args.command == "run":
        config = load_config(args.config)
        output = args.output or config.get("output_dir") or config.get("name", "results")
        results, failures = run_experiment(config, output, workers=args.workers)
        print(open(os.path.join(output, "summary.txt")).read())
        if failures:
            print(f"{len(failures)} cell(s) failed; see failures.json",
                  file=sys.stderr)
            return 1
        return 0
    if args.command == "summarize":
        try:
            summary, agg = summarize_dir(args.results_dir)
        except NoResultsError as e:
            print(str(e), file=sys.stderr)
            return 2
        _atomic_write(os.path.join(args.results_dir, "aggregate.csv"), agg)
        _atomic_write(os.path.join(args.results_dir, "summary.txt"), summary)
        print(summary)
        return 0
    if args.command == "demo":
        config = parse_config(DEMO_CONFIG)
        t0 = time.perf_counter()
        _, failures = run_experiment(config, args.output, workers=1)
        print(open(os.path.join(args.output, "summary.txt")).read())
        print(f"demo finished in {time.perf_counter() - t0:.1f}s "
              f"-> {args.output}/")
        return 1 if failures else 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
