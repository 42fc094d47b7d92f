"""Command-line entry point: ``synth``, ``train``, ``eval``, ``ablate``, ``stats``, ``gradcheck``.

Every command writes ``manifest.json`` into its output directory.  All other
outputs depend only on inputs and seed; wall-clock data lives in the manifest.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import checkpoint as ckpt
from .kg import (
    AlignmentDataset,
    ConfigError,
    KGError,
    KGPair,
    load_kg,
    load_pairs,
    partition_relations,
    save_kg,
    save_pairs,
)
from .synthetic import GenerationError, SynthConfig, generate_pair, measure_inconsistency

log = logging.getLogger("vulnalign")

SOURCE_TRIPLES = "source_triples.tsv"
SOURCE_NODES = "source_nodes.tsv"
TARGET_TRIPLES = "target_triples.tsv"
TARGET_NODES = "target_nodes.tsv"
PAIRS = "pairs.tsv"
GROUND_TRUTH = "ground_truth.json"
SCHEMA = "schema.cfg"
MANIFEST = "manifest.json"
DATA_FILES = (SOURCE_TRIPLES, SOURCE_NODES, TARGET_TRIPLES, TARGET_NODES, PAIRS, GROUND_TRUTH)
CHECKPOINT = "checkpoint.bin"
TRAIN_LOG = "train_log.tsv"
METRICS = "metrics.tsv"
CURVE = "curve.tsv"

ABLATION_CHOICES = ("full", "no_aggregation", "mean_aggregate", "traditional_attention", "profiling_only")

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISMATCH = 3


class UsageError(Exception):
    pass


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _json_dump(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Run:
    """Collects what goes into a command's manifest."""

    def __init__(self, command, args):
        self.command = command
        self.argv = sys.argv[1:] if args is None else list(args)
        self.started = time.perf_counter()
        self.started_at = datetime.now(timezone.utc).isoformat()
        self.inputs, self.outputs = [], []
        self.config, self.seed, self.timing, self.extra = {}, None, {}, {}

    def write_manifest(self, out_dir):
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "version": __version__,
            "seed": self.seed,
            "config": self.config,
            "inputs": {str(p): sha256(p) for p in self.inputs},
            "outputs": {str(p): sha256(p) for p in self.outputs},
            "started_at": self.started_at,
            "wall_clock_seconds": time.perf_counter() - self.started,
            "timing": self.timing,
        }
        manifest.update(self.extra)
        _json_dump(manifest, Path(out_dir) / MANIFEST)


def _out_dir(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from None
    return out


def _read_kv(path):
    from .training import read_config

    if path is None:
        return {}
    if not Path(path).is_file():
        raise UsageError(f"config file {path} not found")
    return read_config(path)


# data directory ---------------------------------------------------------------


def load_data(data_dir):
    """``(pair, dataset, schema, input paths)`` from a data directory."""
    d = Path(data_dir)
    needed = [SCHEMA, SOURCE_TRIPLES, SOURCE_NODES, TARGET_TRIPLES, TARGET_NODES, PAIRS]
    missing = [n for n in needed if not (d / n).is_file()]
    if missing:
        raise UsageError(f"data directory {d} lacks {missing}")
    schema = partition_relations((d / SCHEMA).read_text(encoding="utf-8"))
    source = load_kg(d / SOURCE_TRIPLES, schema, d / SOURCE_NODES)
    target = load_kg(d / TARGET_TRIPLES, schema, d / TARGET_NODES)
    pair = KGPair(source, target)
    dataset = load_pairs(d / PAIRS)
    dataset.validate(pair, schema.entity_type)
    return pair, dataset, schema, [d / n for n in needed]


def write_data(pair, dataset, schema, truth, out_dir):
    out = Path(out_dir)
    save_kg(pair.source, out / SOURCE_TRIPLES, out / SOURCE_NODES)
    save_kg(pair.target, out / TARGET_TRIPLES, out / TARGET_NODES)
    save_pairs(AlignmentDataset(sorted(dataset)), out / PAIRS)
    (out / SCHEMA).write_text(schema.to_config(), encoding="utf-8")
    _json_dump(truth.to_dict(), out / GROUND_TRUTH)
    return [out / n for n in DATA_FILES + (SCHEMA,)]


# commands ---------------------------------------------------------------------


def cmd_synth(args, run):
    values = _read_kv(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    cfg = SynthConfig.from_mapping(values)
    out = _out_dir(args.out)
    pair, dataset, truth = generate_pair(cfg)
    run.config, run.seed = cfg.to_mapping(), cfg.seed
    run.inputs += [Path(args.config)] if args.config else []
    run.outputs += write_data(pair, dataset, pair_schema(cfg), truth, out)
    log.info("wrote %d pairs (%d positive) to %s", len(dataset), truth.n_positive, out)
    return out


def pair_schema(cfg):
    from .kg import default_schema

    return default_schema(cfg.schema)


def _train_config(args, run):
    from .training import TrainConfig

    values = _read_kv(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "ablation", None):
        values["ablation"] = args.ablation
    if getattr(args, "epsilon", None) is not None:
        values["epsilon"] = args.epsilon
    if args.config:
        run.inputs.append(Path(args.config))
    return TrainConfig.from_mapping(values)


def cmd_train(args, run):
    from .pipeline import featurize
    from .training import build_graph, lr_search, split_dataset, train

    cfg = _train_config(args, run)
    pair, dataset, schema, inputs = load_data(args.data)
    run.inputs += inputs
    cfg.validate(None if cfg.ablation == "profiling_only" else schema)
    out = _out_dir(args.out)
    splits = split_dataset(dataset, cfg.test_fraction, cfg.val_fraction, cfg.seed)
    graph = build_graph(pair, schema, featurize(pair, cfg), cfg.ablation, cfg.seed)
    if args.lr_search:
        if cfg.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2 for the learning-rate search")
        t0 = time.perf_counter()
        rate, history = lr_search(graph, splits, cfg, full_partition=schema)
        run.timing["lr_search_seconds"] = time.perf_counter() - t0
        run.extra["lr_search"] = {"selected": rate, "rounds": [[lo, hi] for lo, hi, _, _ in history]}
        cfg = dataclasses.replace(cfg, learning_rate=rate)
        log.info("selected learning rate %.5f", rate)
    t0 = time.perf_counter()
    params, train_log = train(graph, splits, cfg, full_partition=schema)
    seconds = time.perf_counter() - t0
    epochs_run = sum(1 for r in train_log.records if r[1] == "train")
    batches = epochs_run * -(-len(splits["train"]) // cfg.batch_size)
    params.meta["ablation"] = cfg.ablation
    params.meta["train_config"] = cfg.to_mapping()
    ckpt.save(params, out / CHECKPOINT)
    train_log.write(out / TRAIN_LOG)
    run.outputs += [out / CHECKPOINT, out / TRAIN_LOG]
    run.config, run.seed = cfg.to_mapping(), cfg.seed
    run.extra["variant"] = cfg.ablation
    run.extra["learning_rate"] = cfg.learning_rate
    run.timing.update(train_seconds=seconds, batches=batches,
                      ms_per_batch=1000.0 * seconds / max(batches, 1))
    final = train_log.final()
    if final is not None:
        log.info("best validation macro F1 %.4f at epoch %s", final[3], params.meta.get("best_epoch"))
    return out


def _restore(args, run):
    """Rebuild graph, splits and config for a checkpoint against a data directory."""
    from .pipeline import featurize
    from .training import TrainConfig, build_graph, split_dataset

    pair, dataset, schema, inputs = load_data(args.data)
    run.inputs += inputs + [Path(args.checkpoint)]
    params = ckpt.load(args.checkpoint, relations=schema.relations)
    cfg = TrainConfig.from_mapping({k: v for k, v in params.meta["train_config"].items()})
    splits = split_dataset(dataset, cfg.test_fraction, cfg.val_fraction, cfg.seed)
    graph = build_graph(pair, schema, featurize(pair, cfg), cfg.ablation, cfg.seed)
    return params, cfg, splits, graph


def cmd_eval(args, run):
    from .pipeline import eval_epsilon, evaluate_params
    from .training import evaluate_split, variant_for

    params, cfg, splits, graph = _restore(args, run)
    out = _out_dir(args.out)
    vloss, vf1, vthr = evaluate_split(graph, params, splits["val"], variant_for(cfg), eval_epsilon(cfg))
    report = evaluate_params(graph, params, splits, cfg)
    rows = [("val", "loss", vloss), ("val", "f1", vf1), ("val", "threshold", vthr)]
    rows += report.records("test")
    with open(out / METRICS, "w", encoding="utf-8") as fh:
        fh.write("split\tmetric\tvalue\n")
        for split, name, value in rows:
            fh.write(f"{split}\t{name}\t{value!r}\n")
    run.outputs.append(out / METRICS)
    if args.emit_curve:
        with open(out / CURVE, "w", encoding="utf-8") as fh:
            fh.write("threshold\tprecision\trecall\n")
            for thr, p, r in report.curve:
                fh.write(f"{thr!r}\t{p!r}\t{r!r}\n")
        run.outputs.append(out / CURVE)
    run.config, run.seed = cfg.to_mapping(), cfg.seed
    run.extra["prauc_method"] = report.meta["prauc_method"]
    print(f"test: P@R0.95={report.precision_at_recall95:.4f} F1={report.f1:.4f} "
          f"PRAUC={report.prauc:.4f} (threshold {report.selected_threshold:.4f})")
    return out


def cmd_ablate(args, run):
    from .pipeline import TREND_ORDER, ablation_sweep, mean_table, trend_holds

    cfg = _train_config(args, run)
    synth_values = _read_kv(args.synth_config)
    if args.synth_config:
        run.inputs.append(Path(args.synth_config))
    synth = SynthConfig.from_mapping(synth_values)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    variants = tuple(v for v in args.variants.split(",") if v.strip()) if args.variants else TREND_ORDER
    out = _out_dir(args.out)
    timings = []
    table = ablation_sweep(cfg, synth, variants, seeds,
                         on_result=lambda r: timings.append((r.ablation, r.seed, r.seconds)))
    means = mean_table(table)
    with open(out / "ablation.tsv", "w", encoding="utf-8") as fh:
        fh.write("variant\tseed\ttest_f1\n")
        for v in variants:
            for seed, f1 in zip(seeds, table[v]):
                fh.write(f"{v}\t{seed}\t{f1!r}\n")
        for v in variants:
            fh.write(f"{v}\tmean\t{means[v]!r}\n")
    run.outputs.append(out / "ablation.tsv")
    run.config = {"train": cfg.to_mapping(), "synth": synth.to_mapping(), "seeds": seeds}
    run.timing["runs"] = [{"variant": v, "seed": s, "seconds": t} for v, s, t in timings]
    if set(TREND_ORDER) <= set(variants):
        run.extra["trend_holds"] = trend_holds(means)
    for v in variants:
        print(f"{v:24s} {means[v]:.4f}")
    return out


def cmd_stats(args, run):
    pair, dataset, schema, inputs = load_data(args.data)
    run.inputs += inputs
    out = _out_dir(args.out)
    stats = measure_inconsistency(pair, dataset)
    _json_dump(dataclasses.asdict(stats), out / "stats.json")
    run.outputs.append(out / "stats.json")
    print(f"positive inconsistency {stats.positive_inconsistency:.4f}  "
          f"negative similarity {stats.negative_similarity:.4f}")
    return out


def cmd_gradcheck(args, run):
    import numpy as np

    from .fixtures import random_fixture
    from .gnn import init_params
    from .model import Variant
    from .training import build_graph, grad_check

    seed = args.seed if args.seed is not None else 0
    pair, schema, (fs, ft), pairs = random_fixture(seed)
    ablation = args.ablation or "full"
    graph = build_graph(pair, schema, (fs, ft), ablation, seed)
    variant = Variant.from_ablation(ablation)
    epsilon = None if variant.profiling_only else (args.epsilon if args.epsilon is not None else 0.2)
    params = init_params(schema.relations, graph.type_names, fs.dim, dim=3, seed=seed, epsilon=epsilon)
    # zero hidden biases can leave ReLU inputs exactly at the kink, where
    # central differences are meaningless
    params["cls.b1"] = np.random.default_rng(seed).normal(scale=0.1, size=params["cls.b1"].shape)
    report = grad_check(graph, params, pairs, variant, epsilon, tolerance=args.tolerance)
    run.seed = seed
    run.config = {"tolerance": args.tolerance, "ablation": args.ablation or "full", "epsilon": epsilon}
    run.extra["max_rel_error"] = report.max_rel_error
    run.extra["per_tensor"] = report.per_tensor
    out = _out_dir(args.out)
    for name in sorted(report.per_tensor):
        print(f"{name:28s} {report.per_tensor[name]:.3e}")
    print(f"max relative error {report.max_rel_error:.3e} (tolerance {args.tolerance:g})")
    report.raise_for_failure()
    return out


# argument parsing ---------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="vulnalign", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic paired dataset")
    s.add_argument("--config", help="key=value synth config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train on a data directory")
    t.add_argument("data")
    t.add_argument("--config", help="key=value train config")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--ablation", choices=ABLATION_CHOICES)
    t.add_argument("--lr-search", action="store_true")
    t.add_argument("--epsilon", type=float)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("data")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--emit-curve", action="store_true")

    a = sub.add_parser("ablate", help="ablation sweep on synthetic data")
    a.add_argument("--config", help="key=value train config")
    a.add_argument("--synth-config", help="key=value synth config")
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--variants", help="comma-separated variant names")
    a.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    a.add_argument("--epsilon", type=float)
    a.add_argument("--out", required=True)

    st = sub.add_parser("stats", help="inconsistency statistics of a data directory")
    st.add_argument("data")
    st.add_argument("--out", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check on a small fixture")
    g.add_argument("--seed", type=int)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--ablation", choices=ABLATION_CHOICES)
    g.add_argument("--epsilon", type=float)
    g.add_argument("--out", required=True)
    return p


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "stats": cmd_stats,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    from .training import GradCheckFailure, TrainingDivergence

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = Run(args.command, argv)
    try:
        out = COMMANDS[args.command](args, run)
    except ckpt.SchemaMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (UsageError, ConfigError, GenerationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KGError, ckpt.CheckpointError, TrainingDivergence, GradCheckFailure,
            FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    run.write_manifest(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
