"""End-to-end runs: features, training, evaluation, and the ablation sweep."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .features import init_features
from .metrics import evaluate
from .model import ABLATIONS
from .synthetic import SynthConfig, generate_pair
from .kg import default_schema
from .training import (
    TrainConfig,
    build_graph,
    score_pairs,
    split_dataset,
    train,
    variant_for,
)

#: Variants in the order the ablation trend is expected to follow.
TREND_ORDER = ("full", "traditional_attention", "mean_aggregate", "no_aggregation")


def featurize(pair, config):
    """Hashed text features for both graphs of ``pair``."""
    return (
        init_features(pair.source, dim=config.feature_dim, scale=config.feature_scale),
        init_features(pair.target, dim=config.feature_dim, scale=config.feature_scale),
    )


@dataclass
class RunResult:
    ablation: str
    seed: int
    report: object
    log: object
    params: object
    splits: dict
    seconds: float
    seconds_per_batch: float

    @property
    def test_f1(self):
        return self.report.f1


def eval_epsilon(config):
    return None if config.ablation == "profiling_only" else config.epsilon


def evaluate_params(graph, params, splits, config):
    variant = variant_for(config)
    eps = eval_epsilon(config)
    val_scores = score_pairs(graph, params, splits["val"], variant, eps)
    test_scores = score_pairs(graph, params, splits["test"], variant, eps)
    return evaluate(
        val_scores, [p.label for p in splits["val"]],
        test_scores, [p.label for p in splits["test"]],
    )


def run_experiment(pair, dataset, schema, config, features=None, splits=None):
    """Split, train and evaluate one configuration."""
    splits = splits or split_dataset(dataset, config.test_fraction, config.val_fraction, config.seed)
    features = features or featurize(pair, config)
    graph = build_graph(pair, schema, features, config.ablation, config.seed)
    start = time.perf_counter()
    params, log = train(graph, splits, config, full_partition=schema)
    seconds = time.perf_counter() - start
    epochs_run = sum(1 for r in log.records if r[1] == "train")
    n_batches = epochs_run * -(-len(splits["train"]) // config.batch_size)
    params.meta["ablation"] = config.ablation
    params.meta["train_config"] = config.to_mapping()
    report = evaluate_params(graph, params, splits, config)
    return RunResult(config.ablation, config.seed, report, log, params, splits, seconds,
                     seconds / max(n_batches, 1))


def ablation_run(pair, dataset, schema, base_config, features=None, variants=ABLATIONS, on_result=None):
    """Train and evaluate every variant on one split of one dataset.

    Returns ``{variant: RunResult}``; all variants share the split, the
    features and the seed of ``base_config``.
    """
    splits = split_dataset(dataset, base_config.test_fraction, base_config.val_fraction, base_config.seed)
    features = features or featurize(pair, base_config)
    out = {}
    for v in variants:
        result = run_experiment(pair, dataset, schema, dataclasses.replace(base_config, ablation=v),
                                features=features, splits=splits)
        out[v] = result
        if on_result is not None:
            on_result(result)
    return out


def ablation_sweep(train_config, synth_config=None, variants=TREND_ORDER, seeds=(0, 1, 2), on_result=None):
    """Test macro F1 per variant and seed, each seed on a freshly generated pair.

    Returns ``{variant: [f1 per seed]}``.
    """
    synth_config = synth_config or SynthConfig()
    schema = default_schema(synth_config.schema)
    table = {v: [] for v in variants}
    for seed in seeds:
        pair, dataset, _ = generate_pair(dataclasses.replace(synth_config, seed=seed), schema)
        results = ablation_run(pair, dataset, schema, dataclasses.replace(train_config, seed=seed),
                               variants=variants, on_result=on_result)
        for v in variants:
            table[v].append(results[v].test_f1)
    return table


def trend_holds(means, order=TREND_ORDER, margin=0.02):
    """Whether mean F1 is non-increasing along ``order`` with the first ahead of the last by ``margin``."""
    values = [means[v] for v in order]
    monotone = all(a >= b for a, b in zip(values, values[1:]))
    return monotone and values[0] - values[-1] >= margin


def mean_table(table):
    return {v: float(np.mean(f1s)) for v, f1s in table.items()}
