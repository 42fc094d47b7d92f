"""Loss, sampling, splits, the optimisation loop, and gradient verification."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .kg import AlignmentPair, ConfigError

log = logging.getLogger(__name__)

_EPS = 1e-12
#: Number of probabilities clamped away from 0/1 by :func:`bce_loss` so far.
clamp_events = 0


class SamplingError(Exception):
    pass


class TrainingDivergence(FloatingPointError):
    pass


class GradCheckFailure(AssertionError):
    pass


# loss -----------------------------------------------------------------------


def bce_loss(predictions, labels):
    """Mean binary cross-entropy of probabilities ``predictions`` against 0/1 ``labels``."""
    global clamp_events
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("predictions and labels must be non-empty and equally long")
    clipped = np.clip(p, _EPS, 1.0 - _EPS)
    n_clamped = int(np.sum(clipped != p))
    if n_clamped:
        clamp_events += n_clamped
        log.debug("bce_loss clamped %d probabilities", n_clamped)
    return float(-np.mean(y * np.log(clipped) + (1.0 - y) * np.log(1.0 - clipped)))


# sampling -------------------------------------------------------------------


def negative_sample(pair, positives, k=10, seed=0, forced=None, entity_type=None):
    """``k`` negatives for every source entity, aligned or not.

    ``forced`` maps a source entity to target entities that must be among its
    negatives (they count towards ``k``).  Known positives are never emitted.
    """
    if k < 1:
        raise SamplingError("k must be >= 1")
    forced = forced or {}
    targets = pair.target.entities(entity_type)
    if len(targets) <= k:
        raise SamplingError(f"target graph has {len(targets)} entities; need more than k={k}")
    pos = {}
    for p in positives:
        pos.setdefault(p.src, set()).add(p.tgt)
    rng = np.random.default_rng(seed)
    target_index = {t: n for n, t in enumerate(targets)}
    out = []
    for s in pair.source.entities(entity_type):
        chosen = [t for t in forced.get(s, []) if t not in pos.get(s, ())]
        if len(chosen) > k:
            raise SamplingError(f"more than k forced negatives for {s!r}")
        banned = {target_index[t] for t in pos.get(s, set()) | set(chosen) if t in target_index}
        need = k - len(chosen)
        if len(targets) - len(banned) < need:
            raise SamplingError(f"not enough target entities to sample {need} negatives for {s!r}")
        picked = []
        while len(picked) < need:
            draw = rng.choice(len(targets), size=need - len(picked), replace=False)
            for n in draw.tolist():
                if n not in banned:
                    banned.add(n)
                    picked.append(n)
        chosen += [targets[n] for n in picked]
        out.extend(AlignmentPair(s, t, 0) for t in chosen)
    return out


def split_dataset(dataset, test_fraction=0.25, val_fraction=0.2, seed=0):
    """Stratified ``{"train", "val", "test"}`` split; validation is carved from the training part."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for label in (1, 0):
        group = [p for p in dataset if p.label == label]
        idx = rng.permutation(len(group))
        n_test = int(round(test_fraction * len(group)))
        n_val = int(round(val_fraction * (len(group) - n_test)))
        parts["test"] += [group[i] for i in idx[:n_test]]
        parts["val"] += [group[i] for i in idx[n_test:n_test + n_val]]
        parts["train"] += [group[i] for i in idx[n_test + n_val:]]
    return {k: sorted(v) for k, v in parts.items()}


def kfold(pairs, k, seed=0):
    """Stratified folds as a list of ``(train, held_out)``."""
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k)]
    for label in (1, 0):
        group = [p for p in pairs if p.label == label]
        for n, i in enumerate(rng.permutation(len(group))):
            folds[n % k].append(group[i])
    return [
        (sorted(p for j, f in enumerate(folds) if j != n for p in f), sorted(folds[n]))
        for n in range(k)
    ]


# configuration --------------------------------------------------------------


ABLATION_FLAGS = ("no_aggregation", "mean_aggregate", "traditional_attention", "profiling_only")


@dataclass
class TrainConfig:
    learning_rate: float = 0.02
    epochs: int = 50
    batch_size: int = 128
    seed: int = 0
    test_fraction: float = 0.25
    val_fraction: float = 0.2
    cv_folds: int = 5
    epsilon: float = 0.3
    ablation: str = "full"
    optimizer: str = "sgd"
    patience: int = 10
    dim: int = 64
    hidden: int = 64
    feature_dim: int = 100
    feature_scale: float = 1.0
    strict_mean: bool = False
    lr_search_epochs: int = 10

    def validate(self, partition=None):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.ablation != "full" and self.ablation not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if partition is not None and self.ablation != "profiling_only":
            partition.check_epsilon(self.epsilon)

    @classmethod
    def from_mapping(cls, values):
        types = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown train config field {key!r}")
            kind = types[key]
            if kind is bool:
                kwargs[key] = str(raw).lower() in ("1", "true", "yes")
            else:
                try:
                    kwargs[key] = kind(raw)
                except ValueError:
                    raise ConfigError(f"invalid value {raw!r} for {key!r}") from None
        return cls(**kwargs)

    def to_mapping(self):
        return dataclasses.asdict(self)


def read_config(path):
    """``key=value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def write_config(values, path):
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(values):
            fh.write(f"{key}={values[key]}\n")


# model setup ------------------------------------------------------------------


def build_graph(pair, partition, features, ablation="full", seed=0):
    """Compile ``pair`` for the model, dropping non-profiling relations if requested."""
    from .model import PairGraph

    if ablation == "profiling_only":
        keep = sorted(partition.profiling)
        pair = type(pair)(pair.source.restrict(keep), pair.target.restrict(keep))
        partition = partition.restrict(keep)
    src_feats, tgt_feats = features
    return PairGraph(pair, partition, src_feats, tgt_feats, id_seed=seed)


def new_params(graph, config, full_partition=None):
    from .gnn import init_params

    relations = (full_partition or graph.partition).relations
    return init_params(
        relations, graph.type_names, graph.feature_dim, dim=config.dim, hidden=config.hidden,
        seed=config.seed, epsilon=None if config.ablation == "profiling_only" else config.epsilon,
    )


def variant_for(config):
    from .model import Variant

    v = Variant.from_ablation(config.ablation)
    return dataclasses.replace(v, strict_mean=config.strict_mean)


# optimisation ---------------------------------------------------------------


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for name in params.names():
            params.tensors[name] = params.tensors[name] - self.lr * grads[name]


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        for name in params.names():
            g = grads[name]
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - self.beta1 ** self.t)
            v_hat = v / (1 - self.beta2 ** self.t)
            params.tensors[name] = params.tensors[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config):
    return Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def add(self, epoch, split, loss, f1, threshold):
        self.records.append((epoch, split, float(loss), float(f1), float(threshold)))

    def losses(self, split="train"):
        return [r[2] for r in self.records if r[1] == split]

    def final(self, split="val"):
        rows = [r for r in self.records if r[0] == "final" and r[1] == split]
        return rows[-1] if rows else None

    def lines(self):
        yield "epoch\tsplit\tloss\tf1\tthreshold"
        for epoch, split, loss, f1, thr in self.records:
            yield f"{epoch}\t{split}\t{loss!r}\t{f1!r}\t{thr!r}"

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.lines():
                fh.write(line + "\n")


def score_pairs(graph, params, pairs, variant, epsilon):
    from .model import predict

    if not pairs:
        return np.zeros(0)
    return predict(graph, params, [(p.src, p.tgt) for p in pairs], variant, epsilon)


def evaluate_split(graph, params, pairs, variant, epsilon):
    """``(loss, best macro F1, threshold)`` for ``pairs``."""
    from .metrics import best_macro_f1

    scores = score_pairs(graph, params, pairs, variant, epsilon)
    labels = [p.label for p in pairs]
    loss = bce_loss(scores, labels)
    f1, thr = best_macro_f1(scores, labels)
    return loss, f1, thr


def train(graph, splits, config, params=None, full_partition=None, on_epoch=None):
    """Minibatch training with early stopping on validation macro F1.

    Returns ``(params, log)`` where ``params`` are those of the best
    validation epoch.  ``graph`` must come from :func:`build_graph` with the
    same ablation as ``config``.
    """
    from .model import loss_and_grads, pair_indices

    variant = variant_for(config)
    epsilon = None if config.ablation == "profiling_only" else config.epsilon
    config.validate(None if config.ablation == "profiling_only" else graph.partition)
    params = params.copy() if params is not None else new_params(graph, config, full_partition)
    train_pairs = splits["train"]
    val_pairs = splits.get("val") or []
    if not train_pairs:
        raise ConfigError("empty training split")
    src_all, tgt_all = pair_indices(graph, [(p.src, p.tgt) for p in train_pairs])
    labels_all = np.array([p.label for p in train_pairs], dtype=np.float64)

    opt = make_optimizer(config)
    rng = np.random.default_rng(config.seed + 7919)
    log_ = TrainLog()
    best = (-1.0, None, None)
    stale = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_pairs))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            b = order[start:start + config.batch_size]
            view, src, tgt = graph.batch_view(src_all[b], tgt_all[b], params.meta["n_layers"])
            loss, grads = loss_and_grads(view, params, src, tgt, labels_all[b], variant, epsilon)
            if not math.isfinite(loss):
                raise TrainingDivergence(f"loss became {loss} at epoch {epoch}")
            opt.step(params, grads)
            total += loss * len(b)
            count += len(b)
        params.check_finite()
        log_.add(epoch, "train", total / count, float("nan"), float("nan"))
        if val_pairs:
            vloss, vf1, vthr = evaluate_split(graph, params, val_pairs, variant, epsilon)
            log_.add(epoch, "val", vloss, vf1, vthr)
            if vf1 > best[0]:
                best, stale = (vf1, epoch, params.copy()), 0
            else:
                stale += 1
        if on_epoch is not None:
            on_epoch(epoch, log_)
        if val_pairs and stale >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best[1])
            break
    if best[2] is not None:
        params = best[2]
    params.meta["best_epoch"] = best[1]
    if val_pairs:
        vloss, vf1, vthr = evaluate_split(graph, params, val_pairs, variant, epsilon)
        log_.add("final", "val", vloss, vf1, vthr)
    return params, log_


# learning-rate search ---------------------------------------------------------


def binary_search_lr(score_fn, lo=0.001, hi=0.1, min_width=0.002):
    """Interval-halving search for the best learning rate.

    Each round scores the midpoint and both quarter points, then keeps the
    half-width interval centred on the best of them.  Stops once the interval
    is narrower than ``min_width`` and returns the best rate seen (ties go to
    the smallest rate).  Returns ``(rate, history)``.
    """
    cache = {}

    def score(x):
        if x not in cache:
            cache[x] = float(score_fn(x))
        return cache[x]

    history = []
    while hi - lo >= min_width:
        width = hi - lo
        points = [lo + width / 4, lo + width / 2, lo + 3 * width / 4]
        values = [score(x) for x in points]
        best = max(range(3), key=lambda k: (values[k], -points[k]))
        history.append((lo, hi, points, values))
        if best == 0:
            hi = points[1]
        elif best == 2:
            lo = points[1]
        else:
            lo, hi = points[0], points[2]
    rate = max(cache, key=lambda x: (cache[x], -x))
    return rate, history


def lr_search(graph, splits, config, full_partition=None, lo=0.001, hi=0.1, min_width=0.002):
    """Pick a learning rate by mean cross-validated macro F1 on the non-test pairs."""
    pool = sorted(splits["train"] + splits.get("val", []))
    folds = kfold(pool, config.cv_folds, config.seed)
    variant = variant_for(config)
    epsilon = None if config.ablation == "profiling_only" else config.epsilon

    def cv_score(rate):
        cfg = dataclasses.replace(config, learning_rate=rate, epochs=config.lr_search_epochs)
        scores = []
        for fold_train, held in folds:
            params, _ = train(graph, {"train": fold_train, "val": held}, cfg, full_partition=full_partition)
            scores.append(evaluate_split(graph, params, held, variant, epsilon)[1])
        f = float(np.mean(scores))
        log.info("lr %.5f -> cv macro F1 %.4f", rate, f)
        return f

    return binary_search_lr(cv_score, lo, hi, min_width)


# gradient check ---------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    @property
    def worst(self):
        return max(self.per_tensor, key=self.per_tensor.get) if self.per_tensor else None

    def raise_for_failure(self):
        if not self.passed:
            bad = sorted(k for k, v in self.per_tensor.items() if v >= self.tolerance)
            raise GradCheckFailure(
                f"max relative gradient error {self.max_rel_error:.3e} >= {self.tolerance:g} in {bad}"
            )


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; the floor absorbs entries near zero."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def check_gradients(loss_fn, params, grads, names=None, tolerance=1e-4, step=1e-5):
    """Central differences of ``loss_fn(params)`` against ``grads``, tensor by tensor."""
    work = params.copy()
    per = {}
    for name in names or params.names():
        arr = work.tensors[name]
        numeric = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            fp = loss_fn(work)
            arr[idx] = old - step
            fm = loss_fn(work)
            arr[idx] = old
            numeric[idx] = (fp - fm) / (2 * step)
        per[name] = relative_error(grads[name], numeric)
    return GradCheckReport(max(per.values()) if per else 0.0, per, tolerance)


def grad_check(graph, params, pairs, variant=None, epsilon=None, tolerance=1e-4, step=1e-5,
               grad_fn=None, names=None, raise_on_failure=False):
    """Check the model's loss gradients on ``pairs`` against finite differences.

    ``grad_fn(params)`` replaces the analytic gradients, which is how a
    deliberately broken gradient is injected.
    """
    from .model import Variant, loss_and_grads, loss_value, pair_indices

    variant = variant or Variant()
    src, tgt = pair_indices(graph, [(p.src, p.tgt) for p in pairs])
    labels = np.array([p.label for p in pairs], dtype=np.float64)
    if grad_fn is None:
        _, grads = loss_and_grads(graph, params, src, tgt, labels, variant, epsilon)
    else:
        grads = grad_fn(params)
    report = check_gradients(
        lambda p: loss_value(graph, p, src, tgt, labels, variant, epsilon),
        params, grads, names, tolerance, step,
    )
    if raise_on_failure:
        report.raise_for_failure()
    return report
