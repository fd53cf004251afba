"""Losses, negative sampling, Adam, metrics and the early-stopped training loop."""
from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .context import ContextStore
from .errors import ConfigError, ContractViolation, IntegrityError, NonFiniteError
from .graph import HeteroGraph
from .model import ModelConfig, forward, init_params

log = logging.getLogger(__name__)

# Search space used for tuning; runs over it are scripted by the user.
HYPERPARAMETER_GRID = {
    "metapath_length": [1, 2, 3, 4, 5],
    "num_layers": [1, 2, 3, 4, 5],
    "dropout": [0.0, 0.5],
    "learning_rate": [1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2],
    "weight_decay": [0.0, 1e-3],
}


def grid_points():
    keys = list(HYPERPARAMETER_GRID)
    for values in itertools.product(*(HYPERPARAMETER_GRID[k] for k in keys)):
        yield dict(zip(keys, values))


@dataclass
class TrainConfig:
    learning_rate: float = 5e-3
    weight_decay: float = 0.0
    max_epochs: int = 500
    patience: int = 50
    negatives_per_positive: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be non-negative")
        if self.max_epochs < 1 or self.patience < 1 or self.patience > self.max_epochs:
            raise ConfigError("need 1 <= patience <= max_epochs")
        if self.negatives_per_positive < 1:
            raise ConfigError("negatives_per_positive must be >= 1")


@dataclass
class SplitSpec:
    """Supervision for one task.

    Node classification fills ``target_type``, ``nodes`` and ``labels`` (split name
    -> global node ids / class ids) and ``num_classes``. Link prediction fills
    ``edges`` (split -> (k, 2) global id pairs) and ``negatives`` for valid/test.
    """

    task: str
    target_type: Optional[int] = None
    nodes: dict = field(default_factory=dict)
    labels: dict = field(default_factory=dict)
    num_classes: int = 0
    edges: dict = field(default_factory=dict)
    negatives: dict = field(default_factory=dict)

    def validate(self, g: HeteroGraph) -> None:
        if self.task == "node_classification":
            seen = set()
            for split in ("train", "valid", "test"):
                nodes = np.asarray(self.nodes.get(split, []), dtype=np.int64)
                labels = np.asarray(self.labels.get(split, []), dtype=np.int64)
                if len(nodes) != len(labels):
                    raise IntegrityError(f"{split}: {len(nodes)} nodes but {len(labels)} labels")
                if len(nodes) and (nodes.min() < 0 or nodes.max() >= g.num_nodes):
                    raise IntegrityError(f"{split}: node id out of range")
                if len(nodes) and np.any(g.node_type[nodes] != self.target_type):
                    raise IntegrityError(f"{split}: labelled nodes must all have the target type")
                if np.any(labels < 0) or np.any(labels >= self.num_classes):
                    raise IntegrityError(f"{split}: label outside [0, {self.num_classes})")
                overlap = seen.intersection(nodes.tolist())
                if overlap:
                    raise IntegrityError(f"{split} overlaps an earlier split ({len(overlap)} nodes)")
                seen.update(nodes.tolist())
            if not len(self.nodes.get("train", [])):
                raise IntegrityError("no training nodes")
        elif self.task == "link_prediction":
            seen = set()
            for split in ("train", "valid", "test"):
                e = np.asarray(self.edges.get(split, np.zeros((0, 2))), dtype=np.int64).reshape(-1, 2)
                pairs = set(map(tuple, e.tolist()))
                if seen & pairs:
                    raise IntegrityError(f"{split} edges overlap an earlier split")
                seen |= pairs
                if split != "train":
                    neg = np.asarray(self.negatives.get(split, np.zeros((0, 2)))).reshape(-1, 2)
                    if len(neg) != len(e):
                        raise IntegrityError(f"{split}: {len(neg)} negatives for {len(e)} positives")
            if not len(self.edges.get("train", [])):
                raise IntegrityError("no training edges")
        else:
            raise ConfigError(f"unknown task {self.task!r}")


# ------------------------------------------------------------------ losses

def nc_loss(logits, labels):
    """Mean cross-entropy over the labelled training rows."""
    return ad.softmax_cross_entropy(logits, labels)


def sample_negatives(g: HeteroGraph, positives, rng: np.random.Generator, per_positive: int = 1,
                     dst_type: Optional[int] = None) -> np.ndarray:
    """Replace each positive's destination by a node drawn uniformly, with
    replacement, from the destination's type (inferred from the first positive
    unless given). Negatives of one positive are adjacent in the output."""
    positives = np.asarray(positives, dtype=np.int64).reshape(-1, 2)
    if not len(positives):
        return np.zeros((0, 2), dtype=np.int64)
    if dst_type is None:
        dst_type = int(g.node_type[positives[0, 1]])
    n = g.num_nodes_of(dst_type)
    if n == 0:
        raise ContractViolation("destination node type has no nodes")
    draws = rng.integers(0, n, size=(len(positives), per_positive)) + g.type_offsets[dst_type]
    src = np.repeat(positives[:, 0], per_positive)
    return np.stack([src, draws.reshape(-1)], axis=1)


def _endpoint_rows(g, h, nodes):
    t = int(g.node_type[nodes[0]])
    return h[t], nodes - g.type_offsets[t]


def edge_scores(g: HeteroGraph, h: list, w_lp, pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    hs, iu = _endpoint_rows(g, h, pairs[:, 0])
    hd, iv = _endpoint_rows(g, h, pairs[:, 1])
    return ad.distmult(ad.gather(hs, iu), ad.gather(hd, iv), w_lp)


def lp_loss(g: HeteroGraph, h: list, w_lp, positives, negatives):
    """Negative-sampling binary cross-entropy with DistMult scores. Every positive
    carries the same number of negatives, so the per-positive mean over its
    negatives averages to the overall negative mean."""
    positives = np.asarray(positives).reshape(-1, 2)
    if not len(positives):
        raise ContractViolation("lp_loss needs at least one positive edge")
    pos = edge_scores(g, h, w_lp, positives)
    neg = edge_scores(g, h, w_lp, negatives)
    return ad.bce_with_logits(pos, neg)


# --------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """One Adam update with decoupled weight decay, applied in place."""
    state.step += 1
    lr, wd = config.learning_rate, config.weight_decay
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if wd:
            p.data -= lr * wd * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


# ----------------------------------------------------------------- metrics

def evaluate_f1(logits, labels, num_classes: Optional[int] = None) -> tuple:
    """(macro-F1, micro-F1) of argmax predictions; a class absent from both
    predictions and truth scores F1 = 0 in the macro average."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not len(labels):
        raise ContractViolation("evaluate_f1 on an empty set")
    C = num_classes or logits.shape[1]
    pred = logits.argmax(axis=1)
    f1s = []
    for c in range(C):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    micro = float(np.mean(pred == labels))
    return float(np.mean(f1s)), micro


def evaluate_auc(pos_scores, neg_scores) -> float:
    """P(s+ > s-) + 0.5 P(s+ = s-), via average ranks (Mann-Whitney U)."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if not len(pos) or not len(neg):
        raise ContractViolation("evaluate_auc needs at least one score on each side")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


# -------------------------------------------------------------- evaluation

def evaluate(g, store, params, config: ModelConfig, splits: SplitSpec, split: str) -> dict:
    """Evaluation-mode metrics and loss on one split."""
    h = forward(g, store, params, config, training=False)
    if splits.task == "node_classification":
        nodes = np.asarray(splits.nodes[split], dtype=np.int64)
        labels = np.asarray(splits.labels[split], dtype=np.int64)
        logits = h[splits.target_type].data[nodes - g.type_offsets[splits.target_type]]
        macro, micro = evaluate_f1(logits, labels, splits.num_classes)
        loss = float(ad.softmax_cross_entropy(logits, labels).data)
        return {"macro_f1": macro, "micro_f1": micro, "loss": loss}
    w = params["lp/w"]
    pos = edge_scores(g, h, w, splits.edges[split]).data
    neg = edge_scores(g, h, w, splits.negatives[split]).data
    loss = float(ad.bce_with_logits(pos, neg).data)
    return {"roc_auc": evaluate_auc(pos, neg), "loss": loss}


def primary_metric(task: str) -> str:
    return "macro_f1" if task == "node_classification" else "roc_auc"


@dataclass
class TrainResult:
    params: dict
    history: list
    best_epoch: int
    best_metric: float


def _snapshot(params):
    return {k: ad.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


def train_loss(g, store, params, model_config, splits, training, dropout_rng, neg_rng, train_config):
    """Build the training objective for one epoch (call inside a Tape)."""
    h = forward(g, store, params, model_config, training=training, rng=dropout_rng)
    if splits.task == "node_classification":
        t = splits.target_type
        rows = np.asarray(splits.nodes["train"], dtype=np.int64) - g.type_offsets[t]
        return nc_loss(ad.gather(h[t], rows), splits.labels["train"])
    positives = np.asarray(splits.edges["train"], dtype=np.int64)
    negatives = sample_negatives(g, positives, neg_rng, train_config.negatives_per_positive)
    return lp_loss(g, h, params["lp/w"], positives, negatives)


def train(g: HeteroGraph, store: ContextStore, splits: SplitSpec, model_config: ModelConfig,
          train_config: TrainConfig, params: Optional[dict] = None, on_epoch=None) -> TrainResult:
    """Full-batch training with early stopping on the validation metric.

    An epoch counts as an improvement when the validation metric rises, or when it
    ties the best so far and the validation loss drops. Training stops after
    ``patience`` epochs without improvement; the best epoch's parameters are
    returned.
    """
    if model_config.task != splits.task:
        raise ConfigError(f"model task {model_config.task!r} does not match splits task {splits.task!r}")
    if params is None:
        params = init_params(g, store, model_config)
    dropout_rng = np.random.default_rng([train_config.seed, 1])
    neg_rng = np.random.default_rng([train_config.seed, 2])
    metric_name = primary_metric(splits.task)
    has_valid = splits.task == "node_classification" and len(splits.nodes.get("valid", [])) or (
        splits.task == "link_prediction" and len(splits.edges.get("valid", []))
    )
    state = AdamState()
    leaves = [params[k] for k in sorted(params)]
    history = []
    best = (-np.inf, np.inf)
    best_epoch, best_params, stale = 0, _snapshot(params), 0
    for epoch in range(1, train_config.max_epochs + 1):
        t0 = time.perf_counter()
        try:
            with ad.Tape() as tape:
                loss = train_loss(g, store, params, model_config, splits, True, dropout_rng, neg_rng, train_config)
            grads = ad.backward(tape, loss, leaves)
        except NonFiniteError as exc:
            raise NonFiniteError(f"epoch {epoch}: {exc}") from None
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise NonFiniteError(f"epoch {epoch}: training loss is {loss_value}")
        adam_step(params, {k: grads[params[k]] for k in params}, state, train_config)
        if has_valid:
            metrics = evaluate(g, store, params, model_config, splits, "valid")
            score = (metrics[metric_name], -metrics["loss"])
        else:
            metrics = {metric_name: float("nan")}
            score = (0.0, -loss_value)
        record = {
            "epoch": epoch,
            "train_loss": loss_value,
            "valid_metric": metrics[metric_name],
            "seconds": time.perf_counter() - t0,
        }
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if score > best:
            best, best_epoch, best_params, stale = score, epoch, _snapshot(params), 0
        else:
            stale += 1
            if stale >= train_config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    best_metric = history[best_epoch - 1]["valid_metric"] if best_epoch else float("nan")
    return TrainResult(best_params, history, best_epoch, best_metric)
