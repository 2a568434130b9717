"""Training loops: ERM, oversampling, fairness-regularized and rationale-aligned.

All subgroup-paired methods build, per step,

    L = L_cls + lam * L_fair + beta * L_align

where ``L_cls`` is the *sum* of the per-subgroup batch means and ``L_align``
is minus the summed per-layer cosine similarity between the subgroups'
Taylor importance vectors.  ``L_align`` contains first-order gradients, so
its own gradient goes through a second backward pass on the same tape.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .data import CELLS, DatasetTable, as_xy
from .metrics import (SubgroupPredictions, average_precision, hard_dp, hard_eo, relaxed_dp,
                      relaxed_eo, relaxed_eop, relaxed_pp)
from .network import MlpParams, MlpSpec, bind, cross_entropy_node, forward, init, predict
from .rationale import Alignment, ImportanceVector, alignment_loss, similarity_profile, taylor_scores

log = logging.getLogger(__name__)

METHODS = ("erm", "oversample", "fairreg", "dralign")
METRICS = ("dp", "eo", "eop", "pp")

# subgroup pairs whose rationales are aligned, per fairness metric
ALIGN_PAIRS = {
    "dp": [((0,), (1,))],
    "eo": [((0, 0), (1, 0)), ((0, 1), (1, 1))],
    "eop": [((0, 1), (1, 1))],
    "pp": [((0, 0), (1, 0)), ((0, 1), (1, 1))],
}


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    method: str = "erm"
    metric: str = "dp"
    lam: float = 0.0
    beta: float = 0.0
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 1000
    seed: int = 0
    hidden_dims: tuple = (200, 200)
    layer_mask: int | None = None
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batching: str | None = None
    selection: str = "last"

    def __post_init__(self):
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lam and beta must be non-negative")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.selection not in ("last", "best_ap"):
            raise ValueError("selection must be 'last' or 'best_ap'")
        if self.batching not in (None, "pooled", "paired"):
            raise ValueError("batching must be 'pooled' or 'paired'")
        if self.method == "fairreg" and self.lam == 0:
            log.info("fairreg with lam=0 is ERM on subgroup-paired batches")
        if self.method == "dralign" and self.beta == 0:
            log.info("dralign with beta=0 reduces to fairreg")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**doc)

    @property
    def sampling(self) -> str:
        if self.method == "oversample":
            return "oversample"
        if self.method == "erm" and self.batching != "paired":
            return "pooled"
        return "paired" if self.metric == "dp" else "cells"

    @property
    def fair_weight(self) -> float:
        return self.lam if self.method in ("fairreg", "dralign") else 0.0

    @property
    def align_weight(self) -> float:
        return self.beta if self.method == "dralign" else 0.0


# -- optimizers --------------------------------------------------------------


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return x - self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return Sgd(config.learning_rate)
    return Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)


# -- sampling ----------------------------------------------------------------


def sample_subgroup(data: DatasetTable, a: int, B: int, rng: np.random.Generator) -> DatasetTable:
    """B rows with attribute ``a``, uniformly with replacement."""
    rows = np.flatnonzero(data.mask(a))
    if rows.size == 0:
        raise ValueError(f"no rows with a={a}")
    return data.take(rows[rng.integers(0, rows.size, size=B)])


def sample_subgroup_labeled(data: DatasetTable, a: int, y: int, B: int,
                            rng: np.random.Generator) -> DatasetTable:
    """B rows from cell (a, y), uniformly with replacement."""
    rows = np.flatnonzero(data.mask(a, y))
    if rows.size == 0:
        raise ValueError(f"no rows with a={a}, y={y}")
    return data.take(rows[rng.integers(0, rows.size, size=B)])


def sample_oversampled(data: DatasetTable, B: int, rng: np.random.Generator) -> DatasetTable:
    """B rows where each row comes from either attribute group with probability 1/2."""
    groups = [np.flatnonzero(data.mask(a)) for a in (0, 1)]
    if any(g.size == 0 for g in groups):
        raise ValueError("oversampling needs both attribute groups")
    pick = rng.random(B) < 0.5
    rows = np.where(pick,
                    groups[0][rng.integers(0, groups[0].size, size=B)],
                    groups[1][rng.integers(0, groups[1].size, size=B)])
    return data.take(rows)


def steps_per_epoch(data_size: int, batch_size: int) -> int:
    return -(-data_size // batch_size)


# -- loss construction -------------------------------------------------------


@dataclass
class LossTerms:
    total: Node
    cls: Node
    fair: Node | None
    alignment: Alignment | None

    def record(self) -> "StepRecord":
        return StepRecord(
            float(self.total.value), float(self.cls.value),
            float(self.fair.value) if self.fair is not None else math.nan,
            self.alignment.similarity_sum if self.alignment is not None else math.nan,
        )


@dataclass
class StepRecord:
    loss: float
    cls: float
    fair: float
    similarity_sum: float


def _combine(cls, fair, lam, align, beta):
    total = cls
    if lam > 0:
        total = total + lam * fair
    if beta > 0:
        total = total + beta * align.loss
    return total


def _pair_alignment(imps: dict, pairs, last) -> Alignment:
    parts = [alignment_loss(imps[p0], imps[p1], last) for p0, p1 in pairs]
    nodes = [p.loss for p in parts if isinstance(p.loss, Node)]
    const = sum(p.loss for p in parts if not isinstance(p.loss, Node))
    loss = (ad.total(nodes) + const) if nodes else const
    return Alignment(loss, [s for p in parts for s in p.similarities])


def dp_loss(bound, batch0, batch1, lam: float = 0.0, beta: float = 0.0,
            layer_mask: int | None = None, with_alignment: bool | None = None) -> LossTerms:
    """Loss for subgroup-paired DP training on one pair of batches."""
    (X0, y0), (X1, y1) = as_xy(batch0), as_xy(batch1)
    p0, p1 = forward(bound, X0), forward(bound, X1)
    cls0, cls1 = cross_entropy_node(p0, y0), cross_entropy_node(p1, y1)
    cls = cls0 + cls1
    fair = relaxed_dp(ad.mean(p0), ad.mean(p1))
    align = None
    if with_alignment or (with_alignment is None and beta > 0):
        imps = {(a,): ImportanceVector(taylor_scores(c, bound.weights), (a,))
                for a, c in ((0, cls0), (1, cls1))}
        align = _pair_alignment(imps, ALIGN_PAIRS["dp"], layer_mask)
    return LossTerms(_combine(cls, fair, lam, align, beta), cls, fair, align)


def cell_loss(bound, batches: dict, metric: str = "eo", lam: float = 0.0, beta: float = 0.0,
              counts: dict | None = None, layer_mask: int | None = None,
              with_alignment: bool | None = None) -> LossTerms:
    """Loss for the four-cell (a, y) sampling used by EO, EOP and PP."""
    probs, cls_terms = {}, {}
    for cell in CELLS:
        if cell not in batches:
            raise ValueError(f"missing batch for cell {cell}")
        X, y = as_xy(batches[cell])
        probs[cell] = forward(bound, X)
        cls_terms[cell] = cross_entropy_node(probs[cell], y)
    cls = ad.total([cls_terms[c] for c in CELLS])
    means = {c: ad.mean(probs[c]) for c in CELLS}
    if metric == "eo":
        fair = relaxed_eo(means)
    elif metric == "eop":
        fair = relaxed_eop(means[0, 1], means[1, 1])
    elif metric == "pp":
        if counts is None:
            counts = {c: len(as_xy(batches[c])[1]) for c in CELLS}
        fair = relaxed_pp(means, counts)
    else:
        raise ValueError(f"cell_loss does not handle metric {metric!r}")
    align = None
    if with_alignment or (with_alignment is None and beta > 0):
        pairs = ALIGN_PAIRS[metric]
        needed = {c for pair in pairs for c in pair}
        imps = {c: ImportanceVector(taylor_scores(cls_terms[c], bound.weights), c) for c in sorted(needed)}
        align = _pair_alignment(imps, pairs, layer_mask)
    return LossTerms(_combine(cls, fair, lam, align, beta), cls, fair, align)


def pooled_loss(bound, batch) -> LossTerms:
    X, y = as_xy(batch)
    cls = cross_entropy_node(forward(bound, X), y)
    return LossTerms(cls, cls, None, None)


def _apply_update(params: MlpParams, bound, terms: LossTerms, optimizer) -> MlpParams:
    value = float(terms.total.value)
    if not math.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss {value}: cls={float(terms.cls.value)}, "
            f"fair={None if terms.fair is None else float(terms.fair.value)}, "
            f"align={None if terms.alignment is None else terms.alignment.similarities}")
    grads = ad.gradient(bound.tape, terms.total, bound.nodes)
    g = np.concatenate([gr.value.reshape(-1) for gr in grads])
    if not np.all(np.isfinite(g)):
        raise TrainingDiverged("non-finite gradient")
    return params.with_flat(optimizer.step(params.flat(), g))


def train_step_dp(params: MlpParams, batch0, batch1, config: TrainConfig, optimizer=None):
    """One update on a pair of attribute batches; returns (params, StepRecord)."""
    optimizer = optimizer or make_optimizer(config)
    bound = bind(params, Tape())
    terms = dp_loss(bound, batch0, batch1, config.fair_weight, config.align_weight, config.layer_mask)
    return _apply_update(params, bound, terms, optimizer), terms.record()


def train_step_eo(params: MlpParams, batches: dict, config: TrainConfig, optimizer=None,
                  counts: dict | None = None):
    """One update on four (a, y) cell batches (EO, or EOP / PP via ``config.metric``)."""
    optimizer = optimizer or make_optimizer(config)
    metric = config.metric if config.metric != "dp" else "eo"
    bound = bind(params, Tape())
    terms = cell_loss(bound, batches, metric, config.fair_weight, config.align_weight,
                      counts, config.layer_mask)
    return _apply_update(params, bound, terms, optimizer), terms.record()


def train_step_pooled(params: MlpParams, batch, config: TrainConfig, optimizer=None):
    optimizer = optimizer or make_optimizer(config)
    bound = bind(params, Tape())
    terms = pooled_loss(bound, batch)
    return _apply_update(params, bound, terms, optimizer), terms.record()


# -- evaluation & history ----------------------------------------------------


def _cell_table(data: DatasetTable, key: tuple):
    mask = data.mask(*key)
    return data.features[mask], data.labels[mask]


def alignment_profile(params: MlpParams, data: DatasetTable, metric: str = "dp") -> list[float]:
    """Per-layer similarities for the subgroup pairs aligned under ``metric``."""
    sims = []
    for k0, k1 in ALIGN_PAIRS[metric]:
        sims.extend(similarity_profile(params, _cell_table(data, k0), _cell_table(data, k1)))
    return sims


def relaxed_value(params: MlpParams, data: DatasetTable, metric: str) -> float:
    p = predict(params, data.features)
    m = {c: float(np.mean(p[data.mask(*c)])) if data.mask(*c).any() else math.nan for c in CELLS}
    if metric == "dp":
        return float(relaxed_dp(np.mean(p[data.mask(0)]), np.mean(p[data.mask(1)])))
    if metric == "eo":
        return float(relaxed_eo(m))
    if metric == "eop":
        return float(relaxed_eop(m[0, 1], m[1, 1]))
    return float(relaxed_pp(m, data.cell_counts()))


def _safe(fn, *args) -> float:
    try:
        return float(fn(*args))
    except ValueError:
        return math.nan


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    fairness: float
    similarity_sum: float
    val_ap: float
    hard_dp: float
    hard_eo: float


@dataclass
class RunHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def to_csv(self, path) -> None:
        names = [f.name for f in fields(EpochRecord)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.records:
                w.writerow([repr(v) if isinstance(v, float) else v for v in asdict(r).values()])


def _epoch_eval(params: MlpParams, data: DatasetTable, metric: str):
    p = predict(params, data.features)
    preds = SubgroupPredictions(p, data.labels, data.attrs)
    sims = _safe(lambda: sum(alignment_profile(params, data, metric)))
    return (_safe(average_precision, p, data.labels), _safe(hard_dp, preds),
            _safe(hard_eo, preds), relaxed_value(params, data, metric), sims)


def train(data: DatasetTable, config: TrainConfig, val: DatasetTable | None = None):
    """Train from scratch; returns ``(params, RunHistory)``.

    Per-epoch metrics are computed on ``val`` (the training data if omitted).
    """
    sampling = config.sampling
    counts = data.cell_counts()
    if sampling == "cells" and min(counts.values()) == 0:
        raise ValueError(f"cell sampling needs all four (a, y) cells, got {counts}")
    if sampling in ("paired", "oversample") and (counts[0, 0] + counts[0, 1] == 0 or counts[1, 0] + counts[1, 1] == 0):
        raise ValueError("paired sampling needs both attribute groups")

    params = init(MlpSpec(data.n_features, config.hidden_dims), config.seed)
    rng = np.random.default_rng([config.seed, 7919])
    optimizer = make_optimizer(config)
    n_steps = steps_per_epoch(len(data), config.batch_size)
    B = config.batch_size
    eval_data = val if val is not None else data
    history = RunHistory()
    best = (-math.inf, params)

    for epoch in range(config.epochs):
        losses = []
        order = rng.permutation(len(data)) if sampling == "pooled" else None
        for step in range(n_steps):
            if sampling == "pooled":
                batch = data.take(order[step * B:(step + 1) * B])
                params, rec = train_step_pooled(params, batch, config, optimizer)
            elif sampling == "oversample":
                params, rec = train_step_pooled(params, sample_oversampled(data, B, rng), config, optimizer)
            elif sampling == "paired":
                b0 = sample_subgroup(data, 0, B, rng)
                b1 = sample_subgroup(data, 1, B, rng)
                params, rec = train_step_dp(params, b0, b1, config, optimizer)
            else:
                batches = {c: sample_subgroup_labeled(data, *c, B, rng) for c in CELLS}
                params, rec = train_step_eo(params, batches, config, optimizer, counts)
            losses.append(rec.loss)
        ap, dp, eo, relaxed, sims = _epoch_eval(params, eval_data, config.metric)
        history.records.append(EpochRecord(epoch, float(np.mean(losses)), relaxed, sims, ap, dp, eo))
        log.debug("epoch %d loss %.4f ap %.4f dp %.4f S %.3f", epoch, np.mean(losses), ap, dp, sims)
        if config.selection == "best_ap" and ap > best[0]:
            best = (ap, params)
    if config.selection == "best_ap":
        params = best[1]
    return params, history
