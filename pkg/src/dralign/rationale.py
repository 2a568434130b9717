"""Decision-rationale analysis: ablation loss changes, parity scores,
Taylor importances and the per-layer cosine alignment between subgroups.

A subgroup argument may be a :class:`~dralign.data.DatasetTable`, a
:class:`~dralign.data.SubgroupView` or a plain ``(X, y)`` pair.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Node, Tape
from .data import as_xy as _xy
from .network import EPS, BoundParams, MlpParams, batch_classification_loss, bind, cross_entropy, predict, zero_weight

log = logging.getLogger(__name__)

Objective = Callable[[object, np.ndarray, np.ndarray], float]


def _ablate(params, k: int):
    if isinstance(params, MlpParams):
        return zero_weight(params, k)
    w = np.array(params, dtype=np.float64)
    if not 0 <= k < w.size:
        raise IndexError(f"weight index {k} out of range")
    w.flat[k] = 0.0
    return w


def _mlp_objective(params: MlpParams, X, y) -> float:
    return cross_entropy(predict(params, X), y)


def exact_loss_change(params, k: int, subgroup, objective: Objective | None = None) -> float:
    """|J(F, P) - J(F with w_k = 0, P)|^2 by brute-force ablation.

    ``objective(params, X, y)`` defaults to the mean cross-entropy of the MLP;
    any other model can be plugged in by passing its own objective together
    with a flat weight array as ``params``.
    """
    X, y = _xy(subgroup)
    objective = objective or _mlp_objective
    before = objective(params, X, y)
    after = objective(_ablate(params, k), X, y)
    return (before - after) ** 2


def exact_parity(params, k: int, subgroup0, subgroup1, objective: Objective | None = None) -> float:
    """d_k = |c_k(P0) - c_k(P1)|^2."""
    c0 = exact_loss_change(params, k, subgroup0, objective)
    c1 = exact_loss_change(params, k, subgroup1, objective)
    return (c0 - c1) ** 2


def _bce_columns(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    # mean cross-entropy over axis 0, one value per remaining column
    p = np.clip(p, EPS, 1.0 - EPS)
    y = y.reshape((-1,) + (1,) * (p.ndim - 1))
    return np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)), axis=0)


def loss_changes(params: MlpParams, subgroup, max_elems: int = 1 << 22) -> np.ndarray:
    """c_k for every weight, via incremental re-evaluation.

    Removing w_ij of layer l only perturbs unit j's pre-activation, so the
    cached activations up to layer l are reused and only the tail of the
    network is re-run, batched over the row index i.
    """
    X, y = _xy(subgroup)
    n_layers = params.n_layers
    acts, pres = [X], []
    for layer in range(n_layers):
        z = acts[-1] @ params.layer_weight(layer) + params.biases[layer]
        pres.append(z)
        acts.append(np.maximum(z, 0.0) if layer < n_layers - 1 else expit(z))
    base = float(_bce_columns(acts[-1][:, 0], y))

    def tail(layer: int, j: int, zj: np.ndarray) -> np.ndarray:
        if layer == n_layers - 1:
            return _bce_columns(expit(zj), y)
        dh = np.maximum(zj, 0.0) - acts[layer + 1][:, j:j + 1]
        z = pres[layer + 1][:, None, :] + dh[:, :, None] * params.layer_weight(layer + 1)[j]
        for nxt in range(layer + 1, n_layers):
            if nxt < n_layers - 1:
                z = np.maximum(z, 0.0) @ params.layer_weight(nxt + 1) + params.biases[nxt + 1]
            else:
                return _bce_columns(expit(z[..., 0]), y)
        raise AssertionError("unreachable")

    out = np.empty(params.weights.size)
    n = X.shape[0]
    for layer, K in enumerate(params.layer_index_sets):
        W = params.layer_weight(layer)
        fan_in, fan_out = W.shape
        width = params.spec.dims[layer + 2] if layer + 1 < n_layers else 1
        chunk = max(1, max_elems // max(1, n * width))
        after = np.empty((fan_in, fan_out))
        for j in range(fan_out):
            for s in range(0, fan_in, chunk):
                rows = slice(s, min(fan_in, s + chunk))
                zj = pres[layer][:, j:j + 1] - acts[layer][:, rows] * W[rows, j]
                after[rows, j] = tail(layer, j, zj)
        out[K.start:K.stop] = ((base - after) ** 2).reshape(-1)
    return out


@dataclass
class ParityReport:
    """Exact per-weight parity of one model on two subgroups."""

    c0: np.ndarray
    c1: np.ndarray
    layer_index_sets: list[range]
    similarities: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> np.ndarray:
        return (self.c0 - self.c1) ** 2

    @property
    def d_F(self) -> float:
        return float(self.d.sum())

    @property
    def d_F_l1(self) -> float:
        """L1 norm of c0 - c1, the alternative aggregate."""
        return float(np.abs(self.c0 - self.c1).sum())

    @property
    def similarity_sum(self) -> float:
        return float(sum(self.similarities))

    def layer_of(self) -> np.ndarray:
        out = np.empty(self.c0.size, dtype=np.int64)
        for layer, K in enumerate(self.layer_index_sets):
            out[K.start:K.stop] = layer
        return out

    def to_csv(self, path) -> None:
        layers = self.layer_of()
        d = self.d
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "param_index", "c0", "c1", "d_k"])
            for k in range(self.c0.size):
                w.writerow([int(layers[k]), k, repr(float(self.c0[k])), repr(float(self.c1[k])), repr(float(d[k]))])
            w.writerow([])
            w.writerow(["summary", "value"])
            w.writerow(["d_F", repr(self.d_F)])
            w.writerow(["d_F_l1", repr(self.d_F_l1)])
            for layer, s in enumerate(self.similarities):
                w.writerow([f"S_{layer}", repr(float(s))])
            w.writerow(["sum_S", repr(self.similarity_sum)])
            for key, val in self.meta.items():
                w.writerow([key, val])


def network_parity(params: MlpParams, subgroup0, subgroup1) -> ParityReport:
    """All d_k plus the Taylor-based layer similarities on the same data.

    Costs one (incremental) forward pass per weight: analysis only.
    """
    c0 = loss_changes(params, subgroup0)
    c1 = loss_changes(params, subgroup1)
    sims = similarity_profile(params, subgroup0, subgroup1)
    return ParityReport(c0, c1, params.layer_index_sets, sims)


# -- Taylor importance -------------------------------------------------------


@dataclass
class ImportanceVector:
    """Per-layer importances for one subgroup (tape nodes or arrays)."""

    layers: list
    key: tuple = ()
    normalized: bool = False

    def values(self) -> list[np.ndarray]:
        return [np.asarray(x.value if isinstance(x, Node) else x, dtype=np.float64) for x in self.layers]

    def __len__(self) -> int:
        return len(self.layers)


def taylor_scores(loss: Node, weights: Sequence[Node]) -> list[Node]:
    """(dL/dw * w)^2 for each weight node; stays differentiable."""
    grads = ad.gradient(loss.tape, loss, list(weights))
    return [ad.square(g * w) for g, w in zip(grads, weights)]


def taylor_importance(params: MlpParams | BoundParams, X, y=None, tape: Tape | None = None,
                      key: tuple = ()) -> ImportanceVector:
    """Taylor importance of every multiplicative weight on one batch.

    ``X`` may also be a subgroup object, in which case ``y`` is taken from it.
    """
    if y is None:
        X, y = _xy(X)
    if isinstance(params, MlpParams):
        bound = bind(params, tape or Tape())
    else:
        bound = params
    loss = batch_classification_loss(bound, X, y)
    return ImportanceVector(taylor_scores(loss, bound.weights), key)


def _normalize_layer(c):
    if isinstance(c, Node):
        norm = float(np.sqrt(np.sum(np.square(c.value))))
        if norm == 0.0:
            return c
        return c / ad.sqrt(ad.reduce_sum(ad.square(c)))
    c = np.asarray(c, dtype=np.float64)
    norm = np.linalg.norm(c)
    return c if norm == 0.0 else c / norm


def layer_normalize(raw: ImportanceVector) -> ImportanceVector:
    """Scale each layer to unit Euclidean norm; all-zero layers pass through."""
    return ImportanceVector([_normalize_layer(c) for c in raw.layers], raw.key, True)


@dataclass
class Alignment:
    loss: Node | float
    similarities: list[float]

    @property
    def similarity_sum(self) -> float:
        return float(sum(self.similarities))


def _is_zero(c) -> bool:
    v = c.value if isinstance(c, Node) else np.asarray(c)
    return not np.any(v)


def alignment_loss(imp0: ImportanceVector, imp1: ImportanceVector, last: int | None = None) -> Alignment:
    """-sum_l cos(c_l^0, c_l^1), optionally over the last ``last`` layers only.

    A layer where either vector is all zero counts as perfectly aligned
    (similarity 1, no gradient).  Works on tape nodes and on plain arrays.
    """
    if len(imp0) != len(imp1):
        raise ValueError("importance vectors have different layer counts")
    layers = range(len(imp0))
    if last is not None:
        if not 1 <= last <= len(imp0):
            raise ValueError(f"last must be in [1, {len(imp0)}]")
        layers = layers[-last:]
    n0, n1 = layer_normalize(imp0), layer_normalize(imp1)
    terms, sims = [], []
    for layer in layers:
        u, v = n0.layers[layer], n1.layers[layer]
        ushape = u.shape if isinstance(u, Node) else np.shape(u)
        vshape = v.shape if isinstance(v, Node) else np.shape(v)
        if ushape != vshape:
            raise ValueError(f"layer {layer} shape mismatch: {ushape} vs {vshape}")
        if _is_zero(u) or _is_zero(v):
            log.warning("layer %d has an all-zero importance vector; similarity set to 1", layer)
            sims.append(1.0)
            terms.append(1.0)
            continue
        if isinstance(u, Node) or isinstance(v, Node):
            tape = u.tape if isinstance(u, Node) else v.tape
            s = ad.reduce_sum(tape._lift(u) * v)
            sims.append(float(s.value))
        else:
            s = float(np.sum(u * v))
            sims.append(s)
        terms.append(s)
    tape_terms = [t for t in terms if isinstance(t, Node)]
    const = sum(t for t in terms if not isinstance(t, Node))
    if tape_terms:
        loss = -(ad.total(tape_terms) + const) if const else -ad.total(tape_terms)
    else:
        loss = -float(const)
    return Alignment(loss, sims)


def cosine_similarities(imp0: ImportanceVector, imp1: ImportanceVector) -> list[float]:
    """Per-layer S_l as floats."""
    return alignment_loss(ImportanceVector(imp0.values()), ImportanceVector(imp1.values())).similarities


def similarity_profile(params: MlpParams, subgroup0, subgroup1) -> list[float]:
    """S_l between the Taylor importances of two subgroups."""
    tape = Tape()
    bound = bind(params, tape)
    imp0 = taylor_importance(bound, *_xy(subgroup0))
    imp1 = taylor_importance(bound, *_xy(subgroup1))
    return cosine_similarities(imp0, imp1)


# -- neuron-level characterization -----------------------------------------


def prediction_gap(params, k: int, subgroup0, subgroup1,
                   predict_fn: Callable | None = None) -> float:
    """|E_P0 F(x; w_k=0) - E_P1 F(x; w_k=0)|^2."""
    predict_fn = predict_fn or predict
    ablated = _ablate(params, k)
    X0 = subgroup0 if isinstance(subgroup0, np.ndarray) else _xy(subgroup0)[0]
    X1 = subgroup1 if isinstance(subgroup1, np.ndarray) else _xy(subgroup1)[0]
    m0 = float(np.mean(predict_fn(ablated, X0)))
    m1 = float(np.mean(predict_fn(ablated, X1)))
    return (m0 - m1) ** 2


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries; ties go to the lower index."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if not 1 <= k <= values.size:
        raise ValueError(f"k={k} outside [1, {values.size}]")
    return np.argsort(-values, kind="stable")[:k]


def top_k_overlap(imp0, imp1, k: int) -> list[float]:
    """Per-layer Jaccard overlap of the top-k importance index sets."""
    v0 = imp0.values() if isinstance(imp0, ImportanceVector) else [np.asarray(x) for x in imp0]
    v1 = imp1.values() if isinstance(imp1, ImportanceVector) else [np.asarray(x) for x in imp1]
    if len(v0) != len(v1):
        raise ValueError("importance vectors have different layer counts")
    out = []
    for a, b in zip(v0, v1):
        s0, s1 = set(top_k_indices(a, k).tolist()), set(top_k_indices(b, k).tolist())
        out.append(len(s0 & s1) / len(s0 | s1))
    return out
