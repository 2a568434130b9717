"""Fully-connected binary classifier and its flat weight layout.

Only the multiplicative weights live in the flat vector ``W``; biases are
kept per layer and never take part in parity, importance or alignment.
Layer ``l`` owns the contiguous block ``K_l`` of ``W``, stored row-major
as a ``(fan_in, fan_out)`` matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Node, Tape

EPS = 1e-7


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = ()
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError(f"all layer sizes must be >= 1: {self}")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, 1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        d = self.dims
        return [(d[i], d[i + 1]) for i in range(len(d) - 1)]

    @property
    def n_layers(self) -> int:
        return len(self.hidden_dims) + 1

    @property
    def n_weights(self) -> int:
        return sum(a * b for a, b in self.layer_shapes)


@dataclass
class MlpParams:
    spec: MlpSpec
    weights: np.ndarray
    biases: list[np.ndarray]
    seed: int | None = None
    _offsets: list[int] = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        offsets = [0]
        for a, b in self.spec.layer_shapes:
            offsets.append(offsets[-1] + a * b)
        self._offsets = offsets
        if self.weights.shape != (offsets[-1],):
            raise ValueError(f"expected {offsets[-1]} weights, got {self.weights.shape}")
        if [b.shape for b in self.biases] != [(s[1],) for s in self.spec.layer_shapes]:
            raise ValueError("bias shapes do not match the layer shapes")

    @property
    def n_layers(self) -> int:
        return self.spec.n_layers

    @property
    def layer_index_sets(self) -> list[range]:
        """``K_l``: the flat indices belonging to each layer."""
        o = self._offsets
        return [range(o[i], o[i + 1]) for i in range(len(o) - 1)]

    def layer_weight(self, layer: int) -> np.ndarray:
        """Weight matrix of ``layer`` as a (fan_in, fan_out) view into ``weights``."""
        o = self._offsets
        return self.weights[o[layer]:o[layer + 1]].reshape(self.spec.layer_shapes[layer])

    def locate(self, k: int) -> tuple[int, int, int]:
        """Map flat index ``k`` to ``(layer, row, col)``."""
        if not 0 <= k < self.weights.size:
            raise IndexError(f"weight index {k} out of range [0, {self.weights.size})")
        layer = int(np.searchsorted(self._offsets, k, side="right")) - 1
        fan_out = self.spec.layer_shapes[layer][1]
        row, col = divmod(k - self._offsets[layer], fan_out)
        return layer, row, col

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, self.weights.copy(), [b.copy() for b in self.biases], self.seed)

    def flat(self) -> np.ndarray:
        """All trainable values (weights then biases) as one vector."""
        return np.concatenate([self.weights, *self.biases])

    def with_flat(self, flat: np.ndarray) -> "MlpParams":
        n = self.weights.size
        biases, pos = [], n
        for b in self.biases:
            biases.append(np.array(flat[pos:pos + b.size]))
            pos += b.size
        return MlpParams(self.spec, np.array(flat[:n]), biases, self.seed)

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "spec": {
                "input_dim": self.spec.input_dim,
                "hidden_dims": list(self.spec.hidden_dims),
                "activation": self.spec.activation,
            },
            "weights": [float(w) for w in self.weights],
            "biases": [[float(v) for v in b] for b in self.biases],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpParams":
        spec = MlpSpec(**doc["spec"])
        return cls(spec, np.array(doc["weights"], dtype=np.float64),
                   [np.array(b, dtype=np.float64) for b in doc["biases"]], doc.get("seed"))

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "MlpParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init(spec: MlpSpec, seed: int) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = []
    for fan_in, fan_out in spec.layer_shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        blocks.append(rng.uniform(-limit, limit, size=fan_in * fan_out))
    biases = [np.zeros(fan_out) for _, fan_out in spec.layer_shapes]
    return MlpParams(spec, np.concatenate(blocks), biases, seed)


def zero_weight(params: MlpParams, k: int) -> MlpParams:
    """Copy of ``params`` with multiplicative weight ``k`` removed."""
    params.locate(k)
    out = params.copy()
    out.weights[k] = 0.0
    return out


def predict(params: MlpParams, X) -> np.ndarray:
    """Class-1 probabilities without building a tape."""
    h = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if h.shape[1] != params.spec.input_dim:
        raise ValueError(f"expected {params.spec.input_dim} features, got {h.shape[1]}")
    last = params.n_layers - 1
    for layer in range(params.n_layers):
        z = h @ params.layer_weight(layer) + params.biases[layer]
        h = np.maximum(z, 0.0) if layer < last else expit(z)
    return h[:, 0]


def cross_entropy(p: np.ndarray, y: np.ndarray) -> float:
    """Mean binary cross-entropy with the same clamp as the tape version."""
    p = np.clip(p, EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


@dataclass
class BoundParams:
    """Parameters placed on a tape as one variable per layer matrix / bias."""

    params: MlpParams
    tape: Tape
    weights: list[Node]
    biases: list[Node]

    @property
    def nodes(self) -> list[Node]:
        return [*self.weights, *self.biases]


def bind(params: MlpParams, tape: Tape) -> BoundParams:
    weights = [tape.variable(params.layer_weight(l).copy()) for l in range(params.n_layers)]
    biases = [tape.variable(b.copy()) for b in params.biases]
    return BoundParams(params, tape, weights, biases)


def forward(params: MlpParams | BoundParams, x, tape: Tape | None = None) -> Node:
    """Probability of class 1 as a tape node.

    A single feature vector gives a scalar node, a 2-D batch gives a node
    of shape ``(n,)``.
    """
    if isinstance(params, MlpParams):
        if tape is None:
            raise ValueError("forward on raw params needs a tape")
        bound = bind(params, tape)
    else:
        bound = params
        if tape is not None and tape is not bound.tape:
            raise ValueError("bound params live on a different tape")
    tape = bound.tape
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    spec = bound.params.spec
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"expected {spec.input_dim} features, got shape {x.shape}")
    h = tape.constant(X)
    last = spec.n_layers - 1
    for layer in range(spec.n_layers):
        z = ad.matmul(h, bound.weights[layer]) + bound.biases[layer]
        h = ad.relu(z) if layer < last else ad.sigmoid(z)
    return ad.reshape(h, () if single else (X.shape[0],))


def cross_entropy_node(p: Node, Y) -> Node:
    """Mean binary cross-entropy of probability node ``p`` against 0/1 labels."""
    Y = np.asarray(Y, dtype=np.float64).reshape(-1)
    if Y.size == 0 or p.shape != Y.shape:
        raise ValueError(f"batch needs matching non-empty predictions/labels, got {p.shape} and {Y.shape}")
    if not np.all((Y == 0) | (Y == 1)):
        raise ValueError("labels must be 0/1")
    p = ad.clip(p, EPS, 1.0 - EPS)
    return -ad.mean(Y * ad.log(p) + (1.0 - Y) * ad.log(1.0 - p))


def batch_classification_loss(params: MlpParams | BoundParams, X, Y, tape: Tape | None = None) -> Node:
    """Mean binary cross-entropy over a batch, probabilities clamped to [eps, 1-eps]."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    return cross_entropy_node(forward(params, X, tape), Y)
