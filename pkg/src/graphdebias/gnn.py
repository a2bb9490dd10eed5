"""Graph encoders (GCN and GIN0 variants) and linear softmax classifiers.

Both encoders consume a batch plus one weight per undirected edge, do L
rounds of weighted message passing, and mean-pool node states per graph.
Mask weights therefore shape the propagation itself: a zero weight removes
an edge from the computation, a fractional weight attenuates it.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .graphdata import BatchedGraph, FEATURE_DIM, normalize_adjacency

PAPER_HIDDEN = {"gcn": 146, "gin": 110}
DEFAULT_LAYERS = 4


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _readout_mean(h: Tensor, batch: BatchedGraph) -> Tensor:
    counts = batch.node_counts().astype(np.float64).reshape(-1, 1)
    summed = ad.segment_sum(h, batch.graph_index, batch.num_graphs)
    return summed * (1.0 / counts)


class GcnEncoder:
    """Graph convolution stack: H <- relu(norm_adj @ H @ W), mean readout."""

    kind = "gcn"

    def __init__(self, layers: list[Parameter], hidden: int):
        self.layers = layers
        self.hidden = hidden

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, num_layers: int = DEFAULT_LAYERS, prefix: str = "gcn") -> "GcnEncoder":
        if num_layers < 1:
            raise ValueError("encoder needs at least one layer")
        dims = [FEATURE_DIM] + [hidden] * num_layers
        layers = [
            Parameter(f"{prefix}.layer{i}.w", glorot(rng, dims[i], dims[i + 1]))
            for i in range(num_layers)
        ]
        return cls(layers, hidden)

    def params(self) -> list[Parameter]:
        return list(self.layers)

    def encode(self, batch: BatchedGraph, weights=None) -> Tensor:
        adj = normalize_adjacency(batch, weights)
        h = Tensor(batch.x)
        for w in self.layers:
            h = ad.relu(ad.matmul(adj.matmul(h), w.tensor))
        return _readout_mean(h, batch)


class GinEncoder:
    """GIN0 stack: H <- MLP(H + sum_w(neighbors)), mean readout.

    Epsilon is fixed to zero, so the self term enters the perceptron with
    unit weight; each layer's perceptron is linear-relu-linear.
    """

    kind = "gin"

    def __init__(self, layers: list[tuple[Parameter, Parameter, Parameter, Parameter]], hidden: int):
        self.layers = layers
        self.hidden = hidden

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int, num_layers: int = DEFAULT_LAYERS, prefix: str = "gin") -> "GinEncoder":
        if num_layers < 1:
            raise ValueError("encoder needs at least one layer")
        dims = [FEATURE_DIM] + [hidden] * num_layers
        layers = []
        for i in range(num_layers):
            layers.append(
                (
                    Parameter(f"{prefix}.layer{i}.w1", glorot(rng, dims[i], hidden)),
                    Parameter(f"{prefix}.layer{i}.b1", np.zeros(hidden)),
                    Parameter(f"{prefix}.layer{i}.w2", glorot(rng, hidden, hidden)),
                    Parameter(f"{prefix}.layer{i}.b2", np.zeros(hidden)),
                )
            )
        return cls(layers, hidden)

    def params(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer]

    def encode(self, batch: BatchedGraph, weights=None) -> Tensor:
        if weights is None:
            weights = batch.edge_weight if batch.edge_weight is not None else np.ones(batch.num_edges)
        w_col = ad.reshape_column(weights if isinstance(weights, Tensor) else Tensor(weights))
        _, _, und = batch.directed()
        w_dir = ad.gather_rows(w_col, und)
        pattern = batch.neighbor_pattern()
        h = Tensor(batch.x)
        for w1, b1, w2, b2 in self.layers:
            msg = ad.sparse_mm(pattern, w_dir, h)
            pre = h + msg
            hidden = ad.relu(ad.matmul(pre, w1.tensor) + b1.tensor)
            h = ad.matmul(hidden, w2.tensor) + b2.tensor
        return _readout_mean(h, batch)


class LinearClassifier:
    """Softmax classifier over a fixed-width embedding."""

    def __init__(self, weight: Parameter, bias: Parameter):
        self.weight = weight
        self.bias = bias

    @classmethod
    def init(cls, rng: np.random.Generator, in_dim: int, num_classes: int, prefix: str = "clf") -> "LinearClassifier":
        return cls(
            Parameter(f"{prefix}.w", glorot(rng, in_dim, num_classes)),
            Parameter(f"{prefix}.b", np.zeros(num_classes)),
        )

    @property
    def in_dim(self) -> int:
        return self.weight.tensor.data.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.tensor.data.shape[1]

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def logits(self, z: Tensor) -> Tensor:
        if z.data.shape[1] != self.in_dim:
            raise ad.AutodiffError(
                f"classifier expects width {self.in_dim}, got {z.data.shape[1]}"
            )
        return ad.matmul(z, self.weight.tensor) + self.bias.tensor

    def classify(self, z: Tensor) -> Tensor:
        return ad.softmax_rows(self.logits(z))


ENCODERS = {"gcn": GcnEncoder, "gin": GinEncoder}


def make_encoder(kind: str, rng: np.random.Generator, hidden: int | None, num_layers: int = DEFAULT_LAYERS, prefix: str | None = None):
    if kind not in ENCODERS:
        raise ValueError(f"unknown encoder {kind!r}; choose from {sorted(ENCODERS)}")
    width = hidden if hidden is not None else PAPER_HIDDEN[kind]
    return ENCODERS[kind].init(rng, width, num_layers, prefix or kind)
