"""Graph containers, dataset I/O, mini-batching, and adjacency normalization.

Datasets are line-delimited JSON, one graph per line. Undirected edges are
stored once and expanded to both directions (plus unit self-loops) when the
normalized adjacency is built, so encoders always see a symmetric operator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import SparsePattern, Tensor

FEATURE_DIM = 5
EDGE_TAGS = ("causal", "bias", "mixed")


class DatasetError(ValueError):
    """Malformed dataset file or graph record."""


@dataclass
class GraphInstance:
    """One labeled graph: features are [R, G, B, x, y] per node, all in [0, 1]."""

    id: str
    num_nodes: int
    x: np.ndarray  # (num_nodes, 5)
    edges: np.ndarray  # (E, 2) int64, each undirected edge stored once
    y: int
    bias_label: int
    edge_tag: list[str] | None = None
    edge_weight: np.ndarray | None = None
    biased: bool | None = None  # generator coin: was the color tied to the label?

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if self.edge_weight is not None:
            self.edge_weight = np.asarray(self.edge_weight, dtype=np.float64)

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def validate(self) -> None:
        if self.x.shape != (self.num_nodes, FEATURE_DIM):
            raise DatasetError(
                f"graph {self.id}: field 'x' has shape {self.x.shape}, "
                f"expected ({self.num_nodes}, {FEATURE_DIM})"
            )
        e = self.edges
        if e.size:
            if e.min() < 0 or e.max() >= self.num_nodes:
                raise DatasetError(f"graph {self.id}: field 'edges' has endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise DatasetError(f"graph {self.id}: field 'edges' contains a self-loop")
            canon = np.sort(e, axis=1)
            uniq = np.unique(canon, axis=0)
            if uniq.shape[0] != e.shape[0]:
                raise DatasetError(
                    f"graph {self.id}: field 'edges' lists an undirected edge more than once"
                )
        if self.edge_tag is not None:
            if len(self.edge_tag) != self.num_edges:
                raise DatasetError(f"graph {self.id}: field 'edge_tag' length != edge count")
            bad = set(self.edge_tag) - set(EDGE_TAGS)
            if bad:
                raise DatasetError(f"graph {self.id}: field 'edge_tag' has unknown tags {bad}")
        if self.edge_weight is not None and self.edge_weight.shape != (self.num_edges,):
            raise DatasetError(f"graph {self.id}: field 'edge_weight' length != edge count")

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "num_nodes": self.num_nodes,
            "x": [float(v) for v in self.x.reshape(-1)],
            "edges": [[int(i), int(j)] for i, j in self.edges],
            "y": int(self.y),
            "bias_label": int(self.bias_label),
        }
        if self.edge_tag is not None:
            rec["edge_tag"] = list(self.edge_tag)
        if self.edge_weight is not None:
            rec["edge_weight"] = [float(v) for v in self.edge_weight]
        if self.biased is not None:
            rec["biased"] = bool(self.biased)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "GraphInstance":
        try:
            n = int(rec["num_nodes"])
            g = cls(
                id=str(rec["id"]),
                num_nodes=n,
                x=np.asarray(rec["x"], dtype=np.float64).reshape(n, FEATURE_DIM),
                edges=rec["edges"],
                y=int(rec["y"]),
                bias_label=int(rec["bias_label"]),
                edge_tag=rec.get("edge_tag"),
                edge_weight=rec.get("edge_weight"),
                biased=rec.get("biased"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"bad graph record: {exc}") from exc
        g.validate()
        return g


def dump_json(obj) -> str:
    """Compact JSON with full float64 round-trip precision."""
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save_dataset(graphs: list[GraphInstance], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(dump_json(g.to_record()))
            fh.write("\n")


def load_dataset(path: str | Path) -> list[GraphInstance]:
    path = Path(path)
    graphs = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                graphs.append(GraphInstance.from_record(rec))
            except DatasetError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return graphs


SPLIT_NAMES = ("train", "val", "test_biased", "test_unbiased", "test_unseen")


@dataclass
class SplitManifest:
    """Paths and sizes of the five dataset splits plus the generating spec."""

    splits: dict  # name -> {"path": str, "size": int}
    spec: dict
    spec_hash: str
    seed: int

    def save(self, path: str | Path) -> None:
        obj = {
            "splits": self.splits,
            "spec": self.spec,
            "spec_hash": self.spec_hash,
            "seed": self.seed,
        }
        Path(path).write_text(dump_json(obj) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, check_files: bool = True) -> "SplitManifest":
        path = Path(path)
        obj = json.loads(path.read_text(encoding="utf-8"))
        man = cls(
            splits=obj["splits"],
            spec=obj["spec"],
            spec_hash=obj["spec_hash"],
            seed=int(obj["seed"]),
        )
        if check_files:
            for name, info in man.splits.items():
                split_path = path.parent / info["path"]
                if not split_path.exists():
                    raise DatasetError(f"manifest references missing file {split_path}")
                with split_path.open("r", encoding="utf-8") as fh:
                    count = sum(1 for line in fh if line.strip())
                if count != info["size"]:
                    raise DatasetError(
                        f"{split_path}: {count} records, manifest declares {info['size']}"
                    )
        return man

    def load_split(self, manifest_path: str | Path, name: str) -> list[GraphInstance]:
        return load_dataset(Path(manifest_path).parent / self.splits[name]["path"])


@dataclass
class BatchedGraph:
    """Disjoint union of graphs with per-node graph assignment.

    Node indices are offset per graph; the stored edge list remains
    undirected-once. Directed expansion and sparsity patterns for message
    passing are built lazily and cached on the batch.
    """

    x: np.ndarray  # (N, 5)
    edges: np.ndarray  # (E, 2) global node indices
    graph_index: np.ndarray  # (N,) non-decreasing
    y: np.ndarray  # (G,)
    bias_label: np.ndarray  # (G,)
    num_graphs: int
    edge_graph: np.ndarray  # (E,) graph owning each edge
    edge_weight: np.ndarray | None = None  # stored per-edge weights, if any
    _directed: tuple | None = field(default=None, repr=False)
    _adj_pattern: SparsePattern | None = field(default=None, repr=False)
    _nbr_pattern: SparsePattern | None = field(default=None, repr=False)

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def node_counts(self) -> np.ndarray:
        return np.bincount(self.graph_index, minlength=self.num_graphs)

    def directed(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Both directions of every undirected edge, sorted by destination.

        Returns (src, dst, und_id) where und_id maps each directed edge back
        to its undirected slot, so direction-shared weights can be gathered.
        """
        if self._directed is None:
            e = self.edges
            src = np.concatenate((e[:, 0], e[:, 1]))
            dst = np.concatenate((e[:, 1], e[:, 0]))
            und = np.concatenate((np.arange(len(e)), np.arange(len(e))))
            order = np.argsort(dst, kind="stable")
            self._directed = (src[order], dst[order], und[order])
        return self._directed

    def adjacency_pattern(self) -> SparsePattern:
        """Pattern of the symmetric adjacency plus self-loops: first the 2E
        directed edge slots, then N self-loop slots."""
        if self._adj_pattern is None:
            src, dst, _ = self.directed()
            n = self.num_nodes
            loops = np.arange(n)
            rows = np.concatenate((dst, loops))
            cols = np.concatenate((src, loops))
            self._adj_pattern = SparsePattern(rows, cols, (n, n))
        return self._adj_pattern

    def neighbor_pattern(self) -> SparsePattern:
        """Pattern of the symmetric adjacency without self-loops."""
        if self._nbr_pattern is None:
            src, dst, _ = self.directed()
            self._nbr_pattern = SparsePattern(dst, src, (self.num_nodes, self.num_nodes))
        return self._nbr_pattern


def batch_graphs(
    graphs: list[GraphInstance],
    edge_weights: list[np.ndarray] | None = None,
) -> BatchedGraph:
    """Assemble graphs into one block batch, offsetting node indices.

    ``edge_weights`` overrides any stored per-graph weights; when omitted,
    stored weights are used if every graph carries them.
    """
    if edge_weights is not None and len(edge_weights) != len(graphs):
        raise DatasetError("edge_weights must align one list per graph")

    xs, edge_blocks, gidx, weights, edge_graph = [], [], [], [], []
    offset = 0
    use_stored = edge_weights is None and all(g.edge_weight is not None for g in graphs)
    for i, g in enumerate(graphs):
        xs.append(g.x)
        edge_blocks.append(g.edges + offset)
        gidx.append(np.full(g.num_nodes, i, dtype=np.int64))
        edge_graph.append(np.full(g.num_edges, i, dtype=np.int64))
        if edge_weights is not None:
            w = np.asarray(edge_weights[i], dtype=np.float64)
            if w.shape != (g.num_edges,):
                raise DatasetError(
                    f"graph {g.id}: {w.shape[0]} weights for {g.num_edges} edges"
                )
            weights.append(w)
        elif use_stored:
            weights.append(g.edge_weight)
        offset += g.num_nodes

    return BatchedGraph(
        x=np.concatenate(xs, axis=0) if xs else np.zeros((0, FEATURE_DIM)),
        edges=np.concatenate(edge_blocks, axis=0) if edge_blocks else np.zeros((0, 2), dtype=np.int64),
        graph_index=np.concatenate(gidx) if gidx else np.zeros(0, dtype=np.int64),
        y=np.array([g.y for g in graphs], dtype=np.int64),
        bias_label=np.array([g.bias_label for g in graphs], dtype=np.int64),
        num_graphs=len(graphs),
        edge_graph=np.concatenate(edge_graph) if edge_graph else np.zeros(0, dtype=np.int64),
        edge_weight=np.concatenate(weights) if weights and (edge_weights is not None or use_stored) else None,
    )


@dataclass
class NormalizedAdjacency:
    """Symmetrically normalized weighted adjacency in pattern/values form."""

    pattern: SparsePattern
    values: Tensor  # (2E + N, 1), aligned with the pattern slots

    def matmul(self, h: Tensor) -> Tensor:
        return ad.sparse_mm(self.pattern, self.values, h)

    def dense(self) -> np.ndarray:
        n = self.pattern.shape[0]
        out = np.zeros((n, n))
        out[self.pattern.rows, self.pattern.cols] = self.values.data.ravel()
        return out


def normalize_adjacency(
    batch: BatchedGraph, weights: Tensor | np.ndarray | None = None
) -> NormalizedAdjacency:
    """Build D^{-1/2} (A_w + I) D^{-1/2} over the batch.

    ``weights`` is one value per undirected edge and is shared by the two
    directions; self-loops always carry weight 1, so isolated nodes end up
    with degree 1 and the operator stays finite. Differentiable whenever
    ``weights`` is a tensor on the tape.
    """
    if weights is None:
        weights = batch.edge_weight if batch.edge_weight is not None else np.ones(batch.num_edges)
    w = weights if isinstance(weights, Tensor) else Tensor(weights)
    if w.data.size != batch.num_edges:
        raise DatasetError(
            f"{w.data.size} edge weights for {batch.num_edges} undirected edges"
        )
    w2d = ad.reshape_column(w)

    src, dst, und = batch.directed()
    n = batch.num_nodes
    w_dir = ad.gather_rows(w2d, und)  # (2E, 1)
    deg = ad.segment_sum(w_dir, dst, n) + 1.0  # unit self-loops
    inv_sqrt = ad.pow_scalar(deg, -0.5)
    vals_edges = w_dir * ad.gather_rows(inv_sqrt, src) * ad.gather_rows(inv_sqrt, dst)
    vals_loops = inv_sqrt * inv_sqrt
    values = ad.concat_rows(vals_edges, vals_loops)
    return NormalizedAdjacency(pattern=batch.adjacency_pattern(), values=values)


def shuffled_batches(
    n: int, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Deterministic random partition of range(n) into batches."""
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def dense_normalized_adjacency(graph: GraphInstance, weights: np.ndarray | None = None) -> np.ndarray:
    """Reference dense computation of the normalized adjacency for one graph.

    Independent of the sparse path; used as a test oracle.
    """
    n = graph.num_nodes
    a = np.zeros((n, n))
    w = weights if weights is not None else np.ones(graph.num_edges)
    for (i, j), wij in zip(graph.edges, w):
        a[i, j] = wij
        a[j, i] = wij
    a_tilde = a + np.eye(n)
    d = a_tilde.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return inv_sqrt[:, None] * a_tilde * inv_sqrt[None, :]
