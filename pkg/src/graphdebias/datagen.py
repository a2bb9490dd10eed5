"""Synthetic biased-graph benchmark generator.

Each graph plants a class-determined point-cloud motif (the causal
substructure) among uniformly scattered background nodes whose color is
spuriously tied to the label: with probability ``bias_degree`` the
background takes the class-aligned palette color, otherwise a uniformly
random palette color. Edges come from a symmetrized KNN over the 2-D
coordinates, and every edge is tagged causal / bias / mixed by whether its
endpoints are motif or background nodes — ground truth the mask-quality
metrics score against.

Five splits are produced: train and test_biased at the requested bias
degree, val at bias degree 0.5, test_unbiased with label-independent
colors, and test_unseen with colors from a disjoint palette.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphdata import GraphInstance, SplitManifest, save_dataset

# Label-aligned background colors, one per class (8-bit RGB).
DEFAULT_PALETTE = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (225, 225, 0),
    (225, 0, 225),
    (0, 255, 255),
    (255, 128, 0),
    (255, 0, 128),
    (128, 0, 255),
    (128, 128, 128),
)

# Held-out colors for the unseen-bias split; (0, 255, 255) appears in both
# published lists, so it is dropped here to keep the palettes disjoint.
DEFAULT_UNSEEN_PALETTE = (
    (199, 21, 133),
    (255, 140, 105),
    (255, 127, 36),
    (139, 71, 38),
    (107, 142, 35),
    (173, 255, 47),
    (60, 179, 113),
    (64, 224, 208),
    (0, 191, 255),
)

FOREGROUND_COLOR = (242, 242, 242)  # near-white: motifs are shapes, not colors


def _segment(p0, p1, count):
    t = np.linspace(0.0, 1.0, count)
    return np.stack([p0[0] + (p1[0] - p0[0]) * t, p0[1] + (p1[1] - p0[1]) * t], axis=1)


def _dedupe(points: np.ndarray) -> np.ndarray:
    seen, keep = set(), []
    for i, p in enumerate(np.round(points, 9)):
        key = (p[0], p[1])
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return points[keep]


def _motif_templates() -> list[np.ndarray]:
    """Twelve-point planted shapes in the unit square, one per class.

    Equal point counts keep node-count statistics label-free, so the only
    causal signal is the geometry itself.
    """
    ring = np.stack(
        [
            0.5 + 0.5 * np.cos(np.linspace(0, 2 * math.pi, 13)[:-1]),
            0.5 + 0.5 * np.sin(np.linspace(0, 2 * math.pi, 13)[:-1]),
        ],
        axis=1,
    )
    shapes = [
        _segment((0.0, 0.0), (1.0, 1.0), 12),  # diagonal line
        ring,  # circle
        np.concatenate(  # plus sign (center point omitted)
            [_segment((0.0, 0.5), (1.0, 0.5), 6), _segment((0.5, 0.1), (0.5, 0.9), 6)]
        ),
        np.concatenate(  # tee
            [_segment((0.0, 1.0), (1.0, 1.0), 6), _segment((0.5, 0.0), (0.5, 1.0), 6)]
        ),
        np.concatenate(  # ell
            [_segment((0.0, 1.0), (0.0, 0.0), 7), _segment((0.0, 0.0), (1.0, 0.0), 6)]
        ),
        np.concatenate(  # zigzag
            [
                _segment((0.0, 1.0), (0.5, 0.6), 5),
                _segment((0.5, 0.6), (0.25, 0.25), 4),
                _segment((0.25, 0.25), (1.0, 0.0), 5),
            ]
        ),
        np.concatenate(  # square outline
            [
                _segment((0.0, 0.0), (1.0, 0.0), 4),
                _segment((1.0, 0.0), (1.0, 1.0), 4),
                _segment((1.0, 1.0), (0.0, 1.0), 4),
                _segment((0.0, 1.0), (0.0, 0.0), 4),
            ]
        ),
        np.concatenate(  # vee
            [_segment((0.0, 1.0), (0.5, 0.0), 6), _segment((0.5, 0.0), (1.0, 1.0), 7)]
        ),
        np.stack(  # open arc
            [
                0.5 + 0.5 * np.cos(np.linspace(0.25 * math.pi, 1.25 * math.pi, 12)),
                0.45 + 0.5 * np.sin(np.linspace(0.25 * math.pi, 1.25 * math.pi, 12)),
            ],
            axis=1,
        ),
        np.concatenate(  # two parallel bars
            [_segment((0.0, 0.15), (1.0, 0.15), 6), _segment((0.0, 0.85), (1.0, 0.85), 6)]
        ),
    ]
    return [_dedupe(s) for s in shapes]


MOTIF_TEMPLATES = _motif_templates()


@dataclass
class DatasetSpec:
    """Everything needed to regenerate a benchmark byte-for-byte."""

    num_classes: int = 4
    bias_degree: float = 0.9
    train_size: int = 2000
    val_size: int = 500
    test_size: int = 1000  # applies to each of the three test splits
    nodes_per_graph: int = 40
    knn_k: int = 8
    motif_scale: float = 0.38
    coord_noise: float = 0.015
    color_noise: float = 0.05
    palette: tuple = ()
    unseen_palette: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if not self.palette:
            self.palette = tuple(DEFAULT_PALETTE[: self.num_classes])
        if not self.unseen_palette:
            self.unseen_palette = tuple(
                c for c in DEFAULT_UNSEEN_PALETTE if c not in set(self.palette)
            )[: self.num_classes]
        self.palette = tuple(tuple(int(v) for v in c) for c in self.palette)
        self.unseen_palette = tuple(tuple(int(v) for v in c) for c in self.unseen_palette)
        self.validate()

    def validate(self) -> None:
        k = self.num_classes
        if not 0.0 < self.bias_degree <= 1.0:
            raise ValueError(f"bias_degree must be in (0, 1], got {self.bias_degree}")
        if k > len(MOTIF_TEMPLATES):
            raise ValueError(f"at most {len(MOTIF_TEMPLATES)} classes supported, got {k}")
        if len(self.palette) != k or len(self.unseen_palette) != k:
            raise ValueError(
                f"need {k} palette and {k} unseen-palette colors, got "
                f"{len(self.palette)} and {len(self.unseen_palette)}"
            )
        if set(self.palette) & set(self.unseen_palette):
            raise ValueError("palette and unseen_palette must be disjoint")
        if self.knn_k >= self.nodes_per_graph:
            raise ValueError(
                f"knn_k ({self.knn_k}) must be smaller than nodes_per_graph "
                f"({self.nodes_per_graph})"
            )
        max_motif = max(len(MOTIF_TEMPLATES[c]) for c in range(k))
        if self.nodes_per_graph <= max_motif:
            raise ValueError(
                f"nodes_per_graph ({self.nodes_per_graph}) must exceed the "
                f"largest motif ({max_motif} points)"
            )

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "bias_degree": self.bias_degree,
            "train_size": self.train_size,
            "val_size": self.val_size,
            "test_size": self.test_size,
            "nodes_per_graph": self.nodes_per_graph,
            "knn_k": self.knn_k,
            "motif_scale": self.motif_scale,
            "coord_noise": self.coord_noise,
            "color_noise": self.color_noise,
            "palette": [list(c) for c in self.palette],
            "unseen_palette": [list(c) for c in self.unseen_palette],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["palette"] = tuple(tuple(c) for c in d.get("palette", ()))
        d["unseen_palette"] = tuple(tuple(c) for c in d.get("unseen_palette", ()))
        return cls(**d)

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def substream(seed: int, *tags) -> np.random.Generator:
    """Independent named RNG stream derived from one root seed."""
    key = "/".join([str(seed), *[str(t) for t in tags]])
    digest = hashlib.sha256(key.encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def knn_edges(coords: np.ndarray, k: int) -> np.ndarray:
    """Symmetrized k-nearest-neighbor edges over 2-D points, stored i < j."""
    n = coords.shape[0]
    d2 = ((coords[:, None, :] - coords[None, :, :]) ** 2).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nbrs = np.argsort(d2, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    pairs = np.stack([src, nbrs.reshape(-1)], axis=1)
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


def _generate_graph(
    spec: DatasetSpec,
    graph_id: str,
    rng: np.random.Generator,
    color_mode: str,
) -> GraphInstance:
    k = spec.num_classes
    y = int(rng.integers(0, k))

    # Bias color: the coin decides whether the color is tied to the label.
    biased = False
    if color_mode == "biased":
        biased = bool(rng.random() < spec.bias_degree)
        bias_label = y if biased else int(rng.integers(0, k))
        palette = spec.palette
    elif color_mode == "uniform":
        bias_label = int(rng.integers(0, k))
        palette = spec.palette
    elif color_mode == "unseen":
        bias_label = int(rng.integers(0, k))
        palette = spec.unseen_palette
    else:
        raise ValueError(f"unknown color mode {color_mode!r}")
    bg_rgb = np.array(palette[bias_label], dtype=np.float64) / 255.0

    template = MOTIF_TEMPLATES[y]
    m = template.shape[0]
    n_bg = spec.nodes_per_graph - m

    scale = spec.motif_scale
    lo = scale / 2 + 0.02
    center = rng.uniform(lo, 1.0 - lo, size=2)
    motif_xy = (template - 0.5) * scale + center
    motif_xy = motif_xy + rng.normal(0.0, spec.coord_noise, size=motif_xy.shape)
    bg_xy = rng.uniform(0.0, 1.0, size=(n_bg, 2))
    coords = np.clip(np.concatenate([motif_xy, bg_xy], axis=0), 0.0, 1.0)

    fg_rgb = np.array(FOREGROUND_COLOR, dtype=np.float64) / 255.0
    colors = np.concatenate(
        [np.tile(fg_rgb, (m, 1)), np.tile(bg_rgb, (n_bg, 1))], axis=0
    )
    colors = np.clip(colors + rng.normal(0.0, spec.color_noise, size=colors.shape), 0.0, 1.0)

    edges = knn_edges(coords, spec.knn_k)
    is_motif = np.arange(spec.nodes_per_graph) < m
    tags = []
    for i, j in edges:
        if is_motif[i] and is_motif[j]:
            tags.append("causal")
        elif not is_motif[i] and not is_motif[j]:
            tags.append("bias")
        else:
            tags.append("mixed")
    if "causal" not in tags:
        raise RuntimeError(f"graph {graph_id}: motif produced no causal edge")

    g = GraphInstance(
        id=graph_id,
        num_nodes=spec.nodes_per_graph,
        x=np.concatenate([colors, coords], axis=1),
        edges=edges,
        y=y,
        bias_label=bias_label,
        edge_tag=tags,
        biased=biased if color_mode == "biased" else None,
    )
    g.validate()
    return g


def generate_split(spec: DatasetSpec, name: str, size: int, color_mode: str, bias_degree: float | None = None) -> list[GraphInstance]:
    eff = spec if bias_degree is None else _with_bias(spec, bias_degree)
    out = []
    for i in range(size):
        rng = substream(spec.seed, "datagen", name, i)
        out.append(_generate_graph(eff, f"{name}-{i:06d}", rng, color_mode))
    return out


def _with_bias(spec: DatasetSpec, bias_degree: float) -> DatasetSpec:
    d = spec.to_dict()
    d["bias_degree"] = bias_degree
    return DatasetSpec.from_dict(d)


def generate_dataset(spec: DatasetSpec, out_dir) -> SplitManifest:
    """Write the five splits plus a manifest into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = [
        ("train", spec.train_size, "biased", None),
        ("val", spec.val_size, "biased", 0.5),  # held-out model selection at even bias
        ("test_biased", spec.test_size, "biased", None),
        ("test_unbiased", spec.test_size, "uniform", None),
        ("test_unseen", spec.test_size, "unseen", None),
    ]
    splits = {}
    for name, size, mode, bias in plan:
        graphs = generate_split(spec, name, size, mode, bias)
        path = out_dir / f"{name}.jsonl"
        save_dataset(graphs, path)
        splits[name] = {"path": path.name, "size": size}
    manifest = SplitManifest(
        splits=splits, spec=spec.to_dict(), spec_hash=spec.hash(), seed=spec.seed
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def empirical_bias_degree(graphs: list[GraphInstance]) -> float:
    """Fraction of graphs whose background color was coin-tied to the label.

    Falls back to P(bias_label == label) when the generator coin is absent,
    which also counts the coincidental alignments of unbiased draws.
    """
    if not graphs:
        raise ValueError("empirical bias degree of an empty dataset is undefined")
    flags = [g.biased for g in graphs]
    if any(f is None for f in flags):
        warnings.warn(
            "biased-coin flags missing; falling back to P(bias_label == label), "
            "which conflates the coin with coincidental alignment",
            stacklevel=2,
        )
        return float(np.mean([g.bias_label == g.y for g in graphs]))
    return float(np.mean(flags))


def label_color_mutual_information(graphs: list[GraphInstance]) -> float:
    """Empirical mutual information (nats) between label and color index."""
    if not graphs:
        raise ValueError("mutual information of an empty dataset is undefined")
    y = np.array([g.y for g in graphs])
    b = np.array([g.bias_label for g in graphs])
    joint = np.zeros((y.max() + 1, b.max() + 1))
    np.add.at(joint, (y, b), 1.0)
    joint /= joint.sum()
    py = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    return float((joint[mask] * np.log(joint[mask] / (py @ pb)[mask])).sum())
