"""Split accuracies, mask-quality scoring, disentanglement probes, pruning.

Everything here is read-only over a trained model. Mask quality is scored
against the generator's planted edge provenance (causal vs bias endpoints);
disentanglement is quantified with linear probes on frozen embeddings
instead of a projection plot, so the evidence is a scalar.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .autodiff import Adam, Parameter, Tensor
from .datagen import substream
from .graphdata import GraphInstance, batch_graphs, dump_json

EVAL_BATCH = 256
STANDARD_PRUNE_FRACTIONS = (0.0, 0.2, 0.4, 0.6)


class EvalError(ValueError):
    pass


def _batched(graphs: list[GraphInstance], batch_size: int = EVAL_BATCH):
    for i in range(0, len(graphs), batch_size):
        yield batch_graphs(graphs[i : i + batch_size])


def accuracy(model, graphs: list[GraphInstance], batch_size: int = EVAL_BATCH) -> float:
    """Fraction of graphs whose argmax class probability matches the label."""
    if not graphs:
        raise EvalError("accuracy of an empty split is undefined")
    correct = 0
    with ad.no_grad():
        for batch in _batched(graphs, batch_size):
            pred = model.predict_probs(batch).data.argmax(axis=1)
            correct += int((pred == batch.y).sum())
    return correct / len(graphs)


def auc_bruteforce(scores: np.ndarray, positive: np.ndarray) -> float:
    """Pairwise-comparison AUC; quadratic, used as the reference oracle."""
    pos = scores[positive]
    neg = scores[~positive]
    if pos.size == 0 or neg.size == 0:
        raise EvalError("AUC needs at least one positive and one negative")
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (pos.size * neg.size))


def auc_rank(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-statistic AUC with average ranks on ties (equals the pairwise AUC)."""
    pos = positive.astype(bool)
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def collect_mask_scores(model, graphs: list[GraphInstance], batch_size: int = EVAL_BATCH):
    """Causal-mask weight and provenance tag for every edge of every graph."""
    scores, tags = [], []
    with ad.no_grad():
        for i in range(0, len(graphs), batch_size):
            chunk = graphs[i : i + batch_size]
            if any(g.edge_tag is None for g in chunk):
                raise EvalError("mask scoring needs edge provenance tags on every graph")
            batch = batch_graphs(chunk)
            c, _ = model.mask_weights(batch)
            scores.append(c.data.ravel())
            for g in chunk:
                tags.extend(g.edge_tag)
    return np.concatenate(scores), np.array(tags)


def mask_auc(model, graphs: list[GraphInstance]) -> float:
    """AUC of causal-mask weights for causal- vs bias-tagged edges.

    Mixed-provenance edges carry no ground truth and are excluded.
    """
    scores, tags = collect_mask_scores(model, graphs)
    keep = tags != "mixed"
    if not keep.any():
        raise EvalError("no causal/bias-tagged edges to score")
    return auc_rank(scores[keep], tags[keep] == "causal")


def linear_probe(
    embeddings: np.ndarray,
    targets: np.ndarray,
    seed: int = 0,
    train_frac: float = 0.7,
    steps: int = 400,
    lr: float = 0.05,
) -> float:
    """Held-out accuracy of a multinomial logistic probe on frozen embeddings.

    Measures linear decodability only; a disentangled embedding should be
    probe-readable for its own factor and near chance for the other one.
    """
    targets = np.asarray(targets)
    classes = np.unique(targets)
    if classes.size < 2:
        raise EvalError("probe targets must contain at least two classes")
    n = embeddings.shape[0]
    order = substream(seed, "probe").permutation(n)
    n_train = max(int(round(train_frac * n)), 1)
    tr, ho = order[:n_train], order[n_train:]
    if ho.size == 0:
        raise EvalError("probe holdout is empty; lower train_frac")

    k = int(targets.max()) + 1
    x_tr = Tensor(embeddings[tr])
    w = Parameter("probe.w", np.zeros((embeddings.shape[1], k)))
    b = Parameter("probe.b", np.zeros(k))
    onehot = np.zeros((tr.size, k))
    onehot[np.arange(tr.size), targets[tr]] = 1.0
    ones = np.ones((k, 1))
    opt = Adam([w, b], lr=lr)
    with ad.finite_checks(False):
        for _ in range(steps):
            probs = ad.softmax_rows(ad.matmul(x_tr, w.tensor) + b.tensor)
            p_y = ad.matmul(probs * onehot, ones)
            loss = ad.mean(-ad.log(p_y))
            opt.zero_grad()
            loss.backward()
            opt.step()
    logits = embeddings[ho] @ w.tensor.data + b.tensor.data
    return float((logits.argmax(axis=1) == targets[ho]).mean())


def graph_embeddings(model, graphs: list[GraphInstance], batch_size: int = EVAL_BATCH):
    """Frozen (z_c, z_b) blocks for a split, in split order."""
    zc_blocks, zb_blocks = [], []
    with ad.no_grad():
        for batch in _batched(graphs, batch_size):
            z_c, z_b = model.embed(batch)
            zc_blocks.append(z_c.data)
            zb_blocks.append(z_b.data)
    return np.concatenate(zc_blocks), np.concatenate(zb_blocks)


def export_embeddings(model, graphs: list[GraphInstance], path: str | Path) -> None:
    """One record per graph: id, label, color index, z_c, z_b."""
    z_c, z_b = graph_embeddings(model, graphs)
    with Path(path).open("w", encoding="utf-8") as fh:
        for g, zc, zb in zip(graphs, z_c, z_b):
            rec = {
                "id": g.id,
                "y": int(g.y),
                "bias_label": int(g.bias_label),
                "z_c": [float(v) for v in zc],
                "z_b": [float(v) for v in zb],
            }
            fh.write(dump_json(rec) + "\n")


def export_masks(model, graphs: list[GraphInstance], path: str | Path) -> None:
    """One record per graph: edges with their causal and bias weights."""
    with Path(path).open("w", encoding="utf-8") as fh, ad.no_grad():
        for i in range(0, len(graphs), EVAL_BATCH):
            chunk = graphs[i : i + EVAL_BATCH]
            batch = batch_graphs(chunk)
            c, b = model.mask_weights(batch)
            c, b = c.data.ravel(), b.data.ravel()
            offset = 0
            for g in chunk:
                e = g.num_edges
                rec = {
                    "id": g.id,
                    "edges": [[int(a), int(z)] for a, z in g.edges],
                    "c": [float(v) for v in c[offset : offset + e]],
                    "b": [float(v) for v in b[offset : offset + e]],
                }
                fh.write(dump_json(rec) + "\n")
                offset += e


def prune_graph(graph: GraphInstance, scores: np.ndarray, fraction: float) -> GraphInstance:
    """Drop the ``floor(fraction * E)`` lowest-scored edges of one graph.

    Ties at the cutoff are broken by edge index, ascending, so the output is
    deterministic. Surviving edges persist their score as a stored weight.
    """
    e = graph.num_edges
    n_drop = int(np.floor(fraction * e))
    if n_drop >= e and e > 0:
        warnings.warn(
            f"graph {graph.id}: pruning {fraction:.0%} would remove every edge; "
            "keeping the single highest-weight edge",
            stacklevel=2,
        )
        n_drop = e - 1
    order = np.lexsort((np.arange(e), scores))  # score asc, then index asc
    keep = np.sort(order[n_drop:])
    return GraphInstance(
        id=graph.id,
        num_nodes=graph.num_nodes,
        x=graph.x.copy(),
        edges=graph.edges[keep],
        y=graph.y,
        bias_label=graph.bias_label,
        edge_tag=[graph.edge_tag[i] for i in keep] if graph.edge_tag is not None else None,
        edge_weight=scores[keep].copy(),
        biased=graph.biased,
    )


def prune_dataset(model, graphs: list[GraphInstance], fraction: float) -> list[GraphInstance]:
    """Per-graph pruning of the weakest causal-mask edges, weights kept."""
    if not 0.0 <= fraction < 1.0:
        raise EvalError(f"prune fraction must be in [0, 1), got {fraction}")
    if fraction not in STANDARD_PRUNE_FRACTIONS:
        warnings.warn(
            f"prune fraction {fraction} is outside the standard set "
            f"{STANDARD_PRUNE_FRACTIONS}",
            stacklevel=2,
        )
    out = []
    with ad.no_grad():
        for i in range(0, len(graphs), EVAL_BATCH):
            chunk = graphs[i : i + EVAL_BATCH]
            batch = batch_graphs(chunk)
            c, _ = model.mask_weights(batch)
            c = c.data.ravel()
            offset = 0
            for g in chunk:
                out.append(prune_graph(g, c[offset : offset + g.num_edges], fraction))
                offset += g.num_edges
    return out


def transfer_experiment(
    pruned_levels: dict[float, dict[str, list[GraphInstance]]],
    config,
) -> dict[float, float]:
    """Train a fresh vanilla model per pruning level (stored weights active)
    and report unbiased-test accuracy per level."""
    from .disc import train  # local import: this module must not depend on training at import time

    table = {}
    for fraction in sorted(pruned_levels):
        splits = pruned_levels[fraction]
        result = train(config, splits["train"], splits.get("val"), mode="vanilla")
        table[fraction] = accuracy(result.model, splits["test_unbiased"])
    return table


@dataclass
class EvalReport:
    """Scalar summary of one trained model against one benchmark."""

    split_accuracy: dict
    mask_auc: float | None
    probe_accuracy: dict  # zc_to_y, zc_to_bias, zb_to_y, zb_to_bias
    config_hash: str
    epoch: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate_model(
    model,
    splits: dict[str, list[GraphInstance]],
    config_hash: str = "",
    epoch: int = -1,
    probe_split: str = "test_unbiased",
    probe_seed: int = 0,
) -> EvalReport:
    """Accuracy on every split, plus mask AUC and probes for masked models."""
    split_acc = {name: accuracy(model, graphs) for name, graphs in splits.items()}
    auc = None
    probes = {}
    if hasattr(model, "mask_weights"):
        probe_graphs = splits.get(probe_split)
        if probe_graphs:
            auc = mask_auc(model, probe_graphs)
            z_c, z_b = graph_embeddings(model, probe_graphs)
            y = np.array([g.y for g in probe_graphs])
            bias = np.array([g.bias_label for g in probe_graphs])
            probes = {
                "zc_to_y": linear_probe(z_c, y, seed=probe_seed),
                "zc_to_bias": linear_probe(z_c, bias, seed=probe_seed),
                "zb_to_y": linear_probe(z_b, y, seed=probe_seed),
                "zb_to_bias": linear_probe(z_b, bias, seed=probe_seed),
            }
    return EvalReport(
        split_accuracy=split_acc,
        mask_auc=auc,
        probe_accuracy=probes,
        config_hash=config_hash,
        epoch=epoch,
    )
