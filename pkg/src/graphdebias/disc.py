"""Two-branch debiasing framework over masked subgraphs.

A shared edge scorer splits every graph into a causal view (weights c) and
a complementary bias view (weights 1 - c). Two encoders embed the views;
the bias head trains under generalized cross entropy, which amplifies
whatever is easiest to learn, while the causal head trains under cross
entropy reweighted toward the samples the bias head fails on. Gradient
routing is strict: each head's loss reaches only its own encoder (the
cross-branch half of each concatenation is detached), while the edge
scorer learns from both branches through its own subgraph path.

After a warm-up phase, bias embeddings are randomly permuted within each
mini-batch to synthesize counterfactual pairs whose causal and bias
content are independent, and a second loss on those pairs decorrelates
the two representations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Parameter, Tensor
from .datagen import substream
from .evaluate import accuracy
from .gnn import LinearClassifier, glorot, make_encoder
from .graphdata import BatchedGraph, GraphInstance, batch_graphs, shuffled_batches


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Training hyperparameters; published defaults, desk-scale overridable."""

    q: float = 0.7
    lambda_g: float = 10.0
    epochs: int = 200
    t_gen: int = 100  # epoch at which counterfactual generation switches on
    lr: float = 0.01
    batch_size: int = 256
    encoder: str = "gcn"
    hidden: int | None = None  # None: published width for the encoder kind
    num_layers: int = 4
    mask_hidden: int = 16
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.q <= 1.0:
            raise ValueError(f"q must be in (0, 1], got {self.q}")
        if not 0 <= self.t_gen:
            raise ValueError(f"t_gen must be non-negative, got {self.t_gen}")


class MaskGenerator:
    """Two-layer perceptron scoring each edge from its endpoint features.

    The hidden activation is a sigmoid; the raw score is averaged over both
    endpoint orderings so undirected edges get one well-defined weight.
    """

    def __init__(self, w1: Parameter, b1: Parameter, w2: Parameter, b2: Parameter):
        self.w1, self.b1, self.w2, self.b2 = w1, b1, w2, b2

    @classmethod
    def init(cls, rng: np.random.Generator, feature_dim: int, hidden: int, prefix: str = "masker") -> "MaskGenerator":
        return cls(
            Parameter(f"{prefix}.w1", glorot(rng, 2 * feature_dim, hidden)),
            Parameter(f"{prefix}.b1", np.zeros(hidden)),
            Parameter(f"{prefix}.w2", glorot(rng, hidden, 1)),
            Parameter(f"{prefix}.b2", np.zeros(1)),
        )

    def params(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]

    def raw_scores(self, features: Tensor) -> Tensor:
        hidden = ad.sigmoid(ad.matmul(features, self.w1.tensor) + self.b1.tensor)
        return ad.matmul(hidden, self.w2.tensor) + self.b2.tensor


def edge_scores(masker: MaskGenerator, batch: BatchedGraph) -> tuple[Tensor, Tensor]:
    """Per-undirected-edge causal weight c and bias weight 1 - c, both in (0, 1)."""
    x = Tensor(batch.x)
    xi = ad.gather_rows(x, batch.edges[:, 0])
    xj = ad.gather_rows(x, batch.edges[:, 1])
    alpha = (
        masker.raw_scores(ad.concat_cols(xi, xj))
        + masker.raw_scores(ad.concat_cols(xj, xi))
    ) * 0.5
    c = ad.sigmoid(alpha)
    b = 1.0 - c
    return c, b


@dataclass
class MaskedGraph:
    """A batch viewed through per-edge weights; topology is shared."""

    batch: BatchedGraph
    weights: Tensor


def split_graph(batch: BatchedGraph, scores: tuple[Tensor, Tensor]) -> tuple[MaskedGraph, MaskedGraph]:
    """Causal and bias views of the batch from one (c, b) score pair."""
    c, b = scores
    return MaskedGraph(batch, c), MaskedGraph(batch, b)


def select_target_column(values: Tensor, y: np.ndarray) -> Tensor:
    """Column vector picking each row's entry at its target class."""
    n, k = values.data.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    return ad.matmul(values * onehot, np.ones((k, 1)))


def class_probability(probs: Tensor, y: np.ndarray) -> Tensor:
    """Column vector of each sample's probability at its target class."""
    return select_target_column(probs, y)


def ce_per_sample(logits: Tensor, y: np.ndarray) -> Tensor:
    """Cross entropy of each sample from logits, as a column vector.

    Computed through log-softmax so confidently wrong samples keep a
    full-strength corrective gradient instead of saturating.
    """
    return -select_target_column(ad.log_softmax_rows(logits), y)


def gce_loss(probs: Tensor, y: np.ndarray, q: float) -> Tensor:
    """Generalized cross entropy, mean over the batch: (1 - p_y^q) / q.

    Confident samples keep larger gradients than under plain cross entropy,
    which is what lets the bias branch latch onto easy shortcuts.
    """
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must be in (0, 1], got {q}")
    p_y = class_probability(probs, y)
    return ad.mean((1.0 - ad.pow_scalar(p_y, q)) * (1.0 / q))


def unbias_weight(ce_c: Tensor, ce_b: Tensor) -> np.ndarray:
    """Per-sample weight ce_b / (ce_c + ce_b), detached from the tape.

    High values mark samples the bias branch cannot fit, i.e. the ones that
    carry genuinely causal signal. When both losses vanish the weight falls
    back to the symmetric 1/2.
    """
    c = ce_c.data
    b = ce_b.data
    total = c + b
    with np.errstate(invalid="ignore"):
        w = np.where(total > 0.0, b / np.where(total > 0.0, total, 1.0), 0.5)
    return w


@dataclass
class BranchLosses:
    loss: Tensor  # scalar: weighted causal CE + bias GCE
    weights: np.ndarray  # (n, 1) unbias weights actually applied
    probs_c: Tensor
    probs_b: Tensor
    ce_c: Tensor
    ce_b: Tensor


def _branch_losses(
    clf_c: LinearClassifier,
    clf_b: LinearClassifier,
    z_c: Tensor,
    z_b: Tensor,
    y_causal: np.ndarray,
    y_bias: np.ndarray,
    q: float,
    weights: np.ndarray | None = None,
) -> BranchLosses:
    # Stop-gradient routing: each head sees the other branch's embedding as
    # a constant, so its loss cannot reshape the other encoder.
    logits_c = clf_c.logits(ad.concat_cols(z_c, z_b.detach()))
    logits_b = clf_b.logits(ad.concat_cols(z_c.detach(), z_b))
    probs_c = ad.softmax_rows(logits_c)
    probs_b = ad.softmax_rows(logits_b)
    ce_c = ce_per_sample(logits_c, y_causal)
    ce_b = ce_per_sample(logits_b, y_bias)
    if weights is None:
        weights = unbias_weight(ce_c, ce_b)
    loss = ad.mean(ce_c * weights) + gce_loss(probs_b, y_bias, q)
    return BranchLosses(loss, weights, probs_c, probs_b, ce_c, ce_b)


def disentangle_loss(
    clf_c: LinearClassifier,
    clf_b: LinearClassifier,
    z_c: Tensor,
    z_b: Tensor,
    y: np.ndarray,
    q: float,
) -> BranchLosses:
    """Joint objective on the original pairing of causal and bias embeddings."""
    return _branch_losses(clf_c, clf_b, z_c, z_b, y, y, q)


@dataclass
class DisentangledBatch:
    """Embeddings plus their counterfactual recombination for one mini-batch."""

    z_c: Tensor
    z_b: Tensor
    z: Tensor  # [z_c | z_b]
    zb_hat: Tensor  # bias embeddings permuted within the batch
    y_hat: np.ndarray  # labels co-permuted with zb_hat
    perm: np.ndarray
    z_unbiased: Tensor  # [z_c | detached zb_hat]


def counterfactual_swap(
    z_c: Tensor, z_b: Tensor, y: np.ndarray, rng: np.random.Generator
) -> DisentangledBatch:
    """Permute bias embeddings (and their labels, together) within the batch.

    The swapped vectors act as fixed context for the causal head, so they
    are detached inside ``z_unbiased``; the bias head still reaches its own
    encoder through the permutation.
    """
    n = z_b.data.shape[0]
    if n < 2:
        raise ValueError("counterfactual swap needs a batch of at least 2")
    perm = rng.permutation(n)
    zb_hat = ad.gather_rows(z_b, perm)
    return DisentangledBatch(
        z_c=z_c,
        z_b=z_b,
        z=ad.concat_cols(z_c, z_b),
        zb_hat=zb_hat,
        y_hat=y[perm],
        perm=perm,
        z_unbiased=ad.concat_cols(z_c, zb_hat.detach()),
    )


def generation_loss(
    clf_c: LinearClassifier,
    clf_b: LinearClassifier,
    swap: DisentangledBatch,
    y: np.ndarray,
    q: float,
    weights: np.ndarray,
) -> BranchLosses:
    """Objective on the counterfactual pairs: the causal head must still
    predict y from [z_c | zb_hat], the bias head must predict the swapped
    label from zb_hat. Sample weights come from the unswapped pairing."""
    return _branch_losses(
        clf_c, clf_b, swap.z_c, swap.zb_hat, y, swap.y_hat, q, weights=weights
    )


def total_loss(
    l_d: Tensor, l_g: Tensor | None, lambda_g: float, epoch: int, t_gen: int
) -> Tensor:
    """Phase-gated combination: warm-up trains on l_d alone."""
    if epoch < t_gen or l_g is None:
        return l_d
    return l_d + lambda_g * l_g


class DiscModel:
    """Edge scorer, two encoders, and two classifiers, trained jointly."""

    mode = "disc"

    def __init__(self, masker, g_c, g_b, clf_c, clf_b):
        self.masker = masker
        self.g_c = g_c
        self.g_b = g_b
        self.clf_c = clf_c
        self.clf_b = clf_b
        if clf_c.in_dim != 2 * g_c.hidden or clf_b.in_dim != 2 * g_b.hidden:
            raise ValueError("classifier width must be twice the encoder width")

    @classmethod
    def init(cls, config: TrainConfig) -> "DiscModel":
        rng = substream(config.seed, "init")
        g_c = make_encoder(config.encoder, rng, config.hidden, config.num_layers, prefix="gc")
        g_b = make_encoder(config.encoder, rng, config.hidden, config.num_layers, prefix="gb")
        masker = MaskGenerator.init(rng, feature_dim=5, hidden=config.mask_hidden)
        clf_c = LinearClassifier.init(rng, 2 * g_c.hidden, config.num_classes, prefix="clfc")
        clf_b = LinearClassifier.init(rng, 2 * g_b.hidden, config.num_classes, prefix="clfb")
        return cls(masker, g_c, g_b, clf_c, clf_b)

    def params(self) -> list[Parameter]:
        return (
            self.masker.params()
            + self.g_c.params()
            + self.g_b.params()
            + self.clf_c.params()
            + self.clf_b.params()
        )

    def mask_weights(self, batch: BatchedGraph) -> tuple[Tensor, Tensor]:
        return edge_scores(self.masker, batch)

    def embed(self, batch: BatchedGraph) -> tuple[Tensor, Tensor]:
        causal_view, bias_view = split_graph(batch, self.mask_weights(batch))
        z_c = self.g_c.encode(causal_view.batch, causal_view.weights)
        z_b = self.g_b.encode(bias_view.batch, bias_view.weights)
        return z_c, z_b

    def predict_probs(self, batch: BatchedGraph) -> Tensor:
        z_c, z_b = self.embed(batch)
        return self.clf_c.classify(ad.concat_cols(z_c, z_b))

    def architecture(self) -> dict:
        return {
            "mode": self.mode,
            "encoder": self.g_c.kind,
            "hidden": self.g_c.hidden,
            "num_layers": len(self.g_c.layers),
            "mask_hidden": self.masker.w1.tensor.data.shape[1],
            "num_classes": self.clf_c.num_classes,
        }


class VanillaModel:
    """Plain encoder + softmax classifier baseline (unit or stored weights)."""

    mode = "vanilla"

    def __init__(self, encoder, clf):
        self.encoder = encoder
        self.clf = clf

    @classmethod
    def init(cls, config: TrainConfig) -> "VanillaModel":
        rng = substream(config.seed, "init")
        enc = make_encoder(config.encoder, rng, config.hidden, config.num_layers, prefix="enc")
        clf = LinearClassifier.init(rng, enc.hidden, config.num_classes, prefix="clf")
        return cls(enc, clf)

    def params(self) -> list[Parameter]:
        return self.encoder.params() + self.clf.params()

    def predict_probs(self, batch: BatchedGraph) -> Tensor:
        return self.clf.classify(self.encoder.encode(batch))

    def architecture(self) -> dict:
        return {
            "mode": self.mode,
            "encoder": self.encoder.kind,
            "hidden": self.encoder.hidden,
            "num_layers": len(self.encoder.layers),
            "mask_hidden": 0,
            "num_classes": self.clf.num_classes,
        }


def disc_step_loss(
    model: DiscModel,
    batch: BatchedGraph,
    epoch: int,
    config: TrainConfig,
    swap_rng: np.random.Generator,
) -> tuple[Tensor, float, float]:
    """Loss for one mini-batch; returns (loss, l_d value, l_g value)."""
    z_c, z_b = model.embed(batch)
    y = batch.y
    dis = disentangle_loss(model.clf_c, model.clf_b, z_c, z_b, y, config.q)
    l_g = None
    if epoch >= config.t_gen and batch.num_graphs >= 2:
        swap = counterfactual_swap(z_c, z_b, y, swap_rng)
        l_g = generation_loss(
            model.clf_c, model.clf_b, swap, y, config.q, dis.weights
        ).loss
    loss = total_loss(dis.loss, l_g, config.lambda_g, epoch, config.t_gen)
    return loss, float(dis.loss.data), 0.0 if l_g is None else float(l_g.data)


def vanilla_step_loss(model: VanillaModel, batch: BatchedGraph) -> tuple[Tensor, float, float]:
    logits = model.clf.logits(model.encoder.encode(batch))
    loss = ad.mean(ce_per_sample(logits, batch.y))
    return loss, float(loss.data), 0.0


@dataclass
class EpochMetrics:
    epoch: int
    loss_d: float
    loss_g: float
    loss_total: float
    train_acc: float
    val_acc: float

    HEADER = "epoch,loss_d,loss_g,loss_total,train_acc,val_acc"

    def to_row(self) -> str:
        return ",".join(
            [
                str(self.epoch),
                repr(self.loss_d),
                repr(self.loss_g),
                repr(self.loss_total),
                repr(self.train_acc),
                repr(self.val_acc),
            ]
        )


@dataclass
class TrainResult:
    model: object
    metrics: list[EpochMetrics]
    seconds_per_epoch: list[float] = field(default_factory=list)


def _infer_num_classes(graphs: list[GraphInstance]) -> int:
    return int(max(g.y for g in graphs)) + 1


def train(
    config: TrainConfig,
    train_graphs: list[GraphInstance],
    val_graphs: list[GraphInstance] | None = None,
    *,
    mode: str = "disc",
    model=None,
    start_epoch: int = 0,
    on_epoch=None,
) -> TrainResult:
    """Run the two-phase training loop (or the vanilla baseline).

    The returned model is the last-epoch model; no early stopping or
    checkpoint selection happens here. All randomness is drawn from named
    substreams of ``config.seed``, keyed by epoch, so a resumed run
    reproduces an uninterrupted one exactly.
    """
    if not train_graphs:
        raise TrainingError("cannot train on an empty dataset")
    if config.num_classes is None:
        config.num_classes = _infer_num_classes(train_graphs)
    if model is None:
        model = DiscModel.init(config) if mode == "disc" else VanillaModel.init(config)

    opt = Adam(model.params(), lr=config.lr)
    metrics: list[EpochMetrics] = []
    result = TrainResult(model=model, metrics=metrics)

    with ad.finite_checks(False):
        for epoch in range(start_epoch, config.epochs):
            t0 = time.perf_counter()
            shuffle_rng = substream(config.seed, "shuffle", epoch)
            swap_rng = substream(config.seed, "swap", epoch)
            sum_d = sum_g = sum_total = 0.0
            batches = shuffled_batches(len(train_graphs), config.batch_size, shuffle_rng)
            for b_idx, ids in enumerate(batches):
                batch = batch_graphs([train_graphs[i] for i in ids])
                if isinstance(model, DiscModel):
                    loss, l_d, l_g = disc_step_loss(model, batch, epoch, config, swap_rng)
                else:
                    loss, l_d, l_g = vanilla_step_loss(model, batch)
                if not np.isfinite(loss.data):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b_idx}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                sum_d += l_d
                sum_g += l_g
                sum_total += float(loss.data)
            n_batches = len(batches)
            row = EpochMetrics(
                epoch=epoch,
                loss_d=sum_d / n_batches,
                loss_g=sum_g / n_batches,
                loss_total=sum_total / n_batches,
                train_acc=accuracy(model, train_graphs, config.batch_size),
                val_acc=accuracy(model, val_graphs, config.batch_size) if val_graphs else float("nan"),
            )
            metrics.append(row)
            result.seconds_per_epoch.append(time.perf_counter() - t0)
            if on_epoch is not None:
                on_epoch(row, model)
    return result
