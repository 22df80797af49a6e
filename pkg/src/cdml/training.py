"""Softmax pre-training and pairwise metric fine-tuning.

Fine-tuning works on triplet contexts (anchor, positive, negative). Each
epoch refreshes every training image's feature under the current model,
mines a moderate positive and hard negatives per anchor from those cached
distances, then runs momentum-SGD steps over the contexts. A step computes
the mean of ``d(anchor, positive) - d(anchor, negative)`` and adds the
weight-constraint penalty on W; extractor weights and W move together.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset, ImageSample
from .evaluation import evaluate
from .extractor import ExtractorConfig, ExtractorParams, embed, extract_many, init_params
from .metric import MetricLayer, batch_distance, constraint_gradient, constraint_penalty
from .mining import (
    Candidate,
    MiningConfig,
    MiningError,
    PositivePool,
    hard_negative_select,
    moderate_positive_select,
    random_positive_select,
)
from .model import Model
from .tensor import Tensor

logger = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_decay: float = 0.5
    decay_every: int = 20
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 100
    lam: float = 1e-2
    margin: float | None = None
    seed: int = 0
    translate: int = 4
    tied_branches: bool = False
    clip_norm: float = 10.0
    anchors_per_epoch: int | None = None
    pretrain_epochs: int = 0
    pretrain_lr: float = 0.01
    pretrain_batch: int = 32
    softmax_scale: float = 10.0
    mining: MiningConfig = field(default_factory=MiningConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.translate < 0:
            raise ValueError("translation bound must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    def rate(self, epoch: int) -> float:
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


@dataclass(frozen=True)
class TripletContext:
    anchor: int
    positive: int
    negative: int


def check_context(ctx: TripletContext, dataset: Dataset) -> None:
    a, p, n = dataset[ctx.anchor], dataset[ctx.positive], dataset[ctx.negative]
    if a.identity != p.identity or a.camera == p.camera:
        raise MiningError(f"positive {ctx.positive} is not a cross-camera match of anchor {ctx.anchor}")
    if n.identity == a.identity:
        raise MiningError(f"negative {ctx.negative} shares the anchor identity")


# ---------------------------------------------------------------------------
# augmentation


def shift_image(pixels: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate by ``(dy, dx)``; uncovered pixels replicate the edge."""
    _, h, w = pixels.shape
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return pixels[:, rows][:, :, cols]


def augment(image: ImageSample, rng: np.random.Generator, bound: int = 4) -> ImageSample:
    if bound < 0:
        raise ValueError("translation bound must be non-negative")
    if bound == 0:
        return ImageSample(image.pixels.copy(), image.identity, image.camera, image.index, image.occluded)
    dy, dx = rng.integers(-bound, bound + 1, size=2)
    return ImageSample(
        shift_image(image.pixels, int(dy), int(dx)), image.identity, image.camera, image.index, image.occluded
    )


def _augment_stack(pixels: np.ndarray, rng: np.random.Generator, bound: int) -> np.ndarray:
    if bound == 0:
        return pixels
    offsets = rng.integers(-bound, bound + 1, size=(pixels.shape[0], 2))
    return np.stack([shift_image(p, int(dy), int(dx)) for p, (dy, dx) in zip(pixels, offsets)])


# ---------------------------------------------------------------------------
# mining over a feature snapshot


class MiningView:
    """Distances between training images under a frozen model snapshot."""

    def __init__(self, dataset: Dataset, model: Model, features: np.ndarray | None = None):
        self.dataset = dataset
        self.ids = dataset.labels
        self.cams = dataset.camera_labels
        feats = extract_many(dataset.pixel_array(), model.extractor) if features is None else features
        self.proj = feats @ model.metric.W.data
        self._by_identity: dict[int, np.ndarray] = {}
        for i in np.unique(self.ids):
            self._by_identity[int(i)] = np.flatnonzero(self.ids == i)

    def distances(self, anchor: int, others: np.ndarray) -> np.ndarray:
        diff = self.proj[others] - self.proj[anchor]
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    def positives(self, anchor: int) -> np.ndarray:
        same = self._by_identity[int(self.ids[anchor])]
        return same[self.cams[same] != self.cams[anchor]]

    def negatives(self, anchor: int) -> np.ndarray:
        return np.flatnonzero((self.ids != self.ids[anchor]) & (self.cams != self.cams[anchor]))

    def anchors(self) -> np.ndarray:
        return np.array([i for i in range(len(self.ids)) if self.positives(i).size], dtype=np.intp)

    def contexts(self, anchor: int, cfg: MiningConfig, rng: np.random.Generator) -> list[TripletContext]:
        pos = self.positives(anchor)
        if pos.size == 0:
            return []
        ident = int(self.ids[anchor])
        pool = PositivePool(
            anchor,
            ident,
            [Candidate(int(j), float(d), ident) for j, d in zip(pos, self.distances(anchor, pos))],
        )
        if cfg.positive_mining:
            positive = moderate_positive_select(pool, cfg)
        else:
            positive = random_positive_select(pool, rng)

        neg = self.negatives(anchor)
        if neg.size == 0:
            raise MiningError(f"anchor {anchor} has no cross-camera negatives")
        if neg.size > cfg.negative_pool_size:
            neg = np.sort(rng.choice(neg, size=cfg.negative_pool_size, replace=False))
        k = min(cfg.hard_negative_count, neg.size)
        if cfg.negative_mining:
            cands = [
                Candidate(int(j), float(d), int(self.ids[j]))
                for j, d in zip(neg, self.distances(anchor, neg))
            ]
            chosen = [c.ref for c in hard_negative_select(ident, cands, k)]
        else:
            chosen = [int(j) for j in rng.choice(neg, size=k, replace=False)]
        return [TripletContext(anchor, positive.ref, n) for n in chosen]


def build_batch(
    dataset: Dataset,
    model: Model,
    cfg: MiningConfig,
    rng: np.random.Generator,
    batch_size: int = 16,
    view: MiningView | None = None,
) -> list[TripletContext]:
    """Sample anchors and mine one context per anchor and hard negative."""
    view = view or MiningView(dataset, model)
    anchors = view.anchors()
    if anchors.size == 0:
        raise MiningError("no identity has images under two cameras; nothing to anchor on")
    picked = rng.choice(anchors, size=min(batch_size, anchors.size), replace=False)
    out: list[TripletContext] = []
    for a in picked:
        out.extend(view.contexts(int(a), cfg, rng))
    return out


# ---------------------------------------------------------------------------
# the step


@dataclass
class StepResult:
    loss: float
    pair_loss: float
    penalty: float
    d_pos: float
    d_neg: float
    grad_norm: float
    clipped: bool


def triplet_pixels(batch: Sequence[TripletContext], pixels: np.ndarray) -> np.ndarray:
    """Stack anchors, then positives, then negatives."""
    idx = [c.anchor for c in batch] + [c.positive for c in batch] + [c.negative for c in batch]
    return pixels[np.asarray(idx, dtype=np.intp)]


def pair_objective(images: np.ndarray, model: Model, margin: float | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """Mean pair loss over triplet-stacked images; also returns both distances.

    The positive pass and negative pass share the anchor features; their
    terms are combined into one scalar before back-propagation.
    """
    n = images.shape[0] // 3
    feats = embed(images, model.extractor)
    x1 = T.take(feats, np.arange(0, n))
    xp = T.take(feats, np.arange(n, 2 * n))
    xn = T.take(feats, np.arange(2 * n, 3 * n))
    d_pos = batch_distance(x1, xp, model.metric)
    d_neg = batch_distance(x1, xn, model.metric)
    diff = T.sub(d_pos, d_neg)
    if margin is not None:
        diff = T.relu(T.add(diff, Tensor(np.full(n, margin))))
    return T.mean(diff), d_pos, d_neg


def total_objective(images: np.ndarray, model: Model, margin: float | None = None) -> float:
    """Pair loss plus weight-constraint penalty, no gradients."""
    with T.no_grad():
        pair, _, _ = pair_objective(images, model, margin)
    return float(pair.data) + constraint_penalty(model.metric.W.data, model.metric.lam)


def compute_gradients(images: np.ndarray, model: Model, margin: float | None = None) -> StepResult:
    """Fill ``.grad`` of every model parameter with the total gradient."""
    for p in model.parameters():
        p.zero_grad()
    pair, d_pos, d_neg = pair_objective(images, model, margin)
    pair.backward()
    W = model.metric.W
    W.grad += constraint_gradient(W.data, model.metric.lam)
    penalty = constraint_penalty(W.data, model.metric.lam)
    gnorm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in model.parameters()))
    return StepResult(
        loss=float(pair.data) + penalty,
        pair_loss=float(pair.data),
        penalty=penalty,
        d_pos=float(d_pos.data.mean()),
        d_neg=float(d_neg.data.mean()),
        grad_norm=gnorm,
        clipped=False,
    )


class MomentumSGD:
    """``v = mu v + g``; ``p -= lr v``, with optional global-norm clipping."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, clip_norm: float | None = 10.0):
        self.params = list(params)
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float, grad_norm: float | None = None) -> bool:
        if grad_norm is None:
            grad_norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params))
        scale = 1.0
        clipped = self.clip_norm is not None and grad_norm > self.clip_norm
        if clipped:
            scale = self.clip_norm / grad_norm
            logger.debug("gradient norm %.3g clipped to %.3g", grad_norm, self.clip_norm)
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += scale * p.grad
            p.data -= lr * v
        return clipped


def _dump(model: Model, result: StepResult) -> str:
    stats = {k: (float(np.abs(v).max()) if v.size else 0.0) for k, v in model.named_arrays().items()}
    return f"non-finite loss {result.loss!r} (pair {result.pair_loss!r}, penalty {result.penalty!r}); max |param|: {stats}"


def train_step(
    batch: Sequence[TripletContext],
    pixels: np.ndarray,
    model: Model,
    config: TrainConfig,
    optimizer: MomentumSGD,
    rng: np.random.Generator,
    lr: float | None = None,
) -> StepResult:
    """One joint update of extractor weights and W from a batch of contexts."""
    if not batch:
        raise ValueError("empty batch")
    images = _augment_stack(triplet_pixels(batch, pixels), rng, config.translate)
    result = compute_gradients(images, model, config.margin)
    if not math.isfinite(result.loss) or not math.isfinite(result.grad_norm):
        raise DivergenceError(_dump(model, result))
    result.clipped = optimizer.step(config.lr if lr is None else lr, result.grad_norm)
    if result.clipped:
        logger.info("gradient clipped (norm %.3g)", result.grad_norm)
    if np.any(model.metric.b != 0):
        raise AssertionError("metric bias drifted from zero")
    return result


# ---------------------------------------------------------------------------
# softmax pre-training


@dataclass
class PretrainHistory:
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_accuracy: float = float("nan")


def _head_logits(feats: Tensor, head_w: Tensor, head_b: Tensor, config: "TrainConfig") -> Tensor:
    # unit-norm features bound the logits; a fixed scale lets the softmax sharpen
    return T.add(T.matmul(T.scale(feats, config.softmax_scale), head_w), head_b)


def pretrain_softmax(
    dataset: Dataset,
    config: TrainConfig,
    params: ExtractorParams | None = None,
    extractor_config: ExtractorConfig | None = None,
    epochs: int | None = None,
) -> tuple[ExtractorParams, PretrainHistory]:
    """Identity classification with a temporary linear softmax head.

    The head sits on the unit-norm features and is discarded afterwards;
    only extractor parameters are returned.
    """
    ids = dataset.identities()
    if len(ids) < 2:
        raise ValueError("softmax pre-training needs at least two identities")
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    if params is None:
        params = init_params(extractor_config or ExtractorConfig(), int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    k = len(ids)
    lookup = {ident: i for i, ident in enumerate(ids)}
    labels = np.array([lookup[s.identity] for s in dataset.samples])
    pixels = dataset.pixel_array()
    dim = params.config.out_dim
    # zero head: uniform softmax at the start, loss exactly ln(k)
    head_w = Tensor(np.zeros((dim, k)), requires_grad=True)
    head_b = Tensor(np.zeros(k), requires_grad=True)
    tensors = params.parameters() + [head_w, head_b]
    opt = MomentumSGD(tensors, config.momentum, config.clip_norm)
    history = PretrainHistory()
    with T.no_grad():
        logits = _head_logits(embed(pixels[: min(len(pixels), 256)], params), head_w, head_b, config)
        history.initial_loss = float(T.softmax_cross_entropy(logits, labels[: min(len(pixels), 256)]).data)

    n_epochs = config.pretrain_epochs if epochs is None else epochs
    for epoch in range(n_epochs):
        order = rng.permutation(len(pixels))
        losses, correct = [], 0
        for lo in range(0, len(order), config.pretrain_batch):
            idx = order[lo:lo + config.pretrain_batch]
            x = _augment_stack(pixels[idx], rng, config.translate)
            for p in tensors:
                p.zero_grad()
            logits = _head_logits(embed(x, params), head_w, head_b, config)
            loss = T.softmax_cross_entropy(logits, labels[idx])
            loss.backward()
            if not math.isfinite(float(loss.data)):
                raise DivergenceError(f"non-finite softmax loss at epoch {epoch}")
            opt.step(config.pretrain_lr)
            losses.append(float(loss.data) * len(idx))
            correct += int(np.sum(logits.data.argmax(axis=1) == labels[idx]))
        history.loss.append(sum(losses) / len(order))
        history.accuracy.append(correct / len(order))
        logger.info("pretrain epoch %d: loss %.4f acc %.3f", epoch, history.loss[-1], history.accuracy[-1])
    with T.no_grad():
        logits = _head_logits(Tensor(extract_many(pixels, params)), head_w, head_b, config)
    history.final_accuracy = float(np.mean(logits.data.argmax(axis=1) == labels))
    return params, history


# ---------------------------------------------------------------------------
# the loop


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_d_pos: float
    mean_d_neg: float
    penalty: float
    steps: int
    clipped: int = 0
    val_rank1: float | None = None


@dataclass
class FitResult:
    model: Model
    trace: list[EpochStats]
    pretrain: PretrainHistory | None = None


def _rngs(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "mining", "augment", "order")
    return {n: np.random.default_rng(s) for n, s in zip(names, np.random.SeedSequence(seed).spawn(len(names)))}


def fit(
    dataset: Dataset,
    config: TrainConfig,
    extractor_config: ExtractorConfig | None = None,
    model: Model | None = None,
    val: Dataset | None = None,
    val_every: int = 0,
) -> FitResult:
    """Optional softmax pre-training followed by pairwise fine-tuning.

    Deterministic in ``config.seed``. Mining distances are recomputed once at
    the start of every epoch.
    """
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rngs = _rngs(config.seed)
    pre = None
    if model is None:
        ecfg = extractor_config or ExtractorConfig()
        if ecfg.tied_branches != config.tied_branches:
            ecfg = replace(ecfg, tied_branches=config.tied_branches)
        params = init_params(ecfg, int(rngs["init"].integers(2**31)))
        if config.pretrain_epochs > 0:
            params, pre = pretrain_softmax(dataset, config, params)
        model = Model(params, MetricLayer.identity(ecfg.out_dim, config.lam))
    else:
        model.metric.lam = config.lam
    model.info.setdefault("lambda", config.lam)

    pixels = dataset.pixel_array()
    opt = MomentumSGD(model.parameters(), config.momentum, config.clip_norm)
    trace: list[EpochStats] = []
    for epoch in range(config.epochs):
        view = MiningView(dataset, model)
        anchors = view.anchors()
        if anchors.size == 0:
            raise MiningError("no identity has images under two cameras; nothing to anchor on")
        anchors = rngs["order"].permutation(anchors)
        if config.anchors_per_epoch is not None:
            anchors = anchors[: config.anchors_per_epoch]
        contexts: list[TripletContext] = []
        for a in anchors:
            contexts.extend(view.contexts(int(a), config.mining, rngs["mining"]))
        lr = config.rate(epoch)
        sums = np.zeros(4)
        clipped = 0
        steps = 0
        for lo in range(0, len(contexts), config.batch_size):
            batch = contexts[lo:lo + config.batch_size]
            res = train_step(batch, pixels, model, config, opt, rngs["augment"], lr)
            sums += len(batch) * np.array([res.loss, res.d_pos, res.d_neg, res.penalty])
            clipped += res.clipped
            steps += 1
        means = sums / max(len(contexts), 1)
        stats = EpochStats(epoch, *means.tolist(), steps=steps, clipped=clipped)
        if val is not None and val_every and (epoch + 1) % val_every == 0:
            stats.val_rank1 = evaluate(val, model, seed=0).rank1
        trace.append(stats)
        logger.info(
            "epoch %d: loss %.4f d_pos %.4f d_neg %.4f penalty %.4g clipped %d",
            epoch, stats.mean_loss, stats.mean_d_pos, stats.mean_d_neg, stats.penalty, clipped,
        )
    return FitResult(model, trace, pre)


def write_loss_csv(trace: Sequence[EpochStats], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "mean_d_pos", "mean_d_neg", "penalty"])
        for s in trace:
            w.writerow([s.epoch, repr(s.mean_loss), repr(s.mean_d_pos), repr(s.mean_d_neg), repr(s.penalty)])
