"""Losses, hand-written backprop and the SGD prompt-learning loop.

Per-sample dataflow (fixed order): global probabilities -> p -> class
similarities -> background similarities -> refinement -> extraction ->
losses. Background selection is a hard, non-differentiable decision; the
confidence ``p`` acts as a constant modulation factor unless
``differentiate_modulation`` is set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import bgdecomp
from .core import (BackgroundSet, ConfigError, FeatureBundle, ModelConfig, PromptSet,
                   SimilarityMaps, log_softmax)
from .encoders import FrozenTextEncoder

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOG_FLOOR = float(np.log(PROB_FLOOR))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.002
    batch_size: int = 32
    shots: Optional[int] = None
    use_refinement: bool = True
    use_patch_sct: bool = True
    use_loss_modulation: bool = True
    differentiate_modulation: bool = False
    # Weight of the background-token objective; 0 keeps background tokens frozen
    # at initialization (no other loss term reaches them).
    background_weight: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.shots is not None and self.shots < 1:
            raise ConfigError(f"shots must be positive, got {self.shots}")
        if self.background_weight < 0:
            raise ConfigError(f"background_weight must be non-negative, got {self.background_weight}")

    @classmethod
    def locoop(cls, **kw) -> "TrainConfig":
        """All Mambo components off: top-K extraction and plain CE + entropy."""
        return cls(use_refinement=False, use_patch_sct=False, use_loss_modulation=False, **kw)

    @property
    def strategy(self) -> str:
        if self.use_patch_sct:
            return "sct"
        return "fixed" if self.use_refinement else "topk"


# -- scalar losses ---------------------------------------------------------

def ce_loss(global_probs, label: int) -> float:
    """``-log probs[label]`` with the probability floored at 1e-12."""
    p = float(np.asarray(global_probs)[label])
    return -float(np.log(max(p, PROB_FLOOR)))


def ood_loss(patch_probs, background: BackgroundSet) -> float:
    """Mean negative Shannon entropy of the selected rows (0 for an empty set)."""
    if not background.indices:
        return 0.0
    rows = np.asarray(patch_probs, dtype=np.float64)[background.sorted_indices()]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(rows > 0, rows * np.log(rows), 0.0)
    return float(np.mean(plogp.sum(axis=1)))


def combine_losses(ce: float, ood: float, p: float, lam: float, modulate: bool,
                   bg: float = 0.0, mu: float = 0.0) -> float:
    if modulate:
        return ce * (1.0 - p) + (lam * ood + mu * bg) * p
    return ce + lam * ood + mu * bg


def total_loss(per_sample, lam: float, modulate: bool) -> float:
    """Batch mean of the per-sample objective.

    ``per_sample`` is an iterable of ``(ce, ood, p)`` triples.
    """
    vals = [combine_losses(ce, ood, p, lam, modulate) for ce, ood, p in per_sample]
    if not vals:
        raise ValueError("empty batch")
    return float(np.mean(vals))


# -- per-sample forward/backward -------------------------------------------

@dataclass
class Decisions:
    """Hard decisions taken at a parameter point; reused to freeze a finite-difference probe.

    ``p = None`` freezes only the background set and leaves ``p`` live.
    """

    p: Optional[float]
    background: BackgroundSet


@dataclass
class SampleResult:
    loss: float
    ce: float
    ood: float
    bg: float
    p: float
    background: BackgroundSet
    maps: SimilarityMaps
    clamped: bool
    d_class: np.ndarray = field(repr=False)
    d_background: np.ndarray = field(repr=False)


def select_background(maps: SimilarityMaps, patch_probs: np.ndarray, label: int,
                      cfg: ModelConfig, tcfg: TrainConfig) -> BackgroundSet:
    sim = maps.background_sim
    if tcfg.use_refinement:
        sim = bgdecomp.refine_similarity(maps, label)
    if tcfg.use_patch_sct:
        return bgdecomp.extract_background_sct(sim, maps.gt_probability, cfg.sct_strength)
    if tcfg.use_refinement:
        return bgdecomp.extract_background_fixed(sim, cfg.topk)
    return bgdecomp.extract_background_topk(patch_probs, label, cfg.topk)


def sample_forward_backward(bundle: FeatureBundle, class_feats: np.ndarray, bg_feat: np.ndarray,
                            cfg: ModelConfig, tcfg: TrainConfig,
                            frozen: Optional[Decisions] = None) -> SampleResult:
    """Loss of one labelled sample and its gradient w.r.t. the text features."""
    y = bundle.label
    if y is None:
        raise ValueError("training samples need a label")
    tau = cfg.tau
    x = bundle.global_feature
    F = bundle.local_features

    logp_global = log_softmax(class_feats @ x / tau)
    probs = np.exp(logp_global)
    p_true = float(probs[y])
    p = p_true if frozen is None or frozen.p is None else frozen.p

    class_sim = F @ class_feats.T
    z = class_sim / tau
    logP = log_softmax(z, axis=1)
    P = np.exp(logP)
    maps = SimilarityMaps(class_sim, F @ bg_feat, min(max(p, 0.0), 1.0))
    if frozen is None:
        background = select_background(maps, P, y, cfg, tcfg)
    else:
        background = frozen.background
        if tcfg.use_refinement:
            bgdecomp.refine_similarity(maps, y)
    J = background.sorted_indices()

    # floor only where the probability underflows to exactly zero
    clamped = probs[y] == 0.0
    ce = -LOG_FLOOR if clamped else -float(logp_global[y])

    d_z = np.zeros_like(z)
    d_bgsim = np.zeros(F.shape[0])
    ood = 0.0
    bgl = 0.0
    if J.size:
        rows_logP = logP[J]
        rows_P = P[J]
        neg_ent = np.sum(rows_P * rows_logP, axis=1)
        ood = float(np.mean(neg_ent))
        # d(sum P log P)/dz = P * (log P - sum P log P)
        d_ood_z = rows_P * (rows_logP - neg_ent[:, None]) / J.size
    d_ext = None
    if tcfg.background_weight > 0:
        # (M+1)-way patch softmax with the background similarity as the extra
        # logit: selected patches target background, the rest the true class
        ext = np.concatenate([z, (maps.background_sim / tau)[:, None]], axis=1)
        logq = log_softmax(ext, axis=1)
        target = np.full(F.shape[0], y)
        target[J] = ext.shape[1] - 1
        rows = np.arange(F.shape[0])
        bgl = float(np.mean(-logq[rows, target]))
        d_ext = np.exp(logq)
        d_ext[rows, target] -= 1.0
        d_ext /= F.shape[0]

    mu = tcfg.background_weight
    lam = cfg.ood_weight
    if tcfg.use_loss_modulation:
        w_ce, w_reg = 1.0 - p, p
    else:
        w_ce, w_reg = 1.0, 1.0
    loss = combine_losses(ce, ood, p, lam, tcfg.use_loss_modulation, bgl, mu)

    d_logit = np.zeros_like(logp_global)
    if not clamped:
        d_logit = probs.copy()
        d_logit[y] -= 1.0
        d_logit *= w_ce
    if J.size:
        d_z[J] += w_reg * lam * d_ood_z
    if d_ext is not None:
        d_z += w_reg * mu * d_ext[:, :-1]
        d_bgsim += w_reg * mu * d_ext[:, -1] / tau
    live_p = frozen is None or frozen.p is None
    if tcfg.use_loss_modulation and tcfg.differentiate_modulation and live_p:
        d_p = -ce + lam * ood + mu * bgl
        dp_dlogit = -p_true * probs
        dp_dlogit[y] += p_true
        d_logit = d_logit + d_p * dp_dlogit

    d_class = np.outer(d_logit, x) / tau + (d_z / tau).T @ F
    d_background = d_bgsim @ F
    return SampleResult(loss, ce, ood, bgl, p, background, maps, bool(clamped), d_class, d_background)


# -- model / batch ---------------------------------------------------------

@dataclass
class BatchResult:
    loss: float
    d_context: np.ndarray
    d_background: np.ndarray
    samples: list


def batch_loss_and_grad(prompt: PromptSet, batch: Sequence[FeatureBundle], cfg: ModelConfig,
                        tcfg: TrainConfig, encoder: FrozenTextEncoder,
                        frozen: Optional[Sequence[Decisions]] = None) -> BatchResult:
    """Mean objective over ``batch`` and its gradient w.r.t. the learnable tokens."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    class_feats = encoder.encode_all_classes(prompt)
    bg_feat = encoder.encode_text_background(prompt)
    n = len(batch)
    d_class = np.zeros_like(class_feats)
    d_bg = np.zeros_like(bg_feat)
    results = []
    for i, bundle in enumerate(batch):
        r = sample_forward_backward(bundle, class_feats, bg_feat, cfg, tcfg,
                                    None if frozen is None else frozen[i])
        d_class += r.d_class
        d_bg += r.d_background
        results.append(r)
    loss = float(np.mean([r.loss for r in results]))
    d_ctx, d_bgt = encoder.grad_text_wrt_prompt(prompt, d_class / n, d_bg / n)
    return BatchResult(loss, d_ctx, d_bgt, results)


def batch_loss(prompt, batch, cfg, tcfg, encoder, frozen=None) -> float:
    return batch_loss_and_grad(prompt, batch, cfg, tcfg, encoder, frozen).loss


def freeze_decisions(result: BatchResult) -> list:
    return [Decisions(r.p, r.background) for r in result.samples]


@dataclass
class TrainResult:
    prompt: PromptSet
    initial_prompt: PromptSet
    loss_trace: list
    clamped_ce: int = 0
    steps: int = 0


def build_encoder(cfg: ModelConfig, nonlinearity: str = "identity") -> FrozenTextEncoder:
    return FrozenTextEncoder.from_seed(cfg.feature_dim, cfg.seed, nonlinearity)


def train(dataset: Sequence[FeatureBundle], cfg: ModelConfig, tcfg: TrainConfig,
          class_word_embeddings=None, encoder: Optional[FrozenTextEncoder] = None,
          prompt: Optional[PromptSet] = None) -> TrainResult:
    """SGD over the context and background tokens only.

    Either ``prompt`` or ``class_word_embeddings`` must be given; in the
    latter case the learnable tokens are initialized from ``cfg.seed``.
    The loss trace holds the sample-weighted mean loss of each epoch,
    measured before each step's update.
    """
    if encoder is None:
        encoder = build_encoder(cfg)
    if prompt is None:
        if class_word_embeddings is None:
            raise ConfigError("train needs a prompt or class word embeddings")
        prompt = PromptSet.initialize(cfg, class_word_embeddings)
    dataset = list(dataset)
    counts = np.zeros(cfg.num_classes, dtype=int)
    for b in dataset:
        b.check_grid(cfg)
        if b.label is None or not 0 <= b.label < cfg.num_classes:
            raise ConfigError(f"training sample has invalid label {b.label!r}")
        counts[b.label] += 1
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ConfigError(f"classes without training samples: {empty.tolist()}")

    initial = prompt.copy()
    current = prompt.copy()
    rng = np.random.default_rng([cfg.seed, 0x5D6])
    trace, clamped, steps = [], 0, 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(order), tcfg.batch_size):
            batch = [dataset[i] for i in order[start:start + tcfg.batch_size]]
            res = batch_loss_and_grad(current, batch, cfg, tcfg, encoder)
            epoch_loss += res.loss * len(batch)
            clamped += sum(r.clamped for r in res.samples)
            current.context_tokens -= tcfg.learning_rate * res.d_context
            current.background_tokens -= tcfg.learning_rate * res.d_background
            steps += 1
        trace.append(epoch_loss / len(dataset))
        logger.debug("epoch %d loss %.6f", epoch, trace[-1])
    if clamped:
        logger.warning("cross-entropy probability floor hit %d times", clamped)
    return TrainResult(current, initial, trace, clamped, steps)
