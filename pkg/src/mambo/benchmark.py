"""Desk-scale experiments: synthetic benchmark, evaluation and the ablation grid."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import bgdecomp, dataio, scoring
from .core import FeatureBundle, ModelConfig, PromptSet
from .encoders import FrozenTextEncoder
from .training import TrainConfig, select_background, train

STRATEGIES: Dict[str, dict] = {
    "baseline": dict(use_refinement=False, use_patch_sct=False, use_loss_modulation=False),
    "refinement": dict(use_refinement=True, use_patch_sct=False, use_loss_modulation=False),
    "patch_sct": dict(use_refinement=False, use_patch_sct=True, use_loss_modulation=False),
    "mambo": dict(use_refinement=True, use_patch_sct=True, use_loss_modulation=True),
}


@dataclass(frozen=True)
class BenchmarkSetup:
    """Everything needed to build one seeded synthetic experiment."""

    synthetic: dataio.SyntheticSpec = dataio.SyntheticSpec()
    feature_dim: int = 32
    word_noise: float = 0.5
    word_scale: float = 1.0
    image_cone: float = 0.8
    text_cone: float = 0.6
    nonlinearity: str = "identity"
    # 32 training samples: batch 4 gives 8 SGD steps per epoch instead of 1
    train: TrainConfig = TrainConfig(batch_size=4)
    model: dict = field(default_factory=dict)  # extra ModelConfig overrides


@dataclass
class Experiment:
    cfg: ModelConfig
    encoder: FrozenTextEncoder
    class_words: np.ndarray
    zero_shot: np.ndarray
    train: List[FeatureBundle]
    id_test: List[FeatureBundle]
    ood_test: List[FeatureBundle]


def build_experiment(setup: BenchmarkSetup, seed: int) -> Experiment:
    syn = replace(setup.synthetic, seed=seed)
    cfg = ModelConfig(feature_dim=setup.feature_dim, num_classes=syn.num_id_classes,
                      grid_h=syn.grid_h, grid_w=syn.grid_w, seed=seed, **setup.model)
    data = dataio.generate_synthetic(syn)
    cone = cone_direction(cfg.feature_dim, seed)
    img = dataio.image_encoder_for(syn, cfg.feature_dim, seed, setup.image_cone * cone)
    enc = FrozenTextEncoder.from_seed(cfg.feature_dim, seed, setup.nonlinearity,
                                      offset=setup.text_cone * cone)
    zs = dataio.zero_shot_text_features(data.id_archetypes, img, setup.word_noise, seed,
                                        setup.text_cone * cone)
    words = class_word_embeddings_from_text(enc, zs, setup.word_scale, cfg.context_len + 1)
    enc_all = lambda ims: dataio.encode_images(ims, img, syn.grid_h, syn.grid_w)
    return Experiment(cfg, enc, words, zs, enc_all(data.train), enc_all(data.id_test),
                      enc_all(data.ood_test))


def cone_direction(dim: int, seed: int) -> np.ndarray:
    v = np.random.default_rng([seed, 0xC0E]).normal(size=dim)
    return v / np.linalg.norm(v)


def class_word_embeddings_from_text(encoder: FrozenTextEncoder, text_features, scale: float,
                                    num_tokens: int) -> np.ndarray:
    return np.stack([encoder.word_preimage(t, scale, num_tokens) for t in np.asarray(text_features)])


def score_sets(prompt: PromptSet, encoder: FrozenTextEncoder, cfg: ModelConfig,
               bundles: Sequence[FeatureBundle], which: str) -> np.ndarray:
    g = encoder.encode_all_classes(prompt)
    gb = encoder.encode_text_background(prompt)
    out = []
    for b in bundles:
        if which == "mcm":
            out.append(scoring.score_mcm(b, g, cfg.tau_test))
        elif which == "glmcm":
            out.append(scoring.score_glmcm(b, g, cfg.tau_test))
        elif which == "rmcm":
            out.append(scoring.score_rmcm(b, g, gb, cfg.rmcm_q, cfg.tau_test))
        else:
            raise ValueError(f"unknown score {which!r}")
    return np.array(out)


def mean_extraction_iou(prompt: PromptSet, encoder: FrozenTextEncoder, cfg: ModelConfig,
                        tcfg: TrainConfig, bundles: Sequence[FeatureBundle]) -> float:
    g = encoder.encode_all_classes(prompt)
    gb = encoder.encode_text_background(prompt)
    ious = []
    for b in bundles:
        _, p = bgdecomp.global_probability(b.global_feature, g, cfg.tau, b.label)
        cs = bgdecomp.local_class_similarity(b, g)
        maps = bgdecomp.SimilarityMaps(cs, bgdecomp.local_background_similarity(b, gb), p)
        J = select_background(maps, bgdecomp.patch_probabilities(cs, cfg.tau), b.label, cfg, tcfg)
        ious.append(dataio.extraction_iou(J, b.true_background_mask))
    return float(np.mean(ious))


@dataclass
class CellResult:
    strategy: str
    seed: int
    fpr95: float
    auroc: float
    iou: float
    untrained_auroc: float
    seconds: float


def run_cell(setup: BenchmarkSetup, strategy: str, seed: int, tcfg: Optional[TrainConfig] = None,
             score: str = "rmcm", experiment: Optional[Experiment] = None) -> CellResult:
    t0 = time.perf_counter()
    exp = experiment or build_experiment(setup, seed)
    tcfg = replace(tcfg or setup.train, **STRATEGIES[strategy])
    res = train(exp.train, exp.cfg, tcfg, exp.class_words, exp.encoder)
    ids = score_sets(res.prompt, exp.encoder, exp.cfg, exp.id_test, score)
    oods = score_sets(res.prompt, exp.encoder, exp.cfg, exp.ood_test, score)
    ids0 = score_sets(res.initial_prompt, exp.encoder, exp.cfg, exp.id_test, score)
    oods0 = score_sets(res.initial_prompt, exp.encoder, exp.cfg, exp.ood_test, score)
    iou = mean_extraction_iou(res.prompt, exp.encoder, exp.cfg, tcfg, exp.id_test)
    return CellResult(strategy, seed, scoring.fpr95(ids, oods), scoring.auroc(ids, oods), iou,
                      scoring.auroc(ids0, oods0), time.perf_counter() - t0)


def run_grid(setup: BenchmarkSetup, strategies: Sequence[str], seeds: Sequence[int],
             tcfg: Optional[TrainConfig] = None, score: str = "rmcm") -> List[CellResult]:
    cells = []
    for seed in seeds:
        exp = build_experiment(setup, seed)
        for s in strategies:
            cells.append(run_cell(setup, s, seed, tcfg, score, exp))
    return cells


def summarize(cells: Sequence[CellResult], strategies: Sequence[str]) -> List[dict]:
    rows = []
    for s in strategies:
        sub = [c for c in cells if c.strategy == s]
        row = {"strategy": s, "n": len(sub)}
        for k in ("fpr95", "auroc", "iou"):
            v = np.array([getattr(c, k) for c in sub])
            row[k + "_mean"] = float(v.mean())
            row[k + "_std"] = float(v.std())
        rows.append(row)
    return rows
