"""Shared domain types and numeric conventions.

All training-path arithmetic is float64. Patch order is row-major
(patch index = row * W + col) everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

UNIT_TOL = 1e-6


class MamboError(Exception):
    """Base class for all package errors."""


class DegenerateVectorError(MamboError, ValueError):
    pass


class ConfigError(MamboError, ValueError):
    pass


class ShapeError(MamboError, ValueError):
    pass


def normalize(v) -> np.ndarray:
    """Return ``v / ||v||`` as float64.

    Raises DegenerateVectorError for (near) zero or non-finite input.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise DegenerateVectorError("vector has non-finite entries")
    n = np.linalg.norm(v)
    if n <= 1e-12:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n:.3g}")
    return v / n


def normalize_rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise DegenerateVectorError("matrix has non-finite entries")
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(n <= 1e-12):
        raise DegenerateVectorError("cannot normalize a zero row")
    return a / n


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    z = z - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


@dataclass(frozen=True)
class ModelConfig:
    """Model hyperparameters.

    ``topk`` defaults to half the patch grid and ``rmcm_q`` to
    ``min(10, H*W)`` when left as None.
    """

    feature_dim: int
    num_classes: int
    grid_h: int = 4
    grid_w: int = 4
    context_len: int = 16
    background_len: int = 64
    tau: float = 0.01
    tau_test: float = 1.0
    ood_weight: float = 0.2
    sct_strength: float = 1.0
    topk: Optional[int] = None
    rmcm_q: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        for name in ("feature_dim", "num_classes", "grid_h", "grid_w",
                     "context_len", "background_len"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.topk is None:
            object.__setattr__(self, "topk", self.num_patches // 2)
        if not 0 <= self.topk <= self.num_patches:
            raise ConfigError(f"topk must lie in [0, {self.num_patches}], got {self.topk}")
        if self.rmcm_q is None:
            object.__setattr__(self, "rmcm_q", min(10, self.num_patches))
        if not 1 <= self.rmcm_q <= self.num_patches:
            raise ConfigError(f"rmcm_q must lie in [1, {self.num_patches}], got {self.rmcm_q}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.tau_test > 0:
            raise ConfigError(f"tau_test must be positive, got {self.tau_test}")
        if self.ood_weight < 0:
            raise ConfigError(f"ood_weight must be non-negative, got {self.ood_weight}")
        if self.sct_strength < 0:
            raise ConfigError(f"sct_strength must be non-negative, got {self.sct_strength}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class FeatureBundle:
    """One image: a global feature plus row-major H*W local features."""

    global_feature: np.ndarray
    local_features: np.ndarray
    label: Optional[int] = None
    true_background_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        g = np.asarray(self.global_feature, dtype=np.float64)
        loc = np.asarray(self.local_features, dtype=np.float64)
        if g.ndim != 1 or loc.ndim != 2 or loc.shape[1] != g.shape[0]:
            raise ShapeError(
                f"expected global (d,) and local (P, d), got {g.shape} and {loc.shape}")
        if abs(np.linalg.norm(g) - 1.0) > UNIT_TOL:
            raise DegenerateVectorError("global feature is not unit-norm")
        if np.any(np.abs(np.linalg.norm(loc, axis=1) - 1.0) > UNIT_TOL):
            raise DegenerateVectorError("local features are not unit-norm")
        g.setflags(write=False)
        loc.setflags(write=False)
        object.__setattr__(self, "global_feature", g)
        object.__setattr__(self, "local_features", loc)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))
        if self.true_background_mask is not None:
            m = np.asarray(self.true_background_mask, dtype=bool)
            if m.shape != (loc.shape[0],):
                raise ShapeError(f"mask must have {loc.shape[0]} entries, got {m.shape}")
            m.setflags(write=False)
            object.__setattr__(self, "true_background_mask", m)

    @property
    def num_patches(self) -> int:
        return self.local_features.shape[0]

    @property
    def dim(self) -> int:
        return self.global_feature.shape[0]

    def check_grid(self, cfg: ModelConfig) -> None:
        if self.num_patches != cfg.num_patches or self.dim != cfg.feature_dim:
            raise ShapeError(
                f"bundle has {self.num_patches} patches of dim {self.dim}; "
                f"config expects {cfg.num_patches} of dim {cfg.feature_dim}")


@dataclass
class PromptSet:
    """Learnable context and background tokens plus frozen class words."""

    context_tokens: np.ndarray
    class_word_embeddings: np.ndarray
    background_tokens: np.ndarray

    def __post_init__(self):
        self.context_tokens = np.array(self.context_tokens, dtype=np.float64)
        self.background_tokens = np.array(self.background_tokens, dtype=np.float64)
        words = np.array(self.class_word_embeddings, dtype=np.float64)
        words.setflags(write=False)
        self.class_word_embeddings = words
        d = words.shape[1]
        if self.context_tokens.ndim != 2 or self.context_tokens.shape[1] != d:
            raise ShapeError(f"context tokens must be (N, {d}), got {self.context_tokens.shape}")
        if self.background_tokens.ndim != 2 or self.background_tokens.shape[1] != d:
            raise ShapeError(
                f"background tokens must be (L, {d}), got {self.background_tokens.shape}")

    @property
    def dim(self) -> int:
        return self.class_word_embeddings.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_word_embeddings.shape[0]

    @classmethod
    def initialize(cls, cfg: ModelConfig, class_word_embeddings, std: float = 0.02,
                   rng: Optional[np.random.Generator] = None) -> "PromptSet":
        """Gaussian init of the learnable tokens, as in CoOp."""
        words = np.asarray(class_word_embeddings, dtype=np.float64)
        if words.shape != (cfg.num_classes, cfg.feature_dim):
            raise ShapeError(
                f"class words must be ({cfg.num_classes}, {cfg.feature_dim}), got {words.shape}")
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        ctx = rng.normal(0.0, std, size=(cfg.context_len, cfg.feature_dim))
        bg = rng.normal(0.0, std, size=(cfg.background_len, cfg.feature_dim))
        return cls(ctx, words, bg)

    def copy(self) -> "PromptSet":
        return PromptSet(self.context_tokens.copy(), self.class_word_embeddings,
                         self.background_tokens.copy())


@dataclass
class SimilarityMaps:
    class_sim: np.ndarray
    background_sim: np.ndarray
    gt_probability: float
    refined_sim: Optional[np.ndarray] = None

    def __post_init__(self):
        self.class_sim = np.asarray(self.class_sim, dtype=np.float64)
        self.background_sim = np.asarray(self.background_sim, dtype=np.float64)
        if self.class_sim.ndim != 2 or self.background_sim.shape != (self.class_sim.shape[0],):
            raise ShapeError("class_sim must be (P, M) and background_sim (P,)")
        if not 0.0 <= self.gt_probability <= 1.0:
            raise ValueError(f"gt_probability must lie in [0, 1], got {self.gt_probability}")
        if self.refined_sim is None:
            self.refined_sim = self.background_sim


@dataclass(frozen=True)
class BackgroundSet:
    indices: frozenset
    strategy: str
    threshold: Optional[float] = None

    def mask(self, num_patches: int) -> np.ndarray:
        m = np.zeros(num_patches, dtype=bool)
        m[sorted(self.indices)] = True
        return m

    def sorted_indices(self) -> np.ndarray:
        return np.array(sorted(self.indices), dtype=np.int64)


@dataclass(frozen=True)
class DetectionReport:
    id_scores: tuple
    ood_scores: tuple
    gamma: float
    fpr95: float
    auroc: float
