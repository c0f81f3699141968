"""Patch similarities, background-similarity refinement and background extraction."""

from __future__ import annotations

import numpy as np

from .core import BackgroundSet, FeatureBundle, ShapeError, SimilarityMaps, softmax


def _check_dim(local: np.ndarray, other: np.ndarray) -> None:
    if local.shape[-1] != other.shape[-1]:
        raise ShapeError(f"feature dim {local.shape[-1]} != text dim {other.shape[-1]}")


def local_class_similarity(bundle: FeatureBundle, class_features) -> np.ndarray:
    """(P, M) cosine similarities between patch features and class text features."""
    g = np.atleast_2d(np.asarray(class_features, dtype=np.float64))
    _check_dim(bundle.local_features, g)
    return bundle.local_features @ g.T


def patch_probabilities(class_sim, tau: float) -> np.ndarray:
    """Row-wise softmax of ``class_sim / tau``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return softmax(np.asarray(class_sim, dtype=np.float64) / tau, axis=1)


def global_probability(global_feature, class_features, tau: float, label=None):
    """Class posterior of the global feature.

    Returns ``(probs, p)`` where ``p = probs[label]``, or None without a label.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    g = np.atleast_2d(np.asarray(class_features, dtype=np.float64))
    x = np.asarray(global_feature, dtype=np.float64)
    _check_dim(x, g)
    probs = softmax(g @ x / tau)
    p = None if label is None else float(probs[label])
    return probs, p


def local_background_similarity(bundle: FeatureBundle, background_feature) -> np.ndarray:
    gb = np.asarray(background_feature, dtype=np.float64)
    _check_dim(bundle.local_features, gb)
    return bundle.local_features @ gb


def refinement_weights(gt_class_sim) -> np.ndarray:
    """Min-max weights: 0 at the most class-like patch, 1 at the least.

    A flat column carries no foreground signal, so every weight is 1.
    """
    s = np.asarray(gt_class_sim, dtype=np.float64)
    hi, lo = s.max(), s.min()
    if hi == lo:
        return np.ones_like(s)
    return (hi - s) / (hi - lo)


def refine_similarity(maps: SimilarityMaps, label: int) -> np.ndarray:
    """Damp background similarity on likely-foreground patches.

    ``s_i * ((1 - p) + p * delta_i)`` with delta computed from the
    ground-truth column of ``maps.class_sim``. Also stores the result in
    ``maps.refined_sim``.
    """
    if not 0 <= label < maps.class_sim.shape[1]:
        raise IndexError(f"label {label} outside [0, {maps.class_sim.shape[1]})")
    p = maps.gt_probability
    delta = refinement_weights(maps.class_sim[:, label])
    refined = maps.background_sim * ((1.0 - p) + p * delta)
    maps.refined_sim = refined
    return refined


def extract_background_topk(patch_probs, label: int, k: int) -> BackgroundSet:
    """Patches whose ground-truth probability ranks below the top ``k``.

    Rank 1 is the highest probability; ties resolve to the lower patch index.
    """
    col = np.asarray(patch_probs, dtype=np.float64)[:, label]
    n = col.shape[0]
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}], got {k}")
    order = np.argsort(-col, kind="stable")
    return BackgroundSet(frozenset(int(i) for i in order[k:]), "topk")


def extract_background_fixed(similarity, k: int) -> BackgroundSet:
    """Fixed-size selection by background similarity: all but the ``k`` least background-like patches."""
    s = np.asarray(similarity, dtype=np.float64)
    n = s.shape[0]
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}], got {k}")
    order = np.argsort(s, kind="stable")
    return BackgroundSet(frozenset(int(i) for i in order[k:]), "fixed")


def sct_threshold(refined_sim, p: float, alpha: float) -> float:
    s = np.asarray(refined_sim, dtype=np.float64)
    if s.size == 0:
        raise ValueError("similarity vector is empty")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    return float(s.mean() - alpha * (2.0 * p - 1.0) * s.std())


def extract_background_sct(refined_sim, p: float, alpha: float) -> BackgroundSet:
    """Confidence-adaptive threshold ``mean - alpha * (2p - 1) * std``.

    Confident samples (p near 1) get a lower threshold and therefore more
    background patches. Uses the population standard deviation.
    """
    theta = sct_threshold(refined_sim, p, alpha)
    s = np.asarray(refined_sim, dtype=np.float64)
    idx = np.flatnonzero(s > theta)
    return BackgroundSet(frozenset(int(i) for i in idx), "sct", theta)
