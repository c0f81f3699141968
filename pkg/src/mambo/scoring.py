"""Test-time OOD scores and detection metrics."""

from __future__ import annotations

import csv
import io
from typing import Iterable

import numpy as np

from .core import ConfigError, DetectionReport, FeatureBundle, softmax

TPR_TARGET = 0.95


def mcm_from_sims(global_sims, tau: float = 1.0) -> float:
    return float(np.max(softmax(np.asarray(global_sims, dtype=np.float64) / tau)))


def score_mcm(bundle: FeatureBundle, class_features, tau_test: float = 1.0) -> float:
    """Maximum softmax probability of the global feature over the ID classes."""
    return mcm_from_sims(np.asarray(class_features) @ bundle.global_feature, tau_test)


def score_glmcm(bundle: FeatureBundle, class_features, tau_test: float = 1.0) -> float:
    """MCM plus the largest per-patch class probability."""
    g = np.asarray(class_features, dtype=np.float64)
    local = softmax(bundle.local_features @ g.T / tau_test, axis=1)
    return score_mcm(bundle, g, tau_test) + float(local.max())


def background_aware_patch_scores(class_sim, background_sim, tau: float = 1.0) -> np.ndarray:
    """Per-patch max class probability with the background similarity as an extra logit.

    For patch z: ``max_i exp(c_zi/t) / (sum_j exp(c_zj/t) + exp(s_z/t))``.
    """
    c = np.asarray(class_sim, dtype=np.float64) / tau
    s = np.asarray(background_sim, dtype=np.float64)[:, None] / tau
    probs = softmax(np.concatenate([c, s], axis=1), axis=1)
    return probs[:, :-1].max(axis=1)


def top_q_mean(values, q: int) -> float:
    v = np.asarray(values, dtype=np.float64)
    if not 1 <= q <= v.size:
        raise ConfigError(f"q must lie in [1, {v.size}], got {q}")
    return float(np.mean(np.sort(v)[::-1][:q]))


def score_rmcm(bundle: FeatureBundle, class_features, background_feature, q: int,
               tau_test: float = 1.0) -> float:
    """MCM plus the mean of the ``q`` largest background-aware patch scores.

    Uses the unrefined background similarity (no label at test time).
    """
    g = np.asarray(class_features, dtype=np.float64)
    if not 1 <= q <= bundle.num_patches:
        raise ConfigError(f"q must lie in [1, {bundle.num_patches}], got {q}")
    patch = background_aware_patch_scores(bundle.local_features @ g.T,
                                          bundle.local_features @ background_feature, tau_test)
    return score_mcm(bundle, g, tau_test) + top_q_mean(patch, q)


SCORERS = ("mcm", "glmcm", "rmcm")


def score_all(bundle, class_features, background_feature, q, tau_test=1.0) -> dict:
    return {
        "mcm": score_mcm(bundle, class_features, tau_test),
        "glmcm": score_glmcm(bundle, class_features, tau_test),
        "rmcm": score_rmcm(bundle, class_features, background_feature, q, tau_test),
    }


def detect(score: float, gamma: float) -> str:
    return "ID" if score >= gamma else "OOD"


def _check(id_scores, ood_scores):
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.asarray(ood_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("score lists must be non-empty")
    return a, b


def tpr95_threshold(id_scores, tpr: float = TPR_TARGET) -> float:
    """Largest threshold that still keeps at least ``tpr`` of ID scores at or above it."""
    a = np.sort(np.asarray(id_scores, dtype=np.float64).ravel())[::-1]
    if a.size == 0:
        raise ValueError("score lists must be non-empty")
    # need count(a >= gamma) >= ceil(tpr * n); the tightest gamma is that order statistic
    need = int(np.ceil(tpr * a.size - 1e-9))
    return float(a[max(need, 1) - 1])


def fpr95(id_scores, ood_scores) -> float:
    a, b = _check(id_scores, ood_scores)
    gamma = tpr95_threshold(a)
    return float(np.count_nonzero(b >= gamma)) / b.size


def auroc(id_scores, ood_scores) -> float:
    """P(ID > OOD) + 0.5 P(tie) by exact pair counting."""
    a, b = _check(id_scores, ood_scores)
    b = np.sort(b)
    below = np.searchsorted(b, a, side="left")
    below_or_tie = np.searchsorted(b, a, side="right")
    twice_wins = 2 * int(below.sum()) + int((below_or_tie - below).sum())
    return twice_wins / (2.0 * a.size * b.size)


def detection_report(id_scores, ood_scores) -> DetectionReport:
    a, b = _check(id_scores, ood_scores)
    return DetectionReport(tuple(a.tolist()), tuple(b.tolist()), tpr95_threshold(a),
                           fpr95(a, b), auroc(a, b))


def write_score_csv(rows: Iterable[dict], stream=None) -> str:
    """CSV with columns sample_id,label_or_OOD,s_mcm,s_glmcm,s_rmcm; returns the text.

    A score of ``None`` is written as an empty field.
    """
    out = io.StringIO() if stream is None else stream
    w = csv.writer(out, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(["sample_id", "label_or_OOD", "s_mcm", "s_glmcm", "s_rmcm"])
    for r in rows:
        w.writerow([r["sample_id"], r["label"]]
                   + ["" if r[k] is None else repr(float(r[k])) for k in ("mcm", "glmcm", "rmcm")])
    return out.getvalue() if stream is None else ""
