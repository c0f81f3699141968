"""Patch-grid emitters: netpbm images and CSV grids, one pixel per patch."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import bgdecomp
from .core import BackgroundSet, FeatureBundle, ModelConfig, ShapeError


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _grid(values, h: int, w: int) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64)
    if a.size != h * w:
        raise ShapeError(f"expected {h * w} values for a {h}x{w} grid, got {a.size}")
    return a.reshape(h, w)


def _unit_range(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0.0:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def heat_colormap(t: np.ndarray) -> np.ndarray:
    """Map [0, 1] to blue -> red through white, as uint8 RGB."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    r = np.clip(2.0 * t, 0.0, 1.0)
    b = np.clip(2.0 * (1.0 - t), 0.0, 1.0)
    g = 1.0 - np.abs(2.0 * t - 1.0)
    return np.round(np.stack([r, g, b], axis=-1) * 255.0).astype(np.uint8)


def encode_ppm(values, h: int, w: int) -> bytes:
    """Binary PPM (P6) heatmap; values are min-max scaled before coloring."""
    rgb = heat_colormap(_unit_range(_grid(values, h, w)))
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def encode_pgm(values, h: int, w: int) -> bytes:
    """Binary PGM (P5) of values already in [0, 1]; no rescaling."""
    a = np.clip(_grid(values, h, w), 0.0, 1.0)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.round(a * 255.0).astype(np.uint8).tobytes()


def encode_pbm(mask, h: int, w: int) -> bytes:
    """Plain PBM (P1); 1 (black) marks a background patch."""
    m = _grid(np.asarray(mask, dtype=bool), h, w).astype(int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in m)
    return f"P1\n{w} {h}\n{rows}\n".encode("ascii")


def decode_pbm(data: bytes) -> np.ndarray:
    tokens = [t for line in data.decode("ascii").splitlines()
              for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P1":
        raise ValueError("not a plain PBM")
    w, h = int(tokens[1]), int(tokens[2])
    bits = np.array([int(t) for t in tokens[3:]], dtype=np.uint8)
    if bits.size != h * w:
        raise ValueError(f"PBM holds {bits.size} pixels, header says {h * w}")
    return bits.reshape(h, w).astype(bool)


def grid_csv(values, h: int, w: int) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    for row in _grid(values, h, w):
        writer.writerow([repr(float(v)) for v in row])
    return out.getvalue()


def read_grid_csv(text: str) -> np.ndarray:
    rows = [[float(v) for v in row] for row in csv.reader(io.StringIO(text)) if row]
    if len({len(r) for r in rows}) > 1:
        raise ValueError("ragged CSV grid")
    return np.array(rows, dtype=np.float64)


@dataclass
class PatchView:
    """Everything drawn for one sample."""

    refined_sim: np.ndarray
    delta: np.ndarray
    background: BackgroundSet
    label_used: int
    p: float


def patch_view(bundle: FeatureBundle, class_features, background_feature, cfg: ModelConfig,
               use_patch_sct: bool = True) -> PatchView:
    """Refinement, Δ map and extraction for one sample.

    Unlabeled samples fall back to the predicted class.
    """
    g = np.asarray(class_features, dtype=np.float64)
    probs, _ = bgdecomp.global_probability(bundle.global_feature, g, cfg.tau)
    label = int(np.argmax(probs)) if bundle.label is None else bundle.label
    p = float(probs[label])
    cs = bgdecomp.local_class_similarity(bundle, g)
    maps = bgdecomp.SimilarityMaps(cs, bgdecomp.local_background_similarity(bundle, background_feature), p)
    refined = bgdecomp.refine_similarity(maps, label)
    if use_patch_sct:
        J = bgdecomp.extract_background_sct(refined, p, cfg.sct_strength)
    else:
        J = bgdecomp.extract_background_topk(bgdecomp.patch_probabilities(cs, cfg.tau), label, cfg.topk)
    return PatchView(refined, bgdecomp.refinement_weights(cs[:, label]), J, label, p)


def write_views(view: PatchView, out_dir, sample_id: str, h: int, w: int) -> list:
    """Write ``{id}_sim.ppm/.csv``, ``{id}_mask.pbm`` and ``{id}_delta.pgm/.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        f"{sample_id}_sim.ppm": encode_ppm(view.refined_sim, h, w),
        f"{sample_id}_sim.csv": grid_csv(view.refined_sim, h, w).encode("utf-8"),
        f"{sample_id}_mask.pbm": encode_pbm(view.background.mask(h * w), h, w),
        f"{sample_id}_delta.pgm": encode_pgm(view.delta, h, w),
        f"{sample_id}_delta.csv": grid_csv(view.delta, h, w).encode("utf-8"),
    }
    for name, data in files.items():
        _atomic_write(out / name, data)
    return sorted(files)
