"""Flat ``key = value`` experiment configuration.

Lines starting with ``#`` are comments. Every hyperparameter has a key and
unset keys keep the method's standard settings (lambda 0.2, alpha 1, N 16,
L 64, q 10, lr 0.002, 30 epochs, batch 32).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

from .core import ConfigError, ModelConfig
from .dataio import SyntheticSpec
from .training import TrainConfig


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (section, field name, parser)
KEYS = {
    "seed": ("model", "seed", int),
    "feature_dim": ("model", "feature_dim", int),
    "num_classes": ("model", "num_classes", int),
    "grid_h": ("model", "grid_h", int),
    "grid_w": ("model", "grid_w", int),
    "context_len": ("model", "context_len", int),
    "background_len": ("model", "background_len", int),
    "tau": ("model", "tau", float),
    "tau_test": ("model", "tau_test", float),
    "lambda": ("model", "ood_weight", float),
    "alpha": ("model", "sct_strength", float),
    "topk": ("model", "topk", int),
    "q": ("model", "rmcm_q", int),
    "epochs": ("train", "epochs", int),
    "lr": ("train", "learning_rate", float),
    "batch_size": ("train", "batch_size", int),
    "use_refinement": ("train", "use_refinement", _bool),
    "use_patch_sct": ("train", "use_patch_sct", _bool),
    "use_loss_modulation": ("train", "use_loss_modulation", _bool),
    "differentiate_modulation": ("train", "differentiate_modulation", _bool),
    "background_weight": ("train", "background_weight", float),
    "shots": ("synthetic", "shots", int),
    "num_ood_classes": ("synthetic", "num_ood_classes", int),
    "eval_per_class": ("synthetic", "eval_per_class", int),
    "patch_size": ("synthetic", "patch_size", int),
    "channels": ("synthetic", "channels", int),
    "background_pool": ("synthetic", "background_pool", int),
    "backgrounds_per_image": ("synthetic", "backgrounds_per_image", int),
    "coverage_min": ("synthetic", "coverage_min", float),
    "coverage_max": ("synthetic", "coverage_max", float),
    "noise": ("synthetic", "noise", float),
    "background_coherence": ("synthetic", "background_coherence", float),
    "nonlinearity": ("encoder", "nonlinearity", str),
    "text_cone": ("encoder", "text_cone", float),
    "image_cone": ("encoder", "image_cone", float),
    "word_noise": ("encoder", "word_noise", float),
    "word_scale": ("encoder", "word_scale", float),
    "train_data": ("data", "train_data", str),
}

MODEL_DEFAULTS = dict(feature_dim=32, num_classes=8)


@dataclass
class ExperimentConfig:
    values: Dict[str, Dict[str, object]] = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return dict(self.values.get(name, {}))

    def get(self, key: str, default=None):
        sec, name, _ = KEYS[key]
        return self.values.get(sec, {}).get(name, default)

    def model_config(self, **override) -> ModelConfig:
        kw = {**MODEL_DEFAULTS, **self.section("model"), **override}
        return _build(ModelConfig, kw)

    def train_config(self, **override) -> TrainConfig:
        return _build(TrainConfig, {**self.section("train"), **override})

    def synthetic_spec(self, seed: int) -> SyntheticSpec:
        kw = self.section("synthetic")
        base = SyntheticSpec()
        lo = kw.pop("coverage_min", base.coverage[0])
        hi = kw.pop("coverage_max", base.coverage[1])
        m = self.section("model")
        kw.update(coverage=(lo, hi), seed=seed,
                  num_id_classes=m.get("num_classes", MODEL_DEFAULTS["num_classes"]),
                  grid_h=m.get("grid_h", base.grid_h), grid_w=m.get("grid_w", base.grid_w))
        return _build(SyntheticSpec, kw)

    def encoder_settings(self) -> dict:
        from .benchmark import BenchmarkSetup

        base = BenchmarkSetup()
        enc = self.section("encoder")
        out = {k: enc.get(k, getattr(base, k))
               for k in ("nonlinearity", "text_cone", "image_cone", "word_noise", "word_scale")}
        if out["nonlinearity"] not in ("identity", "tanh"):
            raise ConfigError(f"nonlinearity: unknown value {out['nonlinearity']!r}")
        return out


def _build(cls, kw):
    try:
        return cls(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        sec, name, parse = KEYS[key]
        try:
            parsed = parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
        cfg.values.setdefault(sec, {})[name] = parsed
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)
