"""Synthetic FG/BG patch-grid data, the MMBO feature-dump format and checkpoints.

MMBO layout (little-endian, normative)::

    offset  type      field
    0       4s        magic  b"MMBO"
    4       u16       version (1)
    6       u16       flags  bit0: background text feature present
                             bit1: per-sample masks present
    8       u32 x 5   d, M, H, W, num_samples
    28      u32       CRC-32 of bytes [0, 28)
    32      f32       class text features, M x d
            f32       background text feature, d            (flag bit0)
            records   num_samples x {
                          i32  label (-1 = OOD)
                          f32  global feature, d
                          f32  local features, H*W x d (row-major patches)
                          u8   background mask, H*W      (flag bit1)
                      }
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import BackgroundSet, ConfigError, FeatureBundle, MamboError, ModelConfig, PromptSet
from .encoders import FrozenImageEncoder

MAGIC = b"MMBO"
VERSION = 1
FLAG_BACKGROUND = 0x1
FLAG_MASKS = 0x2
_KNOWN_FLAGS = FLAG_BACKGROUND | FLAG_MASKS
_HEADER = struct.Struct("<4sHH5I")
HEADER_SIZE = _HEADER.size + 4
DUMP_NORM_TOL = 1e-3


class DumpError(MamboError):
    """Malformed or unreadable feature dump."""


class BadMagicError(DumpError):
    pass


class VersionMismatchError(DumpError):
    pass


class HeaderChecksumError(DumpError):
    pass


class TruncatedFileError(DumpError):
    pass


class StructuralError(DumpError):
    pass


class NormViolationError(DumpError):
    pass


# -- synthetic data -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    num_id_classes: int = 8
    num_ood_classes: int = 8
    shots: int = 4
    eval_per_class: int = 8
    grid_h: int = 4
    grid_w: int = 4
    patch_size: int = 4
    channels: int = 3
    background_pool: int = 6
    backgrounds_per_image: int = 2
    coverage: Tuple[float, float] = (0.2, 0.4)
    noise: float = 0.1
    # weight of a direction shared by every background archetype
    background_coherence: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.shots * self.num_id_classes == 0:
            raise ConfigError("shots * num_id_classes must be positive")
        if self.num_id_classes < 0 or self.shots < 0 or self.num_ood_classes < 0:
            raise ConfigError("class and shot counts must be non-negative")
        lo, hi = self.coverage
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"coverage range must satisfy 0 < lo <= hi <= 1, got {self.coverage}")
        if not 0.0 <= self.background_coherence < 1.0:
            raise ConfigError("background_coherence must lie in [0, 1)")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if self.background_pool < 1 or not 1 <= self.backgrounds_per_image <= self.background_pool:
            raise ConfigError("need 1 <= backgrounds_per_image <= background_pool")
        for name in ("grid_h", "grid_w", "patch_size", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def raw_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class SyntheticImage:
    pixels: np.ndarray
    label: Optional[int]  # None for OOD
    background_mask: np.ndarray  # True where the patch is background
    class_id: int  # archetype index; OOD classes count from num_id_classes


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    id_archetypes: np.ndarray
    ood_archetypes: np.ndarray
    background_archetypes: np.ndarray
    train: List[SyntheticImage]
    id_test: List[SyntheticImage]
    ood_test: List[SyntheticImage]


def _unit_rows(rng, n, d):
    a = rng.normal(size=(n, d))
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def _foreground_patches(rng, spec: SyntheticSpec, count: int) -> np.ndarray:
    """``count`` patches closest to a random centre: a compact blob."""
    rows, cols = np.divmod(np.arange(spec.num_patches), spec.grid_w)
    cy, cx = rng.uniform(0, spec.grid_h), rng.uniform(0, spec.grid_w)
    dist = (rows + 0.5 - cy) ** 2 + (cols + 0.5 - cx) ** 2
    order = np.lexsort((rng.random(spec.num_patches), dist))
    return order[:count]


def _make_image(rng, spec, fg_archetype, bg_pool, label, class_id) -> SyntheticImage:
    lo, hi = spec.coverage
    cov = rng.uniform(lo, hi) if hi > lo else lo
    n_fg = int(np.clip(round(cov * spec.num_patches), 1, spec.num_patches))
    fg = _foreground_patches(rng, spec, n_fg)
    mask = np.ones(spec.num_patches, dtype=bool)
    mask[fg] = False
    chosen = rng.choice(bg_pool.shape[0], size=spec.backgrounds_per_image, replace=False)
    picks = chosen[rng.integers(0, spec.backgrounds_per_image, size=spec.num_patches)]
    patches = bg_pool[picks].copy()
    patches[~mask] = fg_archetype
    patches += spec.noise * rng.normal(size=patches.shape)
    ps, c = spec.patch_size, spec.channels
    pixels = (patches.reshape(spec.grid_h, spec.grid_w, ps, ps, c)
              .transpose(0, 2, 1, 3, 4)
              .reshape(spec.grid_h * ps, spec.grid_w * ps, c))
    return SyntheticImage(pixels, label, mask, class_id)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    """Train / ID-test / OOD-test patch grids with known background masks.

    Foreground patches repeat the class archetype; background patches are
    drawn from a pool shared by every class (ID and OOD). OOD images use
    archetypes disjoint from the ID ones.
    """
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    n_arch = spec.num_id_classes + spec.num_ood_classes
    arch = _unit_rows(rng, n_arch + spec.background_pool, spec.raw_dim)
    if len({a.tobytes() for a in arch}) != arch.shape[0]:
        raise ConfigError("archetype vectors collided")
    id_arch = arch[:spec.num_id_classes]
    ood_arch = arch[spec.num_id_classes:n_arch]
    pool = arch[n_arch:]
    if spec.background_coherence > 0:
        c = spec.background_coherence
        shared = _unit_rows(rng, 1, spec.raw_dim)[0]
        pool = c * shared + np.sqrt(1.0 - c * c) * pool
        pool /= np.linalg.norm(pool, axis=1, keepdims=True)

    train = [_make_image(rng, spec, id_arch[m], pool, m, m)
             for m in range(spec.num_id_classes) for _ in range(spec.shots)]
    id_test = [_make_image(rng, spec, id_arch[m], pool, m, m)
               for m in range(spec.num_id_classes) for _ in range(spec.eval_per_class)]
    ood_test = [_make_image(rng, spec, ood_arch[k], pool, None, spec.num_id_classes + k)
                for k in range(spec.num_ood_classes) for _ in range(spec.eval_per_class)]
    return SyntheticDataset(spec, id_arch, ood_arch, pool, train, id_test, ood_test)


def image_encoder_for(spec: SyntheticSpec, feature_dim: int, seed: int,
                      offset=None) -> FrozenImageEncoder:
    return FrozenImageEncoder.from_seed(feature_dim, spec.patch_size, spec.channels, seed, offset)


def encode_images(images: Sequence[SyntheticImage], encoder: FrozenImageEncoder,
                  grid_h: int, grid_w: int) -> List[FeatureBundle]:
    return [encoder.encode_image(im.pixels, grid_h, grid_w, im.label, im.background_mask)
            for im in images]


def zero_shot_text_features(archetypes: np.ndarray, encoder: FrozenImageEncoder,
                            noise: float, seed: int, offset=None) -> np.ndarray:
    """Class text features as an imperfectly aligned pretrained text tower would give them.

    The semantic part is the archetype's projected direction plus Gaussian
    noise of per-feature std ``noise / sqrt(d)``; ``offset`` is added after
    that and the result normalized.
    """
    rng = np.random.default_rng([seed, 0x7E47F])
    proj = np.asarray(archetypes, dtype=np.float64) @ encoder.patch_projection.T
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    d = proj.shape[1]
    out = proj + noise * rng.normal(size=proj.shape) / np.sqrt(d)
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    if offset is not None:
        out = out + offset
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def extraction_iou(background: BackgroundSet, true_background_mask) -> float:
    """Intersection over union of the extracted set and the true background patches."""
    truth = {int(i) for i in np.flatnonzero(np.asarray(true_background_mask, dtype=bool))}
    got = set(background.indices)
    union = got | truth
    if not union:
        return 1.0
    return len(got & truth) / len(union)


# -- feature dumps --------------------------------------------------------

@dataclass
class FeatureDump:
    class_features: np.ndarray
    samples: List[FeatureBundle]
    grid_h: int
    grid_w: int
    background_feature: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.class_features.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_features.shape[0]


def _record_size(d, hw, masks):
    return 4 + 4 * d * (1 + hw) + (hw if masks else 0)


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode_dump(dump: FeatureDump) -> bytes:
    cls = np.asarray(dump.class_features)
    m, d = cls.shape
    hw = dump.grid_h * dump.grid_w
    samples = list(dump.samples)
    masks = any(s.true_background_mask is not None for s in samples)
    if masks and not all(s.true_background_mask is not None for s in samples):
        raise StructuralError("either every sample carries a mask or none does")
    flags = (FLAG_BACKGROUND if dump.background_feature is not None else 0) | (FLAG_MASKS if masks else 0)
    head = _HEADER.pack(MAGIC, VERSION, flags, d, m, dump.grid_h, dump.grid_w, len(samples))
    parts = [head, struct.pack("<I", zlib.crc32(head)), _f32(cls)]
    if dump.background_feature is not None:
        parts.append(_f32(np.asarray(dump.background_feature).reshape(d)))
    for s in samples:
        if s.local_features.shape != (hw, d):
            raise StructuralError(f"sample has local features {s.local_features.shape}, expected {(hw, d)}")
        parts.append(struct.pack("<i", -1 if s.label is None else s.label))
        parts.append(_f32(s.global_feature))
        parts.append(_f32(s.local_features))
        if masks:
            parts.append(np.asarray(s.true_background_mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def _check_unit(a: np.ndarray, what: str):
    norms = np.linalg.norm(a.astype(np.float64), axis=-1)
    if not np.all(np.isfinite(norms)) or np.any(np.abs(norms - 1.0) > DUMP_NORM_TOL):
        raise NormViolationError(f"{what} is not unit-norm within {DUMP_NORM_TOL}")


def decode_dump(data: bytes) -> FeatureDump:
    if len(data) < 4:
        raise TruncatedFileError("file shorter than the magic bytes")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    if len(data) < HEADER_SIZE:
        raise TruncatedFileError(f"file shorter than the {HEADER_SIZE}-byte header")
    magic, version, flags, d, m, h, w, n = _HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    (crc,) = struct.unpack_from("<I", data, _HEADER.size)
    if crc != zlib.crc32(data[:_HEADER.size]):
        raise HeaderChecksumError("header checksum mismatch")
    if flags & ~_KNOWN_FLAGS:
        raise StructuralError(f"unknown flag bits 0x{flags:04x}")
    if min(d, m, h, w) == 0:
        raise StructuralError("d, M, H and W must be positive")
    hw = h * w
    masks = bool(flags & FLAG_MASKS)
    fixed = HEADER_SIZE + 4 * m * d + (4 * d if flags & FLAG_BACKGROUND else 0)
    rec = _record_size(d, hw, masks)
    expected = fixed + n * rec
    if len(data) != expected:
        if len(data) < fixed or (len(data) - fixed) % rec:
            raise TruncatedFileError(f"file has {len(data)} bytes; records are cut short")
        raise StructuralError(
            f"header declares {n} samples ({expected} bytes) but file holds "
            f"{(len(data) - fixed) // rec} ({len(data)} bytes)")

    off = HEADER_SIZE
    cls = np.frombuffer(data, "<f4", m * d, off).reshape(m, d).astype(np.float64)
    off += 4 * m * d
    _check_unit(cls, "class text features")
    bg = None
    if flags & FLAG_BACKGROUND:
        bg = np.frombuffer(data, "<f4", d, off).astype(np.float64)
        off += 4 * d
        _check_unit(bg, "background text feature")
    samples = []
    for i in range(n):
        (label,) = struct.unpack_from("<i", data, off)
        off += 4
        if label < -1 or label >= m:
            raise StructuralError(f"sample {i} has label {label} outside [-1, {m})")
        vecs = np.frombuffer(data, "<f4", (1 + hw) * d, off).reshape(1 + hw, d).astype(np.float64)
        off += 4 * (1 + hw) * d
        _check_unit(vecs, f"sample {i} features")
        mask = None
        if masks:
            raw = np.frombuffer(data, np.uint8, hw, off)
            off += hw
            if np.any(raw > 1):
                raise StructuralError(f"sample {i} mask bytes must be 0 or 1")
            mask = raw.astype(bool)
        samples.append(_bundle_unchecked(vecs[0], vecs[1:], None if label < 0 else label, mask))
    return FeatureDump(cls, samples, h, w, bg)


def _bundle_unchecked(g, local, label, mask) -> FeatureBundle:
    # f32 payloads are unit-norm only to ~1e-7 * sqrt(d); the dump check above
    # already enforced the on-disk tolerance.
    b = object.__new__(FeatureBundle)
    for k, v in (("global_feature", g), ("local_features", local)):
        v.setflags(write=False)
        object.__setattr__(b, k, v)
    object.__setattr__(b, "label", label)
    if mask is not None:
        mask.setflags(write=False)
    object.__setattr__(b, "true_background_mask", mask)
    return b


def write_dump(path, dump: FeatureDump) -> None:
    data = encode_dump(dump)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_dump(path) -> FeatureDump:
    with open(path, "rb") as fh:
        return decode_dump(fh.read())


# -- checkpoints ----------------------------------------------------------

CKPT_MAGIC = b"MMBK"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    prompt: PromptSet
    meta: dict = field(default_factory=dict)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Same conventions as MMBO (magic, u16 version, LE) with f64 tensors.

    Layout: magic, u16 version, u16 reserved, u32 json length, UTF-8 JSON
    (model config + metadata), context (N x d), class words (M x d),
    background (L x d), then a CRC-32 of everything before it.
    """
    meta = {"model": asdict(ckpt.config), "meta": ckpt.meta}
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    p = ckpt.prompt
    body = b"".join([
        CKPT_MAGIC, struct.pack("<HHI", CKPT_VERSION, 0, len(text)), text,
        np.ascontiguousarray(p.context_tokens, "<f8").tobytes(),
        np.ascontiguousarray(p.class_word_embeddings, "<f8").tobytes(),
        np.ascontiguousarray(p.background_tokens, "<f8").tobytes(),
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 12:
        raise TruncatedFileError("checkpoint shorter than its header")
    if data[:4] != CKPT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {data[:4]!r}")
    version, _, n = struct.unpack_from("<HHI", data, 4)
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    if len(data) < 12 + n + 4:
        raise TruncatedFileError("checkpoint metadata is cut short")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if crc != zlib.crc32(data[:-4]):
        raise HeaderChecksumError("checkpoint checksum mismatch")
    try:
        meta = json.loads(data[12:12 + n].decode("utf-8"))
        cfg = ModelConfig(**meta["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise StructuralError(f"bad checkpoint metadata: {exc}") from exc
    d, shapes = cfg.feature_dim, [cfg.context_len, cfg.num_classes, cfg.background_len]
    off = 12 + n
    if len(data) - 4 - off != 8 * d * sum(shapes):
        raise StructuralError("checkpoint tensor payload has the wrong size")
    arrays = []
    for rows in shapes:
        arrays.append(np.frombuffer(data, "<f8", rows * d, off).reshape(rows, d).astype(np.float64))
        off += 8 * rows * d
    return Checkpoint(cfg, PromptSet(*arrays), meta.get("meta", {}))


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
