"""Frozen toy encoders standing in for CLIP's text and image towers.

Text encoder: a shared per-token linear map, mean pooling over the token
sequence, an optional tanh, then L2 normalization. Because the map is
linear before pooling, ``mean_k(P t_k) == P mean_k(t_k)``; we pool first.
Backprop runs through the normalization so that cosine-similarity losses
can be differentiated with respect to the learnable prompt tokens.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .core import FeatureBundle, PromptSet, ShapeError, normalize, normalize_rows

NONLINEARITIES = ("identity", "tanh")


def _orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


@dataclass
class TextForward:
    """Intermediates of one text encoding, kept for the backward pass."""

    pre: np.ndarray  # pooled projection z
    act: np.ndarray  # phi(z)
    out: np.ndarray  # act / ||act||
    num_tokens: int


class FrozenTextEncoder:
    def __init__(self, projection: np.ndarray, nonlinearity: str = "identity",
                 normalize_output: bool = True, offset=None):
        projection = np.array(projection, dtype=np.float64)
        if projection.ndim != 2 or projection.shape[0] != projection.shape[1]:
            raise ShapeError(f"projection must be square, got {projection.shape}")
        if nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
        projection.setflags(write=False)
        self.projection = projection
        self.nonlinearity = nonlinearity
        # Only switched off in adjoint tests; every pipeline encoder normalizes.
        self.normalize_output = normalize_output
        # Fixed shift added after the nonlinearity; places all text features in a
        # shared cone, as CLIP's are.
        self.offset = np.zeros(projection.shape[0]) if offset is None else np.array(offset, float)
        self.offset.setflags(write=False)

    @classmethod
    def from_seed(cls, dim: int, seed: int, nonlinearity: str = "identity",
                  offset=None) -> "FrozenTextEncoder":
        rng = np.random.default_rng([seed, 0x7E47])
        return cls(_orthogonal(dim, rng), nonlinearity, offset=offset)

    @classmethod
    def identity(cls, dim: int, nonlinearity: str = "identity",
                 normalize_output: bool = True) -> "FrozenTextEncoder":
        return cls(np.eye(dim), nonlinearity, normalize_output)

    @property
    def dim(self) -> int:
        return self.projection.shape[0]

    def weights_digest(self) -> str:
        blob = self.projection.tobytes() + self.offset.tobytes() + self.nonlinearity.encode()
        return hashlib.sha256(blob).hexdigest()

    # -- forward -------------------------------------------------------

    def forward_tokens(self, tokens: np.ndarray) -> TextForward:
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[1] != self.dim or tokens.shape[0] == 0:
            raise ShapeError(f"tokens must be (n>=1, {self.dim}), got {tokens.shape}")
        pre = self.projection @ tokens.mean(axis=0)
        act = (np.tanh(pre) if self.nonlinearity == "tanh" else pre) + self.offset
        out = normalize(act) if self.normalize_output else act
        return TextForward(pre, act, out, tokens.shape[0])

    def class_tokens(self, prompt: PromptSet, class_index: int) -> np.ndarray:
        if not 0 <= class_index < prompt.num_classes:
            raise IndexError(f"class index {class_index} outside [0, {prompt.num_classes})")
        return np.vstack([prompt.context_tokens, prompt.class_word_embeddings[class_index]])

    def encode_text_class(self, prompt: PromptSet, class_index: int) -> np.ndarray:
        """Class text feature for the prompt ``(w_1..w_N, c_m)``."""
        return self.forward_tokens(self.class_tokens(prompt, class_index)).out

    def encode_all_classes(self, prompt: PromptSet) -> np.ndarray:
        return np.stack([self.encode_text_class(prompt, m) for m in range(prompt.num_classes)])

    def encode_text_background(self, prompt: PromptSet) -> np.ndarray:
        return self.forward_tokens(prompt.background_tokens).out

    # -- backward ------------------------------------------------------

    def backward(self, fwd: TextForward, upstream: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the pooled token mean, given dLoss/d(output)."""
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (self.dim,):
            raise ShapeError(f"upstream must have shape ({self.dim},), got {upstream.shape}")
        if self.normalize_output:
            g = fwd.out
            d_act = (upstream - g * (g @ upstream)) / np.linalg.norm(fwd.act)
        else:
            d_act = upstream
        if self.nonlinearity == "tanh":
            d_act = d_act * (1.0 - np.tanh(fwd.pre) ** 2)
        return self.projection.T @ d_act

    def grad_text_wrt_prompt(self, prompt: PromptSet, class_upstream=None, background_upstream=None):
        """Chain-rule gradients for the learnable tokens.

        ``class_upstream`` is an (M, d) array of dLoss/dg_m, and
        ``background_upstream`` a (d,) array of dLoss/dg_b; either may be
        None. Returns ``(d_context, d_background)`` shaped like the tokens.
        Class word embeddings are frozen and get no gradient.
        """
        d_ctx = np.zeros_like(prompt.context_tokens)
        d_bg = np.zeros_like(prompt.background_tokens)
        if class_upstream is not None:
            class_upstream = np.asarray(class_upstream, dtype=np.float64)
            if class_upstream.shape != (prompt.num_classes, self.dim):
                raise ShapeError("class_upstream must be (M, d)")
            n = prompt.context_tokens.shape[0] + 1
            total = np.zeros(self.dim)
            for m in range(prompt.num_classes):
                if not np.any(class_upstream[m]):
                    continue
                fwd = self.forward_tokens(self.class_tokens(prompt, m))
                total += self.backward(fwd, class_upstream[m])
            d_ctx[:] = total / n
        if background_upstream is not None and np.any(background_upstream):
            fwd = self.forward_tokens(prompt.background_tokens)
            d_bg[:] = self.backward(fwd, background_upstream) / fwd.num_tokens
        return d_ctx, d_bg

    def word_preimage(self, target: np.ndarray, scale: float = 1.0,
                      num_tokens: int = 1) -> np.ndarray:
        """A word token that, pooled with ``num_tokens - 1`` zero tokens, encodes to ``target``.

        Stands in for a pretrained word-embedding table already aligned with
        image features. Solves ``phi(P c / num_tokens) + offset = scale * target``;
        for tanh the right-hand side minus the offset must lie inside (-1, 1).
        """
        t = normalize(target) * scale - self.offset
        if self.nonlinearity == "tanh":
            if np.any(np.abs(t) >= 1.0):
                raise ValueError("target outside the range of tanh; lower scale")
            t = np.arctanh(t)
        return num_tokens * np.linalg.solve(self.projection, t)


class FrozenImageEncoder:
    """Fixed patch projection plus mean pooling for the global feature.

    Each patch's raw pixel vector is mapped by one matrix that plays the
    role of the value projection followed by the vision-to-text projection.
    The global feature pools the projected patches with fixed weights.
    """

    def __init__(self, patch_projection: np.ndarray, patch_size: int, channels: int,
                 pooling_weights=None, offset=None):
        patch_projection = np.array(patch_projection, dtype=np.float64)
        d_raw = patch_size * patch_size * channels
        if patch_projection.ndim != 2 or patch_projection.shape[1] != d_raw:
            raise ShapeError(f"patch projection must be (d, {d_raw}), got {patch_projection.shape}")
        patch_projection.setflags(write=False)
        self.patch_projection = patch_projection
        self.patch_size = patch_size
        self.channels = channels
        self.pooling_weights = None if pooling_weights is None else np.asarray(pooling_weights, float)
        d = patch_projection.shape[0]
        self.offset = np.zeros(d) if offset is None else np.array(offset, float)
        self.offset.setflags(write=False)

    @classmethod
    def from_seed(cls, dim: int, patch_size: int, channels: int, seed: int,
                  offset=None) -> "FrozenImageEncoder":
        rng = np.random.default_rng([seed, 0x1AA6E])
        d_raw = patch_size * patch_size * channels
        return cls(rng.normal(size=(dim, d_raw)) / np.sqrt(d_raw), patch_size, channels,
                   offset=offset)

    @property
    def dim(self) -> int:
        return self.patch_projection.shape[0]

    @property
    def raw_dim(self) -> int:
        return self.patch_projection.shape[1]

    def weights_digest(self) -> str:
        return hashlib.sha256(self.patch_projection.tobytes() + self.offset.tobytes()).hexdigest()

    def patchify(self, pixels: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
        """Row-major (H*W, ps*ps*C) raw patch vectors."""
        px = np.asarray(pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        ps = self.patch_size
        if px.shape != (grid_h * ps, grid_w * ps, self.channels):
            raise ShapeError(
                f"image shape {px.shape} does not tile a {grid_h}x{grid_w} grid of "
                f"{ps}x{ps}x{self.channels} patches")
        blocks = px.reshape(grid_h, ps, grid_w, ps, self.channels).transpose(0, 2, 1, 3, 4)
        return blocks.reshape(grid_h * grid_w, -1)

    def project_patches(self, raw_patches: np.ndarray) -> np.ndarray:
        return np.asarray(raw_patches, dtype=np.float64) @ self.patch_projection.T + self.offset

    def encode_image(self, pixels, grid_h: int, grid_w: int, label=None, mask=None) -> FeatureBundle:
        proj = self.project_patches(self.patchify(pixels, grid_h, grid_w))
        w = self.pooling_weights
        pooled = proj.mean(axis=0) if w is None else w @ proj
        return FeatureBundle(normalize(pooled), normalize_rows(proj), label, mask)
