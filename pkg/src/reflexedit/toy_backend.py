"""A deterministic miniature MM-DiT backend.

The model mirrors the production layout this package targets: a stack of
double-stream blocks (separate projections per modality) followed by
single-stream blocks (shared projections), joint self-attention over
concatenated [text; image] tokens, and a single residual add per block so
each block computes ``x + f(x)`` with ``f(x)_image`` exposed to hooks.

Weights are drawn once from a seeded generator and never trained: every
editing operation exercised here (decomposition, adaptation, injection,
blending) is weight-agnostic, and fixed weights make all runs bit-exact.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backend import ATTENTION_PROBS, RESIDUAL_IMAGE_OUT, HookEvent, HookPoint, apply_hooks
from .core import LatentGrid, TokenSequence
from .errors import BackendSpecError, CodecError, DimensionError, NumericError
from .flow import TimestepSchedule

_LN_EPS = 1e-6
_N_TIME_FREQS = 8


@dataclass(frozen=True)
class BackendSpec:
    """Structural description of a toy backend instance."""

    n_double: int = 4
    n_single: int = 8
    d_model: int = 64
    n_heads: int = 4
    latent_shape: tuple[int, int, int] = (16, 16, 4)
    patch_size: int = 1
    d_text: int = 32
    vocab_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.n_double < 0 or self.n_single < 0 or self.n_double + self.n_single < 1:
            raise BackendSpecError("need at least one block")
        if self.d_model <= 0 or self.n_heads <= 0:
            raise BackendSpecError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise BackendSpecError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if len(self.latent_shape) != 3 or any(d <= 0 for d in self.latent_shape):
            raise BackendSpecError(f"invalid latent shape {self.latent_shape}")
        if self.patch_size <= 0:
            raise BackendSpecError(f"patch_size must be positive, got {self.patch_size}")
        if self.d_text <= 0 or self.vocab_size <= 0:
            raise BackendSpecError("d_text and vocab_size must be positive")

    @property
    def n_layers(self) -> int:
        return self.n_double + self.n_single

    @property
    def image_size(self) -> tuple[int, int]:
        h, w, _ = self.latent_shape
        return h * self.patch_size, w * self.patch_size

    def is_double(self, layer: int) -> bool:
        return layer < self.n_double


def flux_like_spec(seed: int = 0) -> BackendSpec:
    """A spec with the production block topology (19 double + 38 single) at
    toy width, so layer indices keep their full-scale meaning."""
    return BackendSpec(
        n_double=19,
        n_single=38,
        d_model=32,
        n_heads=2,
        latent_shape=(16, 16, 4),
        patch_size=4,
        d_text=16,
        vocab_size=256,
        seed=seed,
    )


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + _LN_EPS)


def _sinusoidal(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / max(half, 1))
    angles = positions[:, None].astype(np.float64) * freqs[None, :]
    pe = np.zeros((positions.shape[0], dim), dtype=np.float64)
    pe[:, 0 : 2 * half : 2] = np.sin(angles)
    pe[:, 1 : 2 * half : 2] = np.cos(angles)
    return pe.astype(np.float32)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    s, d = x.shape
    return x.reshape(s, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, s, dh = x.shape
    return x.transpose(1, 0, 2).reshape(s, h * dh)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    out = logits - logits.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)
    return out


class ToyBackend:
    """Seeded toy MM-DiT with the full backend contract.

    Two builds from equal specs are bit-identical; evaluations are
    deterministic functions of (weights, inputs, hooks).
    """

    def __init__(self, spec: BackendSpec):
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        d, dt = spec.d_model, spec.d_text
        self._token_table = self._draw(rng, (spec.vocab_size, dt), dt)
        self._txt_in = self._draw(rng, (dt, d), dt)
        self._img_in = self._draw(rng, (spec.latent_shape[2], d), spec.latent_shape[2])
        self._modality = self._draw(rng, (2, d), d)  # row 0 text, row 1 image
        # Time conditioning uses slow sinusoids (under half a period over
        # t in [0, 1]) at doubled gain, so the field drifts monotonically in
        # t instead of oscillating; per-step solver error then accumulates
        # with inversion depth the way it does for trained flows.
        self._time_w = self._draw(rng, (2 * _N_TIME_FREQS, d), 2 * _N_TIME_FREQS, gain=2.0)
        self._time_freqs = np.logspace(np.log10(0.5), np.log10(3.0), _N_TIME_FREQS)
        self._blocks = [self._draw_block(rng, layer) for layer in range(spec.n_layers)]
        self._out_w = self._draw(rng, (d, spec.latent_shape[2]), d)
        self._enc_w, self._dec_w = self._draw_codec(rng)
        n_image = spec.latent_shape[0] * spec.latent_shape[1]
        self._image_pos = _sinusoidal(np.arange(n_image), d)
        self._text_pos_cache: dict[int, np.ndarray] = {}

    @staticmethod
    def _draw(
        rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 1.0
    ) -> np.ndarray:
        scale = np.float32(gain / np.sqrt(fan_in))
        return rng.standard_normal(shape, dtype=np.float32) * scale

    def _draw_block(self, rng: np.random.Generator, layer: int) -> dict[str, np.ndarray]:
        d = self.spec.d_model
        hidden = 2 * d
        names = ["wq", "wk", "wv", "wo"]
        streams = ("t", "i") if self.spec.is_double(layer) else ("s",)
        block: dict[str, np.ndarray] = {}
        for stream in streams:
            for name in names:
                block[f"{name}_{stream}"] = self._draw(rng, (d, d), d)
            block[f"w1_{stream}"] = self._draw(rng, (d, hidden), d)
            block[f"w2_{stream}"] = self._draw(rng, (hidden, d), hidden)
        return block

    def _draw_codec(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        # Orthonormal patch projection: exactly invertible when the latent
        # channel count covers the patch, a well-conditioned sketch otherwise.
        pp3 = self.spec.patch_size**2 * 3
        c = self.spec.latent_shape[2]
        tall = rng.standard_normal((max(pp3, c), min(pp3, c)))
        q, r = np.linalg.qr(tall)
        q = q * np.sign(np.diag(r))
        enc64 = q if pp3 >= c else q.T
        dec64 = np.linalg.pinv(enc64)
        return enc64.astype(np.float32), dec64.astype(np.float32)

    # -- contract surface ---------------------------------------------------

    @property
    def n_layers(self) -> int:
        return self.spec.n_layers

    @property
    def n_heads(self) -> int:
        return self.spec.n_heads

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.spec.latent_shape

    def schedule(self, T: int) -> TimestepSchedule:
        return TimestepSchedule.uniform(T)

    def layer_checksum(self, layer: int) -> int:
        """CRC of a layer's concatenated weights, for determinism checks."""
        acc = 0
        for name in sorted(self._blocks[layer]):
            acc = zlib.crc32(self._blocks[layer][name].tobytes(), acc)
        return acc

    def tokenize(self, prompt: str) -> TokenSequence:
        words = prompt.split()
        if not words:
            ids = [0]
            spans: dict[str, tuple[tuple[int, int], ...]] = {}
        else:
            ids = [zlib.crc32(w.encode("utf-8")) % self.spec.vocab_size for w in words]
            acc: dict[str, list[tuple[int, int]]] = {}
            for i, w in enumerate(words):
                acc.setdefault(w, []).append((i, i + 1))
            spans = {w: tuple(s) for w, s in acc.items()}
        return TokenSequence(
            token_ids=tuple(ids),
            embeddings=self._token_table[ids],
            word_spans=spans,
        )

    def encode(self, image: np.ndarray) -> LatentGrid:
        image = np.asarray(image, dtype=np.float32)
        h, w, c = self.spec.latent_shape
        p = self.spec.patch_size
        if image.ndim != 3 or image.shape[2] != 3:
            raise CodecError(f"expected an [H, W, 3] image, got shape {image.shape}")
        if image.shape[0] != h * p or image.shape[1] != w * p:
            raise CodecError(
                f"image shape {image.shape[:2]} != expected {(h * p, w * p)} "
                f"(patch {p} x latent grid {(h, w)})"
            )
        patches = image.reshape(h, p, w, p, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, p * p * 3)
        return LatentGrid(data=patches @ self._enc_w, step_index=0, t_value=0.0)

    def decode(self, latent: LatentGrid) -> np.ndarray:
        h, w, c = self.spec.latent_shape
        p = self.spec.patch_size
        if latent.data.shape != (h, w, c):
            raise CodecError(f"latent shape {latent.data.shape} != backend shape {(h, w, c)}")
        patches = latent.data @ self._dec_w
        image = patches.reshape(h, w, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(h * p, w * p, 3)
        return np.clip(image, 0.0, 1.0)

    def _time_embedding(self, t: float) -> np.ndarray:
        angles = t * self._time_freqs
        feats = np.concatenate([np.sin(angles), np.cos(angles)]).astype(np.float32)
        return feats @ self._time_w

    def velocity(
        self,
        latent: LatentGrid | np.ndarray,
        t: float,
        text: TokenSequence,
        hooks: Sequence[HookPoint] | None = None,
    ) -> tuple[np.ndarray, list[HookEvent]]:
        """Evaluate the velocity field; returns the field and hook events.

        Text tokens occupy joint indices [0, L), image tokens [L, L+N).
        """
        data = latent.data if isinstance(latent, LatentGrid) else np.asarray(latent, np.float32)
        h, w, c = self.spec.latent_shape
        if data.shape != (h, w, c):
            raise DimensionError(f"latent shape {data.shape} != backend shape {(h, w, c)}")
        if text.embeddings.shape[1] != self.spec.d_text:
            raise DimensionError(
                f"text embedding width {text.embeddings.shape[1]} != d_text {self.spec.d_text}"
            )
        L = len(text)
        N = h * w
        if L not in self._text_pos_cache:
            self._text_pos_cache[L] = _sinusoidal(np.arange(L), self.spec.d_model)
        temb = self._time_embedding(float(t))
        x_t = text.embeddings @ self._txt_in
        x_t = x_t + self._text_pos_cache[L] + self._modality[0] + temb
        x_i = data.reshape(N, c) @ self._img_in
        x_i = x_i + self._image_pos + self._modality[1] + temb

        events: list[HookEvent] = []
        for layer in range(self.spec.n_layers):
            x_t, x_i = self._block_forward(layer, x_t, x_i, hooks, events)

        v = (_layer_norm(x_i) @ self._out_w).reshape(h, w, c)
        if not np.isfinite(v).all():
            raise NumericError("toy backend produced a non-finite velocity")
        return v, events

    def _block_forward(
        self,
        layer: int,
        x_t: np.ndarray,
        x_i: np.ndarray,
        hooks: Sequence[HookPoint] | None,
        events: list[HookEvent],
    ) -> tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        weights = self._blocks[layer]
        L = x_t.shape[0]
        scale = 1.0 / np.sqrt(spec.d_model // spec.n_heads)

        if spec.is_double(layer):
            nt, ni = _layer_norm(x_t), _layer_norm(x_i)
            q = np.concatenate([nt @ weights["wq_t"], ni @ weights["wq_i"]])
            k = np.concatenate([nt @ weights["wk_t"], ni @ weights["wk_i"]])
            v = np.concatenate([nt @ weights["wv_t"], ni @ weights["wv_i"]])
        else:
            nx = _layer_norm(np.concatenate([x_t, x_i]))
            q, k, v = nx @ weights["wq_s"], nx @ weights["wk_s"], nx @ weights["wv_s"]

        qh, kh, vh = (_split_heads(m, spec.n_heads) for m in (q, k, v))
        probs = _softmax_rows((qh @ kh.transpose(0, 2, 1)) * scale)
        probs = apply_hooks(layer, ATTENTION_PROBS, probs, hooks, events)
        attn = _merge_heads(probs @ vh)

        if spec.is_double(layer):
            out_t = attn[:L] @ weights["wo_t"]
            out_i = attn[L:] @ weights["wo_i"]
            m_t = np.tanh(_layer_norm(x_t + out_t) @ weights["w1_t"]) @ weights["w2_t"]
            m_i = np.tanh(_layer_norm(x_i + out_i) @ weights["w1_i"]) @ weights["w2_i"]
        else:
            out = attn @ weights["wo_s"]
            out_t, out_i = out[:L], out[L:]
            hidden = np.concatenate([x_t, x_i]) + out
            m = np.tanh(_layer_norm(hidden) @ weights["w1_s"]) @ weights["w2_s"]
            m_t, m_i = m[:L], m[L:]

        f_t = out_t + m_t
        f_i = out_i + m_i
        f_i = apply_hooks(layer, RESIDUAL_IMAGE_OUT, f_i, hooks, events)
        return x_t + f_t, x_i + f_i


def build_backend(spec: BackendSpec) -> ToyBackend:
    """Construct a toy backend; equal specs yield bit-identical weights."""
    return ToyBackend(spec)
