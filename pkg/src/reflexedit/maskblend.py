"""Edit-mask generation from word attention and mask-driven latent blending.

The mask pipeline is: average the image-to-text attention of the blended
word's token columns over the configured layers and heads, smooth the
resulting spatial map with a truncated Gaussian, then binarize with Otsu's
between-class-variance threshold. Blending selects per pixel between the
target latent (inside the mask) and the source latent (outside).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from .core import LatentGrid
from .errors import BlendError, DimensionError, MaskError, ReflexEditWarning

DEFAULT_SIGMA = 2.0
DEFAULT_RADIUS = 4
DEFAULT_BINS = 256


@dataclass(frozen=True)
class SaliencyMap:
    """Nonnegative spatial aggregate of word attention, one value per cell."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise MaskError(f"saliency map must be 2-D, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise MaskError("saliency map contains non-finite values")
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class EditMask:
    """Binary edit region aligned with the latent spatial grid."""

    bits: np.ndarray
    step_index: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 2:
            raise MaskError(f"mask must be 2-D, got shape {bits.shape}")
        if not np.isin(bits, (0, 1)).all():
            raise MaskError("mask values must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    def retagged(self, step_index: int) -> "EditMask":
        return EditMask(bits=self.bits, step_index=step_index)

    @property
    def ones_fraction(self) -> float:
        return float(self.bits.mean(dtype=np.float64))


def word_saliency(
    i2t_by_layer: Mapping[int, np.ndarray],
    word_span: Sequence[int],
    layers: Iterable[int],
    grid_shape: tuple[int, int],
) -> SaliencyMap:
    """Mean attention toward the word's token columns, over layers and heads.

    ``i2t_by_layer[layer]`` holds per-head image-to-text probabilities with
    shape [H, N, L]; the aggregated row vector is reshaped to ``grid_shape``.
    """
    span = tuple(int(i) for i in word_span)
    if not span:
        raise MaskError("word span is empty")
    layer_list = sorted(layers)
    if not layer_list:
        raise MaskError("no layers configured for saliency aggregation")
    h, w = grid_shape
    acc: np.ndarray | None = None
    for layer in layer_list:
        if layer not in i2t_by_layer:
            raise MaskError(f"no attention captured for layer {layer}")
        probs = np.asarray(i2t_by_layer[layer])
        if max(span) >= probs.shape[-1]:
            raise MaskError(f"word span {span} exceeds text length {probs.shape[-1]}")
        per_layer = probs[:, :, span].mean(axis=(0, 2))
        acc = per_layer if acc is None else acc + per_layer
    values = acc / len(layer_list)
    if values.shape[0] != h * w:
        raise MaskError(f"{values.shape[0]} image tokens do not fill a {h}x{w} grid")
    return SaliencyMap(values.reshape(h, w))


def _gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    return kernel / kernel.sum()


def gaussian_smooth(
    saliency: SaliencyMap,
    sigma: float = DEFAULT_SIGMA,
    radius: int = DEFAULT_RADIUS,
) -> SaliencyMap:
    """Convolve with a normalized truncated Gaussian, reflective borders."""
    if sigma <= 0:
        raise MaskError(f"sigma must be positive, got {sigma}")
    if radius < 1:
        raise MaskError(f"radius must be >= 1, got {radius}")
    kernel = _gaussian_kernel(sigma, radius)
    values = saliency.values.astype(np.float64)
    for axis in (0, 1):
        if values.shape[axis] < 2:
            continue
        padded = np.pad(
            values, [(radius, radius) if a == axis else (0, 0) for a in (0, 1)], mode="reflect"
        )
        out = np.zeros_like(values)
        for j, weight in enumerate(kernel):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(j, j + values.shape[axis])
            out += weight * padded[tuple(sl)]
        values = out
    return SaliencyMap(values.astype(np.float32))


def otsu_split(hist: np.ndarray) -> int:
    """Bin index maximizing between-class variance; ties take the lowest bin.

    The threshold separates bins [0, t] from [t+1, bins-1].
    """
    hist = np.asarray(hist, dtype=np.float64)
    if hist.ndim != 1 or hist.shape[0] < 2:
        raise MaskError(f"histogram must be 1-D with >= 2 bins, got shape {hist.shape}")
    idx = np.arange(hist.shape[0], dtype=np.float64)
    w0 = np.cumsum(hist)
    total = w0[-1]
    m0 = np.cumsum(hist * idx)
    total_mass = m0[-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    var_between = np.full(hist.shape[0], -np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (total_mass - m0) / w1
        diff = mu0 - mu1
        var_between[valid] = (w0 * w1 * (diff * diff))[valid]
    if not valid.any():
        raise MaskError("histogram has fewer than two populated bins")
    return int(np.argmax(var_between))


def otsu_threshold(
    saliency: SaliencyMap,
    bins: int = DEFAULT_BINS,
    step_index: int = 0,
) -> EditMask:
    """Min-max normalize into ``bins``, threshold by between-class variance.

    A constant map is degenerate: the result is an all-ones mask (keep the
    whole image editable) and a diagnostic is emitted.
    """
    if bins < 2:
        raise MaskError(f"bins must be >= 2, got {bins}")
    values = saliency.values
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        warnings.warn(
            "otsu_threshold: constant saliency map, returning an all-ones mask",
            ReflexEditWarning,
            stacklevel=2,
        )
        return EditMask(bits=np.ones(values.shape, dtype=np.uint8), step_index=step_index)
    normalized = (values.astype(np.float64) - lo) / (hi - lo)
    bin_idx = np.minimum((normalized * bins).astype(np.int64), bins - 1)
    hist = np.bincount(bin_idx.ravel(), minlength=bins)
    threshold = otsu_split(hist)
    return EditMask(bits=(bin_idx > threshold).astype(np.uint8), step_index=step_index)


def blend_latents(z_t: LatentGrid, z_source_t: LatentGrid, mask: EditMask) -> LatentGrid:
    """Select the target latent inside the mask and the source outside.

    Equivalent to mask * z_t + (1 - mask) * z_source, but implemented as a
    selection so both regions are bit-exact copies.
    """
    if z_t.data.shape != z_source_t.data.shape:
        raise BlendError(
            f"latent shapes differ: {z_t.data.shape} vs {z_source_t.data.shape}"
        )
    if z_t.step_index != z_source_t.step_index:
        raise BlendError(
            f"step tags differ: {z_t.step_index} vs {z_source_t.step_index}"
        )
    if mask.bits.shape != z_t.spatial_shape:
        raise BlendError(
            f"mask shape {mask.bits.shape} != latent spatial shape {z_t.spatial_shape}"
        )
    if mask.step_index != z_t.step_index:
        raise BlendError(f"mask step {mask.step_index} != latent step {z_t.step_index}")
    selected = np.where(mask.bits[:, :, None].astype(bool), z_t.data, z_source_t.data)
    return LatentGrid(data=selected, step_index=z_t.step_index, t_value=z_t.t_value)


def save_mask_png(mask: EditMask, path: str | Path) -> None:
    """Export as an 8-bit single-channel image with values 0/255."""
    Image.fromarray(mask.bits * np.uint8(255), mode="L").save(path)


def load_mask_png(path: str | Path, step_index: int = 0) -> EditMask:
    """Import a user-supplied mask; values above 127 count as edit region."""
    arr = np.asarray(Image.open(path).convert("L"))
    return EditMask(bits=(arr > 127).astype(np.uint8), step_index=step_index)
