"""Joint-attention decomposition, feature caching, and the two adaptations.

A joint attention matrix over [text; image] tokens splits into four
query-key modality blocks:

    [[t2t, t2i],      t2t: [L, L]   t2i: [L, N]
     [i2t, i2i]]      i2t: [N, L]   i2i: [N, N]

The image-query blocks (i2t cross-modality attention and i2i self-attention)
carry the structure worth injecting; adaptation rebalances them between the
cached source evaluation and the current target evaluation. All adaptation
operates on post-softmax probability blocks, per head.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backend import ATTENTION_PROBS, RESIDUAL_IMAGE_OUT, HookEvent
from .core import EditConfig, TokenMapping
from .errors import CaptureError, DimensionError, InjectionError, MappingError, ReflexEditWarning
from .tensorio import read_tensor, write_tensor


@dataclass(frozen=True)
class JointAttentionBlocks:
    """One layer/head's joint attention split into its four modality blocks."""

    layer: int
    head: int
    t2t: np.ndarray
    t2i: np.ndarray
    i2t: np.ndarray
    i2i: np.ndarray
    representation: str = "probabilities"  # or "logits"

    @property
    def text_len(self) -> int:
        return self.t2t.shape[0]

    @property
    def image_len(self) -> int:
        return self.i2i.shape[0]


def decompose_joint_attention(
    full: np.ndarray,
    L: int,
    layer: int = 0,
    head: int = 0,
    representation: str = "probabilities",
) -> JointAttentionBlocks:
    """Split a square joint attention matrix at text length ``L``."""
    full = np.asarray(full)
    if full.ndim != 2 or full.shape[0] != full.shape[1]:
        raise DimensionError(f"joint attention must be square, got shape {full.shape}")
    if not 0 <= L <= full.shape[0]:
        raise DimensionError(f"text length {L} exceeds matrix side {full.shape[0]}")
    return JointAttentionBlocks(
        layer=layer,
        head=head,
        t2t=full[:L, :L].copy(),
        t2i=full[:L, L:].copy(),
        i2t=full[L:, :L].copy(),
        i2i=full[L:, L:].copy(),
        representation=representation,
    )


def recompose_joint_attention(blocks: JointAttentionBlocks) -> np.ndarray:
    """Reassemble the original matrix; exact inverse of the decomposition."""
    L, N = blocks.text_len, blocks.image_len
    out = np.empty((L + N, L + N), dtype=blocks.i2i.dtype)
    out[:L, :L] = blocks.t2t
    out[:L, L:] = blocks.t2i
    out[L:, :L] = blocks.i2t
    out[L:, L:] = blocks.i2i
    return out


def adapt_i2t_ca(
    ca_target: np.ndarray,
    cache_ca: np.ndarray,
    mapping: TokenMapping,
    alpha: float,
) -> np.ndarray:
    """Column-wise cross-modality adaptation.

    Mapped target columns are replaced by their source columns; unmapped
    columns are the target columns scaled by ``alpha``. No re-normalization
    is applied: the scaling deliberately re-weights row mass.
    """
    ca_target = np.asarray(ca_target)
    cache_ca = np.asarray(cache_ca)
    n_rows, l_target = ca_target.shape
    if mapping.domain_size != l_target:
        raise MappingError(
            f"mapping domain {mapping.domain_size} != target text length {l_target}"
        )
    if cache_ca.shape[0] != n_rows:
        raise MappingError(
            f"cached block has {cache_ca.shape[0]} image rows, target has {n_rows}"
        )
    out = np.empty_like(ca_target)
    for i, src in enumerate(mapping.entries):
        if src is None:
            out[:, i] = alpha * ca_target[:, i]
        else:
            if src >= cache_ca.shape[1]:
                raise MappingError(
                    f"mapped source index {src} outside cached text length {cache_ca.shape[1]}"
                )
            out[:, i] = cache_ca[:, src]
    return out


@dataclass(frozen=True)
class TopKIndexSet:
    """Per-row index sets of the k largest source entries, ties to lowest index.

    ``indices`` has shape [N, k_eff] with columns ordered by rank.
    """

    indices: np.ndarray
    n: int
    k: int

    @property
    def k_eff(self) -> int:
        return self.indices.shape[1]

    def row_set(self, i: int) -> frozenset[int]:
        return frozenset(int(j) for j in self.indices[i])

    def mask(self) -> np.ndarray:
        out = np.zeros((self.n, self.n), dtype=bool)
        if self.k_eff:
            out[np.arange(self.n)[:, None], self.indices] = True
        return out


def topk_rows(sa_source: np.ndarray, k: int) -> TopKIndexSet:
    """Indices of the k largest entries per row; k is clamped to the row size."""
    sa_source = np.asarray(sa_source)
    if sa_source.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {sa_source.shape}")
    if k < 0:
        raise DimensionError(f"k must be >= 0, got {k}")
    n = sa_source.shape[0]
    k_eff = min(k, sa_source.shape[1])
    # Stable sort on the negated values keeps ascending index order for ties.
    order = np.argsort(-sa_source, axis=1, kind="stable")
    return TopKIndexSet(indices=order[:, :k_eff].copy(), n=n, k=k)


def adapt_i2i_sa(sa_target: np.ndarray, sa_source: np.ndarray, k: int) -> np.ndarray:
    """Top-k mass-preserving replacement of the image self-attention block.

    For each row i, entries at the source's top-k indices come from the
    target row, rescaled so their summed mass equals the source mass at
    those indices; all other entries are the source's, bit for bit. Rows
    whose target mass at the top-k indices is zero fall back to the source
    row with a diagnostic.
    """
    sa_target = np.asarray(sa_target)
    sa_source = np.asarray(sa_source)
    if sa_target.shape != sa_source.shape or sa_target.ndim != 2:
        raise DimensionError(
            f"shape mismatch: target {sa_target.shape} vs source {sa_source.shape}"
        )
    if sa_target.shape[0] != sa_target.shape[1]:
        raise DimensionError(f"image self-attention block must be square, got {sa_target.shape}")
    n = sa_target.shape[0]
    k_eff = min(k, n)
    if k_eff == 0:
        return sa_source.copy()

    mask = topk_rows(sa_source, k_eff).mask()
    source_mass = np.where(mask, sa_source, 0).sum(axis=1)
    target_mass = np.where(mask, sa_target, 0).sum(axis=1)
    degenerate = target_mass == 0
    if degenerate.any():
        warnings.warn(
            f"adapt_i2i_sa: zero target mass in top-{k_eff} indices for "
            f"{int(degenerate.sum())} row(s); falling back to the source rows",
            ReflexEditWarning,
            stacklevel=2,
        )
    if k_eff == 1:
        # The singleton case renormalizes each replaced value back to the
        # source value; returning the source keeps the identity exact.
        return sa_source.copy()
    safe_mass = np.where(degenerate, 1, target_mass)
    ratio = (source_mass / safe_mass).astype(sa_target.dtype, copy=False)
    adapted = sa_target * ratio[:, None]
    replace = mask & ~degenerate[:, None]
    return np.where(replace, adapted, sa_source)


# --------------------------------------------------------------------------
# Feature cache
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureCache:
    """Per-layer source features captured at the mid-step latent.

    Attention entries are stacked over heads: ``ca[layer]`` is [H, N, L_s]
    and ``sa[layer]`` is [H, N, N]; ``residual[layer]`` is [N, d_model].
    """

    ca: Mapping[int, np.ndarray]
    sa: Mapping[int, np.ndarray]
    residual: Mapping[int, np.ndarray]
    extraction_step: int
    text_len: int

    def __post_init__(self):
        n_values = set()
        for name, table in (("ca", self.ca), ("sa", self.sa), ("residual", self.residual)):
            for layer, arr in table.items():
                if not np.isfinite(arr).all():
                    raise CaptureError(f"{name} cache for layer {layer} has non-finite values")
                n_values.add(arr.shape[-2])
        if len(n_values) > 1:
            raise CaptureError(f"inconsistent image token counts across cache entries: {n_values}")

    @property
    def attn_layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.ca))

    @property
    def res_layers(self) -> tuple[int, ...]:
        return tuple(sorted(self.residual))

    @property
    def n_heads(self) -> int:
        for arr in self.ca.values():
            return arr.shape[0]
        for arr in self.sa.values():
            return arr.shape[0]
        return 0


def capture_features(
    events: Sequence[HookEvent],
    config: EditConfig,
    text_len: int,
) -> FeatureCache:
    """Assemble a feature cache from the hook events of one evaluation."""
    attn_by_layer = {e.layer: e.value for e in events if e.kind == ATTENTION_PROBS}
    res_by_layer = {e.layer: e.value for e in events if e.kind == RESIDUAL_IMAGE_OUT}
    ca: dict[int, np.ndarray] = {}
    sa: dict[int, np.ndarray] = {}
    residual: dict[int, np.ndarray] = {}
    for layer in sorted(config.attn_layers):
        if layer not in attn_by_layer:
            raise CaptureError(f"no attention event captured for layer {layer}")
        probs = attn_by_layer[layer]
        ca[layer] = probs[:, text_len:, :text_len].copy()
        sa[layer] = probs[:, text_len:, text_len:].copy()
    for layer in sorted(config.res_layers):
        if layer not in res_by_layer:
            raise CaptureError(f"no residual event captured for layer {layer}")
        residual[layer] = res_by_layer[layer].copy()
    return FeatureCache(
        ca=ca, sa=sa, residual=residual, extraction_step=config.t_prime, text_len=text_len
    )


def build_injected_row_blocks(
    blocks: JointAttentionBlocks,
    cache_ca: np.ndarray | None,
    cache_sa: np.ndarray | None,
    mapping: TokenMapping,
    alpha: float,
    k: int,
    *,
    ca_active: bool,
    sa_active: bool,
    sa_adapt_active: bool,
) -> tuple[np.ndarray, np.ndarray]:
    """Image-query row overrides for one layer/head under the step flags.

    Returns the (i2t, i2i) segments to place in the image-query rows; with
    no flag active the target's own blocks come back unchanged. Text-query
    rows are never touched.
    """
    i2t_out = blocks.i2t
    i2i_out = blocks.i2i
    if ca_active:
        if cache_ca is None:
            raise InjectionError(f"layer {blocks.layer}: cross-modality injection without cache")
        if cache_ca.shape[0] != blocks.image_len:
            raise InjectionError(
                f"layer {blocks.layer}: cached block has {cache_ca.shape[0]} image rows, "
                f"current evaluation has {blocks.image_len}"
            )
        i2t_out = adapt_i2t_ca(blocks.i2t, cache_ca, mapping, alpha)
    if sa_active:
        if cache_sa is None:
            raise InjectionError(f"layer {blocks.layer}: self-attention injection without cache")
        if cache_sa.shape != blocks.i2i.shape:
            raise InjectionError(
                f"layer {blocks.layer}: cached self-attention {cache_sa.shape} "
                f"!= current {blocks.i2i.shape}"
            )
        if sa_adapt_active:
            i2i_out = adapt_i2i_sa(blocks.i2i, cache_sa, k)
        else:
            i2i_out = cache_sa.copy()
    return i2t_out, i2i_out


# --------------------------------------------------------------------------
# Cache export: one container per cached tensor plus a manifest.
# --------------------------------------------------------------------------

_CACHE_MANIFEST = "cache_manifest.txt"


def save_feature_cache(cache: FeatureCache, directory: str | Path) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"text_len = {cache.text_len}"]
    for layer in cache.attn_layers:
        for head in range(cache.ca[layer].shape[0]):
            for kind, table in (("ca", cache.ca), ("sa", cache.sa)):
                name = f"layer{layer:03d}_head{head:02d}_{kind}.rtn"
                write_tensor(table[layer][head], out / name)
                lines.append(f"{layer}\t{head}\t{kind}\t{cache.extraction_step}\t{name}")
    for layer in cache.res_layers:
        name = f"layer{layer:03d}_residual.rtn"
        write_tensor(cache.residual[layer], out / name)
        lines.append(f"{layer}\t-\tresidual\t{cache.extraction_step}\t{name}")
    (out / _CACHE_MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_feature_cache(directory: str | Path) -> FeatureCache:
    root = Path(directory)
    lines = (root / _CACHE_MANIFEST).read_text(encoding="utf-8").splitlines()
    text_len = int(lines[0].split("=", 1)[1])
    per_head: dict[str, dict[int, dict[int, np.ndarray]]] = {"ca": {}, "sa": {}}
    residual: dict[int, np.ndarray] = {}
    extraction_step = 0
    for line in lines[1:]:
        if not line.strip():
            continue
        layer_s, head_s, kind, step_s, name = line.split("\t")
        layer, extraction_step = int(layer_s), int(step_s)
        value = read_tensor(root / name).astype(np.float32)
        if kind == "residual":
            residual[layer] = value
        else:
            per_head[kind].setdefault(layer, {})[int(head_s)] = value
    stacked = {
        kind: {
            layer: np.stack([heads[h] for h in sorted(heads)])
            for layer, heads in table.items()
        }
        for kind, table in per_head.items()
    }
    return FeatureCache(
        ca=stacked["ca"],
        sa=stacked["sa"],
        residual=residual,
        extraction_step=extraction_step,
        text_len=text_len,
    )
