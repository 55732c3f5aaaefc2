"""End-to-end edit orchestration.

An edit runs in three phases: invert the source image with a noised
inversion and keep the whole trajectory; evaluate the model once at the
mid-step latent under source conditioning to cache the injectable features;
then generate from the fully inverted latent under target conditioning,
overriding attention rows and residual features on the scheduled steps and
blending latents against the stored source trajectory inside the edit mask.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import (
    FeatureCache,
    build_injected_row_blocks,
    capture_features,
    decompose_joint_attention,
)
from .backend import (
    ATTENTION_PROBS,
    RESIDUAL_IMAGE_OUT,
    Backend,
    HookEvent,
    HookPoint,
    capture,
    override,
)
from .core import (
    EditConfig,
    LatentGrid,
    TokenMapping,
    TokenSequence,
    build_token_mapping,
    floor_fraction,
)
from .errors import ConfigError, InjectionError, MaskError, NumericError, ReflexEditWarning
from .flow import Trajectory, VelocityFn, euler_step, noised_invert
from .maskblend import EditMask, blend_latents, gaussian_smooth, otsu_threshold, word_saliency


@dataclass(frozen=True)
class StepFlags:
    """Which mechanisms are active on one generation step."""

    ca: bool = False
    sa: bool = False
    sa_adapt: bool = False
    res: bool = False
    blend: bool = False


@dataclass(frozen=True)
class InjectionSchedule:
    """Per-generation-step flags; every flag's active set is a step prefix."""

    steps: tuple[StepFlags, ...]
    ca_steps: int
    sa_steps: int
    res_steps: int
    blend_steps: int
    sa_adapt_start: int

    @property
    def T(self) -> int:
        return len(self.steps)


def build_schedule(config: EditConfig, has_source_prompt: bool) -> InjectionSchedule:
    """Derive the per-step flags from the config fractions.

    With a source prompt the cross-modality, self-attention, and residual
    windows take their own fractions. Without one, cross-modality injection
    is dropped and the remaining windows shift up: self-attention runs for
    the cross-modality fraction and residuals for the self-attention
    fraction.
    """
    T = config.T
    if has_source_prompt:
        ca_steps = floor_fraction(config.frac_ca, T)
        sa_steps = floor_fraction(config.frac_sa, T)
        res_steps = floor_fraction(config.frac_res, T)
    else:
        ca_steps = 0
        sa_steps = floor_fraction(config.frac_ca, T)
        res_steps = floor_fraction(config.frac_sa, T)
    blend_steps = floor_fraction(config.m_frac, T)
    if config.sa_adapt_start is not None:
        adapt_start = config.sa_adapt_start
    else:
        adapt_start = 2 if ca_steps > 0 else 4
    flags = tuple(
        StepFlags(
            ca=g < ca_steps,
            sa=g < sa_steps,
            sa_adapt=(g < sa_steps) and g >= adapt_start,
            res=g < res_steps,
            blend=g < blend_steps,
        )
        for g in range(T)
    )
    return InjectionSchedule(
        steps=flags,
        ca_steps=ca_steps,
        sa_steps=sa_steps,
        res_steps=res_steps,
        blend_steps=blend_steps,
        sa_adapt_start=adapt_start,
    )


@dataclass
class EditRequest:
    """One edit: an image, its optional source prompt, and the target prompt."""

    image: np.ndarray
    target_prompt: str
    source_prompt: str | None = None
    blended_word: str | None = None
    config: EditConfig = field(default_factory=EditConfig)
    user_mask: EditMask | None = None

    @property
    def effective_blended_word(self) -> str | None:
        return self.blended_word if self.blended_word is not None else self.config.blended_word


def velocity_adapter(backend: Backend, text: TokenSequence) -> VelocityFn:
    """Bind a backend and its text conditioning into a flow-engine velocity."""

    def fn(z: np.ndarray, t: float, hooks: Sequence[HookPoint] | None = None):
        return backend.velocity(z, t, text, hooks)

    return fn


def _check_layers(config: EditConfig, backend: Backend) -> None:
    for name in ("attn_layers", "res_layers"):
        bad = sorted(l for l in getattr(config, name) if l >= backend.n_layers)
        if bad:
            raise ConfigError(
                f"{name}={bad}: layer indices must be below the backend's "
                f"{backend.n_layers} layers"
            )


def validate_request(request: EditRequest, backend: Backend) -> None:
    _check_layers(request.config, backend)
    word = request.effective_blended_word
    if word is not None:
        if request.source_prompt is None:
            raise ConfigError(f"blended_word={word!r}: requires a source prompt")
        if word not in request.source_prompt.split():
            raise ConfigError(f"blended_word={word!r}: not a word of the source prompt")
    if request.user_mask is not None:
        h, w, _ = backend.latent_shape
        if request.user_mask.bits.shape != (h, w):
            raise MaskError(
                f"user mask shape {request.user_mask.bits.shape} != latent grid {(h, w)}"
            )


def extract_mid_step(
    image: np.ndarray,
    source_prompt: str | None,
    config: EditConfig,
    backend: Backend,
) -> tuple[FeatureCache, Trajectory]:
    """Noised-invert the image and cache features at the mid-step latent.

    Inversion and extraction are conditioned on the source prompt when
    available, the empty prompt otherwise. The full inversion trajectory is
    returned for latent blending and as the generation starting point.
    """
    _check_layers(config, backend)
    tokens = backend.tokenize(source_prompt or "")
    z_0 = backend.encode(image)
    rng = np.random.default_rng(config.seed)
    noise = rng.standard_normal(z_0.data.shape, dtype=np.float32)
    schedule = backend.schedule(config.T)
    traj = noised_invert(z_0, config, noise, velocity_adapter(backend, tokens), schedule)

    hooks = [capture(layer, ATTENTION_PROBS) for layer in sorted(config.attn_layers)]
    hooks += [capture(layer, RESIDUAL_IMAGE_OUT) for layer in sorted(config.res_layers)]
    z_mid = traj.at(config.t_prime)
    _, events = backend.velocity(z_mid, schedule.t(config.t_prime), tokens, hooks)
    cache = capture_features(events, config, text_len=len(tokens))
    return cache, traj


@dataclass(frozen=True)
class StepRow:
    """Per-step report entry for one generation step."""

    gen_step: int
    step_index: int
    t_value: float
    flags: StepFlags
    blended: bool
    mask_ones: float | None


@dataclass
class GenerationOutcome:
    latent: LatentGrid
    rows: tuple[StepRow, ...]
    mask_mode: str  # "word" | "user" | "none"
    final_mask: EditMask | None


def _resolve_mask_plan(
    request: EditRequest,
    tokens_src: TokenSequence | None,
    tokens_tgt: TokenSequence,
    mapping: TokenMapping,
) -> tuple[str, tuple[int, ...]]:
    """Pick the mask source: a user mask, the blended word's target-token
    columns (directly or through the token mapping), or nothing."""
    if request.user_mask is not None:
        return "user", ()
    word = request.effective_blended_word
    if word is not None and request.source_prompt is not None:
        span = tokens_tgt.span_indices(word)
        if not span and tokens_src is not None:
            src_span = set(tokens_src.span_indices(word))
            span = tuple(i for i, s in enumerate(mapping.entries) if s in src_span)
        if span:
            return "word", span
        warnings.warn(
            f"blended word {word!r} has no token in the target prompt; blending disabled",
            ReflexEditWarning,
            stacklevel=3,
        )
    return "none", ()


def _attention_override_fn(
    cache: FeatureCache,
    mapping: TokenMapping,
    config: EditConfig,
    text_len: int,
    flags: StepFlags,
):
    def apply(layer: int, probs: np.ndarray) -> np.ndarray:
        cache_ca = cache.ca.get(layer)
        cache_sa = cache.sa.get(layer)
        if probs.ndim != 3:
            raise InjectionError(f"layer {layer}: expected per-head attention, got {probs.shape}")
        n_heads = probs.shape[0]
        cached_heads = cache_ca.shape[0] if cache_ca is not None else n_heads
        if cached_heads != n_heads:
            raise InjectionError(
                f"layer {layer}: cache has {cached_heads} heads, evaluation has {n_heads}"
            )
        out = probs.copy()
        for head in range(n_heads):
            blocks = decompose_joint_attention(probs[head], text_len, layer=layer, head=head)
            i2t_new, i2i_new = build_injected_row_blocks(
                blocks,
                cache_ca[head] if (flags.ca and cache_ca is not None) else None,
                cache_sa[head] if (flags.sa and cache_sa is not None) else None,
                mapping,
                config.alpha,
                config.k,
                ca_active=flags.ca,
                sa_active=flags.sa,
                sa_adapt_active=flags.sa_adapt,
            )
            out[head, text_len:, :text_len] = i2t_new
            out[head, text_len:, text_len:] = i2i_new
        return out

    return apply


def _residual_override_fn(cache: FeatureCache, layer: int):
    def apply(layer_idx: int, value: np.ndarray) -> np.ndarray:
        return cache.residual[layer]

    return apply


def generate_with_injection(
    request: EditRequest,
    cache: FeatureCache,
    source_traj: Trajectory,
    schedule: InjectionSchedule,
    backend: Backend,
) -> GenerationOutcome:
    """Generate the target from the fully inverted latent with scheduled
    attention/residual overrides and per-step latent blending."""
    config = request.config
    flow_sched = source_traj.schedule
    if schedule.T != flow_sched.T:
        raise ConfigError(
            f"schedule length {schedule.T} != trajectory step count {flow_sched.T}"
        )
    tokens_tgt = backend.tokenize(request.target_prompt)
    tokens_src = (
        backend.tokenize(request.source_prompt) if request.source_prompt is not None else None
    )
    mapping = build_token_mapping(tokens_src, tokens_tgt)
    text_len = len(tokens_tgt)
    grid_h, grid_w, _ = backend.latent_shape
    mask_mode, span = _resolve_mask_plan(request, tokens_src, tokens_tgt, mapping)

    attn_layers = sorted(config.attn_layers)
    res_layers = sorted(config.res_layers)
    z = source_traj.at(flow_sched.T)
    rows: list[StepRow] = []
    final_mask: EditMask | None = None

    for g in range(schedule.T):
        i = flow_sched.T - g
        flags = schedule.steps[g]
        t_i, t_prev = flow_sched.t(i), flow_sched.t(i - 1)
        need_saliency = flags.blend and mask_mode == "word"

        hooks: list[HookPoint] = []
        if flags.ca or flags.sa:
            attn_fn = _attention_override_fn(cache, mapping, config, text_len, flags)
            hooks += [override(layer, ATTENTION_PROBS, attn_fn) for layer in attn_layers]
        if need_saliency:
            hooks += [capture(layer, ATTENTION_PROBS) for layer in attn_layers]
        if flags.res:
            hooks += [
                override(layer, RESIDUAL_IMAGE_OUT, _residual_override_fn(cache, layer))
                for layer in res_layers
            ]

        try:
            v, events = backend.velocity(z, t_i, tokens_tgt, hooks or None)
        except InjectionError as exc:
            raise InjectionError(f"generation step {i}: {exc}") from exc
        if not np.isfinite(v).all():
            raise NumericError(f"non-finite velocity at generation step {i}")
        z = LatentGrid(euler_step(z.data, t_i, t_prev, v), i - 1, t_prev)

        mask: EditMask | None = None
        if flags.blend and mask_mode != "none":
            if mask_mode == "user":
                mask = request.user_mask.retagged(i - 1)
            else:
                mask = _mask_from_events(events, span, config, (grid_h, grid_w), i - 1)
            z = blend_latents(z, source_traj.at(i - 1), mask)
            final_mask = mask
        rows.append(
            StepRow(
                gen_step=g,
                step_index=i - 1,
                t_value=t_prev,
                flags=flags,
                blended=mask is not None,
                mask_ones=mask.ones_fraction if mask is not None else None,
            )
        )

    return GenerationOutcome(
        latent=z, rows=tuple(rows), mask_mode=mask_mode, final_mask=final_mask
    )


def _mask_from_events(
    events: Sequence[HookEvent],
    span: tuple[int, ...],
    config: EditConfig,
    grid_shape: tuple[int, int],
    step_index: int,
) -> EditMask:
    n_image = grid_shape[0] * grid_shape[1]
    i2t_by_layer: dict[int, np.ndarray] = {}
    for e in events:
        if e.kind != ATTENTION_PROBS:
            continue
        text_len = e.value.shape[-1] - n_image
        i2t_by_layer[e.layer] = e.value[:, text_len:, :text_len]
    saliency = word_saliency(i2t_by_layer, span, config.attn_layers, grid_shape)
    smoothed = gaussian_smooth(saliency)
    return otsu_threshold(smoothed, step_index=step_index)


# --------------------------------------------------------------------------
# Full edit with run report
# --------------------------------------------------------------------------


@dataclass
class RunReport:
    """Structured record of one edit run."""

    target_prompt: str
    source_prompt: str | None
    blended_word: str | None
    backend_desc: str
    config: EditConfig
    ca_steps: int
    sa_steps: int
    res_steps: int
    blend_steps: int
    sa_adapt_start: int
    mask_mode: str
    blending_enabled: bool
    rows: tuple[StepRow, ...]
    timings: dict[str, float]

    def to_text(self, include_timings: bool = True) -> str:
        """Render as a key-value document plus a per-step table.

        Timings are wall-clock and therefore not byte-stable across runs;
        callers that need reproducible documents exclude them.
        """
        lines = ["# edit run report"]
        lines.append(f"target_prompt = {self.target_prompt}")
        if self.source_prompt is not None:
            lines.append(f"source_prompt = {self.source_prompt}")
        if self.blended_word is not None:
            lines.append(f"blended_word = {self.blended_word}")
        lines.append(f"backend = {self.backend_desc}")
        lines.append(f"mask_mode = {self.mask_mode}")
        lines.append(f"blending = {'enabled' if self.blending_enabled else 'disabled'}")
        lines.append("")
        lines.append("[config]")
        lines.append(self.config.to_text().rstrip())
        lines.append("")
        lines.append("[schedule]")
        lines.append(f"ca_steps = {self.ca_steps}")
        lines.append(f"sa_steps = {self.sa_steps}")
        lines.append(f"res_steps = {self.res_steps}")
        lines.append(f"blend_steps = {self.blend_steps}")
        lines.append(f"sa_adapt_start = {self.sa_adapt_start}")
        lines.append("")
        lines.append("[steps]")
        lines.append("# gen latent t ca sa sa_adapt res blend mask_coverage")
        for row in self.rows:
            f = row.flags
            cov = f"{row.mask_ones:.4f}" if row.mask_ones is not None else "-"
            lines.append(
                f"{row.gen_step:3d} {row.step_index:3d} {row.t_value:.6f} "
                f"{_mark(f.ca)} {_mark(f.sa)} {_mark(f.sa_adapt)} {_mark(f.res)} "
                f"{_mark(row.blended)} {cov}"
            )
        if include_timings and self.timings:
            lines.append("")
            lines.append("[timings]")
            for key in sorted(self.timings):
                lines.append(f"{key}_seconds = {self.timings[key]:.3f}")
        return "\n".join(lines) + "\n"


def _mark(flag: bool) -> str:
    return "*" if flag else "."


@dataclass
class EditResult:
    """Edited image plus every artifact needed for audit and metrics."""

    image: np.ndarray
    latent: LatentGrid
    source_trajectory: Trajectory
    cache: FeatureCache
    final_mask: EditMask | None
    report: RunReport


def _backend_desc(backend: Backend) -> str:
    h, w, c = backend.latent_shape
    return f"{backend.n_layers} layers, {backend.n_heads} heads, latent {h}x{w}x{c}"


def reflex_edit(request: EditRequest, backend: Backend) -> EditResult:
    """Run the full edit: invert, extract, generate with injection, decode."""
    validate_request(request, backend)
    config = request.config
    t0 = time.perf_counter()
    cache, traj = extract_mid_step(request.image, request.source_prompt, config, backend)
    t1 = time.perf_counter()
    schedule = build_schedule(config, has_source_prompt=request.source_prompt is not None)
    outcome = generate_with_injection(request, cache, traj, schedule, backend)
    t2 = time.perf_counter()
    image = backend.decode(outcome.latent)

    report = RunReport(
        target_prompt=request.target_prompt,
        source_prompt=request.source_prompt,
        blended_word=request.effective_blended_word,
        backend_desc=_backend_desc(backend),
        config=config,
        ca_steps=schedule.ca_steps,
        sa_steps=schedule.sa_steps,
        res_steps=schedule.res_steps,
        blend_steps=schedule.blend_steps,
        sa_adapt_start=schedule.sa_adapt_start,
        mask_mode=outcome.mask_mode,
        blending_enabled=outcome.mask_mode != "none",
        rows=outcome.rows,
        timings={
            "extract": t1 - t0,
            "generate": t2 - t1,
            "total": time.perf_counter() - t0,
        },
    )
    return EditResult(
        image=image,
        latent=outcome.latent,
        source_trajectory=traj,
        cache=cache,
        final_mask=outcome.final_mask,
        report=report,
    )
