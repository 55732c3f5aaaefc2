"""Backend adapter contract: hook surface and the velocity-field protocol.

Any model backend (the bundled toy MM-DiT or an out-of-tree adapter around a
production rectified-flow transformer) exposes the same five operations and
the same two hook kinds, so the flow engine, attention kit, and pipeline
never see backend internals.

Hook kinds
    ``attention_probs``     per-head post-softmax joint attention,
                            shape [n_heads, L+N, L+N]
    ``residual_image_out``  the image rows of a block's pre-residual output,
                            shape [N, d_model]

Hook semantics: for each (layer, kind) point, override hooks run first (the
callback receives the freshly computed tensor and returns its replacement,
which must match shape and dtype), then capture hooks record the value as
used downstream. Event delivery is ordered by layer within one evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Protocol, Sequence

import numpy as np

from .errors import InjectionError

if TYPE_CHECKING:
    from .core import LatentGrid, TokenSequence
    from .flow import TimestepSchedule

ATTENTION_PROBS = "attention_probs"
RESIDUAL_IMAGE_OUT = "residual_image_out"
HOOK_KINDS = (ATTENTION_PROBS, RESIDUAL_IMAGE_OUT)

OverrideFn = Callable[[int, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class HookPoint:
    """A capture or override request at one (layer, kind) site."""

    layer: int
    kind: str
    mode: str  # "capture" | "override"
    override: OverrideFn | None = None

    def __post_init__(self):
        if self.kind not in HOOK_KINDS:
            raise InjectionError(f"unknown hook kind {self.kind!r}")
        if self.mode not in ("capture", "override"):
            raise InjectionError(f"unknown hook mode {self.mode!r}")
        if (self.override is None) == (self.mode == "override"):
            raise InjectionError("override callback required exactly for mode='override'")


@dataclass(frozen=True)
class HookEvent:
    """A tensor recorded by a capture hook."""

    layer: int
    kind: str
    value: np.ndarray


def capture(layer: int, kind: str) -> HookPoint:
    return HookPoint(layer=layer, kind=kind, mode="capture")


def override(layer: int, kind: str, fn: OverrideFn) -> HookPoint:
    return HookPoint(layer=layer, kind=kind, mode="override", override=fn)


def apply_hooks(
    layer: int,
    kind: str,
    value: np.ndarray,
    hooks: Sequence[HookPoint] | None,
    events: list[HookEvent],
) -> np.ndarray:
    """Run the hooks registered at (layer, kind); shared by all backends."""
    if not hooks:
        return value
    for point in hooks:
        if point.layer != layer or point.kind != kind or point.mode != "override":
            continue
        new = np.asarray(point.override(layer, value))
        if new.shape != value.shape:
            raise InjectionError(
                f"layer {layer} {kind}: override shape {new.shape} != expected {value.shape}"
            )
        if new.dtype != value.dtype:
            new = new.astype(value.dtype)
        value = new
    for point in hooks:
        if point.layer == layer and point.kind == kind and point.mode == "capture":
            events.append(HookEvent(layer=layer, kind=kind, value=value.copy()))
    return value


class Backend(Protocol):
    """Operations every backend must provide.

    ``velocity`` evaluates the time-dependent velocity field for one latent
    under the given text conditioning; text tokens occupy joint-attention
    indices [0, L) and image tokens [L, L+N).
    """

    @property
    def n_layers(self) -> int: ...

    @property
    def n_heads(self) -> int: ...

    @property
    def latent_shape(self) -> tuple[int, int, int]: ...

    def tokenize(self, prompt: str) -> "TokenSequence": ...

    def encode(self, image: np.ndarray) -> "LatentGrid": ...

    def decode(self, latent: "LatentGrid") -> np.ndarray: ...

    def velocity(
        self,
        latent: "LatentGrid | np.ndarray",
        t: float,
        text: "TokenSequence",
        hooks: Sequence[HookPoint] | None = None,
    ) -> tuple[np.ndarray, list[HookEvent]]: ...

    def schedule(self, T: int) -> "TimestepSchedule": ...
