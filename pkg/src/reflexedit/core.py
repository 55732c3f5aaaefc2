"""Core domain types: latent grids, token sequences, token mappings, config.

All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .errors import ConfigError, DimensionError, MappingError


def _freeze(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Return a read-only array of the requested dtype, copying when needed."""
    out = np.asarray(arr, dtype=dtype)
    if out is arr or out.base is not None:
        out = out.copy()
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class LatentGrid:
    """An image-side latent tensor tagged with its position on the schedule.

    ``data`` has shape [h, w, c] in backend latent units; ``step_index`` is the
    schedule step in [0, T] and ``t_value`` the matching time in [0, 1].
    """

    data: np.ndarray
    step_index: int
    t_value: float

    def __post_init__(self):
        data = _freeze(self.data)
        if data.ndim != 3:
            raise DimensionError(f"latent must be rank 3 [h, w, c], got shape {data.shape}")
        if not np.isfinite(data).all():
            raise DimensionError("latent contains non-finite entries")
        if self.step_index < 0:
            raise DimensionError(f"step_index must be >= 0, got {self.step_index}")
        if not 0.0 <= self.t_value <= 1.0:
            raise DimensionError(f"t_value must lie in [0, 1], got {self.t_value}")
        object.__setattr__(self, "data", data)

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class TokenSequence:
    """Tokenized prompt: ids, embeddings, and word -> token-range spans."""

    token_ids: tuple[int, ...]
    embeddings: np.ndarray
    word_spans: Mapping[str, tuple[tuple[int, int], ...]]

    def __post_init__(self):
        if len(self.token_ids) < 1:
            raise DimensionError("token sequence must contain at least one token")
        emb = _freeze(self.embeddings)
        if emb.ndim != 2 or emb.shape[0] != len(self.token_ids):
            raise DimensionError(
                f"embeddings shape {emb.shape} does not match {len(self.token_ids)} tokens"
            )
        for word, spans in self.word_spans.items():
            for start, end in spans:
                if not (0 <= start < end <= len(self.token_ids)):
                    raise DimensionError(f"span {(start, end)} for {word!r} out of range")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "token_ids", tuple(int(i) for i in self.token_ids))
        object.__setattr__(
            self,
            "word_spans",
            {w: tuple(tuple(s) for s in spans) for w, spans in self.word_spans.items()},
        )

    def __len__(self) -> int:
        return len(self.token_ids)

    def span_indices(self, word: str) -> tuple[int, ...]:
        """All token indices covered by occurrences of ``word`` (may be empty)."""
        out: list[int] = []
        for start, end in self.word_spans.get(word, ()):
            out.extend(range(start, end))
        return tuple(out)


@dataclass(frozen=True)
class TokenMapping:
    """Partial map from target token indices to source token indices.

    ``entries[i]`` is the source index for target token ``i`` or ``None`` when
    the target token has no source counterpart.
    """

    entries: tuple[int | None, ...]
    source_size: int | None

    def __post_init__(self):
        for i, src in enumerate(self.entries):
            if src is None:
                continue
            if self.source_size is None or not 0 <= src < self.source_size:
                raise MappingError(
                    f"target index {i} maps to source index {src}, "
                    f"outside source of size {self.source_size}"
                )

    @property
    def domain_size(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> int | None:
        return self.entries[i]

    def mapped_pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple((i, s) for i, s in enumerate(self.entries) if s is not None)


def _lcs_pairs(a: tuple[int, ...], b: tuple[int, ...]) -> list[tuple[int, int]]:
    """Longest-common-subsequence alignment of two id sequences.

    Returns (a_index, b_index) pairs with strictly increasing indices on both
    sides. Ties prefer earlier a-side indices, which makes the result
    deterministic and the identity for equal sequences.
    """
    n, m = len(a), len(b)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        ai = a[i - 1]
        row, prev = dp[i], dp[i - 1]
        for j in range(1, m + 1):
            if ai == b[j - 1]:
                row[j] = prev[j - 1] + 1
            else:
                row[j] = prev[j] if prev[j] >= row[j - 1] else row[j - 1]
    pairs: list[tuple[int, int]] = []
    i, j = n, m
    while i > 0 and j > 0:
        if a[i - 1] == b[j - 1] and dp[i][j] == dp[i - 1][j - 1] + 1:
            pairs.append((i - 1, j - 1))
            i -= 1
            j -= 1
        elif dp[i - 1][j] >= dp[i][j - 1]:
            i -= 1
        else:
            j -= 1
    pairs.reverse()
    return pairs


def build_token_mapping(source: TokenSequence | None, target: TokenSequence) -> TokenMapping:
    """Align target tokens to source tokens by LCS over token ids.

    Aligned target positions map to their source partner; unaligned positions
    map to None. With no source sequence every position maps to None.
    """
    if source is None:
        return TokenMapping(entries=(None,) * len(target), source_size=None)
    entries: list[int | None] = [None] * len(target)
    for src_idx, tgt_idx in _lcs_pairs(source.token_ids, target.token_ids):
        entries[tgt_idx] = src_idx
    return TokenMapping(entries=tuple(entries), source_size=len(source))


# --------------------------------------------------------------------------
# Edit configuration
# --------------------------------------------------------------------------

_DEFAULT_ATTN_LAYERS = frozenset(range(20, 46))
_DEFAULT_RES_LAYERS = frozenset(range(13, 20))


@dataclass(frozen=True)
class EditConfig:
    """Every knob of the editing pipeline.

    ``t_prime`` defaults to ``T // 2`` when left unset. ``sa_adapt_start``
    left as None means automatic: 2 when cross-modality injection is active,
    4 otherwise, resolved when the injection schedule is built.
    """

    T: int = 28
    t_prime: int | None = None
    alpha: float = 4.0
    k: int = 20
    frac_ca: float = 0.4
    frac_sa: float = 0.25
    frac_res: float = 0.15
    m_frac: float = 0.7
    n_noising: int = 7
    attn_layers: frozenset[int] = _DEFAULT_ATTN_LAYERS
    res_layers: frozenset[int] = _DEFAULT_RES_LAYERS
    sa_adapt_start: int | None = None
    seed: int = 0
    blended_word: str | None = None

    def __post_init__(self):
        if self.t_prime is None:
            object.__setattr__(self, "t_prime", self.T // 2)
        object.__setattr__(self, "attn_layers", frozenset(int(x) for x in self.attn_layers))
        object.__setattr__(self, "res_layers", frozenset(int(x) for x in self.res_layers))
        self._validate()

    def _validate(self) -> None:
        if self.T <= 0:
            raise ConfigError(f"T={self.T}: must be a positive step count")
        if not 0 < self.t_prime <= self.T:
            raise ConfigError(f"t_prime={self.t_prime}: must satisfy 0 < t_prime <= T={self.T}")
        if self.alpha < 1.0:
            raise ConfigError(f"alpha={self.alpha}: must be >= 1")
        if self.k < 0:
            raise ConfigError(f"k={self.k}: must be >= 0")
        for name in ("frac_ca", "frac_sa", "frac_res", "m_frac"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name}={value}: must lie in [0, 1]")
        if not 0 <= self.n_noising < self.T:
            raise ConfigError(f"n_noising={self.n_noising}: must satisfy 0 <= n < T={self.T}")
        for name in ("attn_layers", "res_layers"):
            layers = getattr(self, name)
            if any(l < 0 for l in layers):
                raise ConfigError(f"{name}={sorted(layers)}: layer indices must be >= 0")
        if self.sa_adapt_start is not None and self.sa_adapt_start < 0:
            raise ConfigError(f"sa_adapt_start={self.sa_adapt_start}: must be >= 0")
        if not -(2**63) <= self.seed < 2**64:
            raise ConfigError(f"seed={self.seed}: must fit in 64 bits")

    def with_overrides(self, overrides: Mapping[str, Any]) -> "EditConfig":
        """New config with the given fields replaced; values may be strings."""
        parsed = {key: _parse_field(key, value) for key, value in overrides.items()}
        return replace(self, **parsed)

    def to_text(self) -> str:
        """Serialize as flat ``key = value`` lines; inverse of :func:`load_config`."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            lines.append(f"{f.name} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


_INT_FIELDS = {"T", "t_prime", "k", "n_noising", "seed"}
_FLOAT_FIELDS = {"alpha", "frac_ca", "frac_sa", "frac_res", "m_frac"}
_SET_FIELDS = {"attn_layers", "res_layers"}


def parse_layer_set(text: str) -> frozenset[int]:
    """Parse a layer set like ``20..45`` or ``2,3,8..11`` into a frozenset."""
    out: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo_s, hi_s = part.split("..", 1)
            lo, hi = int(lo_s), int(hi_s)
            if hi < lo:
                raise ConfigError(f"layer range {part!r}: end below start")
            out.update(range(lo, hi + 1))
        else:
            out.add(int(part))
    return frozenset(out)


def format_layer_set(layers: Iterable[int]) -> str:
    """Render a layer set as comma-separated values and ``lo..hi`` runs."""
    vals = sorted(set(int(x) for x in layers))
    if not vals:
        return ""
    runs: list[str] = []
    start = prev = vals[0]
    for v in vals[1:] + [None]:  # type: ignore[list-item]
        if v is not None and v == prev + 1:
            prev = v
            continue
        runs.append(str(start) if start == prev else f"{start}..{prev}")
        if v is not None:
            start = prev = v
    return ",".join(runs)


def _format_value(value: Any) -> str:
    if isinstance(value, frozenset):
        return format_layer_set(value)
    return str(value)


def _parse_field(key: str, value: Any) -> Any:
    if value is None and key in {"t_prime", "sa_adapt_start", "blended_word"}:
        return None
    try:
        if key in _INT_FIELDS:
            return int(value)
        if key in _FLOAT_FIELDS:
            return float(value)
        if key in _SET_FIELDS:
            if isinstance(value, str):
                return parse_layer_set(value)
            return frozenset(int(x) for x in value)
        if key == "sa_adapt_start":
            if value is None or (isinstance(value, str) and value.strip() == "auto"):
                return None
            return int(value)
        if key == "blended_word":
            return None if value in (None, "") else str(value)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}={value!r}: {exc}") from exc
    raise ConfigError(f"unknown config key {key!r}")


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> EditConfig:
    """Build an :class:`EditConfig` from a flat key-value file plus overrides.

    Unspecified fields take the defaults. Overrides are applied after the
    file and may carry typed values or strings. Unknown keys and invalid
    values raise :class:`ConfigError`.
    """
    values: dict[str, Any] = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line {raw!r}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = _parse_field(key, value)
    for key, value in (overrides or {}).items():
        values[key] = _parse_field(key, value)
    return EditConfig(**values)


def floor_fraction(frac: float, total: int) -> int:
    """Floored step count for a fraction of ``total``, robust to float noise."""
    return min(total, int(math.floor(frac * total + 1e-9)))
