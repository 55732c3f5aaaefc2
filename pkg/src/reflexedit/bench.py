"""Benchmark manifest ingestion, metrics, sweeps, and analysis plots."""

from __future__ import annotations

import math
import subprocess
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from PIL import Image

from .core import EditConfig, _parse_field
from .errors import ConfigError, DimensionError, ManifestError, MetricError, ReflexEditWarning
from .flow import latent_mse, reconstruct_from_step
from .maskblend import EditMask, load_mask_png, save_mask_png
from .pipeline import (
    EditRequest,
    build_schedule,
    extract_mid_step,
    generate_with_injection,
    reflex_edit,
    velocity_adapter,
)

_CASE_FIELDS = {"image", "source_prompt", "target_prompt", "blended_word", "edit_mask"}


@dataclass
class BenchCase:
    """One benchmark record: image, prompts, optional mask, config overrides."""

    id: str
    image: str
    target_prompt: str
    source_prompt: str | None = None
    blended_word: str | None = None
    edit_mask: str | None = None
    overrides: dict[str, Any] = field(default_factory=dict)


def load_manifest(path: str | Path) -> list[BenchCase]:
    """Parse a benchmark manifest.

    Format: a ``[case-id]`` header per record followed by ``key = value``
    lines; ``set.<field>`` lines carry per-case config overrides. Unknown
    keys are rejected. Paths are resolved against the manifest's directory.
    """
    root = Path(path).parent
    cases: list[BenchCase] = []
    seen: set[str] = set()
    current: dict[str, Any] | None = None
    header_line = 0

    def flush() -> None:
        if current is None:
            return
        for required in ("image", "target_prompt"):
            if required not in current:
                raise ManifestError(
                    f"case {current['id']!r} missing required key {required!r}", header_line
                )
        cases.append(
            BenchCase(
                id=current["id"],
                image=str(root / current["image"]),
                target_prompt=current["target_prompt"],
                source_prompt=current.get("source_prompt"),
                blended_word=current.get("blended_word"),
                edit_mask=str(root / current["edit_mask"]) if "edit_mask" in current else None,
                overrides=current.get("overrides", {}),
            )
        )

    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            flush()
            case_id = line[1:-1].strip()
            if not case_id:
                raise ManifestError("empty case id", lineno)
            if case_id in seen:
                raise ManifestError(f"duplicate case id {case_id!r}", lineno)
            seen.add(case_id)
            current = {"id": case_id, "overrides": {}}
            header_line = lineno
            continue
        if "=" not in line:
            raise ManifestError(f"expected 'key = value' or '[case-id]', got {raw!r}", lineno)
        if current is None:
            raise ManifestError("field before any [case-id] header", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("set."):
            override_key = key[4:]
            try:
                current["overrides"][override_key] = _parse_field(override_key, value)
            except ConfigError as exc:
                raise ManifestError(str(exc), lineno) from exc
        elif key in _CASE_FIELDS:
            if key in current:
                raise ManifestError(f"duplicate key {key!r}", lineno)
            current[key] = value
        else:
            raise ManifestError(f"unknown key {key!r}", lineno)
    flush()
    return cases


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def psnr_masked(
    a: np.ndarray,
    b: np.ndarray,
    non_edit_mask: np.ndarray,
    max_value: float,
) -> float:
    """PSNR restricted to mask=1 pixels; identical regions cap at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    mask = np.asarray(non_edit_mask) != 0
    if mask.shape != a.shape[: mask.ndim]:
        raise DimensionError(f"mask shape {mask.shape} does not align with images {a.shape}")
    if not mask.any():
        raise MetricError("non-edit mask selects no pixels")
    diff = (a - b)[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return 100.0
    return 10.0 * math.log10(max_value * max_value / mse)


def iou(mask_a: np.ndarray | EditMask, mask_b: np.ndarray | EditMask) -> float:
    """Intersection over union of two binary masks.

    Two empty masks agree perfectly on absence; that degenerate case is
    defined as 1 and flagged with a diagnostic.
    """
    a = (mask_a.bits if isinstance(mask_a, EditMask) else np.asarray(mask_a)) != 0
    b = (mask_b.bits if isinstance(mask_b, EditMask) else np.asarray(mask_b)) != 0
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        warnings.warn("iou: both masks empty, defining IoU as 1", ReflexEditWarning, stacklevel=2)
        return 1.0
    inter = np.logical_and(a, b).sum()
    return float(inter / union)


def pca_project(features: np.ndarray, components: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centered projection onto the top principal directions.

    Returns (projection [N, components], explained-variance ratios in
    descending order). Zero-variance input degenerates to zeros with a
    diagnostic.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected [N, d] features, got shape {x.shape}")
    n = x.shape[0]
    if n < components:
        raise DimensionError(f"need at least {components} rows, got {n}")
    centered = x - x.mean(axis=0)
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    total = float((s * s).sum())
    proj = np.zeros((n, components))
    ratios = np.zeros(components)
    if total == 0.0:
        warnings.warn(
            "pca_project: zero-variance input, projection degenerates to zeros",
            ReflexEditWarning,
            stacklevel=2,
        )
        return proj, ratios
    width = min(components, s.shape[0])
    proj[:, :width] = u[:, :width] * s[:width]
    ratios[:width] = (s[:width] * s[:width]) / total
    return proj, ratios


# --------------------------------------------------------------------------
# Benchmark runner
# --------------------------------------------------------------------------


@dataclass
class CaseRow:
    id: str
    status: str  # "ok" | "failed"
    psnr_non_edit: float | None = None
    iou: float | None = None
    score: float | None = None
    error: str | None = None
    runtime: float = 0.0


@dataclass
class MetricReport:
    rows: tuple[CaseRow, ...]

    @property
    def n_ok(self) -> int:
        return sum(1 for r in self.rows if r.status == "ok")

    @property
    def n_failed(self) -> int:
        return len(self.rows) - self.n_ok

    def _mean(self, key: str) -> float | None:
        values = [getattr(r, key) for r in self.rows if getattr(r, key) is not None]
        return float(np.mean(values)) if values else None

    def to_text(self) -> str:
        """Deterministic report body; wall-clock timings live in a sidecar."""
        lines = ["# benchmark report", f"cases = {len(self.rows)}"]
        lines.append(f"ok = {self.n_ok}")
        lines.append(f"failed = {self.n_failed}")
        for key in ("psnr_non_edit", "iou", "score"):
            mean = self._mean(key)
            count = sum(1 for r in self.rows if getattr(r, key) is not None)
            lines.append(f"mean_{key} = {_fmt(mean)} (n={count})")
        lines.append("")
        lines.append("# id status psnr_non_edit iou score error")
        for r in self.rows:
            err = r.error.replace("\n", " ") if r.error else "-"
            lines.append(
                f"{r.id} {r.status} {_fmt(r.psnr_non_edit)} {_fmt(r.iou)} {_fmt(r.score)} {err}"
            )
        return "\n".join(lines) + "\n"

    def timings_text(self) -> str:
        lines = ["# per-case wall-clock seconds (not byte-stable across runs)"]
        for r in self.rows:
            lines.append(f"{r.id} {r.runtime:.3f}")
        return "\n".join(lines) + "\n"


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.4f}"


def load_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def save_image(image: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(image, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)


ScorerFn = Callable[[str, str], float]


def external_scorer(command: str) -> ScorerFn:
    """Wrap an executable mapping (image path, prompt) to a real number.

    The command is invoked per case as ``command image_path prompt`` and
    must print a float on stdout.
    """

    def score(image_path: str, prompt: str) -> float:
        out = subprocess.run(
            [command, image_path, prompt], capture_output=True, text=True, check=True
        )
        return float(out.stdout.strip())

    return score


def run_case(
    case: BenchCase,
    config: EditConfig,
    backend,
    case_dir: Path,
    scorer: ScorerFn | None = None,
) -> CaseRow:
    """Run one benchmark case, writing its outputs under ``case_dir``."""
    try:
        case_config = config.with_overrides(case.overrides) if case.overrides else config
        image = load_image(case.image)
        edit_mask = load_mask_png(case.edit_mask) if case.edit_mask else None
        # A provided mask drives blending directly unless a blended word is
        # given, in which case the word generates the mask and the provided
        # one is kept for metrics only.
        user_mask = edit_mask if (edit_mask is not None and case.blended_word is None) else None
        request = EditRequest(
            image=image,
            target_prompt=case.target_prompt,
            source_prompt=case.source_prompt,
            blended_word=case.blended_word,
            config=case_config,
            user_mask=user_mask,
        )
        result = reflex_edit(request, backend)

        case_dir.mkdir(parents=True, exist_ok=True)
        save_image(result.image, case_dir / "edited.png")
        if result.final_mask is not None:
            save_mask_png(result.final_mask, case_dir / "mask.png")
        (case_dir / "report.txt").write_text(
            result.report.to_text(include_timings=False), encoding="utf-8"
        )

        row = CaseRow(id=case.id, status="ok")
        if edit_mask is not None:
            non_edit = 1 - edit_mask.bits
            row.psnr_non_edit = psnr_masked(
                to_uint8(image), to_uint8(result.image), non_edit, 255.0
            )
            if result.final_mask is not None and case.blended_word is not None:
                row.iou = iou(result.final_mask, edit_mask)
        if scorer is not None:
            row.score = scorer(str(case_dir / "edited.png"), case.target_prompt)
        return row
    except Exception as exc:  # per-case isolation: record and continue
        return CaseRow(id=case.id, status="failed", error=f"{type(exc).__name__}: {exc}")


def run_benchmark(
    cases: Sequence[BenchCase],
    config: EditConfig,
    backend,
    out_dir: str | Path,
    workers: int = 1,
    scorer: ScorerFn | None = None,
) -> MetricReport:
    """Run every case, isolate failures, and write a deterministic report.

    The report at the run root carries no wall-clock values so repeated runs
    under the same seed are byte-identical; timings go to a sidecar.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run_one(case: BenchCase) -> CaseRow:
        started = time.perf_counter()
        row = run_case(case, config, backend, out / "cases" / case.id, scorer)
        row.runtime = time.perf_counter() - started
        return row

    if workers <= 1:
        rows = [run_one(case) for case in cases]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_one, cases))
    report = MetricReport(rows=tuple(rows))
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "timings.txt").write_text(report.timings_text(), encoding="utf-8")
    return report


# --------------------------------------------------------------------------
# Sweeps
# --------------------------------------------------------------------------

SWEEP_KINDS = ("t_prime", "k", "alpha")


@dataclass
class SweepPoint:
    value: float
    image: np.ndarray
    metric: float


def sweep_command(
    kind: str,
    values: Sequence[float],
    request: EditRequest,
    backend,
    out_dir: str | Path | None = None,
) -> list[SweepPoint]:
    """Run one edit per value of the swept knob.

    k and alpha sweeps reuse a single feature extraction; a t_prime sweep
    re-extracts per value. The metric column is the reconstruction error
    from the extraction step for t_prime sweeps and the latent deviation
    from the source for k/alpha sweeps.
    """
    if kind not in SWEEP_KINDS:
        raise ConfigError(f"sweep kind {kind!r}: must be one of {SWEEP_KINDS}")
    if not values:
        raise ConfigError("sweep values must be non-empty")
    points: list[SweepPoint] = []

    if kind == "t_prime":
        for value in values:
            cfg = replace(request.config, t_prime=int(value))
            req = replace_request(request, cfg)
            result = reflex_edit(req, backend)
            tokens = backend.tokenize(request.source_prompt or "")
            recon = reconstruct_from_step(
                result.source_trajectory, int(value), velocity_adapter(backend, tokens)
            )
            metric = latent_mse(recon, result.source_trajectory.at(0))
            points.append(SweepPoint(value=float(value), image=result.image, metric=metric))
    else:
        cache, traj = extract_mid_step(
            request.image, request.source_prompt, request.config, backend
        )
        for value in values:
            cfg = replace(
                request.config, **{kind: int(value) if kind == "k" else float(value)}
            )
            req = replace_request(request, cfg)
            schedule = build_schedule(cfg, has_source_prompt=request.source_prompt is not None)
            outcome = generate_with_injection(req, cache, traj, schedule, backend)
            metric = latent_mse(outcome.latent, traj.at(0))
            points.append(
                SweepPoint(value=float(value), image=backend.decode(outcome.latent), metric=metric)
            )

    if out_dir is not None:
        _write_sweep_outputs(kind, points, Path(out_dir))
    return points


def replace_request(request: EditRequest, config: EditConfig) -> EditRequest:
    return EditRequest(
        image=request.image,
        target_prompt=request.target_prompt,
        source_prompt=request.source_prompt,
        blended_word=request.blended_word,
        config=config,
        user_mask=request.user_mask,
    )


def _write_sweep_outputs(kind: str, points: Sequence[SweepPoint], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# {kind} sweep", "# value metric"]
    for p in points:
        save_image(p.image, out / f"{kind}_{p.value:g}.png")
        lines.append(f"{p.value:g} {p.metric:.8e}")
    (out / "sweep.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _plot_sweep(kind, points, out)


def _plot_sweep(kind: str, points: Sequence[SweepPoint], out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(points), figsize=(3 * len(points), 3.2), squeeze=False)
    for ax, p in zip(axes[0], points):
        ax.imshow(np.clip(p.image, 0, 1))
        ax.set_title(f"{kind}={p.value:g}")
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(out / "grid.png")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot([p.value for p in points], [p.metric for p in points], marker="o")
    ax.set_xlabel(kind)
    ax.set_ylabel("metric")
    fig.tight_layout()
    fig.savefig(out / "metric.png")
    plt.close(fig)
