"""Rectified-flow sampling, inversion, noised inversion, and reconstruction.

The engine is stateless and conditioning-agnostic: conditioning lives inside
the velocity callable. Sampling integrates the probability-flow ODE with
explicit Euler from noise (step T, t=1) toward data (step 0, t=0):

    z[i-1] = z[i] + (t[i-1] - t[i]) * V(z[i], t[i])        i = T .. 1

and inversion reverses the recursion:

    z[i] = z[i-1] + (t[i] - t[i-1]) * V(z[i-1], t[i-1])    i = start+1 .. T
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .backend import HookEvent, HookPoint
from .core import EditConfig, LatentGrid
from .errors import DimensionError, NumericError, StepLookupError
from .tensorio import read_tensor, write_tensor

# (latent data, t, hooks) -> (velocity, hook events)
VelocityFn = Callable[
    [np.ndarray, float, Sequence[HookPoint] | None],
    tuple[np.ndarray, list[HookEvent]],
]

# Hooks may be a static sequence or a per-step factory (step_index, t) -> hooks.
HooksArg = Sequence[HookPoint] | Callable[[int, float], Sequence[HookPoint] | None] | None


def pure_field(f: Callable[[np.ndarray, float], np.ndarray]) -> VelocityFn:
    """Wrap a plain mathematical field f(z, t) as a hook-aware velocity."""

    def fn(z: np.ndarray, t: float, hooks: Sequence[HookPoint] | None = None):
        return np.asarray(f(z, t), dtype=np.float32), []

    return fn


@dataclass(frozen=True)
class TimestepSchedule:
    """Schedule values indexed by step: t[0] = 0 (data) .. t[T] = 1 (noise).

    Traversed from noise to data the values descend strictly from 1 to 0.
    """

    t_values: tuple[float, ...]

    def __post_init__(self):
        t = self.t_values
        if len(t) < 2:
            raise DimensionError("schedule needs at least two steps")
        if t[0] != 0.0 or t[-1] != 1.0:
            raise DimensionError(f"schedule endpoints must be exactly 0 and 1, got {t[0]}, {t[-1]}")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise DimensionError("schedule must be strictly monotone between endpoints")
        object.__setattr__(self, "t_values", tuple(float(v) for v in t))

    @classmethod
    def uniform(cls, T: int) -> "TimestepSchedule":
        return cls(tuple(i / T for i in range(T + 1)))

    @property
    def T(self) -> int:
        return len(self.t_values) - 1

    def t(self, step: int) -> float:
        return self.t_values[step]


@dataclass(frozen=True)
class Trajectory:
    """A contiguous run of latents, one per step index, plus its schedule."""

    schedule: TimestepSchedule
    latents: tuple[LatentGrid, ...]
    direction: str  # "inversion" | "generation"

    def __post_init__(self):
        if self.direction not in ("inversion", "generation"):
            raise DimensionError(f"unknown direction {self.direction!r}")
        if not self.latents:
            raise DimensionError("trajectory must contain at least one latent")
        start = self.latents[0].step_index
        for offset, lat in enumerate(self.latents):
            step = start + offset
            if lat.step_index != step:
                raise DimensionError(
                    f"latent at position {offset} tagged step {lat.step_index}, expected {step}"
                )
            if lat.t_value != self.schedule.t(step):
                raise DimensionError(
                    f"step {step}: t tag {lat.t_value} != schedule value {self.schedule.t(step)}"
                )
        object.__setattr__(self, "latents", tuple(self.latents))

    @property
    def start_step(self) -> int:
        return self.latents[0].step_index

    @property
    def end_step(self) -> int:
        return self.latents[-1].step_index

    def at(self, step: int) -> LatentGrid:
        if not self.start_step <= step <= self.end_step:
            raise StepLookupError(
                f"trajectory covers steps [{self.start_step}, {self.end_step}], asked for {step}"
            )
        return self.latents[step - self.start_step]

    def steps(self) -> range:
        return range(self.start_step, self.end_step + 1)


def euler_step(data: np.ndarray, t_from: float, t_to: float, velocity: np.ndarray) -> np.ndarray:
    """One explicit Euler update from time t_from to t_to."""
    return data + (t_to - t_from) * velocity


def _resolve_hooks(hooks: HooksArg, step: int, t: float) -> Sequence[HookPoint] | None:
    return hooks(step, t) if callable(hooks) else hooks


def _check_finite(v: np.ndarray, step: int) -> None:
    if not np.isfinite(v).all():
        raise NumericError(f"velocity produced non-finite values at step {step}")


def euler_sample(
    z_start: LatentGrid,
    schedule: TimestepSchedule,
    velocity: VelocityFn,
    hooks: HooksArg = None,
) -> Trajectory:
    """Integrate from ``z_start`` down to step 0.

    Hooks, when given, are forwarded to every velocity evaluation, so each
    registered point fires once per step per layer.
    """
    start = z_start.step_index
    if z_start.t_value != schedule.t(start):
        raise DimensionError(
            f"start latent t tag {z_start.t_value} != schedule value {schedule.t(start)}"
        )
    latents = [z_start]
    z = z_start
    for i in range(start, 0, -1):
        t_i, t_prev = schedule.t(i), schedule.t(i - 1)
        v, _ = velocity(z.data, t_i, _resolve_hooks(hooks, i, t_i))
        _check_finite(v, i)
        z = LatentGrid(euler_step(z.data, t_i, t_prev, v), i - 1, t_prev)
        latents.append(z)
    latents.reverse()
    return Trajectory(schedule=schedule, latents=tuple(latents), direction="generation")


def euler_invert(
    z_start: LatentGrid,
    start_step: int,
    schedule: TimestepSchedule,
    velocity: VelocityFn,
    hooks: HooksArg = None,
) -> Trajectory:
    """Reverse the sampling recursion from ``start_step`` up to step T."""
    if z_start.step_index != start_step:
        raise DimensionError(
            f"z_start tagged step {z_start.step_index}, expected start_step {start_step}"
        )
    if start_step >= schedule.T:
        raise DimensionError(f"start_step {start_step} must be below T={schedule.T}")
    latents = [z_start]
    z = z_start
    for i in range(start_step + 1, schedule.T + 1):
        t_prev, t_i = schedule.t(i - 1), schedule.t(i)
        v, _ = velocity(z.data, t_prev, _resolve_hooks(hooks, i - 1, t_prev))
        _check_finite(v, i - 1)
        z = LatentGrid(euler_step(z.data, t_prev, t_i, v), i, t_i)
        latents.append(z)
    return Trajectory(schedule=schedule, latents=tuple(latents), direction="inversion")


def interpolate_toward_noise(z0_data: np.ndarray, noise: np.ndarray, t: float) -> np.ndarray:
    """Linear interpolation t*noise + (1-t)*z0, computed as z0 + t*(noise-z0).

    The rearranged form makes noise == z0 an exact fixed point in floating
    point for every t.
    """
    return z0_data + t * (noise - z0_data)


def noised_invert(
    z_0: LatentGrid,
    config: EditConfig,
    noise: np.ndarray,
    velocity: VelocityFn,
    schedule: TimestepSchedule,
) -> Trajectory:
    """Invert a clean latent after ``config.n_noising`` forward noising steps.

    Steps 1..n are filled by interpolating toward ``noise`` at each schedule
    value; steps n+1..T follow the Euler inversion from the noised latent.
    The returned trajectory records all T+1 latents, with step 0 holding the
    original clean latent.
    """
    if z_0.step_index != 0:
        raise DimensionError(f"noised inversion starts from step 0, got {z_0.step_index}")
    n = config.n_noising
    if n >= schedule.T:
        raise DimensionError(f"n_noising {n} must be below T={schedule.T}")
    eps = np.asarray(noise, dtype=np.float32)
    if eps.shape != z_0.data.shape:
        raise DimensionError(f"noise shape {eps.shape} != latent shape {z_0.data.shape}")
    latents = [z_0]
    for i in range(1, n + 1):
        t_i = schedule.t(i)
        latents.append(LatentGrid(interpolate_toward_noise(z_0.data, eps, t_i), i, t_i))
    inverted = euler_invert(latents[-1], n, schedule, velocity)
    latents.extend(inverted.latents[1:])
    return Trajectory(schedule=schedule, latents=tuple(latents), direction="inversion")


def reconstruct_from_step(
    traj: Trajectory,
    t_start: int,
    velocity: VelocityFn,
) -> LatentGrid:
    """Sample from the trajectory's latent at ``t_start`` back down to step 0."""
    z = traj.at(t_start)
    if t_start == 0:
        return z
    return euler_sample(z, traj.schedule, velocity).at(0)


def latent_mse(a: LatentGrid, b: LatentGrid) -> float:
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    return float(np.mean(diff * diff))


def reconstruction_sweep(
    z_0: LatentGrid,
    config: EditConfig,
    velocity: VelocityFn,
    steps: Sequence[int],
    noise: np.ndarray,
    schedule: TimestepSchedule,
) -> list[tuple[int, float]]:
    """Noised-invert once, then reconstruct from each requested step.

    Returns (step, mean squared error vs z_0) pairs in the given order.
    """
    for s in steps:
        if not 1 <= s <= schedule.T:
            raise DimensionError(f"sweep step {s} outside [1, {schedule.T}]")
    traj = noised_invert(z_0, config, noise, velocity, schedule)
    out: list[tuple[int, float]] = []
    for s in steps:
        recon = reconstruct_from_step(traj, s, velocity)
        out.append((s, latent_mse(recon, z_0)))
    return out


# --------------------------------------------------------------------------
# Trajectory serialization: one tensor container per step plus an index file.
# --------------------------------------------------------------------------

_INDEX_NAME = "index.txt"


def save_trajectory(traj: Trajectory, directory: str | Path) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"direction = {traj.direction}"]
    for lat in traj.latents:
        name = f"step_{lat.step_index:04d}.rtn"
        write_tensor(lat.data, out / name)
        lines.append(f"{lat.step_index}\t{name}\t{lat.t_value!r}")
    (out / _INDEX_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_trajectory(directory: str | Path) -> Trajectory:
    root = Path(directory)
    lines = (root / _INDEX_NAME).read_text(encoding="utf-8").splitlines()
    direction = lines[0].split("=", 1)[1].strip()
    rows = []
    for line in lines[1:]:
        if not line.strip():
            continue
        step_s, name, t_s = line.split("\t")
        rows.append((int(step_s), name, float(t_s)))
    rows.sort()
    t_by_step = {step: t for step, _, t in rows}
    schedule = TimestepSchedule(_schedule_from_tags(t_by_step))
    latents = tuple(
        LatentGrid(read_tensor(root / name).astype(np.float32), step, t_by_step[step])
        for step, name, _ in rows
    )
    return Trajectory(schedule=schedule, latents=latents, direction=direction)


def _schedule_from_tags(t_by_step: dict[int, float]) -> tuple[float, ...]:
    """Rebuild the full schedule from tagged steps.

    A full trajectory carries every value. Partial coverage (e.g. an
    inversion saved from a mid step) is filled in assuming a uniform grid,
    which is verified against every tag.
    """
    end = max(t_by_step)
    if t_by_step.get(0) == 0.0 and t_by_step.get(end) == 1.0 and len(t_by_step) == end + 1:
        return tuple(t_by_step[i] for i in range(end + 1))
    for candidate_T in range(end, 4097):
        sched = tuple(i / candidate_T for i in range(candidate_T + 1))
        if all(sched[s] == t for s, t in t_by_step.items()):
            return sched
    raise DimensionError("cannot reconstruct a schedule consistent with the index tags")
