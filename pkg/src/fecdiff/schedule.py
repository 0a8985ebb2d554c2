"""Noise schedules, timestep plans, and the forward noising process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("linear-beta", "scaled-linear-beta", "constant-beta")

DEFAULT_TRAIN_STEPS = 1000
# Defaults follow the common pretrained latent-diffusion convention.
DEFAULT_SCALED_BETA_START = 0.00085
DEFAULT_SCALED_BETA_END = 0.012
DEFAULT_LINEAR_BETA_START = 1e-4
DEFAULT_LINEAR_BETA_END = 0.02
DEFAULT_CONSTANT_BETA = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal-retention coefficients of a discrete diffusion.

    ``alpha_bar[t]`` is the cumulative product of ``1 - beta_s`` for
    ``s <= t``, with ``alpha_bar[0] == 1`` (zero noise). Coefficients are
    stored as float64 and are immutable, so a schedule can be shared
    freely across concurrent sampling sessions.
    """

    total_train_steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.ascontiguousarray(np.asarray(self.alpha_bar, dtype=np.float64))
        object.__setattr__(self, "alpha_bar", ab)
        T = self.total_train_steps
        if T < 1:
            raise ValueError(f"total_train_steps must be >= 1, got {T}")
        if ab.shape != (T + 1,):
            raise ValueError(f"alpha_bar must have length T+1={T + 1}, got {ab.shape}")
        if ab[0] != 1.0:
            raise ValueError("alpha_bar[0] must equal 1")
        if np.any(ab <= 0.0) or np.any(ab > 1.0):
            raise ValueError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) > 0.0):
            raise ValueError("alpha_bar must be non-increasing in t")
        ab.setflags(write=False)

    def ab(self, t: int) -> float:
        """alpha_bar at timestep ``t`` (0 <= t <= T)."""
        if not 0 <= t <= self.total_train_steps:
            raise ValueError(f"timestep {t} out of range [0, {self.total_train_steps}]")
        return float(self.alpha_bar[t])


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly decreasing timestep subsequence used for skip sampling.

    ``timesteps`` is used in the given (descending) order for sampling;
    its reverse is used for inversion.
    """

    steps: int
    timesteps: tuple[int, ...]

    def __post_init__(self):
        if len(self.timesteps) != self.steps:
            raise ValueError("len(timesteps) must equal steps")
        if any(b >= a for a, b in zip(self.timesteps, self.timesteps[1:])):
            raise ValueError("timesteps must be strictly decreasing")

    def sampling_pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) pairs for the descent, ending at t_prev = 0."""
        ts = list(self.timesteps)
        return list(zip(ts, ts[1:] + [0]))

    def inversion_pairs(self) -> list[tuple[int, int]]:
        """(t_prev, t) pairs for the ascent, starting from t_prev = 0."""
        ts = list(self.timesteps)[::-1]
        return list(zip([0] + ts[:-1], ts))


def build_schedule(
    kind: str,
    T: int = DEFAULT_TRAIN_STEPS,
    *,
    beta_start: float | None = None,
    beta_end: float | None = None,
    beta: float | None = None,
) -> NoiseSchedule:
    """Construct a noise schedule of the given kind with T train steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if kind == "linear-beta":
        b0 = DEFAULT_LINEAR_BETA_START if beta_start is None else beta_start
        b1 = DEFAULT_LINEAR_BETA_END if beta_end is None else beta_end
        betas = np.linspace(b0, b1, T, dtype=np.float64)
    elif kind == "scaled-linear-beta":
        b0 = DEFAULT_SCALED_BETA_START if beta_start is None else beta_start
        b1 = DEFAULT_SCALED_BETA_END if beta_end is None else beta_end
        betas = np.linspace(np.sqrt(b0), np.sqrt(b1), T, dtype=np.float64) ** 2
    elif kind == "constant-beta":
        b = DEFAULT_CONSTANT_BETA if beta is None else beta
        betas = np.full(T, b, dtype=np.float64)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(total_train_steps=T, alpha_bar=alpha_bar)


def add_noise(z0: np.ndarray, eps: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Forward noising: sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {eps.shape}")
    if not 1 <= t <= sched.total_train_steps:
        raise ValueError(f"timestep {t} out of range [1, {sched.total_train_steps}]")
    ab = sched.ab(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def timestep_plan(steps: int, T: int = DEFAULT_TRAIN_STEPS) -> TimestepPlan:
    """Evenly spaced decreasing timesteps starting at t = T.

    The stride is ``T // steps``; when T is not divisible by steps the
    residue is absorbed at the low-t end (the last planned timestep sits
    above t = 0 by more than one stride).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > T:
        raise ValueError(f"steps ({steps}) must not exceed T ({T})")
    stride = T // steps
    ts = tuple(T - i * stride for i in range(steps))
    return TimestepPlan(steps=steps, timesteps=ts)
