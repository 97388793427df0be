"""Autoregressive noising augmentation, noise-schedule algebra and task masking.

The per-step recursion is y' = sqrt(1 - beta) * y + beta * eps with eps ~ N(0,1);
note the eps coefficient is beta, not sqrt(beta). Compounding f steps gives
y_f = (1 - beta)^(f/2) * y_0 + delta_f with Var(delta_f) = beta - beta (1-beta)^f.
"""

from dataclasses import dataclass, field

import numpy as np

from danp.datagen import Task

SCHEDULE_TOL = 1e-9


def _compound_variance(beta, f):
    return beta - beta * (1.0 - beta) ** f


def solve_beta(levels, sigma2, tol=1e-10):
    """Solve beta - beta (1-beta)^F = sigma2 for beta in (0, 1) by bisection.

    g(beta) is strictly increasing on (0, 1) for F >= 1, so the root is unique.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if not 0.0 < sigma2 < 1.0:
        raise ValueError("sigma2 must lie in (0, 1)")
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _compound_variance(mid, levels) < sigma2:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class NoiseSchedule:
    """Number of fidelity levels F, per-step beta, and the implied last-level variance."""

    levels: int
    beta: float
    sigma2_final: float

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if self.levels > 0:
            if not 0.0 < self.beta < 1.0:
                raise ValueError("beta must lie in (0, 1)")
            implied = _compound_variance(self.beta, self.levels)
            if abs(implied - self.sigma2_final) > SCHEDULE_TOL:
                raise ValueError(
                    f"inconsistent schedule: beta={self.beta} implies "
                    f"sigma2={implied}, got {self.sigma2_final}"
                )

    @classmethod
    def from_beta(cls, levels, beta):
        if levels == 0:
            return cls(levels=0, beta=0.0, sigma2_final=0.0)
        return cls(levels=levels, beta=beta,
                   sigma2_final=_compound_variance(beta, levels))

    @classmethod
    def from_sigma2(cls, levels, sigma2):
        if levels == 0:
            return cls(levels=0, beta=0.0, sigma2_final=0.0)
        beta = solve_beta(levels, sigma2)
        return cls(levels=levels, beta=beta,
                   sigma2_final=_compound_variance(beta, levels))


def compound_params(schedule, f):
    """(scale, variance) of level f relative to the clean signal."""
    if not 0 <= f <= schedule.levels:
        raise ValueError(f"level {f} out of range 0..{schedule.levels}")
    scale = (1.0 - schedule.beta) ** (f / 2.0)
    return scale, _compound_variance(schedule.beta, f)


def noise_step(ys, beta, rng):
    """One noising step y' = sqrt(1-beta) y + beta eps."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    ys = np.asarray(ys, dtype=np.float64)
    return np.sqrt(1.0 - beta) * ys + beta * rng.standard_normal(ys.shape)


@dataclass
class FidelityLevel:
    """One noised copy of (part of) the target set; f=1 least noisy."""

    f: int
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.f < 1:
            raise ValueError("fidelity index starts at 1")
        if self.x.shape != self.y.shape:
            raise ValueError("x/y length mismatch")


@dataclass
class AugmentedTask:
    task: Task
    levels: list  # FidelityLevel, length F, indices 1..F
    schedule: NoiseSchedule


@dataclass
class MaskedTask:
    """Training view of an augmented task for one layer f.

    The model conditions on the context set and the noisier levels f+1..F and
    predicts the level-f points (the original targets when f = 0).
    """

    layer: int
    context_x: np.ndarray
    context_y: np.ndarray
    aux: list  # FidelityLevel for levels layer+1 .. F
    target_x: np.ndarray
    target_y: np.ndarray


def augment_task(task, schedule, rng):
    """Chain-noise the target outputs into F fidelity levels at the target inputs."""
    levels = []
    ys = task.target_y
    for f in range(1, schedule.levels + 1):
        ys = noise_step(ys, schedule.beta, rng)
        levels.append(FidelityLevel(f=f, x=task.target_x.copy(), y=ys))
    return AugmentedTask(task=task, levels=levels, schedule=schedule)


def mask_task(aug, f):
    """Mask an augmented task to (D_c, D_t^f, D_a^{f+1:F})."""
    if not 0 <= f <= aug.schedule.levels:
        raise ValueError(f"layer {f} out of range 0..{aug.schedule.levels}")
    if f == 0:
        tx, ty = aug.task.target_x, aug.task.target_y
    else:
        level = aug.levels[f - 1]
        tx, ty = level.x, level.y
    return MaskedTask(
        layer=f,
        context_x=aug.task.context_x,
        context_y=aug.task.context_y,
        aux=aug.levels[f:],
        target_x=tx,
        target_y=ty,
    )


def sample_aux_inputs(schedule, n_per_level, input_range, rng):
    """F fresh sets of iid uniform deployment inputs, one per fidelity level."""
    if n_per_level < 1:
        raise ValueError("n_per_level must be >= 1")
    lo, hi = input_range
    return [rng.uniform(lo, hi, size=n_per_level) for _ in range(schedule.levels)]
