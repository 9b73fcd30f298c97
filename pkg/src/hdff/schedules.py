"""Learning-rate schedules and per-stage optimizer configuration.

Schedules are plain value objects: the learning rate is a pure function
of the schedule parameters and a step index, which makes serialization
and resume trivially exact.
"""

import math
from dataclasses import dataclass, field, replace

import torch

from .errors import ScheduleError


@dataclass
class CosineSchedule:
    """Half-cosine decay from eta_max to eta_min over t_max steps."""

    eta_max: float
    eta_min: float = 0.0
    t_max: int = 1
    t_cur: int = 0

    def __post_init__(self):
        if self.t_max < 1:
            raise ScheduleError(f"t_max must be >= 1, got {self.t_max}")
        if self.t_cur < 0:
            raise ScheduleError(f"t_cur must be >= 0, got {self.t_cur}")
        if self.eta_min > self.eta_max:
            raise ScheduleError(
                f"eta_min ({self.eta_min}) exceeds eta_max ({self.eta_max})"
            )

    def lr_at(self, t: int) -> float:
        if t < 0:
            raise ScheduleError(f"step index must be >= 0, got {t}")
        t = min(t, self.t_max)
        return self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (
            1.0 + math.cos(math.pi * t / self.t_max)
        )

    def advanced(self, steps: int = 1) -> "CosineSchedule":
        return replace(self, t_cur=self.t_cur + steps)

    def state(self) -> dict:
        return {
            "kind": "cosine",
            "eta_max": self.eta_max,
            "eta_min": self.eta_min,
            "t_max": self.t_max,
            "t_cur": self.t_cur,
        }


@dataclass
class StepSchedule:
    """Multiply eta_0 by gamma every step_size steps."""

    eta_0: float
    gamma: float = 0.1
    step_size: int = 30
    t_cur: int = 0

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ScheduleError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.step_size < 1:
            raise ScheduleError(f"step_size must be >= 1, got {self.step_size}")
        if self.t_cur < 0:
            raise ScheduleError(f"t_cur must be >= 0, got {self.t_cur}")

    def lr_at(self, t: int) -> float:
        if t < 0:
            raise ScheduleError(f"step index must be >= 0, got {t}")
        return self.eta_0 * self.gamma ** (t // self.step_size)

    def advanced(self, steps: int = 1) -> "StepSchedule":
        return replace(self, t_cur=self.t_cur + steps)

    def state(self) -> dict:
        return {
            "kind": "step",
            "eta_0": self.eta_0,
            "gamma": self.gamma,
            "step_size": self.step_size,
            "t_cur": self.t_cur,
        }


Schedule = CosineSchedule | StepSchedule


def cosine_lr(schedule: CosineSchedule) -> float:
    """Learning rate of a cosine schedule at its current step."""
    return schedule.lr_at(schedule.t_cur)


def step_lr(schedule: StepSchedule, t: int) -> float:
    """Learning rate of a step schedule at step t."""
    return schedule.lr_at(t)


_STATE_FIELDS = {
    "cosine": ("eta_max", "eta_min", "t_max", "t_cur"),
    "step": ("eta_0", "gamma", "step_size", "t_cur"),
}


def schedule_from_state(state: dict) -> Schedule:
    """Rebuild a schedule from its serialized state dict.

    Corrupted or truncated state raises, never silently defaults.
    """
    if not isinstance(state, dict) or "kind" not in state:
        raise ScheduleError(f"not a schedule state: {state!r}")
    kind = state["kind"]
    if kind not in _STATE_FIELDS:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    missing = [k for k in _STATE_FIELDS[kind] if k not in state]
    if missing:
        raise ScheduleError(f"schedule state missing fields: {missing}")
    kwargs = {k: state[k] for k in _STATE_FIELDS[kind]}
    cls = CosineSchedule if kind == "cosine" else StepSchedule
    return cls(**kwargs)


@dataclass
class OptimizerConfig:
    """AdamW settings applied to the trainable parameter groups of a stage."""

    base_lr: float
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ScheduleError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def build(self, params) -> torch.optim.AdamW:
        params = list(params)
        if not params:
            raise ScheduleError("optimizer built over an empty parameter set")
        return torch.optim.AdamW(
            params,
            lr=self.base_lr,
            weight_decay=self.weight_decay,
            betas=tuple(self.betas),
            eps=self.eps,
        )


# Default stage learning rates; everything is overridable from the run config.
DEFAULT_STAGE_LR = {"selective": 1e-3, "full": 1e-5, "fusion": 1e-4}
