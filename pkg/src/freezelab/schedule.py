"""Freeze scheduling (step and phased) and the learning-rate schedule.

The freeze signal convention: 0 allows backbone updates for the epoch,
1 freezes the backbone. Epochs are 0-indexed everywhere. The period value
`rho` is a positive integer or `math.inf`; infinity is a real sentinel,
never a large integer, so "always frozen" is exact rather than approximate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

__all__ = [
    "BACKBONE_UNFROZEN",
    "BACKBONE_FROZEN",
    "Rho",
    "ScheduleSpec",
    "LrConfig",
    "step_freeze_signal",
    "phase_freeze_signal",
    "lr_at",
    "parse_rho",
    "format_rho",
]

BACKBONE_UNFROZEN = 0
BACKBONE_FROZEN = 1

Rho = Union[int, float]  # positive int, or math.inf


def _check_rho(rho: Rho) -> None:
    if rho == math.inf:
        return
    if isinstance(rho, bool) or not isinstance(rho, int) or rho < 1:
        raise ValueError(f"rho must be a positive integer or inf, got {rho!r}")


def parse_rho(text) -> Rho:
    """Parse a rho value from config/CLI text; 'inf' and None mean infinity."""
    if text is None:
        return math.inf
    if isinstance(text, str):
        if text.strip().lower() in ("inf", "infinity"):
            return math.inf
        text = int(text)
    if isinstance(text, float) and text == math.inf:
        return math.inf
    rho = int(text)
    _check_rho(rho)
    return rho


def format_rho(rho: Rho) -> str:
    return "inf" if rho == math.inf else str(int(rho))


@dataclass(frozen=True)
class ScheduleSpec:
    """Ordered phases of (end_epoch, rho); the last phase must end at inf.

    A phase covers epochs [previous end, end_epoch). end_epoch values are
    strictly increasing, so lookup is the first phase whose end exceeds
    the epoch.
    """

    phases: tuple[tuple[Union[int, float], Rho], ...]

    def __init__(self, phases: Sequence[tuple[Union[int, float], Rho]]):
        norm = []
        prev_end = 0
        for end, rho in phases:
            if end != math.inf:
                end = int(end)
                if end <= prev_end:
                    raise ValueError(f"phase end epochs must be strictly increasing, got {end} after {prev_end}")
                prev_end = end
            _check_rho(rho)
            norm.append((end, rho))
        if not norm:
            raise ValueError("schedule needs at least one phase")
        if norm[-1][0] != math.inf:
            raise ValueError("the last phase must have end_epoch = inf")
        for end, _ in norm[:-1]:
            if end == math.inf:
                raise ValueError("only the last phase may have end_epoch = inf")
        object.__setattr__(self, "phases", tuple(norm))

    def rho_at(self, epoch: int) -> Rho:
        for end, rho in self.phases:
            if epoch < end:
                return rho
        raise AssertionError("unreachable: last phase covers inf")

    def describe(self) -> str:
        return "|".join(
            f"{'inf' if end == math.inf else end}:{format_rho(rho)}" for end, rho in self.phases
        )


def step_freeze_signal(epoch: int, rho: Rho) -> int:
    """0 (update the backbone) only on epochs that are multiples of rho.

    rho=1 unfreezes every epoch (plain full training); rho=inf never
    unfreezes (a permanently frozen backbone).
    """
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    _check_rho(rho)
    if rho == math.inf:
        return BACKBONE_FROZEN
    return BACKBONE_UNFROZEN if epoch % rho == 0 else BACKBONE_FROZEN


def phase_freeze_signal(epoch: int, spec: ScheduleSpec) -> int:
    """Freeze signal under a phased schedule: pick the phase, then step."""
    return step_freeze_signal(epoch, spec.rho_at(epoch))


@dataclass(frozen=True)
class LrConfig:
    """Linear warmup followed by a flat rate with one step decay.

    Warmup ramps from (nearly) zero to warmup_end_fraction of base_lr over
    the first warmup_iters iterations; afterwards the rate is base_lr.
    Epochs strictly greater than decay_epoch are scaled by decay_factor.
    """

    base_lr: float = 0.005
    warmup_iters: int = 500
    warmup_end_fraction: float = 1.0 / 3.0
    decay_epoch: int = 12
    decay_factor: float = 0.25

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if not (0 < self.warmup_end_fraction <= 1):
            raise ValueError(f"warmup_end_fraction must be in (0, 1], got {self.warmup_end_fraction}")
        if not (0 < self.decay_factor <= 1):
            raise ValueError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        if self.warmup_iters < 0:
            raise ValueError(f"warmup_iters must be >= 0, got {self.warmup_iters}")


def lr_at(iteration: int, epoch: int, cfg: LrConfig) -> float:
    """Learning rate for a global iteration index within a given epoch.

    Uses (iteration + 1) in the ramp so the rate is strictly positive from
    the very first step.
    """
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if iteration < cfg.warmup_iters:
        lr = cfg.base_lr * cfg.warmup_end_fraction * (iteration + 1) / cfg.warmup_iters
    else:
        lr = cfg.base_lr
    if epoch > cfg.decay_epoch:
        lr *= cfg.decay_factor
    return lr
