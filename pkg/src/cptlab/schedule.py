"""Epoch -> bitwidth schedules and learning-rate schedules."""

import math
from dataclasses import dataclass, field

PATTERNS = ("cosine", "triangular", "cosine_anneal", "static", "progressive")
TRIANGULAR_PHASES = ("rising", "falling", "symmetric")
DEFAULT_NUM_CYCLES = 32

_TIE_TOL = 1e-9


def round_half_even(x: float) -> int:
    """Round to nearest integer, ties to even.

    Values within 1e-9 of a half-integer count as ties, so that e.g.
    ``1 - cos(pi / 2)`` evaluating to 0.9999999999999999 still rounds as 1.
    """
    twice = round(2 * x)
    if abs(2 * x - twice) < _TIE_TOL:
        x = twice / 2
    return int(round(x))


@dataclass(frozen=True)
class PrecisionSchedule:
    b_min: int
    b_max: int
    total_epochs: int
    num_cycles: int = DEFAULT_NUM_CYCLES
    pattern: str = "cosine"
    triangular_phase: str = "rising"

    def __post_init__(self):
        if not 2 <= self.b_min <= self.b_max <= 32:
            raise ValueError(f"need 2 <= b_min <= b_max <= 32, got ({self.b_min}, {self.b_max})")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if self.num_cycles < 1:
            raise ValueError("num_cycles must be >= 1")
        if self.num_cycles > self.total_epochs:
            raise ValueError(f"{self.num_cycles} cycles do not fit in {self.total_epochs} epochs")
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown schedule pattern {self.pattern!r}")
        if self.triangular_phase not in TRIANGULAR_PHASES:
            raise ValueError(f"unknown triangular phase {self.triangular_phase!r}")

    @property
    def cycle_length(self) -> int:
        # partial trailing cycle is truncated
        return self.total_epochs // self.num_cycles

    def bits_at(self, t: int) -> int:
        if not 0 <= t < self.total_epochs:
            raise ValueError(f"epoch {t} outside [0, {self.total_epochs})")
        if self.pattern == "progressive":
            return self._progressive(t, self.total_epochs)
        T = self.cycle_length
        return self._from_phase(t % T, T)

    def bits_at_iteration(self, step: int, steps_per_epoch: int) -> int:
        """Per-iteration variant: the cycle is measured in optimizer steps."""
        total = self.total_epochs * steps_per_epoch
        if not 0 <= step < total:
            raise ValueError(f"step {step} outside [0, {total})")
        if self.pattern == "progressive":
            return self._progressive(step, total)
        T = self.cycle_length * steps_per_epoch
        return self._from_phase(step % T, T)

    def _from_phase(self, pos, T):
        lo, hi = self.b_min, self.b_max
        span = hi - lo
        if self.pattern == "static" or span == 0:
            return hi
        if self.pattern == "cosine":
            return round_half_even(lo + 0.5 * span * (1 - math.cos(math.pi * pos / T)))
        if self.pattern == "cosine_anneal":
            return round_half_even(lo + 0.5 * span * (1 + math.cos(math.pi * pos / T)))
        # triangular
        if T == 1:
            return lo if self.triangular_phase != "falling" else hi
        if self.triangular_phase == "rising":
            frac = pos / (T - 1)
        elif self.triangular_phase == "falling":
            frac = 1 - pos / (T - 1)
        else:
            half = (T - 1) / 2
            frac = 1 - abs(pos - half) / half
        return round_half_even(lo + span * frac)

    def _progressive(self, t, total):
        half = max(total // 2, 1)
        if t >= half:
            return self.b_max
        levels = self.b_max - self.b_min + 1
        return min(self.b_min + (t * levels) // half, self.b_max)

    def table(self):
        """List of ``(epoch, bits)`` for the whole run."""
        return [(t, self.bits_at(t)) for t in range(self.total_epochs)]


def static_schedule(bits: int, total_epochs: int) -> PrecisionSchedule:
    return PrecisionSchedule(bits, bits, total_epochs, num_cycles=1, pattern="static")


@dataclass(frozen=True)
class LRSchedule:
    """Piecewise-constant learning rate; stage ``i`` covers ``[boundaries[i-1], boundaries[i])``."""

    stage_boundaries: tuple = field(default=(80, 120, 160))
    stage_lrs: tuple = field(default=(0.1, 0.01, 0.001))

    def __post_init__(self):
        b = tuple(self.stage_boundaries)
        lrs = tuple(float(v) for v in self.stage_lrs)
        object.__setattr__(self, "stage_boundaries", b)
        object.__setattr__(self, "stage_lrs", lrs)
        if len(b) != len(lrs) or not b:
            raise ValueError("need one learning rate per stage boundary")
        if any(x >= y for x, y in zip(b, b[1:])) or b[0] <= 0:
            raise ValueError(f"stage boundaries must be positive and strictly increasing: {b}")
        if any(lr <= 0 for lr in lrs):
            raise ValueError("learning rates must be positive")

    def lr_at(self, t) -> float:
        for end, lr in zip(self.stage_boundaries, self.stage_lrs):
            if t < end:
                return lr
        raise ValueError(f"epoch {t} beyond final stage boundary {self.stage_boundaries[-1]}")


def bits_at(schedule: PrecisionSchedule, t: int) -> int:
    return schedule.bits_at(t)


def lr_at(schedule: LRSchedule, t) -> float:
    return schedule.lr_at(t)


def clr_at(t, lr_max, lr_min, T) -> float:
    """Cosine annealing with warm restarts every ``T`` epochs."""
    if lr_min > lr_max:
        raise ValueError("lr_min must not exceed lr_max")
    if T <= 0:
        raise ValueError("cycle length must be positive")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * (t % T) / T))
