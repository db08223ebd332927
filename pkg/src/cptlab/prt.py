"""Precision range test: find the lowest bitwidth at which training starts to converge.

The test trains one model while stepping the forward bitwidth up from
``start_bits``. For every probe it averages the per-iteration training accuracy
over the last ``window`` iterations and compares that level with the previous
probe's level (the first probe is compared with its own opening window). The
first bitwidth whose accuracy gain exceeds ``threshold`` points is the lower
bound.
"""

import csv
import io
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np


class PRTConfigError(ValueError):
    pass


@dataclass
class PRTConfig:
    start_bits: int = 2
    max_probe_bits: int = 8
    epochs_per_probe: int = 1
    window: int = 50
    threshold: float = 1.0

    def __post_init__(self):
        if self.start_bits < 2:
            raise PRTConfigError("start_bits must be >= 2")
        if self.max_probe_bits < self.start_bits or self.max_probe_bits > 32:
            raise PRTConfigError("max_probe_bits must lie in [start_bits, 32]")
        if self.epochs_per_probe < 1:
            raise PRTConfigError("epochs_per_probe must be >= 1")
        if self.window < 2:
            raise PRTConfigError("window must be >= 2")
        if not self.threshold > 0:
            raise PRTConfigError("threshold must be positive")

    @property
    def num_probes(self) -> int:
        return self.max_probe_bits - self.start_bits + 1

    @property
    def max_epochs(self) -> int:
        return self.num_probes * self.epochs_per_probe


@dataclass
class ProbeRecord:
    bits: int
    delta: float
    level: float
    iterations: int


@dataclass
class PRTResult:
    lower_bound_bits: int
    trace: List[ProbeRecord]
    converged: bool
    epochs_used: int = 0

    def to_dict(self):
        return {
            "lower_bound_bits": self.lower_bound_bits,
            "converged": self.converged,
            "epochs_used": self.epochs_used,
            "trace": [asdict(r) for r in self.trace],
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bits", "delta", "level", "iterations"])
        for r in self.trace:
            w.writerow([r.bits, repr(r.delta), repr(r.level), r.iterations])
        return buf.getvalue()


AccuracySource = Callable[[int, int], Sequence[float]]


def run_prt(accuracy_source: AccuracySource, cfg: PRTConfig,
            first_cycle_epochs: Optional[int] = None) -> PRTResult:
    """Probe bitwidths upward until the averaged accuracy gain exceeds the threshold.

    ``accuracy_source(bits, epochs)`` trains (or replays) ``epochs`` epochs at
    ``bits`` and returns per-iteration training accuracy in percent. The whole
    probe budget must fit in ``first_cycle_epochs`` when that is given.
    """
    if first_cycle_epochs is not None and cfg.max_epochs > first_cycle_epochs:
        raise PRTConfigError(
            f"{cfg.num_probes} probes x {cfg.epochs_per_probe} epochs exceed the first cycle "
            f"({first_cycle_epochs} epochs)")
    trace = []
    prev_level = None
    epochs = 0
    for bits in range(cfg.start_bits, cfg.max_probe_bits + 1):
        acc = np.asarray(accuracy_source(bits, cfg.epochs_per_probe), dtype=np.float64)
        epochs += cfg.epochs_per_probe
        if acc.size == 0:
            raise ValueError("accuracy source produced no iterations (empty data?)")
        w = min(cfg.window, acc.size)
        level = float(acc[-w:].mean())
        if prev_level is None:
            prev_level = float(acc[:w].mean())
        delta = level - prev_level
        trace.append(ProbeRecord(bits, delta, level, int(acc.size)))
        if delta > cfg.threshold:
            return PRTResult(bits, trace, True, epochs)
        prev_level = level
    return PRTResult(cfg.max_probe_bits, trace, False, epochs)


def resolve_bounds(result: PRTResult, static_baseline_bits: int):
    """Lower bound from the test, upper bound from the static-precision counterpart."""
    if not result.converged:
        raise ValueError("precision range test did not converge; no lower bound identified")
    b_min, b_max = result.lower_bound_bits, int(static_baseline_bits)
    if b_min > b_max:
        raise ValueError(
            f"identified lower bound {b_min} exceeds the static baseline precision {b_max}")
    return b_min, b_max
