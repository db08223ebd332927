"""Bit-operation accounting for fake-quantized training.

One multiply-accumulate between an a-bit and a b-bit operand costs ``a * b``
BitOPs. A training step of a layer with ``M`` MACs is charged three GEMMs:

    forward          M * b_w * b_a
    error backprop   M * b_w * b_e
    weight gradient  M * b_a * b_e

plus an optimizer-update term ``params * b_g * b_g`` kept separate from the total.
"""

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

ACCOUNTING_VERSION = "three-gemm-v1"
PHASES = ("forward", "error_backprop", "weight_grad")


@dataclass(frozen=True)
class LayerDesc:
    """Shape description of one GEMM-bearing layer (per sample).

    ``kind`` is ``"linear"`` (uses in_features/out_features) or ``"conv"``
    (uses in_shape=(C, H, W), out_channels, kernel, stride, padding).
    """

    kind: str
    in_features: int = 0
    out_features: int = 0
    in_shape: tuple = ()
    out_channels: int = 0
    kernel: tuple = (1, 1)
    stride: int = 1
    padding: int = 0
    name: str = ""

    @property
    def params(self) -> int:
        if self.kind == "linear":
            return self.in_features * self.out_features + self.out_features
        c = self.in_shape[0]
        kh, kw = self.kernel
        return self.out_channels * c * kh * kw + self.out_channels


def layer_macs(desc: LayerDesc, batch: int = 1) -> int:
    if desc.kind == "linear":
        return batch * desc.in_features * desc.out_features
    if desc.kind == "conv":
        c, h, w = desc.in_shape
        kh, kw = desc.kernel
        ho = (h + 2 * desc.padding - kh) // desc.stride + 1
        wo = (w + 2 * desc.padding - kw) // desc.stride + 1
        return batch * desc.out_channels * c * kh * kw * ho * wo
    raise ValueError(f"unknown layer kind {desc.kind!r}")


@dataclass
class PhaseCost:
    forward: int = 0
    error_backprop: int = 0
    weight_grad: int = 0
    update: int = 0

    @property
    def total(self) -> int:
        return self.forward + self.error_backprop + self.weight_grad


def _bits_ok(*bits):
    for b in bits:
        if not 2 <= b <= 32:
            raise ValueError(f"bitwidth {b} outside [2, 32]")


def step_cost(macs: int, b_w: int, b_a: int, b_e: int, b_g: int = None, params: int = 0) -> PhaseCost:
    b_g = b_e if b_g is None else b_g
    _bits_ok(b_w, b_a, b_e, b_g)
    return PhaseCost(
        forward=macs * b_w * b_a,
        error_backprop=macs * b_w * b_e,
        weight_grad=macs * b_a * b_e,
        update=params * b_g * b_g,
    )


@dataclass
class CostLedger:
    forward: int = 0
    error_backprop: int = 0
    weight_grad: int = 0
    update: int = 0
    steps: int = 0
    prt_steps: int = 0
    accounting: str = ACCOUNTING_VERSION

    def charge(self, cost: PhaseCost, prt: bool = False):
        for name in ("forward", "error_backprop", "weight_grad", "update"):
            v = getattr(cost, name)
            if v < 0:
                raise ValueError("negative cost")
            setattr(self, name, getattr(self, name) + v)
        if prt:
            self.prt_steps += 1
        else:
            self.steps += 1

    @property
    def total(self) -> int:
        return self.forward + self.error_backprop + self.weight_grad

    def to_dict(self):
        d = asdict(self)
        d["total"] = self.total
        return d

    @classmethod
    def from_dict(cls, d):
        keys = ("forward", "error_backprop", "weight_grad", "update", "steps", "prt_steps", "accounting")
        return cls(**{k: d[k] for k in keys if k in d})

    def copy(self):
        return CostLedger.from_dict(self.to_dict())


def _reduction(a, b):
    return 0.0 if b == 0 else 100.0 * (1.0 - a / b)


def run_report(ledger: CostLedger, baseline: CostLedger) -> dict:
    """Percentage BitOPs reduction of ``ledger`` relative to ``baseline``."""
    if ledger.steps != baseline.steps:
        raise ValueError(f"ledgers cover different step counts ({ledger.steps} vs {baseline.steps})")
    report = {"accounting": ACCOUNTING_VERSION, "steps": ledger.steps}
    for phase in PHASES + ("update",):
        report[f"{phase}_reduction_pct"] = _reduction(getattr(ledger, phase), getattr(baseline, phase))
    report["total_reduction_pct"] = _reduction(ledger.total, baseline.total)
    report["total_bitops"] = ledger.total
    report["baseline_total_bitops"] = baseline.total
    return report


def analytic_ledger(layers: Sequence[LayerDesc], samples_per_epoch: int, batch_size: int,
                    fw_bits: Iterable[int], bw_bits: Iterable[int]) -> CostLedger:
    """Closed-form ledger for a run, enumerating the per-epoch bit schedule.

    ``fw_bits``/``bw_bits`` give the bitwidth of every epoch. MACs are linear in
    the batch size, so a short final batch is charged by its true size.
    """
    per_sample = sum(layer_macs(d) for d in layers)
    params = sum(d.params for d in layers)
    steps_per_epoch = -(-samples_per_epoch // batch_size)
    macs = per_sample * samples_per_epoch
    ledger = CostLedger()
    for fw, bw in zip(fw_bits, bw_bits):
        c = step_cost(macs, fw, fw, bw, bw, params * steps_per_epoch)
        ledger.forward += c.forward
        ledger.error_backprop += c.error_backprop
        ledger.weight_grad += c.weight_grad
        ledger.update += c.update
        ledger.steps += steps_per_epoch
    return ledger
