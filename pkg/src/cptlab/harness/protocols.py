"""Experiment protocols built on :func:`cptlab.harness.train.train`.

* three-stage learning-rate/precision runs (low-precision first stage, full
  precision afterwards),
* grids over schedule pattern x cycle count x bounds,
* closed-form cost of a configuration without training,
* aggregation of finished run directories into one table.
"""

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from cptlab.cost import CostLedger, analytic_ledger, run_report
from cptlab.harness.config import ConfigError, TrainConfig, precision_preset
from cptlab.harness.data import Dataset, ingest_dataset
from cptlab.harness.models import build_model
from cptlab.harness.train import train
from cptlab.quantization import FULL_PRECISION

log = logging.getLogger(__name__)

STAGE_FRACTIONS = (0.5, 0.75)
LATER_STAGE_LRS = (0.01, 0.001)


def _with(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, **changes)


# ---------------------------------------------------------------- three-stage


def stage_boundaries(epochs, fractions=STAGE_FRACTIONS):
    """Epoch indices where stages two and three begin, plus the total."""
    a, b = fractions
    if not 0 < a < b < 1:
        raise ConfigError(f"stage fractions must satisfy 0 < a < b < 1, got {fractions}")
    e1, e2 = int(round(a * epochs)), int(round(b * epochs))
    if not 0 < e1 < e2 < epochs:
        raise ConfigError(f"{epochs} epochs are too few for three non-empty stages")
    return [e1, e2, epochs]


def table1_config(base: TrainConfig, first_stage_lr: float, first_stage_bits: int,
                  fractions=STAGE_FRACTIONS) -> TrainConfig:
    """Config for a run whose first stage uses (lr, bits) and later stages full precision.

    Stage two runs at lr 0.01 and stage three at 0.001. Errors and gradients
    stay at full precision throughout so that only the first-stage forward
    precision differs between runs.
    """
    if not first_stage_lr > 0:
        raise ConfigError("first_stage_lr must be positive")
    if not 2 <= first_stage_bits <= FULL_PRECISION:
        raise ConfigError(f"first_stage_bits must lie in [2, {FULL_PRECISION}]")
    e = base.epochs
    b1, b2, _ = bounds = stage_boundaries(e, fractions)
    fw = [first_stage_bits] * b1 + [FULL_PRECISION] * (e - b1)
    precision = replace(base.precision, pattern="static", b_min=FULL_PRECISION, b_max=FULL_PRECISION,
                        bw_bits=FULL_PRECISION, gradient_cpt=False, cpt_start_epoch=0,
                        eval_bits=FULL_PRECISION, fw_bits_by_epoch=fw,
                        bw_bits_by_epoch=[FULL_PRECISION] * e)
    lr = replace(base.lr, kind="staircase", boundaries=bounds,
                 lrs=[float(first_stage_lr), *LATER_STAGE_LRS])
    name = f"{base.name}-lr{first_stage_lr:g}-b{first_stage_bits}"
    return _with(base, name=name, precision=precision, lr=lr).validate()


def run_table1_protocol(base: TrainConfig, first_stage_lr: float, first_stage_bits: int,
                        seed: Optional[int] = None, data: Optional[Dataset] = None,
                        out_dir=None) -> float:
    """Train one three-stage run and return its final test accuracy (percent)."""
    cfg = table1_config(base, first_stage_lr, first_stage_bits)
    if seed is not None:
        cfg = _with(cfg, seed=int(seed))
    return train(cfg, data=data, out_dir=out_dir).final_test_acc


def _table1_job(args):
    base, lr, bits, seed, data = args
    acc = run_table1_protocol(base, lr, bits, seed, data)
    return {"first_stage_lr": lr, "first_stage_bits": bits, "seed": seed, "test_acc": acc}


def table1_grid(base: TrainConfig, lrs: Sequence[float], bits: Sequence[int], seeds: Sequence[int],
                data: Optional[Dataset] = None, workers: int = 1) -> List[dict]:
    """Every (lr, bits, seed) combination; one row per run."""
    if data is None:
        data = ingest_dataset(base.data, np.dtype(base.dtype))
    jobs = [(base, lr, b, s, data) for lr in lrs for b in bits for s in seeds]
    return _map(_table1_job, jobs, workers)


def table1_gaps(rows: Iterable[dict], low_bits: int = 4, high_bits: int = FULL_PRECISION) -> dict:
    """Mean (high-precision minus low-precision) accuracy gap per first-stage lr.

    Seeds are paired, so each gap is averaged over matching seeds.
    """
    acc = {(r["first_stage_lr"], r["first_stage_bits"], r["seed"]): r["test_acc"] for r in rows}
    out = {}
    for lr in sorted({k[0] for k in acc}, reverse=True):
        diffs = [acc[(lr, high_bits, s)] - acc[(lr, low_bits, s)]
                 for (l, b, s) in acc if l == lr and b == low_bits and (lr, high_bits, s) in acc]
        if diffs:
            out[lr] = float(np.mean(diffs))
    return out


# ---------------------------------------------------------------- cost only


def model_shape(cfg: TrainConfig):
    """``(input_shape, n_classes, n_train)`` implied by the data section.

    Synthetic kinds are resolved without generating data; file-backed kinds are read.
    """
    d = cfg.data
    if d.kind == "digits":
        return (1, d.image_size, d.image_size), d.n_classes or 10, d.n_train
    if d.kind == "bitgated":
        return (1 + d.n_signal + d.n_distractor,), d.n_classes or 2, d.n_train
    if d.kind == "blobs":
        return (d.n_features,), d.n_classes or 2, d.n_train
    ds = ingest_dataset(d)
    return ds.input_shape, ds.n_classes, len(ds)


def config_ledger(cfg: TrainConfig) -> CostLedger:
    """Closed-form BitOPs of training ``cfg`` (enumerates its per-epoch bit plan)."""
    cfg.validate()
    shape, n_classes, n_train = model_shape(cfg)
    model = build_model(cfg.model, shape, n_classes, np.random.default_rng(0), hidden=cfg.hidden)
    fw = [cfg.fw_bits(t) for t in range(cfg.epochs)]
    bw = [cfg.bw_bits(t) for t in range(cfg.epochs)]
    return analytic_ledger(model.layer_descs(), n_train, cfg.batch_size, fw, bw)


def compare_costs(cfg_a: TrainConfig, cfg_b: TrainConfig) -> dict:
    """Reduction of ``cfg_a`` relative to ``cfg_b`` per phase, without training."""
    return run_report(config_ledger(cfg_a), config_ledger(cfg_b))


def preset_config(base: TrainConfig, preset: str, num_cycles: Optional[int] = None) -> TrainConfig:
    n = base.precision.num_cycles if num_cycles is None else num_cycles
    return _with(base, precision=precision_preset(preset, base.epochs, n)).validate()


# ---------------------------------------------------------------- sweeps


def sweep_configs(base: TrainConfig, patterns: Sequence[str], cycles: Sequence[int],
                  bounds: Sequence[tuple]) -> List[TrainConfig]:
    out = []
    for pattern in patterns:
        for n in cycles:
            for lo, hi in bounds:
                p = replace(base.precision, pattern=pattern, num_cycles=int(n), b_min=int(lo), b_max=int(hi))
                name = f"{pattern}-N{n}-{lo}to{hi}"
                out.append(_with(base, name=name, precision=p).validate())
    return out


def _sweep_job(args):
    cfg, seed, data, out_root = args
    cfg = _with(cfg, seed=int(seed))
    out = Path(out_root) / cfg.name / f"seed{seed}" if out_root else None
    res = train(cfg, data=data, out_dir=out)
    p = cfg.precision
    static = _with(cfg, precision=replace(p, pattern="static", b_min=p.b_max))
    baseline = config_ledger(static)
    return {
        "name": cfg.name, "pattern": p.pattern, "num_cycles": p.num_cycles, "b_min": p.b_min,
        "b_max": p.b_max, "seed": seed, "test_acc": res.final_test_acc,
        "total_bitops": res.ledger.total,
        "reduction_vs_static_pct": run_report(res.ledger, baseline)["total_reduction_pct"],
    }


def run_sweep(base: TrainConfig, patterns: Sequence[str], cycles: Sequence[int], bounds: Sequence[tuple],
              seeds: Sequence[int], out_root=None, data: Optional[Dataset] = None,
              workers: int = 1) -> List[dict]:
    """Train every grid point for every seed; independent trials may run in separate processes."""
    if data is None:
        data = ingest_dataset(base.data, np.dtype(base.dtype))
    jobs = [(cfg, s, data, out_root) for cfg in sweep_configs(base, patterns, cycles, bounds) for s in seeds]
    return _map(_sweep_job, jobs, workers)


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def summarize(rows: Sequence[dict], keys: Sequence[str], value: str = "test_acc") -> List[dict]:
    """Group rows by ``keys``; report mean, sample std and count of ``value``."""
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for k, members in groups.items():
        vals = np.array([m[value] for m in members], dtype=np.float64)
        row = dict(zip(keys, k))
        row[f"{value}_mean"] = float(vals.mean())
        row[f"{value}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        row["n"] = len(vals)
        for extra in ("total_bitops", "reduction_vs_static_pct"):
            if extra in members[0]:
                row[f"{extra}_mean"] = float(np.mean([m[extra] for m in members]))
        out.append(row)
    return out


# ---------------------------------------------------------------- reports


def read_run(run_dir) -> dict:
    """Final metrics, cost and identifying config fields of one run directory."""
    run_dir = Path(run_dir)
    lines = [json.loads(s) for s in (run_dir / "metrics.jsonl").read_text().splitlines() if s.strip()]
    if not lines:
        raise ValueError(f"{run_dir} has an empty metrics log")
    final = lines[-1]
    row = {"run": str(run_dir), "epochs": len(lines), "test_acc": final.get("test_acc"),
           "train_acc": final.get("train_acc"), "train_loss": final.get("train_loss"),
           "total_bitops": final.get("cumulative_bitops")}
    cfg_path = run_dir / "resolved_config.json"
    if cfg_path.exists():
        cfg = json.loads(cfg_path.read_text())
        p = cfg.get("precision", {})
        row.update(name=cfg.get("name"), seed=cfg.get("seed"), pattern=p.get("pattern"),
                   b_min=p.get("b_min"), b_max=p.get("b_max"), bw_bits=p.get("bw_bits"),
                   num_cycles=p.get("num_cycles"))
    return row


def find_runs(root) -> List[Path]:
    return sorted(p.parent for p in Path(root).rglob("metrics.jsonl"))


def to_csv(rows: Sequence[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
