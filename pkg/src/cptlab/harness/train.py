"""Fake-quantized training loop with per-epoch precision scheduling and cost accounting."""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from cptlab import autodiff as ad
from cptlab.cost import CostLedger, step_cost
from cptlab.harness.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from cptlab.harness.config import TrainConfig, config_hash, save_config
from cptlab.harness.data import Dataset, ingest_dataset
from cptlab.harness.models import QuantContext, Sequential, build_model
from cptlab.optim import SGD
from cptlab.prt import PRTConfig, PRTResult, run_prt
from cptlab.quantization import FULL_PRECISION, quantize_max_scale

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "fw_bits", "bw_bits", "lr", "train_loss", "train_acc", "test_acc",
                 "cumulative_bitops")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass
class MetricsLog:
    records: List[dict] = field(default_factory=list)

    def append(self, rec):
        if self.records and rec["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("metrics epochs must be strictly increasing")
        self.records.append(rec)

    @property
    def final(self):
        return self.records[-1] if self.records else None

    def column(self, key):
        return [r[key] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write_jsonl(self, path):
        Path(path).write_text(self.to_jsonl())

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: r.get(k) for k in METRIC_FIELDS})

    @classmethod
    def read_jsonl(cls, path):
        return cls([json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()])


@dataclass
class TrainResult:
    model: Sequential
    metrics: MetricsLog
    ledger: CostLedger
    config: TrainConfig
    cost_trace: List[dict] = field(default_factory=list)

    @property
    def final_test_acc(self):
        return self.metrics.final["test_acc"]


def predict(model: Sequential, x, fw_bits=FULL_PRECISION, batch_size=512, weight_kind="max_scale_symmetric",
            act_kind="max_scale_unsigned"):
    """Logits for ``x`` with weights and activations at ``fw_bits``; no tape is recorded."""
    ctx = QuantContext(weight_bits=fw_bits, act_bits=fw_bits, error_bits=FULL_PRECISION,
                       weight_kind=weight_kind, act_kind=act_kind)
    outs = []
    for i in range(0, len(x), batch_size):
        outs.append(model(ad.Tensor(x[i:i + batch_size], check=False), ctx).data)
    return np.concatenate(outs)


def evaluate(model: Sequential, x, y, fw_bits=FULL_PRECISION, batch_size=512, **kinds) -> float:
    """Top-1 accuracy in percent."""
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict(model, x, fw_bits, batch_size, **kinds)
    return 100.0 * float((logits.argmax(axis=1) == np.asarray(y)).mean())


def plan(cfg: TrainConfig):
    """Resolved ``(epoch, fw_bits, bw_bits, lr)`` for every epoch."""
    cfg.validate()
    return [(t, cfg.fw_bits(t), cfg.bw_bits(t), cfg.lr_at(t)) for t in range(cfg.epochs)]


class Trainer:
    def __init__(self, cfg: TrainConfig, data: Optional[Dataset] = None, cache_dir=None):
        self.cfg = cfg.validate()
        self.dtype = np.dtype(cfg.dtype)
        self.data = (data if data is not None else ingest_dataset(cfg.data, self.dtype, cache_dir)).astype(self.dtype)
        self.rng = np.random.default_rng(cfg.seed)
        self.model = build_model(cfg.model, self.data.input_shape, self.data.n_classes, self.rng,
                                 self.dtype, input_signed=not self.data.nonnegative, hidden=cfg.hidden)
        self.opt = SGD(self.model.parameters(), cfg.optim.momentum, cfg.optim.weight_decay)
        self.ledger = CostLedger()
        self.metrics = MetricsLog()
        self.cost_trace: List[dict] = []
        self.epoch = 0
        self.n_params = self.model.num_parameters()
        self._steps_per_epoch = -(-len(self.data) // cfg.batch_size)

    # -- single step ------------------------------------------------------
    def _context(self, fw, bw):
        q = self.cfg.quantizers
        return QuantContext(weight_bits=fw, act_bits=fw, error_bits=bw, weight_kind=q.weight,
                            act_kind=q.activation, error_rounding=q.error_rounding, rng=self.rng)

    def train_step(self, xb, yb, fw, bw, lr, prt=False):
        ctx = self._context(fw, bw)
        with ad.Tape() as tape:
            logits = self.model(ad.Tensor(xb, check=False), ctx)
            loss = ad.softmax_cross_entropy(logits, yb)
        tape.backward(loss)
        grads = []
        for p in self.opt.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if bw < FULL_PRECISION:
                g = quantize_max_scale(g, bw, signed=True, rounding=self.cfg.quantizers.gradient_rounding,
                                       rng=self.rng)
            grads.append(g)
        self.opt.step(lr, grads)
        self.opt.zero_grad()
        self.ledger.charge(step_cost(sum(ctx.macs), fw, fw, bw, bw, self.n_params), prt=prt)
        correct = int((logits.data.argmax(axis=1) == yb).sum())
        return loss.item(), correct

    def run_epoch(self, epoch, fw=None, bw=None, lr=None, prt=False):
        """One pass over shuffled training data; returns (mean loss, acc %, per-iteration acc %)."""
        cfg = self.cfg
        n = len(self.data)
        perm = self.rng.permutation(n)
        bs = cfg.batch_size
        fw_fixed = fw
        bw = cfg.bw_bits(epoch) if bw is None else bw
        lr = cfg.lr_at(epoch) if lr is None else lr
        sched = cfg.fw_schedule() if (cfg.precision.per_iteration and fw is None) else None
        total_loss, total_correct = 0.0, 0
        per_iter = []
        for i, start in enumerate(range(0, n, bs)):
            idx = perm[start:start + bs]
            if fw_fixed is not None:
                b = fw_fixed
            elif sched is not None and epoch >= cfg.precision.cpt_start_epoch:
                b = sched.bits_at_iteration(epoch * self._steps_per_epoch + i, self._steps_per_epoch)
            else:
                b = cfg.fw_bits(epoch)
            loss, correct = self.train_step(self.data.x_train[idx], self.data.y_train[idx], b, bw, lr, prt)
            total_loss += loss * len(idx)
            total_correct += correct
            per_iter.append(100.0 * correct / len(idx))
        return total_loss / n, 100.0 * total_correct / n, per_iter

    def evaluate(self, fw_bits=None, split="test"):
        x, y = (self.data.x_test, self.data.y_test) if split == "test" else (self.data.x_train, self.data.y_train)
        bits = self.cfg.eval_bits() if fw_bits is None else fw_bits
        q = self.cfg.quantizers
        return evaluate(self.model, x, y, bits, weight_kind=q.weight, act_kind=q.activation)

    # -- checkpointing ----------------------------------------------------
    def checkpoint(self) -> Checkpoint:
        tensors = {}
        for (name, t, _), v in zip(self.model.named_parameters(), self.opt.velocities):
            tensors[f"param/{name}"] = t.data.copy()
        for (name, _, _), v in zip(self.model.named_parameters(), self.opt.velocities):
            tensors[f"velocity/{name}"] = v.copy()
        extras = {"metrics": [dict(r) for r in self.metrics.records], "ledger": self.ledger.to_dict(),
                  "cost_trace": [dict(r) for r in self.cost_trace]}
        return Checkpoint(self.epoch, config_hash(self.cfg), tensors, self.rng.bit_generator.state, extras)

    def restore(self, ckpt: Checkpoint, strict=True):
        if strict and ckpt.config_hash != config_hash(self.cfg):
            raise CheckpointError("checkpoint was written by a different configuration")
        names = [n for n, _, _ in self.model.named_parameters()]
        self.model.load_state({n: ckpt.tensors[f"param/{n}"] for n in names})
        for n, v in zip(names, self.opt.velocities):
            v[...] = ckpt.tensors[f"velocity/{n}"]
        self.rng.bit_generator.state = ckpt.rng_state
        self.epoch = ckpt.epoch
        self.metrics = MetricsLog([dict(r) for r in ckpt.extras.get("metrics", [])])
        self.ledger = CostLedger.from_dict(ckpt.extras["ledger"]) if "ledger" in ckpt.extras else CostLedger()
        self.cost_trace = [dict(r) for r in ckpt.extras.get("cost_trace", [])]

    # -- full run ---------------------------------------------------------
    def fit(self, out_dir=None, stop_at=None) -> TrainResult:
        cfg = self.cfg
        end = cfg.epochs if stop_at is None else min(stop_at, cfg.epochs)
        out = Path(out_dir) if out_dir else None
        if out:
            out.mkdir(parents=True, exist_ok=True)
            save_config(cfg, out / "resolved_config.json")
        while self.epoch < end:
            t = self.epoch
            last_good = self.checkpoint()
            fw, bw, lr = cfg.fw_bits(t), cfg.bw_bits(t), cfg.lr_at(t)
            try:
                loss, acc, _ = self.run_epoch(t)
            except ad.NonFiniteError as exc:
                path = None
                if out:
                    path = out / "last_good.ckpt"
                    save_checkpoint(path, last_good)
                raise TrainingDiverged(f"non-finite values at epoch {t}: {exc}", path) from exc
            last = t == cfg.epochs - 1
            test_acc = self.evaluate() if (last or (cfg.eval_every and (t + 1) % cfg.eval_every == 0)) else None
            self.epoch = t + 1
            self.metrics.append({"epoch": t, "fw_bits": fw, "bw_bits": bw, "lr": lr, "train_loss": loss,
                                 "train_acc": acc, "test_acc": test_acc,
                                 "cumulative_bitops": self.ledger.total})
            self.cost_trace.append({"epoch": t, "fw_bits": fw, "bw_bits": bw,
                                    "forward": self.ledger.forward,
                                    "error_backprop": self.ledger.error_backprop,
                                    "weight_grad": self.ledger.weight_grad, "update": self.ledger.update,
                                    "total": self.ledger.total})
            log.info("epoch %d fw=%d bw=%d lr=%g loss=%.4f train=%.2f test=%s", t, fw, bw, lr, loss, acc,
                     "-" if test_acc is None else f"{test_acc:.2f}")
            if out and cfg.checkpoint_every and self.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"epoch{self.epoch:04d}.ckpt", self.checkpoint())
        result = TrainResult(self.model, self.metrics, self.ledger, cfg, self.cost_trace)
        if out:
            write_outputs(result, out)
            save_checkpoint(out / "last.ckpt", self.checkpoint())
        return result


def write_outputs(result: TrainResult, out: Path):
    result.metrics.write_jsonl(out / "metrics.jsonl")
    result.metrics.write_csv(out / "metrics.csv")
    (out / "cost.json").write_text(json.dumps(result.ledger.to_dict(), indent=2, sort_keys=True) + "\n")
    keys = ("epoch", "fw_bits", "bw_bits", "forward", "error_backprop", "weight_grad", "update", "total")
    with open(out / "cost_trace.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(result.cost_trace)


def train(cfg: TrainConfig, data: Optional[Dataset] = None, out_dir=None, resume=None,
          stop_at=None, initial_ledger: Optional[CostLedger] = None, cache_dir=None) -> TrainResult:
    """Run (or resume) a training job; returns model, metrics and cost ledger."""
    trainer = Trainer(cfg, data, cache_dir)
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        trainer.restore(ckpt)
    elif initial_ledger is not None:
        trainer.ledger = initial_ledger.copy()
    return trainer.fit(out_dir, stop_at)


class TrainingAccuracySource:
    """Accuracy source for the precision range test backed by a live :class:`Trainer`."""

    def __init__(self, trainer: Trainer):
        self.trainer = trainer

    def __call__(self, bits, epochs):
        accs = []
        for _ in range(epochs):
            t = self.trainer.epoch
            _, _, per_iter = self.trainer.run_epoch(t, fw=bits, prt=True)
            self.trainer.epoch += 1
            accs.extend(per_iter)
        return accs


def prt_for_config(cfg: TrainConfig, prt_cfg: PRTConfig, data: Optional[Dataset] = None, cache_dir=None):
    """Run the range test inside the first schedule cycle of ``cfg``; returns (result, ledger)."""
    trainer = Trainer(cfg, data, cache_dir)
    first_cycle = cfg.epochs // cfg.precision.num_cycles
    result: PRTResult = run_prt(TrainingAccuracySource(trainer), prt_cfg, first_cycle)
    return result, trainer.ledger
