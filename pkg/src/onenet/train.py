"""Training loops: online distillation with a native branch ensemble, plus
vanilla, offline-KD and independent-ensemble baselines.

Every run is a pure function of (config, data): initial weights come from
``Rng(seed, "model")``, batch order and augmentation from ``(seed, epoch)``,
and nothing time-dependent is written next to checkpoints or metrics.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import losses
from . import tensor as tn
from .config import TrainConfig
from .data import AugmentSpec, BatchIterator, DataBundle, Dataset, iterate_in_order
from .errors import ConfigError, NumericError
from .layers import Module
from .metrics import MetricsRecord, MetricsWriter, error_counts, topk_errors
from .model import (MultiBranchModel, SingleNet, build, build_single, checkpoint_bytes,
                    load_checkpoint, load_state_arrays, save_checkpoint, state_arrays)
from .rng import Rng
from .tensor import Tensor

log = logging.getLogger(__name__)

EVAL_BATCH = 500


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Step schedule: base, base/10 from ceil(epochs/2), base/100 from ceil(3*epochs/4)."""
    tau = config.epochs
    if not 0 <= epoch < tau:
        raise ConfigError(f"epoch {epoch} outside [0, {tau})")
    if epoch < math.ceil(0.5 * tau):
        return config.base_lr
    if epoch < math.ceil(0.75 * tau):
        return config.base_lr / 10
    return config.base_lr / 100


# -- optimiser -------------------------------------------------------------

def sgd_nesterov_step(params, grads, state, lr: float, momentum: float,
                      weight_decay: float, names=None) -> None:
    """In-place Nesterov update for parallel lists of arrays.

    ``v <- mu * v + (g + wd * w)``, then ``w <- w - lr * (g + wd * w + mu * v)``.
    ``state`` holds one velocity array per parameter, updated in place.
    """
    for k, (w, g, v) in enumerate(zip(params, grads, state)):
        if w.shape != g.shape or w.shape != v.shape:
            raise ConfigError(f"shape mismatch in optimiser slot {k}")
        if not np.isfinite(g).all():
            name = names[k] if names else str(k)
            raise NumericError(f"non-finite gradient for {name}", {
                "param": name,
                "nan": int(np.isnan(g).sum()),
                "inf": int(np.isinf(g).sum()),
                "param_abs_max": float(np.nanmax(np.abs(w))) if w.size else 0.0,
                "lr": lr,
            })
        dt = w.dtype.type
        d = g + dt(weight_decay) * w if weight_decay else g
        v *= dt(momentum)
        v += d
        w -= dt(lr) * (d + dt(momentum) * v)


class NesterovSGD:
    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.named = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.named}

    def step(self, lr: float) -> None:
        names = [n for n, _ in self.named]
        sgd_nesterov_step([p.data for _, p in self.named], [p.grad for _, p in self.named],
                          [self.velocity[n] for n in names], lr, self.momentum,
                          self.weight_decay, names)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"opt.{n}": v for n, v in self.velocity.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for n, v in self.velocity.items():
            key = f"opt.{n}"
            if key in state:
                v[...] = state[key]


# -- evaluation ------------------------------------------------------------

def head_logits(net: Module, x: np.ndarray) -> dict[str, np.ndarray]:
    """Logits of every prediction head for one batch (no tape)."""
    with tn.no_grad():
        out = net(Tensor(x))
    if isinstance(net, MultiBranchModel):
        heads = {f"branch{i}": z.data for i, z in enumerate(out.branch_logits)}
        heads["teacher"] = out.teacher_logits.data
        return heads
    return {"net": out.data}


def evaluate(net: Module, dataset: Dataset, batch_size: int = EVAL_BATCH) -> dict[str, dict]:
    """Eval-mode top-1/top-5 error (%) and mean CE for every head."""
    was_training = net.training
    net.eval()
    errs: dict[str, dict[int, int]] = {}
    ce: dict[str, float] = {}
    for x, y in iterate_in_order(dataset, batch_size):
        for head, z in head_logits(net, x).items():
            c = error_counts(z, y)
            acc = errs.setdefault(head, {1: 0, 5: 0})
            acc[1] += c[1]
            acc[5] += c[5]
            logp = tn.log_softmax_array(z.astype(np.float64))
            ce[head] = ce.get(head, 0.0) - float(logp[np.arange(len(y)), y].sum())
    net.train(was_training)
    n = len(dataset)
    return {h: {"top1": 100.0 * e[1] / n, "top5": 100.0 * e[5] / n, "ce": ce[h] / n}
            for h, e in errs.items()}


def ensemble_evaluate(nets: list[SingleNet], dataset: Dataset, batch_size: int = EVAL_BATCH) -> dict:
    """Error of the averaged-softmax ensemble of independently trained nets."""
    for net in nets:
        net.eval()
    probs = []
    for x, _ in iterate_in_order(dataset, batch_size):
        p = np.mean([tn.softmax_array(head_logits(n, x)["net"].astype(np.float64)) for n in nets], axis=0)
        probs.append(p)
    p = np.concatenate(probs)
    errs = topk_errors(p, dataset.labels)
    ce = -float(np.log(np.maximum(p[np.arange(len(p)), dataset.labels], losses.PROB_FLOOR)).mean())
    return {"top1": errs[1], "top5": errs[5], "ce": ce}


# -- generic loop ------------------------------------------------------------

class TrainResult(NamedTuple):
    model: object
    metrics: list[MetricsRecord]
    train_flops: int
    epoch_seconds: list = []


@dataclass
class _EpochAccumulator:
    n: int = 0
    errors: dict = field(default_factory=dict)
    ce: dict = field(default_factory=dict)
    kl: float = 0.0
    total: float = 0.0

    def add(self, logits: dict[str, np.ndarray], labels, ce: dict[str, float], kl: float, total: float):
        b = len(labels)
        self.n += b
        for head, z in logits.items():
            c = error_counts(z, labels)
            acc = self.errors.setdefault(head, {1: 0, 5: 0})
            acc[1] += c[1]
            acc[5] += c[5]
            self.ce[head] = self.ce.get(head, 0.0) + ce[head] * b
        self.kl += kl * b
        self.total += total * b

    def records(self, epoch: int, lr: float, wall: float) -> list[MetricsRecord]:
        n = max(self.n, 1)
        return [MetricsRecord(epoch, "train", h, lr, 100.0 * e[1] / n, 100.0 * e[5] / n,
                              self.ce[h] / n, self.kl / n, self.total / n, wall)
                for h, e in self.errors.items()]


StepFn = Callable[[Module, np.ndarray, np.ndarray], tuple]


def _test_records(net: Module, test: Dataset, epoch: int, lr: float,
                  wall: float) -> list[MetricsRecord]:
    # test rows carry the head's own CE as total; no distillation term at test time
    return [MetricsRecord(epoch, "test", h, lr, r["top1"], r["top5"], r["ce"], 0.0, r["ce"], wall)
            for h, r in evaluate(net, test).items()]


def _fit(net: Module, config: TrainConfig, data: DataBundle, step: StepFn,
         flops_per_sample: int, run_dir=None, resume=None,
         extra_flops_per_sample: int = 0) -> TrainResult:
    """Run ``config.epochs`` epochs of ``step`` over ``data.train``.

    ``step(net, x, y)`` must return ``(loss_tensor, head_logits, head_ce, kl, total)``.
    Training cost counts 3x forward FLOPs per sample (forward + backward)
    plus ``extra_flops_per_sample`` of forward-only work.
    """
    if data.train.sample_shape != tuple(net.arch.in_shape):
        raise ConfigError(f"dataset samples are {data.train.sample_shape}, architecture "
                          f"expects {tuple(net.arch.in_shape)}")
    if data.num_classes != net.arch.num_classes:
        raise ConfigError(f"dataset has {data.num_classes} classes, model {net.arch.num_classes}")
    opt = NesterovSGD(net.named_parameters(), config.momentum, config.weight_decay)
    start = 0
    writer = None
    metrics: list[MetricsRecord] = []
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    if resume is not None:
        ck = load_checkpoint(resume)
        load_state_arrays(net, state_arrays(ck.net))
        opt.load_state_dict(ck.state)
        start = int(ck.header["extra"]["next_epoch"])
    if run_dir is not None:
        writer = MetricsWriter(run_dir / "metrics.csv", truncate=resume is None)
        if resume is not None:
            writer.truncate_after(start)
    aug = AugmentSpec(config.crop_pad, config.hflip) if config.augment else AugmentSpec()
    batches = BatchIterator(data.train, config.batch_size, config.seed, aug)
    per_step = 3 * flops_per_sample + extra_flops_per_sample
    train_flops = 0
    epoch_times = []
    for epoch in range(start, config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config)
        net.train()
        acc = _EpochAccumulator()
        for x, y in batches.epoch(epoch):
            loss, logits, ce, kl, total = step(net, x, y)
            net.zero_grad()
            tn.backward(loss)
            opt.step(lr)
            acc.add(logits, y, ce, kl, total)
            train_flops += per_step * len(y)
        wall = time.perf_counter() - t0
        recs = acc.records(epoch, lr, wall) + _test_records(net, data.test, epoch, lr, wall)
        epoch_times.append(time.perf_counter() - t0)
        metrics.extend(recs)
        if writer:
            writer.write(recs)
        last = epoch == config.epochs - 1
        if run_dir is not None and (last or (config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0)):
            extra = {"next_epoch": epoch + 1, "config": config.to_dict()}
            save_checkpoint(run_dir / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt", net,
                            opt.state_dict(), extra)
            if last:
                save_checkpoint(run_dir / "final.ckpt", net, opt.state_dict(), extra)
        log.info("epoch %d lr %.4g %s", epoch, lr,
                 " ".join(f"{r.head}={r.top1_error:.2f}" for r in recs if r.phase == "test"))
    return TrainResult(net, metrics, train_flops, epoch_times)


# -- methods ---------------------------------------------------------------

def model_rng(seed: int) -> Rng:
    return Rng(seed, "model")


def build_for(config: TrainConfig, data: DataBundle) -> MultiBranchModel:
    return build(config.trunk, config.branch, config.aux_branches, data.num_classes,
                 model_rng(config.seed), data.train.sample_shape,
                 no_sharing=config.no_sharing, no_gating=config.no_gating)


def train_one(config: TrainConfig, data: DataBundle, run_dir=None, resume=None) -> TrainResult:
    """Online distillation: branch CEs + gated-teacher CE + T^2 * KL, one SGD step per batch."""
    net = build_for(config, data)
    T = config.temperature

    def step(model, x, y):
        out = model(Tensor(x))
        lb = losses.total_loss(out, y, T, no_distill=config.no_distill,
                               no_gating=config.no_gating,
                               kl_backprop_teacher=config.kl_backprop_teacher)
        logits = {f"branch{i}": z.data for i, z in enumerate(out.branch_logits)}
        logits["teacher"] = out.teacher_logits.data
        ce = {f"branch{i}": c for i, c in enumerate(lb.branch_ce)}
        ce["teacher"] = lb.teacher_ce
        return lb.loss, logits, ce, lb.kl, lb.total

    return _fit(net, config, data, step, net.flops()["full"], run_dir, resume)


def train_vanilla(config: TrainConfig, data: DataBundle, run_dir=None, resume=None,
                  trunk: str | None = None, branch: str | None = None) -> TrainResult:
    """Plain cross-entropy training of trunk + branch 0 (same init as the ONE target)."""
    net = build_single(trunk or config.trunk, branch or config.branch, data.num_classes,
                       model_rng(config.seed), data.train.sample_shape)

    def step(model, x, y):
        z = model(Tensor(x))
        loss = losses.softmax_cross_entropy(z, y)
        v = loss.item()
        return loss, {"net": z.data}, {"net": v}, 0.0, v

    return _fit(net, config, data, step, net.flops(), run_dir, resume)


def train_kd_offline(teacher_config: TrainConfig, student_config: TrainConfig, data: DataBundle,
                     run_dir=None) -> TrainResult:
    """Two-phase distillation: train the (larger) teacher, then the student on
    CE + T^2 * KL(teacher_soft || student_soft).

    The teacher is built from ``teacher_config.teacher_trunk/teacher_branch``.
    ``train_flops`` covers both phases plus teacher inference during phase two.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    teacher_res = train_vanilla(teacher_config, data,
                                run_dir / "teacher" if run_dir else None,
                                trunk=teacher_config.teacher_trunk,
                                branch=teacher_config.teacher_branch)
    teacher = teacher_res.model
    teacher.eval()
    student = build_single(student_config.trunk, student_config.branch, data.num_classes,
                           model_rng(student_config.seed), data.train.sample_shape)
    T = student_config.temperature

    def step(model, x, y):
        with tn.no_grad():
            zt = teacher(Tensor(x)).data
        z = model(Tensor(x))
        ce = losses.softmax_cross_entropy(z, y)
        kl = losses.kl_from_logits(Tensor(zt), [z], T)
        loss = tn.add(ce, tn.scale(kl, T * T))
        return loss, {"net": z.data}, {"net": ce.item()}, kl.item(), loss.item()

    res = _fit(student, student_config, data, step, student.flops(),
               run_dir / "student" if run_dir else None,
               extra_flops_per_sample=teacher.flops())
    return TrainResult(res.model, res.metrics, res.train_flops + teacher_res.train_flops,
                       teacher_res.epoch_seconds + res.epoch_seconds)


def member_seed(seed: int, index: int) -> int:
    return seed + index


def train_indep_ensemble(config: TrainConfig, n_nets: int, data: DataBundle,
                         run_dir=None) -> TrainResult:
    """``n_nets`` vanilla nets with seeds ``seed, seed+1, ...``; evaluated by
    averaging their softmax outputs. Member 0 is exactly ``train_vanilla``.
    """
    if n_nets < 1:
        raise ConfigError("ensemble needs at least one member")
    run_dir = Path(run_dir) if run_dir is not None else None
    nets, metrics, flops, seconds = [], [], 0, []
    for i in range(n_nets):
        cfg = config.replace(seed=member_seed(config.seed, i))
        res = train_vanilla(cfg, data, run_dir / f"member{i}" if run_dir else None)
        nets.append(res.model)
        flops += res.train_flops
        seconds += res.epoch_seconds
        for r in res.metrics:
            metrics.append(MetricsRecord(r.epoch, r.phase, f"member{i}", r.lr, r.top1_error,
                                         r.top5_error, r.ce, r.kl, r.total, r.wall_time))
    last = config.epochs - 1
    ens = ensemble_evaluate(nets, data.test)
    rec = MetricsRecord(last, "test", "ensemble", lr_at(last, config), ens["top1"], ens["top5"],
                        ens["ce"], 0.0, ens["ce"])
    metrics.append(rec)
    if run_dir is not None:
        MetricsWriter(run_dir / "metrics.csv").write(metrics)
    return TrainResult(nets, metrics, flops, seconds)


def final_test_error(metrics: list[MetricsRecord], head: str) -> float:
    rows = [r for r in metrics if r.phase == "test" and r.head == head]
    if not rows:
        raise KeyError(f"no test rows for head {head!r}")
    return max(rows, key=lambda r: r.epoch).top1_error


def checkpoint_digest(net: Module) -> bytes:
    """Serialised parameters + buffers (for determinism comparisons)."""
    return checkpoint_bytes(net)
