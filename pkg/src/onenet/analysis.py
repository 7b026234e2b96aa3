"""Diagnostics on trained networks.

* Flatness probe: evaluate ``theta + d * v`` for random unit directions
  ``v`` over a grid of magnitudes ``d``, recording train CE and train/test
  error for each probe.
* Head variance: mean pairwise Euclidean distance between the softmax
  predictions of several heads (branches or separately trained nets).
* Aggregation of final-epoch metrics across runs (mean and sample std).

Report CSV schemas
------------------
robustness.csv: ``d, direction, train_ce, train_error, test_error``
variance.csv:   ``source, heads, samples, variance``
summary.csv:    ``head, metric, n, mean, std``
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import DataBundle, Dataset, iterate_in_order, subset
from .errors import ConfigError, NumericError
from .layers import Module
from .metrics import read_csv
from .model import MultiBranchModel, SingleNet, load_checkpoint, strip
from .rng import Rng
from .tensor import Tensor

ROBUSTNESS_COLUMNS = ("d", "direction", "train_ce", "train_error", "test_error")
VARIANCE_SAMPLES = 1000


@dataclass(frozen=True)
class PerturbationSpec:
    magnitudes: tuple[float, ...] = tuple(float(d) for d in np.linspace(0.0, 5.0, 11))
    directions: int = 5
    seed: int = 0

    @classmethod
    def grid(cls, dmax: float = 5.0, points: int = 11, directions: int = 5, seed: int = 0):
        if points < 1 or directions < 1 or dmax < 0:
            raise ConfigError("need points >= 1, directions >= 1 and dmax >= 0")
        return cls(tuple(float(d) for d in np.linspace(0.0, dmax, points)), directions, seed)


@dataclass
class RobustnessRow:
    d: float
    direction: int
    train_ce: float
    train_error: float
    test_error: float


@dataclass
class RobustnessReport:
    rows: list[RobustnessRow]
    baseline: dict = field(default_factory=dict)

    def mean_train_ce(self, d: float) -> float:
        vals = [r.train_ce for r in self.rows if r.d == d]
        return float(np.mean(vals))

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROBUSTNESS_COLUMNS)
            for r in self.rows:
                w.writerow([repr(r.d), r.direction, repr(r.train_ce), repr(r.train_error),
                            repr(r.test_error)])
        return path


def sample_unit_direction(param_shapes: Sequence[tuple[int, ...]], rng: Rng) -> list[np.ndarray]:
    """Uniform direction on the unit sphere of the concatenated parameter
    space, returned as one float64 slice per parameter shape.
    """
    sizes = [int(np.prod(s, dtype=np.int64)) for s in param_shapes]
    total = sum(sizes)
    if total < 1:
        raise ConfigError("parameter space is empty")
    v = rng.normal(total)
    v /= np.linalg.norm(v)
    out, start = [], 0
    for shape, size in zip(param_shapes, sizes):
        out.append(v[start:start + size].reshape(shape))
        start += size
    return out


def _as_single(model) -> SingleNet:
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model).net
    if isinstance(model, MultiBranchModel):
        return strip(model)
    return model


def _probe_metrics(net: Module, train: Dataset, test: Dataset, batch_size: int = 500) -> dict:
    """Train CE, train error % and test error %; non-finite outputs count as errors."""
    net.eval()
    out = {}
    for split, ds in (("train", train), ("test", test)):
        wrong, ce = 0, 0.0
        with tn.allow_nonfinite(), tn.no_grad(), np.errstate(all="ignore"):
            for x, y in iterate_in_order(ds, batch_size):
                z = net(Tensor(x)).data.astype(np.float64)
                bad = ~np.isfinite(z).all(axis=1)
                pred = np.argmax(np.where(np.isfinite(z), z, -np.inf), axis=1)
                wrong += int(((pred != y) | bad).sum())
                logp = tn.log_softmax_array(z)
                ce -= float(logp[np.arange(len(y)), y].sum())
        out[f"{split}_error"] = 100.0 * wrong / len(ds)
        out[f"{split}_ce"] = ce / len(ds) if math.isfinite(ce) else float("nan")
    return out


def perturb_and_eval(model, spec: PerturbationSpec, data: DataBundle) -> RobustnessReport:
    """Probe ``theta + d * v`` for every magnitude and direction in ``spec``.

    ``model`` may be a checkpoint path, a single net, or a multi-branch model
    (probed as its stripped target network). Parameters (including BN
    gamma/beta, excluding running statistics) are restored after each probe.
    Rows are ordered by (d, direction); direction ``k`` at magnitude index
    ``i`` is drawn from ``Rng(seed, "direction", i, k)``.
    """
    net = _as_single(model)
    params = [p for _, p in net.named_parameters()]
    originals = [p.data.copy() for p in params]
    shapes = [p.shape for p in params]
    baseline = _probe_metrics(net, data.train, data.test)
    rows = []
    try:
        for i, d in enumerate(spec.magnitudes):
            for k in range(spec.directions):
                v = sample_unit_direction(shapes, Rng(spec.seed, "direction", i, k))
                for p, o, vi in zip(params, originals, v):
                    p.data[...] = (o.astype(np.float64) + d * vi).astype(p.dtype)
                try:
                    m = _probe_metrics(net, data.train, data.test)
                except NumericError:
                    m = {"train_ce": float("nan"), "train_error": 100.0, "test_error": 100.0}
                rows.append(RobustnessRow(float(d), k, m["train_ce"], m["train_error"], m["test_error"]))
                for p, o in zip(params, originals):
                    p.data[...] = o
    finally:
        for p, o in zip(params, originals):
            p.data[...] = o
    return RobustnessReport(rows, baseline)


# -- prediction variance -------------------------------------------------

def head_probabilities(source, data: Dataset, batch_size: int = 500) -> list[np.ndarray]:
    """Softmax predictions (T = 1) of every head on ``data``, in eval mode.

    ``source``: a multi-branch model (one head per branch), a single net, or
    a list of single nets.
    """
    nets = source if isinstance(source, (list, tuple)) else [source]
    heads: list[list[np.ndarray]] = []
    for net in nets:
        net.eval()
        per_net: list[list[np.ndarray]] = []
        with tn.no_grad():
            for x, _ in iterate_in_order(data, batch_size):
                out = net(Tensor(x))
                zs = out.branch_logits if isinstance(net, MultiBranchModel) else [out]
                for j, z in enumerate(zs):
                    if len(per_net) <= j:
                        per_net.append([])
                    per_net[j].append(tn.softmax_array(z.data.astype(np.float64)))
        heads.extend(per_net)
    return [np.concatenate(h) for h in heads]


def branch_variance(predictions: Sequence[np.ndarray]) -> float:
    """Mean over samples and unordered head pairs of ``||p_a - p_b||_2``."""
    if len(predictions) < 2:
        raise ConfigError(f"variance needs at least 2 prediction heads, got {len(predictions)}")
    preds = [np.asarray(p, dtype=np.float64) for p in predictions]
    shape = preds[0].shape
    if any(p.shape != shape for p in preds):
        raise ConfigError("prediction heads disagree in shape")
    dists = [np.linalg.norm(a - b, axis=1).mean() for a, b in itertools.combinations(preds, 2)]
    return float(np.mean(dists))


def variance_sample(dataset: Dataset, n: int = VARIANCE_SAMPLES, seed: int = 0) -> Dataset:
    return subset(dataset, n, seed)


# -- aggregation ---------------------------------------------------------

def _sample_std(values: list[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate(paths: Sequence, phase: str = "test",
              metrics: Sequence[str] = ("top1_error", "top5_error")) -> list[dict]:
    """Final-epoch mean and sample std per (head, metric) across metric CSVs."""
    if not paths:
        raise ConfigError("no metrics files given")
    values: dict[tuple[str, str], list[float]] = {}
    for path in paths:
        rows = [r for r in read_csv(path) if r["phase"] == phase]
        if not rows:
            raise ConfigError(f"{path}: no {phase} rows")
        last = max(r["epoch"] for r in rows)
        for r in rows:
            if r["epoch"] == last:
                for m in metrics:
                    values.setdefault((r["head"], m), []).append(float(r[m]))
    return [{"head": h, "metric": m, "n": len(v), "mean": float(np.mean(v)), "std": _sample_std(v)}
            for (h, m), v in sorted(values.items())]


def write_table(rows: list[dict], path, columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return path
