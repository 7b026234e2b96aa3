"""Multi-branch network with a gated on-the-fly ensemble teacher.

Layout: one shared trunk feeds ``m + 1`` structurally identical branches
(high-level block + classifier). A gate head (FC -> BN -> ReLU -> softmax)
reads the globally pooled trunk features and scores each branch; the
teacher logits are the score-weighted sum of branch logits. Branch 0 is the
deployment target and :func:`strip` recovers it as a plain single network.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DataError, DimensionError, ParseError
from .layers import (BatchNorm, BlockSpec, Linear, Module, Sequential, block_flops,
                     build_block, global_avg_pool)
from .rng import Rng
from .tensor import Tensor

CHECKPOINT_MAGIC = b"ONECKPT\x00"
CHECKPOINT_VERSION = 1

BLOB_PARAM, BLOB_BUFFER, BLOB_STATE = 0, 1, 2


@dataclass(frozen=True)
class Architecture:
    """Everything needed to rebuild a network from a checkpoint."""

    trunk: str
    branch: str
    in_shape: tuple[int, ...]
    num_classes: int
    branches: int = 3
    no_sharing: bool = False
    no_gating: bool = False

    def to_dict(self) -> dict:
        return {
            "trunk": self.trunk, "branch": self.branch, "in_shape": list(self.in_shape),
            "num_classes": self.num_classes, "branches": self.branches,
            "no_sharing": self.no_sharing, "no_gating": self.no_gating,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["in_shape"] = tuple(d["in_shape"])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ForwardOutputs:
    branch_logits: list[Tensor]
    gate_weights: Tensor
    teacher_logits: Tensor


class GateHead(Module):
    """FC -> BN -> ReLU -> softmax, one score per branch."""

    def __init__(self, in_features: int, n_branches: int, rng: Rng):
        self.fc = Linear(in_features, n_branches, bias=False, rng=rng)
        self.bn = BatchNorm(n_branches)

    def forward(self, features: Tensor) -> Tensor:
        return tn.softmax(self.bn(self.fc(features)).relu(), axis=-1)


def _pooled(features: Tensor) -> Tensor:
    return global_avg_pool(features) if features.ndim == 4 else features


def gated_sum(gate_weights: Tensor, branch_logits: list[Tensor]) -> Tensor:
    """Per-sample ``sum_i g[:, i] * z_i``."""
    acc = None
    for i, z in enumerate(branch_logits):
        term = tn.mul(tn.getitem(gate_weights, (slice(None), slice(i, i + 1))), z)
        acc = term if acc is None else tn.add(acc, term)
    return acc


class SingleNet(Module):
    """Trunk followed by one branch: the conventional single-classifier network."""

    def __init__(self, trunk: Sequential, branch: Sequential, arch: Architecture):
        self.trunk = trunk
        self.branch = branch
        self.arch = arch

    def forward(self, x: Tensor) -> Tensor:
        _check_input(x, self.arch)
        return self.branch(self.trunk(x))

    def flops(self) -> int:
        a = self.arch
        trunk_spec = BlockSpec.parse(a.trunk)
        _, feat = _shapes(a)
        return (block_flops(trunk_spec, a.in_shape, a.num_classes)
                + block_flops(BlockSpec.parse(a.branch), feat, a.num_classes))


class MultiBranchModel(Module):
    def __init__(self, trunks: list[Sequential], branches: list[Sequential],
                 gate: GateHead | None, arch: Architecture):
        # one trunk when shared; one per branch under the no-sharing ablation
        self.trunks = trunks
        self.branches = branches
        self.gate = gate
        self.arch = arch

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    @property
    def branch_count(self) -> int:
        return len(self.branches)

    @property
    def trunk(self) -> Sequential:
        return self.trunks[0]

    def forward(self, x: Tensor) -> ForwardOutputs:
        _check_input(x, self.arch)
        if len(self.trunks) == 1:
            feats = [self.trunks[0](x)] * len(self.branches)
        else:
            feats = [t(x) for t in self.trunks]
        logits = [b(f) for b, f in zip(self.branches, feats)]
        n, k = x.shape[0], len(self.branches)
        if self.gate is None:
            g = Tensor(np.full((n, k), 1.0 / k, dtype=logits[0].dtype))
            ze = tn.scale(_add_all(logits), 1.0 / k)
        else:
            g = self.gate(_pooled(feats[0]))
            ze = gated_sum(g, logits)
        return ForwardOutputs(branch_logits=logits, gate_weights=g, teacher_logits=ze)

    def flops(self) -> dict:
        """Forward FLOPs per sample for the full model and the stripped target."""
        a = self.arch
        _, feat = _shapes(a)
        trunk = block_flops(BlockSpec.parse(a.trunk), a.in_shape, a.num_classes)
        branch = block_flops(BlockSpec.parse(a.branch), feat, a.num_classes)
        k = len(self.branches)
        gate = 0
        if self.gate is not None:
            fdim = feat[0]
            gate = 2 * fdim * k + 3 * k + (int(np.prod(feat)) if len(feat) == 3 else 0)
        full = trunk * len(self.trunks) + branch * k + gate + 2 * k * a.num_classes
        return {"full": full, "single": trunk + branch}


def _add_all(ts):
    acc = ts[0]
    for t in ts[1:]:
        acc = tn.add(acc, t)
    return acc


def _check_input(x: Tensor, arch: Architecture) -> None:
    if tuple(x.shape[1:]) != tuple(arch.in_shape):
        raise DimensionError(f"expected input N x {arch.in_shape}, got {x.shape}")


def _shapes(arch: Architecture):
    """Per-sample output shapes of trunk and branch (cheap dry build)."""
    with tn.no_grad():
        _, feat = build_block(BlockSpec.parse(arch.trunk), arch.in_shape, arch.num_classes, Rng(0))
        _, out = build_block(BlockSpec.parse(arch.branch), feat, arch.num_classes, Rng(0))
    return out, feat


def build(trunk_spec: BlockSpec | str, branch_spec: BlockSpec | str, m: int, num_classes: int,
          rng: Rng, in_shape: tuple[int, ...], no_sharing: bool = False,
          no_gating: bool = False) -> MultiBranchModel:
    """Construct a model with ``m`` auxiliary branches (``m + 1`` in total).

    Each branch draws its initial weights from ``rng.child("branch", i)``, so
    branch 0 matches the single network built by :func:`build_single` from
    the same seed.
    """
    if m < 1:
        raise ConfigError(f"need at least one auxiliary branch, got m={m}")
    trunk_spec = BlockSpec.parse(trunk_spec) if isinstance(trunk_spec, str) else trunk_spec
    branch_spec = BlockSpec.parse(branch_spec) if isinstance(branch_spec, str) else branch_spec
    arch = Architecture(str(trunk_spec), str(branch_spec), tuple(in_shape), num_classes,
                        m + 1, no_sharing, no_gating)
    n_trunks = m + 1 if no_sharing else 1
    trunks = []
    feat = None
    for t in range(n_trunks):
        trunk, feat = build_block(trunk_spec, in_shape, num_classes,
                                  rng.child("trunk") if t == 0 else rng.child("trunk", t))
        trunks.append(trunk)
    branches = []
    for i in range(m + 1):
        branch, out = build_block(branch_spec, feat, num_classes, rng.child("branch", i))
        if out != (num_classes,):
            raise ConfigError(f"branch output shape {out} is not ({num_classes},); end the "
                              "branch with a classifier")
        branches.append(branch)
    gate = None if no_gating else GateHead(feat[0], m + 1, rng.child("gate"))
    return MultiBranchModel(trunks, branches, gate, arch)


def build_single(trunk_spec: BlockSpec | str, branch_spec: BlockSpec | str, num_classes: int,
                 rng: Rng, in_shape: tuple[int, ...]) -> SingleNet:
    trunk_spec = BlockSpec.parse(trunk_spec) if isinstance(trunk_spec, str) else trunk_spec
    branch_spec = BlockSpec.parse(branch_spec) if isinstance(branch_spec, str) else branch_spec
    trunk, feat = build_block(trunk_spec, in_shape, num_classes, rng.child("trunk"))
    branch, out = build_block(branch_spec, feat, num_classes, rng.child("branch", 0))
    if out != (num_classes,):
        raise ConfigError(f"branch output shape {out} is not ({num_classes},)")
    arch = Architecture(str(trunk_spec), str(branch_spec), tuple(in_shape), num_classes, 1)
    return SingleNet(trunk, branch, arch)


def strip(model: MultiBranchModel) -> SingleNet:
    """Drop auxiliary branches and the gate, keeping trunk + branch 0 (copied)."""
    a = model.arch
    arch = Architecture(a.trunk, a.branch, a.in_shape, a.num_classes, 1)
    net = SingleNet(copy.deepcopy(model.trunks[0]), copy.deepcopy(model.branches[0]), arch)
    net.train(model.training)
    return net


def ensemble_predict(model: MultiBranchModel, batch: Tensor) -> np.ndarray:
    """Teacher posterior ``softmax(z_e)`` at T = 1 (the ensemble deployment)."""
    with tn.no_grad():
        out = model(tn.as_tensor(batch))
        return tn.softmax_array(out.teacher_logits.data)


# -- checkpoints ---------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic "ONECKPT\0" | u32 version | u32 header length | header JSON (utf-8)
#   u32 blob count, then per blob:
#   u16 name length | name | u8 kind (0 param, 1 buffer, 2 state) | u8 ndim
#   | u32 dims[ndim] | float32 payload

@dataclass
class Checkpoint:
    net: Module
    header: dict
    state: dict[str, np.ndarray]


def _write_blob(buf, name: str, kind: int, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", kind, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def checkpoint_bytes(net: Module, state: dict[str, np.ndarray] | None = None,
                     extra: dict | None = None) -> bytes:
    kind = "one" if isinstance(net, MultiBranchModel) else "single"
    header = {
        "kind": kind,
        "arch": net.arch.to_dict(),
        "arch_hash": net.arch.digest(),
        "branches": net.arch.branches,
        "num_classes": net.arch.num_classes,
        "mode": "train" if net.training else "eval",
    }
    if extra:
        header["extra"] = extra
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = [(n, BLOB_PARAM, p.data) for n, p in net.named_parameters()]
    blobs += [(n, BLOB_BUFFER, b) for n, b in net.named_buffers()]
    blobs += [(n, BLOB_STATE, a) for n, a in sorted((state or {}).items())]
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hjson)))
    buf.write(hjson)
    buf.write(struct.pack("<I", len(blobs)))
    for name, k, arr in blobs:
        _write_blob(buf, name, k, arr)
    return buf.getvalue()


def save_checkpoint(path, net: Module, state: dict[str, np.ndarray] | None = None,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(net, state, extra))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ParseError(f"checkpoint truncated while reading {what}: need {n} bytes, "
                             f"{len(self.data) - self.pos} left", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def rebuild(arch: Architecture, kind: str) -> Module:
    rng = Rng(0)
    if kind == "single":
        return build_single(arch.trunk, arch.branch, arch.num_classes, rng, arch.in_shape)
    return build(arch.trunk, arch.branch, arch.branches - 1, arch.num_classes, rng,
                 arch.in_shape, arch.no_sharing, arch.no_gating)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes())
    if r.take(8, "magic") != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", 0)
    version, hlen = r.unpack("<II", "header size")
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 8)
    try:
        header = json.loads(r.take(hlen, "header").decode("utf-8"))
        arch = Architecture.from_dict(header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed checkpoint header: {exc}", 16) from exc
    if arch.digest() != header["arch_hash"]:
        raise ParseError("architecture hash mismatch", 16)
    with tn.precision(np.float32):
        net = rebuild(arch, header["kind"])
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    state: dict[str, np.ndarray] = {}
    (count,) = r.unpack("<I", "blob count")
    for _ in range(count):
        (nlen,) = r.unpack("<H", "blob name length")
        name = r.take(nlen, "blob name").decode("utf-8")
        kind, ndim = r.unpack("<BB", "blob kind")
        shape = r.unpack(f"<{ndim}I", "blob shape")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(nbytes, f"blob {name}"), dtype="<f4").reshape(shape)
        arr = arr.astype(np.float32)
        if kind == BLOB_PARAM:
            if name not in params or params[name].shape != arr.shape:
                raise ParseError(f"unexpected parameter blob {name} {shape}", r.pos)
            params[name].data[...] = arr
        elif kind == BLOB_BUFFER:
            if name not in buffers or buffers[name].shape != arr.shape:
                raise ParseError(f"unexpected buffer blob {name} {shape}", r.pos)
            buffers[name][...] = arr
        else:
            state[name] = arr
    net.train(header.get("mode", "eval") == "train")
    return Checkpoint(net=net, header=header, state=state)


def state_arrays(net: Module) -> dict[str, np.ndarray]:
    """Copies of every parameter and buffer, keyed by name."""
    out = {n: p.data.copy() for n, p in net.named_parameters()}
    out.update({n: b.copy() for n, b in net.named_buffers()})
    return out


def load_state_arrays(net: Module, arrays: dict[str, np.ndarray]) -> None:
    for n, p in net.named_parameters():
        p.data[...] = arrays[n]
    for n, b in net.named_buffers():
        b[...] = arrays[n]
