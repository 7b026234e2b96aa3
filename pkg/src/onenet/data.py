"""Dataset ingestion, subsetting, normalisation and mini-batching.

Formats:

* IDX (MNIST): big-endian, magic ``0x00000803`` for u8 image tensors and
  ``0x00000801`` for u8 label vectors; gzip-compressed files are accepted.
* CIFAR-10 binary: fixed 3073-byte records, one label byte then 3072 pixel
  bytes in channel-major order (1024 R, 1024 G, 1024 B).

All parsing is explicit about byte order, so loaded arrays do not depend on
the host platform.
"""

from __future__ import annotations

import gzip
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, ParseError
from .rng import Rng

log = logging.getLogger(__name__)

DATA_ROOT_ENV = "ONENET_DATA_ROOT"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
SAMPLE_DIR = Path(__file__).parent / "sample_data"


@dataclass
class Dataset:
    images: np.ndarray            # N x C x H x W float32, normalised
    labels: np.ndarray            # N int64 in [0, C)
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label outside [0, num_classes)")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return replace(self, images=self.images[idx], labels=self.labels[idx], meta=dict(self.meta))


@dataclass
class DataBundle:
    train: Dataset
    test: Dataset

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


# -- raw parsers -----------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise ParseError(f"{path}: corrupt gzip stream: {exc}", 0) from exc
    return raw


def read_idx(path) -> np.ndarray:
    """Parse one IDX file of unsigned bytes into an array of its stated shape."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise ParseError(f"{path}: expected 4-byte magic, file has {len(raw)} bytes", 0)
    magic = int.from_bytes(raw[:4], "big")
    if magic not in (IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC):
        raise ParseError(f"{path}: bad IDX magic 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise ParseError(f"{path}: header needs {head} bytes, file has {len(raw)}", len(raw))
    dims = tuple(int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim))
    expected = head + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise ParseError(f"{path}: expected {expected} bytes for dims {dims}, "
                         f"got {len(raw)}", min(len(raw), expected))
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def read_cifar10_bin(paths: Sequence) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    for p in paths:
        raw = _read_bytes(p)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise ParseError(f"{p}: length {len(raw)} is not a multiple of the "
                             f"{CIFAR_RECORD}-byte record", len(raw) - len(raw) % CIFAR_RECORD)
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() > 9:
            bad = int(np.argmax(rec[:, 0] > 9))
            raise ParseError(f"{p}: label byte {rec[bad, 0]} outside [0, 10)", bad * CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return np.concatenate(images), np.concatenate(labels)


# -- normalisation -------------------------------------------------------

def channel_stats(images_u8: np.ndarray) -> dict:
    """Per-channel mean/std of pixel/255 values (N x C x H x W input)."""
    x = images_u8.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    std[std == 0] = 1.0
    return {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}


def normalise(images_u8: np.ndarray, stats: dict) -> np.ndarray:
    mean = np.asarray(stats["mean"], dtype=np.float64)[None, :, None, None]
    std = np.asarray(stats["std"], dtype=np.float64)[None, :, None, None]
    return ((images_u8.astype(np.float64) / 255.0 - mean) / std).astype(np.float32)


def _make_dataset(images_u8, labels, num_classes, split, stats, source) -> Dataset:
    if stats is None:
        stats = channel_stats(images_u8)
    return Dataset(normalise(images_u8, stats), np.asarray(labels, dtype=np.int64), num_classes,
                   split, {"stats": stats, "source": source})


def load_idx(images_path, labels_path, split: str = "train", stats: dict | None = None) -> Dataset:
    """Load an IDX image/label pair. ``stats`` (from the train split) is reused
    for normalisation when given, otherwise computed from these images.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim != 3:
        raise ParseError(f"{images_path}: expected a 3-D image tensor, got {images.ndim}-D", 3)
    if labels.ndim != 1:
        raise ParseError(f"{labels_path}: expected a label vector, got {labels.ndim}-D", 3)
    if labels.shape[0] != images.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= 10:
        raise DataError(f"{labels_path}: label {labels.max()} outside [0, 10)")
    return _make_dataset(images[:, None], labels, 10, split, stats, str(images_path))


def load_cifar10_bin(paths: Sequence, split: str = "train", stats: dict | None = None) -> Dataset:
    images, labels = read_cifar10_bin(paths)
    return _make_dataset(images, labels, 10, split, stats, ",".join(str(p) for p in paths))


# -- subsetting / augmentation / batching ----------------------------------

def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Stratified random subset of ``n`` samples, kept in original order.

    Per-class quotas follow largest-remainder rounding of the class shares,
    so every class count is within 1 of its proportional share.
    """
    total = len(dataset)
    if n >= total:
        return dataset
    classes, counts = np.unique(dataset.labels, return_counts=True)
    exact = counts * n / total
    quota = np.floor(exact).astype(np.int64)
    short = n - quota.sum()
    order = np.lexsort((classes, -(exact - quota)))
    quota[order[:short]] += 1
    rng = Rng(seed, "subset")
    keep = []
    for c, q in zip(classes, quota):
        idx = np.flatnonzero(dataset.labels == c)
        keep.append(idx[rng.child(int(c)).permutation(idx.size)[:q]])
    out = dataset.take(np.sort(np.concatenate(keep)))
    out.meta["subset"] = {"n": int(n), "seed": int(seed)}
    return out


@dataclass(frozen=True)
class AugmentSpec:
    crop_pad: int = 0
    hflip: bool = False

    @property
    def enabled(self) -> bool:
        return self.crop_pad > 0 or self.hflip


def augment(batch: np.ndarray, spec: AugmentSpec, rng: Rng) -> np.ndarray:
    """Random crop after zero padding, then random horizontal flip."""
    if not spec.enabled:
        return batch
    n, c, h, w = batch.shape
    out = batch
    if spec.crop_pad:
        p = spec.crop_pad
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)))
        dy = rng.integers(0, 2 * p + 1, size=n)
        dx = rng.integers(0, 2 * p + 1, size=n)
        out = np.empty_like(batch)
        for i in range(n):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    if spec.hflip:
        flip = rng.uniform(n) < 0.5
        if out is batch:
            out = batch.copy()
        out[flip] = out[flip][..., ::-1]
    return out


class BatchIterator:
    """Shuffled mini-batches; the permutation depends only on (seed, epoch).

    A trailing batch of one sample is dropped since batch norm cannot train
    on it.
    """

    def __init__(self, dataset: Dataset, batch_size: int, seed: int,
                 augment_spec: AugmentSpec | None = None):
        self.dataset = dataset
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.augment_spec = augment_spec or AugmentSpec()

    def permutation(self, epoch: int) -> np.ndarray:
        return Rng(self.seed, "shuffle", epoch).permutation(len(self.dataset))

    def num_batches(self) -> int:
        n, b = len(self.dataset), self.batch_size
        full, rem = divmod(n, b)
        return full + (1 if rem >= 2 else 0)

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        perm = self.permutation(epoch)
        arng = Rng(self.seed, "augment", epoch)
        for k, start in enumerate(range(0, len(perm), self.batch_size)):
            idx = perm[start:start + self.batch_size]
            if idx.size < 2:
                break
            x = self.dataset.images[idx]
            yield augment(x, self.augment_spec, arng.child(k)), self.dataset.labels[idx]


def iterate_in_order(dataset: Dataset, batch_size: int):
    for start in range(0, len(dataset), batch_size):
        yield dataset.images[start:start + batch_size], dataset.labels[start:start + batch_size]


# -- dataset resolution ------------------------------------------------------

def data_root(explicit=None) -> Path | None:
    root = explicit or os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


def _find(root: Path, names: Sequence[str]) -> Path | None:
    for name in names:
        for cand in (root / name, root / "mnist" / name, root / "MNIST" / "raw" / name):
            if cand.is_file():
                return cand
    return None


def _idx_names(stem: str):
    return [stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"]


def load_mnist(root=None) -> DataBundle:
    """MNIST from IDX files under ``root`` (or $ONENET_DATA_ROOT).

    Without a data root, falls back to the bundled 5,000-image MNIST sample
    (4,000 train / 1,000 test, class-stratified).
    """
    root = data_root(root)
    if root is not None:
        paths = [_find(root, _idx_names(s)) for s in (
            "train-images-idx3-ubyte", "train-labels-idx1-ubyte",
            "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")]
        if all(paths):
            train = load_idx(paths[0], paths[1], "train")
            test = load_idx(paths[2], paths[3], "test", stats=train.meta["stats"])
            return DataBundle(train, test)
        raise DataError(f"MNIST IDX files not found under {root}")
    log.info("no data root set; using bundled MNIST sample")
    train = load_idx(SAMPLE_DIR / "mnist-sample-train-images-idx3-ubyte.gz",
                     SAMPLE_DIR / "mnist-sample-train-labels-idx1-ubyte.gz", "train")
    test = load_idx(SAMPLE_DIR / "mnist-sample-test-images-idx3-ubyte.gz",
                    SAMPLE_DIR / "mnist-sample-test-labels-idx1-ubyte.gz", "test",
                    stats=train.meta["stats"])
    return DataBundle(train, test)


def load_cifar10(root=None) -> DataBundle:
    root = data_root(root)
    if root is None:
        raise DataError(f"CIFAR-10 needs a data root (--data-root or ${DATA_ROOT_ENV})")
    base = root / "cifar-10-batches-bin" if (root / "cifar-10-batches-bin").is_dir() else root
    train_paths = [base / f"data_batch_{i}.bin" for i in range(1, 6)]
    test_paths = [base / "test_batch.bin"]
    missing = [str(p) for p in train_paths + test_paths if not p.is_file()]
    if missing:
        raise DataError(f"CIFAR-10 files missing: {', '.join(missing)}")
    train = load_cifar10_bin(train_paths, "train")
    test = load_cifar10_bin(test_paths, "test", stats=train.meta["stats"])
    return DataBundle(train, test)


def load_bundle(dataset: str, root=None, train_subset: int = 0, test_subset: int = 0,
                seed: int = 0) -> DataBundle:
    """Resolve a dataset name and apply stratified subsetting.

    Normalisation statistics are those of the full train split and are
    shared with the test split.
    """
    loaders = {"mnist": load_mnist, "cifar10": load_cifar10}
    if dataset not in loaders:
        raise DataError(f"unknown dataset {dataset!r}; expected one of {sorted(loaders)}")
    bundle = loaders[dataset](root)
    train, test = bundle.train, bundle.test
    if train_subset:
        train = subset(train, train_subset, seed)
    if test_subset:
        test = subset(test, test_subset, seed)
    return DataBundle(train, test)


def write_idx(path, array: np.ndarray, compress: bool | None = None) -> None:
    """Write a u8 array in IDX format (labels: 1-D, images: 3-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    head = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    raw = head + array.tobytes()
    path = Path(path)
    if compress is None:
        compress = path.suffix == ".gz"
    # mtime=0 keeps the gzip bytes reproducible
    path.write_bytes(gzip.compress(raw, mtime=0) if compress else raw)
