"""Dataset ingestion and task-stream construction.

MNIST is read from the standard IDX files (raw or gzipped); task streams
are built on top of a base dataset: pixel-permuted tasks for the
single-head benchmark, class-split tasks for the multi-head setting, and
synthetic generators for property tests. Task tensors are materialized on
demand from the shared base arrays, so a long permuted stream never holds
more than one task's images at a time.
"""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .seeding import generator

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxParseError(ValueError):
    """Malformed IDX file; the message names the offending byte offset."""


@dataclass(frozen=True)
class BaseDataset:
    """A plain supervised dataset before any task structure is imposed."""

    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int
    input_shape: tuple


@dataclass(frozen=True)
class TaskDataset:
    """One task's splits. ``task_id`` is 1-indexed; labels lie in
    ``[0, n_classes)`` of the task's own label space."""

    task_id: int
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int
    input_shape: tuple

    def __post_init__(self):
        for name in ("train", "val", "test"):
            y = getattr(self, f"{name}_y")
            if y.size and (y.min() < 0 or y.max() >= self.n_classes):
                raise ValueError(f"{name} labels outside [0, {self.n_classes})")


class TaskSequence:
    """Ordered tasks 1..T, materialized lazily and deterministically."""

    def __init__(self, builders: list[Callable[[], TaskDataset]],
                 n_classes: int, input_shape: tuple, recommended_head_mode: str):
        self._builders = builders
        self.n_classes = n_classes
        self.input_shape = input_shape
        self.recommended_head_mode = recommended_head_mode

    def __len__(self) -> int:
        return len(self._builders)

    def task(self, index: int) -> TaskDataset:
        """Materialize the task at 0-based ``index``."""
        return self._builders[index]()


# ---------------------------------------------------------------------------
# IDX files


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(f) as g:
                return g.read()
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, ndim: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise IdxParseError(f"{path}: truncated header at byte 0")
    magic = int.from_bytes(raw[0:4], "big")
    if magic != expected_magic:
        raise IdxParseError(
            f"{path}: magic mismatch at byte 0: got 0x{magic:08x}, "
            f"expected 0x{expected_magic:08x}"
        )
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxParseError(f"{path}: truncated dimension header at byte {len(raw)}")
    dims = [int.from_bytes(raw[4 + 4 * i:8 + 4 * i], "big") for i in range(ndim)]
    expected_len = header_end + int(np.prod(dims))
    if len(raw) != expected_len:
        raise IdxParseError(
            f"{path}: payload ends at byte {len(raw)}, expected {expected_len} "
            f"for dimensions {dims}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Parse an IDX image/label file pair.

    Returns ``(images, labels)`` with images as float64 in [0, 1], shape
    ``(n, rows, cols)``, and labels as int64.
    """
    images_u8 = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, images_path)
    labels_u8 = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, labels_path)
    if images_u8.shape[0] != labels_u8.shape[0]:
        raise IdxParseError(
            f"{images_path}: {images_u8.shape[0]} images vs "
            f"{labels_u8.shape[0]} labels"
        )
    return images_u8.astype(np.float64) / 255.0, labels_u8.astype(np.int64)


def write_idx_images(path, images_u8: np.ndarray) -> None:
    """Serialize a uint8 image stack back to IDX bytes (gzipped iff ``.gz``)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    header = IMAGES_MAGIC.to_bytes(4, "big") + b"".join(
        int(d).to_bytes(4, "big") for d in images_u8.shape
    )
    _write_maybe_gz(path, header + images_u8.tobytes())


def write_idx_labels(path, labels_u8: np.ndarray) -> None:
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    header = LABELS_MAGIC.to_bytes(4, "big") + int(labels_u8.shape[0]).to_bytes(4, "big")
    _write_maybe_gz(path, header + labels_u8.tobytes())


def _write_maybe_gz(path, payload: bytes) -> None:
    if str(path).endswith(".gz"):
        with gzip.open(path, "wb", mtime=0) as f:
            f.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)


def find_mnist_dir(data_dir=None) -> Path | None:
    """Directory holding the four MNIST IDX files (possibly gzipped), if any."""
    candidates = []
    if data_dir:
        candidates.append(Path(data_dir))
    env = os.environ.get("GPM_DATA_DIR")
    if env:
        candidates.append(Path(env))
    for cand in candidates:
        if all(
            (cand / name).exists() or (cand / (name + ".gz")).exists()
            for name in MNIST_FILES.values()
        ):
            return cand
    return None


def load_mnist_dir(data_dir) -> BaseDataset:
    """Load the standard four-file MNIST layout from ``data_dir``."""
    paths = {}
    for key, name in MNIST_FILES.items():
        p = Path(data_dir) / name
        if not p.exists():
            p = Path(data_dir) / (name + ".gz")
        if not p.exists():
            raise FileNotFoundError(f"missing MNIST file {name}[.gz] in {data_dir}")
        paths[key] = p
    train_x, train_y = load_mnist_idx(paths["train_images"], paths["train_labels"])
    test_x, test_y = load_mnist_idx(paths["test_images"], paths["test_labels"])
    return BaseDataset(
        train_x=train_x[:, None, :, :],
        train_y=train_y,
        test_x=test_x[:, None, :, :],
        test_y=test_y,
        n_classes=10,
        input_shape=(1,) + train_x.shape[1:],
    )


# ---------------------------------------------------------------------------
# Task streams


def _assert_disjoint(*index_sets) -> None:
    merged: set[int] = set()
    total = 0
    for idx in index_sets:
        merged.update(int(i) for i in idx)
        total += len(idx)
    if len(merged) != total:
        raise AssertionError("train/val/test index sets overlap")


def permutation_for_task(seed: int, task_number: int, n_pixels: int) -> np.ndarray:
    """Pixel permutation of task ``task_number`` (1-indexed; task 1 is identity)."""
    if task_number == 1:
        return np.arange(n_pixels)
    return generator(seed, "perm", task_number).permutation(n_pixels)


def make_permuted_tasks(base: BaseDataset, n_tasks: int, seed: int,
                        val_size: int = 6000, train_limit: int | None = None,
                        val_limit: int | None = None) -> TaskSequence:
    """Pixel-permutation task stream over ``base`` (task 1 unpermuted).

    Each task shuffles the base training set with its own derived seed and
    holds out the last ``val_size`` items for validation; ``train_limit``
    and ``val_limit`` truncate the splits for reduced-scale runs. Test
    images are the full base test set under the task's permutation.
    """
    if n_tasks < 1:
        raise ValueError("need at least one task")
    n_pixels = int(np.prod(base.input_shape))
    n_train = base.train_x.shape[0]
    if val_size >= n_train:
        raise ValueError("validation split leaves no training data")

    def build(index: int) -> TaskDataset:
        tau = index + 1
        perm = permutation_for_task(seed, tau, n_pixels)
        order = generator(seed, "split", tau).permutation(n_train)
        train_idx = order[: n_train - val_size]
        val_idx = order[n_train - val_size:]
        if train_limit is not None:
            train_idx = train_idx[:train_limit]
        if val_limit is not None:
            val_idx = val_idx[:val_limit]
        _assert_disjoint(train_idx, val_idx)

        def apply(x):
            flat = x.reshape(x.shape[0], n_pixels)
            return flat[:, perm].reshape((x.shape[0],) + base.input_shape)

        return TaskDataset(
            task_id=tau,
            train_x=apply(base.train_x[train_idx]),
            train_y=base.train_y[train_idx],
            val_x=apply(base.train_x[val_idx]),
            val_y=base.train_y[val_idx],
            test_x=apply(base.test_x),
            test_y=base.test_y,
            n_classes=base.n_classes,
            input_shape=base.input_shape,
        )

    builders = [(lambda i: (lambda: build(i)))(i) for i in range(n_tasks)]
    return TaskSequence(builders, base.n_classes, base.input_shape, "single")


def make_split_tasks(base: BaseDataset, classes_per_task: int, seed: int,
                     val_fraction: float = 0.1) -> TaskSequence:
    """Disjoint-class task stream with per-task label remapping."""
    if base.n_classes % classes_per_task != 0:
        raise ValueError(
            f"{base.n_classes} classes not divisible by {classes_per_task} per task"
        )
    n_tasks = base.n_classes // classes_per_task
    class_order = generator(seed, "class-order").permutation(base.n_classes)
    groups = [
        np.sort(class_order[t * classes_per_task:(t + 1) * classes_per_task])
        for t in range(n_tasks)
    ]

    def build(index: int) -> TaskDataset:
        tau = index + 1
        classes = groups[index]
        remap = {int(c): i for i, c in enumerate(classes)}

        def subset(x, y):
            mask = np.isin(y, classes)
            xs = x[mask]
            ys = np.array([remap[int(c)] for c in y[mask]], dtype=np.int64)
            return xs, ys

        train_x, train_y = subset(base.train_x, base.train_y)
        test_x, test_y = subset(base.test_x, base.test_y)
        order = generator(seed, "split", tau).permutation(train_x.shape[0])
        n_val = int(round(val_fraction * train_x.shape[0]))
        val_idx = order[len(order) - n_val:]
        train_idx = order[: len(order) - n_val]
        _assert_disjoint(train_idx, val_idx)
        return TaskDataset(
            task_id=tau,
            train_x=train_x[train_idx],
            train_y=train_y[train_idx],
            val_x=train_x[val_idx],
            val_y=train_y[val_idx],
            test_x=test_x,
            test_y=test_y,
            n_classes=classes_per_task,
            input_shape=base.input_shape,
        )

    builders = [(lambda i: (lambda: build(i)))(i) for i in range(n_tasks)]
    return TaskSequence(builders, classes_per_task, base.input_shape, "multi")


def make_synthetic_subspace_tasks(d: int, subspace_dim: int, n_tasks: int,
                                  samples_per_task: int, seed: int,
                                  val_fraction: float = 0.15,
                                  test_fraction: float = 0.25) -> TaskSequence:
    """Tasks whose inputs occupy pairwise-orthogonal coordinate subspaces.

    Task ``t`` uses coordinates ``[(t-1)*subspace_dim, t*subspace_dim)``
    only, with binary labels linearly separable (margin 0.35) inside the
    subspace, so cross-task input Gram matrices are exactly zero and a
    sufficiently high threshold forces provably zero interference.
    """
    if n_tasks * subspace_dim > d:
        raise ValueError(
            f"{n_tasks} tasks x {subspace_dim} dims exceed ambient dimension {d}"
        )

    def build(index: int) -> TaskDataset:
        tau = index + 1
        rng = generator(seed, "subspace", tau)
        lo = index * subspace_dim
        w = rng.standard_normal(subspace_dim)
        w /= np.linalg.norm(w)
        g = rng.standard_normal((samples_per_task, subspace_dim))
        side = np.where(g @ w >= 0.0, 1.0, -1.0)
        g += 0.35 * side[:, None] * w  # enforce a separation margin
        y = (side > 0).astype(np.int64)
        x = np.zeros((samples_per_task, d))
        x[:, lo:lo + subspace_dim] = g
        n_test = int(round(test_fraction * samples_per_task))
        n_val = int(round(val_fraction * samples_per_task))
        n_train = samples_per_task - n_val - n_test
        if n_train < 1:
            raise ValueError("samples_per_task too small for the requested splits")
        return TaskDataset(
            task_id=tau,
            train_x=x[:n_train],
            train_y=y[:n_train],
            val_x=x[n_train:n_train + n_val],
            val_y=y[n_train:n_train + n_val],
            test_x=x[n_train + n_val:],
            test_y=y[n_train + n_val:],
            n_classes=2,
            input_shape=(d,),
        )

    builders = [(lambda i: (lambda: build(i)))(i) for i in range(n_tasks)]
    return TaskSequence(builders, 2, (d,), "single")


def synthetic_class_images(n_classes: int = 10, per_class_train: int = 200,
                           per_class_test: int = 40, shape: tuple = (1, 8, 8),
                           seed: int = 0) -> BaseDataset:
    """Seeded prototype-plus-noise image classes for desk-scale split tasks."""
    rng = generator(seed, "class-images")
    n_pix = int(np.prod(shape))
    prototypes = rng.standard_normal((n_classes, n_pix))

    def draw(per_class):
        xs, ys = [], []
        for c in range(n_classes):
            noise = rng.standard_normal((per_class, n_pix))
            img = 0.5 + 0.3 * prototypes[c] + 0.15 * noise
            xs.append(np.clip(img, 0.0, 1.0))
            ys.append(np.full(per_class, c, dtype=np.int64))
        x = np.concatenate(xs).reshape((-1,) + shape)
        y = np.concatenate(ys)
        order = rng.permutation(x.shape[0])
        return x[order], y[order]

    train_x, train_y = draw(per_class_train)
    test_x, test_y = draw(per_class_test)
    return BaseDataset(train_x, train_y, test_x, test_y, n_classes, shape)
