import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np
from loguru import logger
from sklearn.linear_model import LogisticRegression

from config.experiment_config import DatasetSpec, MnistDataset, SyntheticDataset
from core.errors import ConfigError, DatasetFormatError
from core.tensor import Tensor

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if not gz.exists():
            raise DatasetFormatError(f"IDX file not found: {path}", expected="existing file", actual=str(path))
        path = gz
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_header(raw: bytes, magic: int, dims: int, what: str) -> Tuple[int, ...]:
    header = 4 + 4 * dims
    if len(raw) < header:
        raise DatasetFormatError(f"{what}: truncated header", expected=header, actual=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DatasetFormatError(f"{what}: wrong magic number", expected=hex(magic), actual=hex(found))
    return struct.unpack(">" + "I" * dims, raw[4:header])


def load_mnist_idx(images_path: Union[str, Path], labels_path: Union[str, Path]) -> Tuple[Tensor, np.ndarray]:
    """
    Parses an IDX image/label pair. Images come back as (n, 1, rows, cols) float64 in [0, 1].
    """
    raw_images = _read_bytes(images_path)
    n, rows, cols = _parse_header(raw_images, IMAGES_MAGIC, 3, "images")
    expected = 16 + n * rows * cols
    if len(raw_images) < expected:
        raise DatasetFormatError("images: truncated pixel data", expected=expected, actual=len(raw_images))
    pixels = np.frombuffer(raw_images, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0

    raw_labels = _read_bytes(labels_path)
    (n_labels,) = _parse_header(raw_labels, LABELS_MAGIC, 1, "labels")
    if len(raw_labels) < 8 + n_labels:
        raise DatasetFormatError("labels: truncated label data", expected=8 + n_labels, actual=len(raw_labels))
    if n_labels != n:
        raise DatasetFormatError("image / label count mismatch", expected=n, actual=n_labels)
    labels = np.frombuffer(raw_labels, dtype=np.uint8, count=n_labels, offset=8).astype(np.int64)
    logger.info(f"DataLoader: {n} images ({rows}x{cols}) loaded from {images_path}")
    return images, labels


def synth_dataset(spec: SyntheticDataset, rng: np.random.Generator, n: int = None) -> Tuple[Tensor, np.ndarray]:
    """Gaussian blobs: class c centred at a random unit direction scaled by blob_sep."""
    if spec.classes < 2:
        raise ConfigError("synthetic datasets need at least two classes")
    n = spec.n if n is None else n
    directions = rng.standard_normal((spec.classes, spec.dims))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = spec.blob_sep * directions
    labels = rng.permutation(np.arange(n) % spec.classes)
    features = centers[labels] + spec.spread * rng.standard_normal((n, spec.dims))
    return features, labels.astype(np.int64)


def vertical_split(features: Tensor, K: int) -> List[Tensor]:
    """Contiguous column blocks along the last axis (image width, or vector coordinates);
    the first `dim % K` shards take one extra column."""
    width = features.shape[-1]
    if K < 1 or K > width:
        raise ConfigError(f"cannot split {width} columns across {K} parties")
    return [np.ascontiguousarray(s) for s in np.array_split(features, K, axis=-1)]


def reassemble(shards: Sequence[Tensor]) -> Tensor:
    return np.concatenate(list(shards), axis=-1)


def linear_separability(features: Tensor, labels: np.ndarray) -> float:
    """Training accuracy of a logistic-regression probe."""
    X = features.reshape(len(features), -1)
    clf = LogisticRegression(max_iter=1000)
    clf.fit(X, labels)
    return float(clf.score(X, labels))


@dataclass
class DatasetSplit:
    train_x: Tensor
    train_y: np.ndarray
    test_x: Tensor
    test_y: np.ndarray
    classes: int


def load_dataset(spec: DatasetSpec, seed: int) -> DatasetSplit:
    if isinstance(spec, MnistDataset):
        root = spec.root
        train_x, train_y = load_mnist_idx(root / spec.train_images, root / spec.train_labels)
        test_x, test_y = load_mnist_idx(root / spec.test_images, root / spec.test_labels)
        return DatasetSplit(train_x[:spec.train_subset], train_y[:spec.train_subset],
                            test_x[:spec.test_subset], test_y[:spec.test_subset], classes=10)
    rng = np.random.default_rng([seed, 0xDA7A])
    x, y = synth_dataset(spec, rng, n=spec.n + spec.n_test)
    split = DatasetSplit(x[:spec.n], y[:spec.n], x[spec.n:], y[spec.n:], classes=spec.classes)
    logger.info(f"DataLoader: synthetic blobs n={spec.n}+{spec.n_test}, dims={spec.dims}, "
                f"linear probe accuracy={linear_separability(split.train_x, split.train_y):.3f}")
    return split
