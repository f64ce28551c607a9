"""CIFAR-100 binary ingestion.

Each record in the official binary files is 3,074 bytes: one coarse-label
byte, one fine-label byte, then 3,072 pixel bytes laid out plane by plane
(all of R, then G, then B, each row-major 32x32). ``train.bin`` holds
50,000 records, ``test.bin`` 10,000.

Per-channel means (in [0, 1] units, computed over the train split) are
cached beside the data files on first load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetError

RECORD_BYTES = 3074
IMAGE_BYTES = 3072
SPLIT_SIZES = {"train": 50_000, "test": 10_000}
MEANS_CACHE = "channel_means.json"


@dataclass
class Cifar100Dataset:
    """Images as uint8 (N, 3, 32, 32) channel-first arrays plus labels."""

    images: np.ndarray
    fine_labels: np.ndarray
    coarse_labels: np.ndarray
    split: str

    def __len__(self) -> int:
        return len(self.images)

    def record_bytes(self, index: int) -> bytes:
        """Re-serialize one record into its original 3,074-byte layout."""
        return (
            bytes([self.coarse_labels[index], self.fine_labels[index]])
            + self.images[index].tobytes()
        )

    def subset(self, n: int) -> "Cifar100Dataset":
        """First ``n`` records (all of them if ``n`` exceeds the split)."""
        n = min(n, len(self))
        return Cifar100Dataset(self.images[:n], self.fine_labels[:n], self.coarse_labels[:n], self.split)


def _split_file(root: Path, split: str) -> Path:
    if split not in SPLIT_SIZES:
        raise DatasetError(f"unknown split {split!r}, expected one of {sorted(SPLIT_SIZES)}")
    candidates = [root / f"{split}.bin", root / "cifar-100-binary" / f"{split}.bin"]
    for path in candidates:
        if path.is_file():
            return path
    raise DatasetError(f"no {split}.bin under {root} (looked in {[str(p) for p in candidates]})")


def load_cifar100(root, split: str) -> Cifar100Dataset:
    """Parse one split bit-exactly; fails closed on any size mismatch."""
    path = _split_file(Path(root), split)
    expected = SPLIT_SIZES[split] * RECORD_BYTES
    raw = path.read_bytes()
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes ({SPLIT_SIZES[split]} records), found {len(raw)}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(SPLIT_SIZES[split], RECORD_BYTES)
    coarse = records[:, 0].copy()
    fine = records[:, 1].copy()
    images = records[:, 2:].reshape(-1, 3, 32, 32).copy()
    if fine.max() > 99:
        raise DatasetError(f"{path}: fine label {fine.max()} out of range [0, 100)")
    if coarse.max() > 19:
        raise DatasetError(f"{path}: coarse label {coarse.max()} out of range [0, 20)")
    return Cifar100Dataset(images, fine.astype(np.int64), coarse, split)


def compute_channel_means(dataset: Cifar100Dataset) -> np.ndarray:
    """Per-channel pixel means in [0, 1] units, order R, G, B."""
    return dataset.images.reshape(len(dataset), 3, -1).mean(axis=(0, 2)) / 255.0


def channel_means(root, train: Cifar100Dataset | None = None) -> np.ndarray:
    """Train-split channel means, cached beside the data files."""
    root = Path(root)
    cache = root / MEANS_CACHE
    if cache.is_file():
        means = np.asarray(json.loads(cache.read_text()), dtype=np.float64)
        if means.shape != (3,):
            raise DatasetError(f"{cache}: expected 3 channel means, found shape {means.shape}")
        return means
    if train is None:
        train = load_cifar100(root, "train")
    means = compute_channel_means(train)
    try:
        cache.write_text(json.dumps([float(m) for m in means]))
    except OSError:
        pass  # read-only data dir: recompute next time
    return means
