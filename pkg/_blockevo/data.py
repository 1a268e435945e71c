"""
Labelled image sets: IDX ingestion, synthetic blobs, downsampling, stratified subsets and the 80/20 split.
"""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from _blockevo.utils import UserError

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


class DataError(UserError):
    pass


class BadMagic(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class CountMismatch(DataError):
    pass


class TruncatedFile(DataError):
    pass


class IndivisibleShape(DataError):
    pass


class DegenerateSplit(DataError):
    pass


@dataclass(frozen=True)
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __post_init__(self) -> None:
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DimensionMismatch(f"{self.name}: images must be (N, C, H, W), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise CountMismatch(f"{self.name}: {images.shape[0]} images but {labels.size} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(f"{self.name}: labels must lie in [0, {self.num_classes})")
        if images.size and not (np.all(np.isfinite(images)) and images.min() >= 0.0 and images.max() <= 1.0):
            raise DataError(f"{self.name}: pixel values must lie in [0, 1]")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.images.shape[1:])

    def subset(self, indices: np.ndarray, name: Optional[str] = None) -> "LabeledImageSet":
        return LabeledImageSet(self.images[indices], self.labels[indices], self.num_classes, name or self.name)


def _open(path: Path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    # Big endian: u32 magic, u32 per dimension, then u8 payload.
    with _open(path) as f:
        data = f.read()

    if len(data) < 4:
        raise TruncatedFile(f"{path}: missing magic number")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic number {found}, expected {magic}")

    header_size = 4 + 4 * ndim
    if len(data) < header_size:
        raise TruncatedFile(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header_size])
    if ndim == 3 and (dims[1] == 0 or dims[2] == 0):
        raise DimensionMismatch(f"{path}: image dimensions {dims[1]}x{dims[2]}")

    expected = int(np.prod(dims))
    payload = np.frombuffer(data, dtype=np.uint8, offset=header_size)
    if payload.size < expected:
        raise TruncatedFile(f"{path}: {payload.size} bytes of data, header announces {expected}")
    if payload.size > expected:
        raise DimensionMismatch(f"{path}: {payload.size - expected} trailing bytes after the data")
    return payload.reshape(dims)


def load_idx(
    images_path: Path, labels_path: Path, num_classes: Optional[int] = None, name: Optional[str] = None
) -> LabeledImageSet:
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatch(f"{images.shape[0]} images in {images_path} but {labels.shape[0]} labels in {labels_path}")

    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 1
    return LabeledImageSet(
        images=images[:, None, :, :].astype(np.float64) / 255.0,
        labels=labels.astype(np.int64),
        num_classes=num_classes,
        name=name or Path(images_path).name,
    )


def save_idx(dataset: LabeledImageSet, images_path: Path, labels_path: Path) -> None:
    if dataset.images.shape[1] != 1:
        raise DimensionMismatch("IDX images are single-channel")
    n, _, h, w = dataset.images.shape
    pixels = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABEL_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def downsample(dataset: LabeledImageSet, factor: int) -> LabeledImageSet:
    if factor < 1:
        raise IndivisibleShape(f"downsampling factor must be >= 1, got {factor}")
    n, c, h, w = dataset.images.shape
    if h % factor or w % factor:
        raise IndivisibleShape(f"{h}x{w} images are not divisible by {factor}")
    pooled = dataset.images.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return LabeledImageSet(pooled, dataset.labels, dataset.num_classes, dataset.name)


def split_train_test(
    dataset: LabeledImageSet, train_fraction: float = 0.8, seed: int = 0
) -> Tuple[LabeledImageSet, LabeledImageSet]:
    if not 0.0 < train_fraction < 1.0:
        raise DegenerateSplit(f"train fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(np.floor(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise DegenerateSplit(f"splitting {n} examples at {train_fraction} leaves one side empty")

    order = np.random.default_rng(seed).permutation(n)
    return (
        dataset.subset(order[:n_train], f"{dataset.name}/train"),
        dataset.subset(order[n_train:], f"{dataset.name}/test"),
    )


def stratified_subset(dataset: LabeledImageSet, per_class: int, seed: int = 0) -> LabeledImageSet:
    """Seeded sample of `per_class` examples from every class, kept in original order."""
    rng = np.random.default_rng(seed)
    chosen = []
    for label in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == label)
        if members.size < per_class:
            raise DataError(f"{dataset.name}: class {label} has {members.size} examples, {per_class} requested")
        chosen.append(rng.choice(members, size=per_class, replace=False))
    return dataset.subset(np.sort(np.concatenate(chosen)))


def _blob_centres(num_classes: int, image_size: int) -> np.ndarray:
    # Evenly spaced on a circle around the image centre.
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    radius = image_size / 4.0
    centre = (image_size - 1) / 2.0
    return np.stack([centre + radius * np.sin(angles), centre + radius * np.cos(angles)], axis=1)


def synth_blobs(
    num_classes: int,
    per_class: int,
    image_size: int,
    noise_std: float,
    seed: int,
    channels: int = 1,
    name: str = "blobs",
) -> LabeledImageSet:
    if num_classes < 1 or per_class < 1 or image_size < 1 or channels < 1:
        raise DataError("blob generator arguments must be positive")
    if noise_std < 0:
        raise DataError("noise_std must be >= 0")

    rng = np.random.default_rng(seed)
    sigma = max(image_size / 6.0, 0.5)
    rows, cols = np.mgrid[0:image_size, 0:image_size].astype(np.float64)

    images, labels = [], []
    for label, (cy, cx) in enumerate(_blob_centres(num_classes, image_size)):
        bump = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * sigma**2))
        clean = np.broadcast_to(bump, (per_class, channels, image_size, image_size))
        noisy = clean + rng.normal(0.0, noise_std, size=clean.shape) if noise_std > 0 else clean
        images.append(np.clip(noisy, 0.0, 1.0))
        labels.append(np.full(per_class, label))

    return LabeledImageSet(np.concatenate(images), np.concatenate(labels), num_classes, name)


def blobs_manifest(
    num_classes: int, per_class: int, image_size: int, noise_std: float, seed: int, channels: int = 1
) -> Dict[str, Any]:
    return {
        "generator": "blobs",
        "params": {
            "num_classes": num_classes,
            "per_class": per_class,
            "image_size": image_size,
            "noise_std": noise_std,
            "channels": channels,
        },
        "seed": seed,
    }


def from_manifest(manifest: Dict[str, Any], name: str = "blobs") -> LabeledImageSet:
    if manifest.get("generator") != "blobs":
        raise DataError(f"unknown generator {manifest.get('generator')!r}")
    return synth_blobs(seed=int(manifest["seed"]), name=name, **manifest["params"])
