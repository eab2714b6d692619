"""Dataset ingestion, stratified labeled/unlabeled/validation splits and batch pairing.

Images are held in memory as float32 tensors ``(N, H, W, C)`` with values in
[0, 1]; per-channel normalisation happens inside the network.
"""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

CIFAR_SIDE = 32
CIFAR_PIXELS = CIFAR_SIDE * CIFAR_SIDE * 3


class DatasetError(ValueError):
    pass


@dataclass
class DatasetManifest:
    """Where the data lives and how to read it.

    ``format`` is ``cifar_binary`` (``train``/``test`` are lists of record
    files), ``directory`` (``train``/``test`` are directories holding images
    plus ``index.csv``) or ``synthetic``.
    """

    name: str = "synthetic"
    format: str = "synthetic"
    num_classes: int = 4
    img_size: Optional[int] = None
    train: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)
    label_bytes: int = 1
    checksums: Dict[str, str] = field(default_factory=dict)
    synthetic_train: int = 2000
    synthetic_test: int = 1000
    synthetic_noise: float = 0.35
    seed: int = 0
    mean: Optional[Tuple[float, ...]] = None
    std: Optional[Tuple[float, ...]] = None


@dataclass
class ImageDataset:
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ImageDataset":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes)


@dataclass
class DatasetBundle:
    train: ImageDataset
    test: Optional[ImageDataset]
    mean: Tuple[float, ...]
    std: Tuple[float, ...]


# -- readers -----------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _verify(paths: Sequence[str], checksums: Dict[str, str]) -> None:
    for p in paths:
        path = Path(p)
        if not path.exists():
            raise DatasetError(f"missing dataset file: {path}")
        want = checksums.get(str(p)) or checksums.get(path.name)
        if want and path.is_file() and _sha256(path) != want.lower():
            raise DatasetError(f"checksum mismatch for {path}")


def read_cifar_binary(path, label_bytes: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Parse a CIFAR binary file: per record, label byte(s) then 3072 channel-major pixels.

    With two label bytes (CIFAR-100: coarse, fine) the last one is used.
    Returns uint8 images ``(n, 32, 32, 3)`` and int64 labels.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    rec = label_bytes + CIFAR_PIXELS
    if raw.size == 0 or raw.size % rec:
        raise DatasetError(f"{path}: size {raw.size} is not a multiple of the {rec}-byte record")
    raw = raw.reshape(-1, rec)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    images = raw[:, label_bytes:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_cifar_binary(path, images: np.ndarray, labels: Sequence[int]) -> None:
    """Inverse of :func:`read_cifar_binary` for one label byte."""
    images = np.asarray(images, dtype=np.uint8)
    recs = np.concatenate(
        [np.asarray(labels, dtype=np.uint8)[:, None], images.transpose(0, 3, 1, 2).reshape(len(images), -1)],
        axis=1,
    )
    recs.tofile(path)


def read_image_directory(root) -> Tuple[np.ndarray, np.ndarray]:
    """Images listed in ``root/index.csv`` as ``filename,label_id`` rows."""
    root = Path(root)
    index = root / "index.csv"
    if not index.exists():
        raise DatasetError(f"missing index file: {index}")
    images, labels = [], []
    with open(index, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if row[0] == "filename":
                continue
            fname, label = row[0].strip(), int(row[1])
            path = root / fname
            if not path.exists():
                raise DatasetError(f"index refers to missing image: {path}")
            with Image.open(path) as im:
                images.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
            labels.append(label)
    if not images:
        raise DatasetError(f"{index} lists no images")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"{root}: images have mixed shapes {sorted(shapes)}")
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def make_synthetic(n: int, num_classes: int = 4, size: int = 16, noise: float = 0.35,
                   seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Texture classes with random colour, frequency and phase plus pixel noise.

    Class k is one of: horizontal stripes, vertical stripes, checkerboard,
    concentric rings, cycling if ``num_classes > 4`` with doubled frequency.
    All classes are invariant under horizontal flips.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i, k in enumerate(labels):
        shape, octave = k % 4, 1 + k // 4
        freq = rng.uniform(1.5, 3.0) * octave * 2 * np.pi / size
        phase = rng.uniform(0, 2 * np.pi)
        cy, cx = rng.uniform(0.3, 0.7, 2) * size
        if shape == 0:
            wave = np.sin(freq * yy + phase)
        elif shape == 1:
            wave = np.sin(freq * xx + phase)
        elif shape == 2:
            wave = np.sin(freq * yy + phase) * np.sin(freq * xx + phase)
        else:
            wave = np.sin(freq * np.hypot(yy - cy, xx - cx) + phase)
        fg, bg = rng.uniform(0, 1, (2, 3))
        pattern = (wave[..., None] + 1) / 2
        img = bg + (fg - bg) * pattern + rng.normal(0, noise, (size, size, 3))
        images[i] = np.clip(img, 0, 1)
    return (images * 255).round().astype(np.uint8), labels.astype(np.int64)


def _to_tensor(images: np.ndarray, size: Optional[int]) -> torch.Tensor:
    x = torch.from_numpy(images).float() / 255.0
    if size and (x.shape[1] != size or x.shape[2] != size):
        x = F.interpolate(x.permute(0, 3, 1, 2), size=(size, size), mode="bilinear",
                          align_corners=False, antialias=True).clamp(0, 1).permute(0, 2, 3, 1)
    return x.contiguous()


def channel_stats(images: torch.Tensor) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    flat = images.reshape(-1, images.shape[-1]).double()
    std = flat.std(dim=0).clamp_min(1e-6)
    return tuple(flat.mean(dim=0).tolist()), tuple(std.tolist())


def load_dataset(manifest: DatasetManifest) -> DatasetBundle:
    fmt, K = manifest.format, manifest.num_classes
    if fmt == "synthetic":
        size = manifest.img_size or 16
        tr = make_synthetic(manifest.synthetic_train, K, size, manifest.synthetic_noise, manifest.seed)
        te = make_synthetic(manifest.synthetic_test, K, size, manifest.synthetic_noise, manifest.seed + 1)
    elif fmt == "cifar_binary":
        _verify(manifest.train + manifest.test, manifest.checksums)

        def read_all(paths):
            parts = [read_cifar_binary(p, manifest.label_bytes) for p in paths]
            return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

        if not manifest.train:
            raise DatasetError("cifar_binary manifest lists no training files")
        tr = read_all(manifest.train)
        te = read_all(manifest.test) if manifest.test else None
    elif fmt == "directory":
        if not manifest.train:
            raise DatasetError("directory manifest lists no training directory")
        _verify(manifest.train + manifest.test, manifest.checksums)
        tr = read_image_directory(manifest.train[0])
        te = read_image_directory(manifest.test[0]) if manifest.test else None
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}")

    def build(pair):
        if pair is None:
            return None
        images, labels = pair
        if labels.min() < 0 or labels.max() >= K:
            raise DatasetError(f"labels outside [0, {K}) in {manifest.name}")
        return ImageDataset(_to_tensor(images, manifest.img_size), torch.from_numpy(labels), K)

    train, test = build(tr), build(te)
    if manifest.mean is not None and manifest.std is not None:
        mean, std = tuple(manifest.mean), tuple(manifest.std)
    else:
        mean, std = channel_stats(train.images)
    return DatasetBundle(train, test, mean, std)


# -- splitting ---------------------------------------------------------------

@dataclass
class SplitSpec:
    labeled_fraction: float = 0.10
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError(f"labeled_fraction must lie in (0, 1], got {self.labeled_fraction}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")


@dataclass
class Splits:
    labeled: np.ndarray
    unlabeled: np.ndarray
    val: np.ndarray


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder split of ``total`` proportional to ``weights``."""
    exact = total * weights / weights.sum()
    base = np.floor(exact).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:rest]] += 1
    return base


def split(labels, spec: SplitSpec) -> Splits:
    """Stratified split of the training set into labeled, unlabeled and validation indices.

    ``round(labeled_fraction * N)`` samples are labeled; the validation set is
    carved from inside that pool.  Everything else is unlabeled.
    """
    labels = np.asarray(labels)
    N = len(labels)
    classes, counts = np.unique(labels, return_counts=True)
    n_pool = int(math.floor(spec.labeled_fraction * N + 0.5))
    per_class = np.minimum(_apportion(n_pool, counts.astype(float)), counts)
    n_val = int(math.floor(spec.val_fraction * per_class.sum() + 0.5))
    val_per_class = np.minimum(_apportion(n_val, per_class.astype(float)), np.maximum(per_class - 1, 0))
    starved = classes[per_class - val_per_class < 1]
    if len(starved):
        raise DatasetError(
            f"classes {starved.tolist()} get no labeled sample at labeled_fraction="
            f"{spec.labeled_fraction}; raise the fraction"
        )
    rng = np.random.default_rng(spec.seed)
    lab, val, unl = [], [], []
    for c, n_c, v_c in zip(classes, per_class, val_per_class):
        idx = rng.permutation(np.flatnonzero(labels == c))
        val.append(idx[:v_c])
        lab.append(idx[v_c:n_c])
        unl.append(idx[n_c:])
    cat = lambda parts: np.sort(np.concatenate(parts)).astype(np.int64)
    return Splits(cat(lab), cat(unl), cat(val))


# -- batching ----------------------------------------------------------------

@dataclass
class BatchPair:
    """Dataset indices for one training step."""

    labeled: np.ndarray
    unlabeled: np.ndarray


def steps_per_epoch(n_labeled: int, n_unlabeled: int, B_l: int, B_u: int) -> int:
    if n_unlabeled:
        return math.ceil(n_unlabeled / B_u)
    return math.ceil(n_labeled / B_l)


def iterate_batch_pairs(splits: Splits, B_l: int = 16, B_u: int = 32, seed=0) -> Iterator[BatchPair]:
    """One epoch of (labeled, unlabeled) index batches.

    Every unlabeled index appears exactly once; the labeled pool is cycled,
    reshuffled on each pass, to fill ``B_l`` per step.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    labeled, unlabeled = np.asarray(splits.labeled), np.asarray(splits.unlabeled)
    if len(labeled) == 0:
        raise DatasetError("labeled split is empty")
    order_u = rng.permutation(unlabeled)
    n_steps = steps_per_epoch(len(labeled), len(unlabeled), B_l, B_u)
    stream: List[int] = []
    for step in range(n_steps):
        while len(stream) < B_l:
            stream.extend(rng.permutation(labeled).tolist())
        lab, stream = np.asarray(stream[:B_l], dtype=np.int64), stream[B_l:]
        yield BatchPair(lab, order_u[step * B_u:(step + 1) * B_u].astype(np.int64))
