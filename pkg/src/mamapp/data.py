"""Image-folder ingestion, stratified splitting, preprocessing and augmentation.

Expected layout is ``root/<class_name>/*.{jpg,jpeg,png}``. Class ids follow the
lexicographic order of the class directory names.
"""
from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .tensor import Tensor

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}
SPLITS = ("train", "val", "test")


class IngestionError(OSError):
    """The dataset directory is missing, unreadable or has too few classes."""


@dataclass
class DatasetIndex:
    classes: list[str]
    samples: list[tuple[str, int]]
    split: list[Optional[str]] = field(default_factory=list)
    seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.samples)

    def class_sizes(self) -> list[int]:
        counts = [0] * len(self.classes)
        for _, c in self.samples:
            counts[c] += 1
        return counts

    def indices(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [i for i, s in enumerate(self.split) if s == split]

    def split_table(self) -> list[tuple[str, int, int, int, int]]:
        """Per-class (name, train, val, test, total) rows."""
        rows = []
        for c, name in enumerate(self.classes):
            tags = [s for (_, cid), s in zip(self.samples, self.split) if cid == c]
            rows.append((name, tags.count("train"), tags.count("val"), tags.count("test"), len(tags)))
        return rows


def _is_image(path: Path) -> bool:
    return path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES


def _decodable(path: Path) -> bool:
    try:
        with Image.open(path) as im:
            im.verify()
        return True
    except (UnidentifiedImageError, OSError, SyntaxError):
        return False


def index_dataset(root, verify: bool = True) -> DatasetIndex:
    """Index every PNG/JPEG under each class directory of ``root``.

    Undecodable files are skipped with a warning when ``verify`` is set.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a readable directory")
    try:
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    except OSError as exc:
        raise IngestionError(f"cannot list dataset root {root}: {exc}") from exc
    if len(class_dirs) < 2:
        raise IngestionError(f"dataset root {root} needs at least 2 class directories, "
                             f"found {len(class_dirs)}")
    classes, samples = [], []
    for cid, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.rglob("*") if _is_image(p))
        if verify:
            bad = {p for p in files if not _decodable(p)}
            for p in sorted(bad):
                log.warning("skipping undecodable image %s", p)
            files = [p for p in files if p not in bad]
        if not files:
            raise IngestionError(f"class directory {cdir} contains no decodable images")
        classes.append(cdir.name)
        samples.extend((str(p), cid) for p in files)
    return DatasetIndex(classes=classes, samples=samples, split=[None] * len(samples))


def split_counts(n: int) -> tuple[int, int, int]:
    """(train, val, test) sizes for a class of ``n`` samples.

    Floor rule in integer arithmetic: 0.70*n and 0.15*n are not exact in
    binary floating point (0.7 * 90 floors to 62).
    """
    train = 70 * n // 100
    val = 15 * n // 100
    return train, val, n - train - val


def stratified_split(index: DatasetIndex, seed: int) -> DatasetIndex:
    """Shuffle each class with a seeded RNG, then cut it 70/15/15 by :func:`split_counts`."""
    rng = np.random.default_rng(seed)
    split: list[Optional[str]] = [None] * len(index.samples)
    for c, name in enumerate(index.classes):
        members = [i for i, (_, cid) in enumerate(index.samples) if cid == c]
        if len(members) < 3:
            warnings.warn(f"class {name!r} has only {len(members)} samples; some splits will be empty")
        order = rng.permutation(len(members))
        n_train, n_val, _ = split_counts(len(members))
        for rank, j in enumerate(order):
            split[members[j]] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return replace(index, split=split, seed=seed)


def write_manifest(index: DatasetIndex, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "class", "split"])
        for (p, c), s in zip(index.samples, index.split):
            w.writerow([p, index.classes[c], s or ""])


def read_manifest(path) -> DatasetIndex:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    classes = sorted({r["class"] for r in rows})
    cid = {c: i for i, c in enumerate(classes)}
    return DatasetIndex(classes=classes,
                        samples=[(r["path"], cid[r["class"]]) for r in rows],
                        split=[r["split"] or None for r in rows])


def balanced_subset(index: DatasetIndex, per_class: int, seed: int = 0,
                    split: str = "train") -> DatasetIndex:
    """Pick ``per_class`` samples of every class and tag them all with ``split``."""
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(len(index.classes)):
        members = [i for i, (_, cid) in enumerate(index.samples) if cid == c]
        if len(members) < per_class:
            raise ValueError(f"class {index.classes[c]!r} has {len(members)} < {per_class} samples")
        chosen.extend(sorted(rng.choice(members, per_class, replace=False).tolist()))
    return DatasetIndex(classes=list(index.classes), samples=[index.samples[i] for i in chosen],
                        split=[split] * len(chosen), seed=seed)


# ---------------------------------------------------------------- decoding
def load_and_preprocess(path, size: int | tuple[int, int] = 256) -> np.ndarray:
    """Decode -> RGB -> bilinear resize -> [0, 1] float32, channel-first ``[3, H, W]``."""
    h, w = (size, size) if isinstance(size, int) else size
    with Image.open(path) as im:
        im = im.convert("RGB")   # grayscale is replicated, palettes expanded
        if im.size != (w, h):
            im = im.resize((w, h), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


# ------------------------------------------------------------ augmentation
@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    angle: float = 0.0
    brightness: float = 1.0


def sample_augment(rng: np.random.Generator, max_angle: float = 10.0,
                   jitter: float = 0.3) -> AugmentParams:
    return AugmentParams(hflip=bool(rng.random() < 0.5),
                         vflip=bool(rng.random() < 0.5),
                         angle=float(rng.uniform(-max_angle, max_angle)),
                         brightness=float(rng.uniform(1.0 - jitter, 1.0 + jitter)))


def apply_augment(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Flip, flip, rotate (bilinear, zero fill), scale brightness, clamp to [0, 1]."""
    out = image
    if params.hflip:
        out = out[:, :, ::-1]
    if params.vflip:
        out = out[:, ::-1, :]
    if params.angle != 0.0:
        out = ndimage.rotate(out, params.angle, axes=(2, 1), reshape=False, order=1,
                             mode="constant", cval=0.0)
    if params.brightness != 1.0:
        out = out * np.float32(params.brightness)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return apply_augment(image, sample_augment(rng))


# ------------------------------------------------------------------ batches
@dataclass
class Batch:
    images: Tensor
    labels: np.ndarray
    paths: list[str]


def _epoch_rng(seed: int, epoch: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, *extra])


def make_batches(index: DatasetIndex, split: str, batch_size: int, shuffle_seed: int = 0,
                 epoch: int = 0, image_size: int | tuple[int, int] = 256,
                 augment_images: Optional[bool] = None, workers: int = 1,
                 normalize: Optional[tuple[Sequence[float], Sequence[float]]] = None) -> Iterator[Batch]:
    """Yield batches of one split.

    Training batches are reshuffled each epoch from ``(shuffle_seed, epoch)``
    and augmented with a per-sample RNG derived from the same pair and the
    sample's position, so worker scheduling never changes the output.
    Validation and test batches keep index order and are never augmented.
    The last partial batch is kept.
    """
    members = index.indices(split)
    if not members:
        raise ValueError(f"split {split!r} is empty")
    is_train = split == "train"
    if augment_images is None:
        augment_images = is_train
    if is_train:
        members = [members[i] for i in _epoch_rng(shuffle_seed, epoch).permutation(len(members))]
    if normalize is not None:
        mean = np.asarray(normalize[0], dtype=np.float32)[:, None, None]
        std = np.asarray(normalize[1], dtype=np.float32)[:, None, None]

    def load(pos_and_idx):
        pos, i = pos_and_idx
        img = load_and_preprocess(index.samples[i][0], image_size)
        if augment_images:
            img = augment(img, _epoch_rng(shuffle_seed, epoch, pos, 1))
        if normalize is not None:
            img = (img - mean) / std
        return img

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for start in range(0, len(members), batch_size):
            chunk = list(enumerate(members[start:start + batch_size], start))
            imgs = list(pool.map(load, chunk)) if pool else [load(c) for c in chunk]
            yield Batch(images=Tensor(np.stack(imgs)),
                        labels=np.array([index.samples[i][1] for _, i in chunk], dtype=np.int64),
                        paths=[index.samples[i][0] for _, i in chunk])
    finally:
        if pool:
            pool.shutdown()
