"""Datasets, prior images and client shards."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


class ManifestError(DatasetError):
    pass


class PartitionError(DatasetError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Images (N x H x W x C, float in [0, 1]) with integer labels.

    ``ids`` names each sample (file path or synthetic id) and is what the
    IIP metric reports as a match.
    """

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    ids: tuple[str, ...]

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"images must be N x H x W x C, got shape {images.shape}")
        if images.shape[3] not in (1, 3):
            raise DatasetError(f"channels must be 1 or 3, got {images.shape[3]}")
        if labels.shape != (images.shape[0],):
            raise DatasetError("one label per image required")
        if len(self.ids) != images.shape[0]:
            raise DatasetError("one id per image required")
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.class_names)):
            raise DatasetError("label outside [0, num_classes)")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "ids", tuple(self.ids))

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def channels(self) -> int:
        return int(self.images.shape[3])

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return [(self.images[i], int(self.labels[i])) for i in range(len(self))]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.class_names, tuple(self.ids[i] for i in idx))

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.concatenate([self.images, other.images]),
            np.concatenate([self.labels, other.labels]),
            self.class_names,
            self.ids + other.ids,
        )


@dataclass(frozen=True)
class PriorImage:
    image: np.ndarray
    source: str


@dataclass(frozen=True)
class ClientShard:
    client_id: str
    train: Dataset
    valid: Dataset


# ---------------------------------------------------------------- file IO


def _read_png(path: Path, size: int | None, channels: int | None) -> np.ndarray:
    with Image.open(path) as im:
        mode = {1: "L", 3: "RGB"}.get(channels or 0) or ("L" if im.mode in ("L", "I", "I;16", "1") else "RGB")
        im = im.convert(mode)
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def load_dataset(
    root_path: str | Path,
    manifest: str | Path,
    image_size: int | None = None,
    channels: int | None = None,
    class_names: Sequence[str] | None = None,
) -> Dataset:
    """Load the images listed in a ``path,label`` CSV manifest.

    Paths are relative to ``root_path``. Samples are sorted by path. Labels
    are class names; when ``class_names`` is omitted the sorted set of
    labels in the manifest is used.
    """
    root = Path(root_path)
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"path", "label"} <= set(reader.fieldnames):
            raise ManifestError(f"{manifest}: manifest needs columns 'path,label'")
        rows = sorted((r["path"], r["label"].strip()) for r in reader)
    if not rows:
        raise DatasetError("empty dataset")
    names = tuple(class_names) if class_names is not None else tuple(sorted({lab for _, lab in rows}))
    lookup = {n: i for i, n in enumerate(names)}
    images, labels = [], []
    for rel, lab in rows:
        if lab not in lookup:
            raise ManifestError(f"{manifest}: label {lab!r} for {rel} not in class set {list(names)}")
        path = root / rel
        if not path.is_file():
            raise DatasetError(f"cannot load image: {path} does not exist")
        try:
            images.append(_read_png(path, image_size, channels))
        except OSError as exc:
            raise DatasetError(f"cannot load image {path}: {exc}") from exc
        labels.append(lookup[lab])
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"images differ in shape {sorted(shapes)}; set image_size")
    return Dataset(np.stack(images), np.array(labels), names, tuple(r for r, _ in rows))


def write_dataset(dataset: Dataset, root: str | Path, manifest_name: str = "manifest.csv") -> Path:
    """Write 8-bit PNGs and a manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / manifest_name
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        for i in range(len(dataset)):
            rel = f"{dataset.ids[i]}.png" if not dataset.ids[i].endswith(".png") else dataset.ids[i]
            img = np.clip(np.rint(dataset.images[i] * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(img[..., 0] if img.shape[2] == 1 else img).save(root / rel)
            w.writerow([rel, dataset.class_names[dataset.labels[i]]])
    return manifest


def save_png(image: np.ndarray, path: str | Path) -> None:
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img[..., 0] if img.shape[-1] == 1 else img).save(path)


# ---------------------------------------------------------------- synthetic data


def _ellipse(xx, yy, cx, cy, rx, ry):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _gray_phantom(rng: np.random.Generator, label: int, n: int) -> np.ndarray:
    """Chest-radiograph-like phantom: body, two dark lungs, bright spine."""
    ax = np.linspace(-1, 1, n)
    xx, yy = np.meshgrid(ax, ax)
    img = np.full((n, n), 0.05)
    dx, dy = rng.normal(0, 0.06, 2)
    img[_ellipse(xx, yy, dx, dy, 0.85 + rng.normal(0, 0.04), 0.95)] = 0.6
    for side in (-1, 1):
        lung = _ellipse(xx, yy, dx + side * 0.38, dy - 0.05, 0.24 + rng.normal(0, 0.03), 0.55 + rng.normal(0, 0.05))
        img[lung] = 0.2 + rng.uniform(0, 0.08)
    img[(np.abs(xx - dx) < 0.08) & (np.abs(yy - dy) < 0.9)] = 0.8
    # per-image detail so that each sample is individually identifiable
    for _ in range(rng.integers(3, 7)):
        cx, cy = rng.uniform(-0.8, 0.8, 2)
        r = rng.uniform(0.06, 0.25)
        img += rng.uniform(-0.3, 0.3) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
    if label == 1:
        # a faint opacity inside one lung; deliberately close to the blob distribution
        side = rng.choice([-1, 1])
        cx, cy = dx + side * 0.38, dy + rng.uniform(-0.3, 0.3)
        img += rng.uniform(0.25, 0.4) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 0.2**2))
    return img[..., None]


def _color_phantom(rng: np.random.Generator, label: int, n: int) -> np.ndarray:
    """Fundus-like phantom: orange disc, bright optic disc, dark vessels."""
    ax = np.linspace(-1, 1, n)
    xx, yy = np.meshgrid(ax, ax)
    img = np.zeros((n, n, 3))
    disc = _ellipse(xx, yy, 0, 0, 0.9, 0.9)
    tint = np.array([0.75, 0.35, 0.15]) + rng.normal(0, 0.04, 3)
    img[disc] = tint
    ox = rng.choice([-1, 1]) * 0.45 + rng.normal(0, 0.05)
    oy = rng.normal(0, 0.08)
    od = np.exp(-((xx - ox) ** 2 + (yy - oy) ** 2) / (2 * 0.12**2))
    img += od[..., None] * np.array([0.25, 0.45, 0.3])
    for _ in range(rng.integers(2, 5)):
        ang = rng.uniform(0, np.pi)
        dist = np.abs((xx - ox) * np.sin(ang) - (yy - oy) * np.cos(ang))
        img -= (0.25 * np.exp(-dist**2 / (2 * 0.04**2)) * disc)[..., None] * np.array([1.0, 0.8, 0.5])
    if label == 1:
        for _ in range(rng.integers(2, 5)):
            cx, cy = rng.uniform(-0.5, 0.5, 2)
            img += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * 0.07**2))[..., None] * np.array([0.3, 0.3, 0.1])
    return img


def synthetic_dataset(
    n: int,
    image_size: int = 16,
    channels: int = 1,
    num_classes: int = 2,
    seed: int = 0,
    prefix: str = "img",
    supersample: int = 4,
) -> Dataset:
    """Seeded phantom images with class-dependent structure.

    Rendering happens at ``supersample`` times the target size and is
    block-averaged down. Pixel values are quantised to multiples of 1/255
    so that a PNG round trip is exact.
    """
    if num_classes != 2:
        raise DatasetError("the phantom generator draws two classes")
    rng = np.random.default_rng(seed)
    big = image_size * supersample
    render = _gray_phantom if channels == 1 else _color_phantom
    images, labels = [], []
    for i in range(n):
        label = i % num_classes
        hi = render(rng, label, big) + rng.normal(0, 0.02, (big, big, channels))
        lo = hi.reshape(image_size, supersample, image_size, supersample, channels).mean(axis=(1, 3))
        images.append(np.rint(np.clip(lo, 0, 1) * 255.0) / 255.0)
        labels.append(label)
    names = ("normal", "positive") if channels == 1 else ("healthy", "referable")
    return Dataset(np.stack(images), np.array(labels), names, tuple(f"{prefix}{i:05d}" for i in range(n)))


# ---------------------------------------------------------------- priors and shards


def compute_prior(prior_dataset: Dataset, like: Dataset | None = None, source: str = "") -> PriorImage:
    """Pixel-wise mean image of ``prior_dataset``."""
    if len(prior_dataset) == 0:
        raise DatasetError("prior dataset is empty")
    if like is not None and prior_dataset.shape != like.shape:
        raise DatasetError(f"prior shape {prior_dataset.shape} does not match task images {like.shape}")
    mean = prior_dataset.images.mean(axis=0)
    return PriorImage(mean, source or f"mean of {len(prior_dataset)} images")


def split(dataset: Dataset, n_first: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded random split into ``n_first`` samples and the rest."""
    if n_first > len(dataset):
        raise PartitionError(f"cannot take {n_first} of {len(dataset)} samples")
    perm = np.random.default_rng(seed).permutation(len(dataset))
    return dataset.subset(np.sort(perm[:n_first])), dataset.subset(np.sort(perm[n_first:]))


def _take(pools: list[list[int]], count: int, balanced: bool, rng, client_id: str, what: str) -> list[int]:
    k = len(pools)
    if balanced:
        per = [count // k + (1 if c < count % k else 0) for c in range(k)]
    else:
        flat = sorted(i for pool in pools for i in pool)
        if len(flat) < count:
            raise PartitionError(f"client {client_id}: {what} needs {count} samples, {len(flat)} left")
        chosen = set(rng.choice(flat, size=count, replace=False).tolist()) if count else set()
        for pool in pools:
            pool[:] = [i for i in pool if i not in chosen]
        return sorted(chosen)
    out = []
    for c, need in enumerate(per):
        if len(pools[c]) < need:
            raise PartitionError(
                f"client {client_id}: {what} needs {need} samples of class {c}, only {len(pools[c])} left"
            )
        out.extend(pools[c][:need])
        del pools[c][:need]
    return sorted(out)


def partition(dataset: Dataset, plan, seed: int = 0) -> list[ClientShard]:
    """Split ``dataset`` into client shards.

    ``plan`` is a FederationPlan or any iterable of client entries exposing
    ``client_id``, ``n_train``, ``n_valid``, ``balanced`` and ``shares_with``.
    A client with ``shares_with`` set draws its training images from the
    named client's training shard and reuses that client's validation set.
    Everyone else gets disjoint train and validation samples.
    """
    clients = list(getattr(plan, "clients", plan))
    rng = np.random.default_rng(seed)
    pools = [list(rng.permutation(np.flatnonzero(dataset.labels == c))) for c in range(dataset.num_classes)]
    pools = [[int(i) for i in p] for p in pools]
    train_idx: dict[str, list[int]] = {}
    valid_idx: dict[str, list[int]] = {}
    for c in clients:
        if c.shares_with:
            continue
        train_idx[c.client_id] = _take(pools, c.n_train, c.balanced, rng, c.client_id, "train")
        valid_idx[c.client_id] = _take(pools, c.n_valid, True, rng, c.client_id, "valid")
    for c in clients:
        if not c.shares_with:
            continue
        if c.shares_with not in train_idx:
            raise PartitionError(f"client {c.client_id} shares with unknown client {c.shares_with!r}")
        source = train_idx[c.shares_with]
        if c.n_train > len(source):
            raise PartitionError(f"client {c.client_id} wants {c.n_train} images of {c.shares_with}'s {len(source)}")
        train_idx[c.client_id] = sorted(int(i) for i in rng.choice(source, size=c.n_train, replace=False))
        valid_idx[c.client_id] = valid_idx[c.shares_with]
    return [
        ClientShard(c.client_id, dataset.subset(train_idx[c.client_id]), dataset.subset(valid_idx[c.client_id]))
        for c in clients
    ]


def iter_ids(shards: Iterable[ClientShard]) -> list[str]:
    return [i for s in shards for i in s.train.ids]
