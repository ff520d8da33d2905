"""Hyperspectral cube and label-map handling.

Dataset directory layout (bit-exact):
  header.json  UTF-8 JSON: {"height", "width", "bands", "num_classes",
               "class_names", "name"}
  cube.f32     little-endian float32, BIP order:
               index = ((row * W) + col) * B + band
  labels.u16   little-endian uint16, row-major, 0 = unlabeled
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor


class DatasetError(ValueError):
    """Raised on malformed dataset directories or invalid split requests."""


@dataclass
class DatasetMeta:
    height: int
    width: int
    bands: int
    num_classes: int
    class_names: list[str]
    name: str

    def validate(self) -> None:
        if min(self.height, self.width, self.bands) <= 0:
            raise DatasetError(f"non-positive dimensions in header: "
                               f"{self.height}x{self.width}x{self.bands}")
        if self.num_classes <= 0:
            raise DatasetError(f"non-positive class count {self.num_classes}")
        if len(self.class_names) != self.num_classes:
            raise DatasetError(f"{len(self.class_names)} class names for "
                               f"{self.num_classes} classes")


@dataclass
class HsiCube:
    """An H x W x B radiance/reflectance cube."""

    values: Tensor  # (H, W, B)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]


@dataclass
class LabelMap:
    """Per-pixel class ids: 0 = unlabeled, 1..C = classes."""

    labels: np.ndarray  # (H, W) uint16
    num_classes: int

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def class_population(self) -> np.ndarray:
        """Labeled pixel count per class, index 0 = class id 1."""
        counts = np.bincount(self.labels.ravel(), minlength=self.num_classes + 1)
        return counts[1:]


@dataclass(frozen=True)
class SampleRef:
    """Coordinates of one labeled pixel; label is a 0-based class index."""

    row: int
    col: int
    label: int


@dataclass
class DatasetSplit:
    train: list[SampleRef]
    test: list[SampleRef]
    train_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def parse_header(raw: dict) -> DatasetMeta:
    try:
        meta = DatasetMeta(
            height=int(raw["height"]),
            width=int(raw["width"]),
            bands=int(raw["bands"]),
            num_classes=int(raw["num_classes"]),
            class_names=list(raw["class_names"]),
            name=str(raw["name"]),
        )
    except KeyError as missing:
        raise DatasetError(f"header missing field {missing}") from None
    meta.validate()
    return meta


def load_dataset(directory) -> tuple[HsiCube, LabelMap, DatasetMeta]:
    """Load a cube, its labels, and metadata from a dataset directory."""
    directory = Path(directory)
    header_path = directory / "header.json"
    cube_path = directory / "cube.f32"
    labels_path = directory / "labels.u16"
    for p in (header_path, cube_path, labels_path):
        if not p.is_file():
            raise DatasetError(f"missing dataset file: {p}")

    meta = parse_header(json.loads(header_path.read_text(encoding="utf-8")))
    h, w, b = meta.height, meta.width, meta.bands

    raw = np.fromfile(cube_path, dtype="<f4")
    if raw.size != h * w * b:
        raise DatasetError(f"cube.f32 holds {raw.size} values, header declares {h * w * b}")
    values = raw.reshape(h, w, b)
    if not np.all(np.isfinite(values)):
        raise DatasetError("cube.f32 contains non-finite values")

    raw_labels = np.fromfile(labels_path, dtype="<u2")
    if raw_labels.size != h * w:
        raise DatasetError(f"labels.u16 holds {raw_labels.size} values, header declares {h * w}")
    labels = raw_labels.reshape(h, w)
    if labels.max(initial=0) > meta.num_classes:
        raise DatasetError(f"label {labels.max()} exceeds num_classes={meta.num_classes}")

    return HsiCube(Tensor(values)), LabelMap(labels, meta.num_classes), meta


def save_dataset(cube: HsiCube, labels: LabelMap, meta: DatasetMeta, directory) -> None:
    """Write a dataset directory in the documented binary layout."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "height": meta.height,
        "width": meta.width,
        "bands": meta.bands,
        "num_classes": meta.num_classes,
        "class_names": meta.class_names,
        "name": meta.name,
    }
    (directory / "header.json").write_text(
        json.dumps(header, sort_keys=True, separators=(",", ":")), encoding="utf-8")
    cube.values.data.astype("<f4").tofile(directory / "cube.f32")
    labels.labels.astype("<u2").tofile(directory / "labels.u16")


def normalize(cube: HsiCube) -> HsiCube:
    """Per-band min-max scaling to [0, 1]; constant bands map to 0."""
    v = cube.values.data
    lo = v.min(axis=(0, 1), keepdims=True)
    hi = v.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    safe = np.where(span == 0, 1.0, span)
    out = (v - lo) / safe
    out[np.broadcast_to(span == 0, out.shape)] = 0.0
    return HsiCube(Tensor(out.astype(v.dtype, copy=False)))


def _reflect_index(i: int, n: int) -> int:
    """Mirror an index across the borders without repeating edge pixels."""
    if n == 1:
        return 0
    period = 2 * n - 2
    i = i % period
    if i < 0:
        i += period
    return i if i < n else period - i


def extract_patch(cube: HsiCube, row: int, col: int, size: int) -> Tensor:
    """The size x size window centered on (row, col), mirror-padded at borders."""
    if size % 2 == 0:
        raise DatasetError(f"patch size must be odd, got {size}")
    h, w = cube.height, cube.width
    if not (0 <= row < h and 0 <= col < w):
        raise DatasetError(f"patch center ({row},{col}) outside {h}x{w} cube")
    half = size // 2
    rows = [_reflect_index(row + dr, h) for dr in range(-half, half + 1)]
    cols = [_reflect_index(col + dc, w) for dc in range(-half, half + 1)]
    patch = cube.values.data[np.ix_(rows, cols)]
    return Tensor(patch.copy())


def make_split(labels: LabelMap, train_counts=None, train_frac: float | None = None,
               rng: np.random.Generator | None = None) -> DatasetSplit:
    """Stratified random train/test split of all labeled pixels.

    Exactly one of `train_counts` (an int applied to every class, or a
    per-class sequence) and `train_frac` selects the train size per
    class; every remaining labeled pixel goes to test.
    """
    if (train_counts is None) == (train_frac is None):
        raise DatasetError("specify exactly one of train_counts / train_frac")
    if rng is None:
        raise DatasetError("make_split needs an rng for reproducibility")
    c = labels.num_classes
    population = labels.class_population()
    if train_counts is not None:
        if np.isscalar(train_counts):
            counts = np.full(c, int(train_counts), dtype=np.int64)
        else:
            counts = np.asarray(train_counts, dtype=np.int64)
            if counts.shape != (c,):
                raise DatasetError(f"need {c} per-class counts, got {counts.shape}")
    else:
        counts = np.round(population * float(train_frac)).astype(np.int64)
    for cls in range(c):
        if counts[cls] > population[cls]:
            raise DatasetError(f"class {cls + 1}: requested {counts[cls]} train pixels, "
                               f"only {population[cls]} available")

    train: list[SampleRef] = []
    test: list[SampleRef] = []
    for cls in range(c):
        rows, cols = np.nonzero(labels.labels == cls + 1)
        order = rng.permutation(rows.size)
        k = int(counts[cls])
        for rank, idx in enumerate(order):
            ref = SampleRef(int(rows[idx]), int(cols[idx]), cls)
            (train if rank < k else test).append(ref)
    test_counts = population - counts
    return DatasetSplit(train, test, counts, test_counts)


def make_synthetic(height: int, width: int, bands: int, num_classes: int,
                   noise: float, rng: np.random.Generator,
                   name: str = "synthetic") -> tuple[HsiCube, LabelMap, DatasetMeta]:
    """Generate a fully-labeled verification dataset.

    Class c (1-based) occupies a contiguous vertical stripe and carries a
    Gaussian spectral bump centered at band (c - 0.5) * B / C, plus iid
    Gaussian noise of the given sigma.
    """
    if num_classes > height * width:
        raise DatasetError("more classes than pixels")
    band_axis = np.arange(bands, dtype=np.float64)
    spread = max(bands / (2.0 * num_classes), 1.0)
    signatures = np.empty((num_classes, bands))
    for cls in range(num_classes):
        center = (cls + 0.5) * bands / num_classes
        signatures[cls] = np.exp(-0.5 * ((band_axis - center) / spread) ** 2)

    label_grid = np.minimum(np.arange(width) * num_classes // width, num_classes - 1)
    labels = np.broadcast_to(label_grid[None, :] + 1, (height, width)).astype(np.uint16)
    values = signatures[label_grid][None, :, :].repeat(height, axis=0).astype(np.float64)
    if noise > 0:
        values = values + rng.normal(scale=noise, size=values.shape)
    meta = DatasetMeta(height, width, bands, num_classes,
                       [f"class_{i + 1}" for i in range(num_classes)], name)
    return (HsiCube(Tensor(values.astype(np.float32))),
            LabelMap(np.ascontiguousarray(labels), num_classes), meta)


def batch_iter(cube: HsiCube, samples: list[SampleRef], patch_size: int,
               batch_size: int, shuffle: bool = False,
               rng: np.random.Generator | None = None, dtype=np.float32):
    """Yield (Tensor[N, S, S, B], labels[N]) batches covering every sample once.

    The final partial batch is emitted. With shuffle on, the order is a
    fresh permutation drawn from `rng` each call.
    """
    if not samples:
        raise DatasetError("empty sample list")
    if batch_size < 1:
        raise DatasetError(f"batch size must be >= 1, got {batch_size}")
    order = np.arange(len(samples))
    if shuffle:
        if rng is None:
            raise DatasetError("shuffled iteration needs an rng")
        order = rng.permutation(order)
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start : start + batch_size]]
        patches = np.stack([extract_patch(cube, s.row, s.col, patch_size).data for s in chunk])
        labels = np.array([s.label for s in chunk], dtype=np.int64)
        yield Tensor(patches.astype(dtype, copy=False)), labels
