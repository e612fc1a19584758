"""Dataset loading, preprocessing, deterministic splitting and subsampling.

Two directory layouts are supported:
  PBC:  <root>/<class_name>/*.jpg   (eight blood-cell categories)
  BUSI: <root>/{benign,malignant,normal}/*.png  (``*_mask*`` files excluded)
"""

from __future__ import annotations

import logging
from collections import Counter
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SIZE = 224
# All four supported checkpoints were pretrained with these channel statistics.
CHANNEL_MEAN = (0.485, 0.456, 0.406)
CHANNEL_STD = (0.229, 0.224, 0.225)

BUSI_CLASSES = ("benign", "malignant", "normal")

_PBC_EXTENSIONS = (".jpg", ".jpeg")
_BUSI_EXTENSIONS = (".png",)


class DatasetError(RuntimeError):
    """Fatal dataset configuration problem (missing root, no classes, ...)."""


class ImageDecodeError(RuntimeError):
    """An image file could not be decoded. Carries the offending path."""

    def __init__(self, path: str, cause: Exception):
        super().__init__(f"cannot decode image {path!r}: {cause}")
        self.path = path


@dataclass(frozen=True)
class ImageSample:
    """One preprocessed image: normalized (3, 224, 224) pixels plus label info."""

    pixels: np.ndarray
    label: int
    class_names: tuple[str, ...]
    source_path: str

    def __post_init__(self):
        if self.pixels.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"pixels must be (3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {self.pixels.shape}")
        if not 0 <= self.label < len(self.class_names):
            raise ValueError(f"label {self.label} outside [0, {len(self.class_names)})")


@dataclass(frozen=True)
class LoadReport:
    """Per-load bookkeeping: how many files were kept and which were skipped."""

    total: int
    skipped: tuple[str, ...] = ()

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)


def _resized_size(width: int, height: int, target: int) -> tuple[int, int]:
    # Shorter side to `target`; the longer side scales with rounding, so a
    # 360x363 input lands on 224x226 (not 225 as truncation would give).
    if width <= height:
        return target, int(round(height * target / width))
    return int(round(width * target / height)), target


def preprocess(image: Image.Image) -> np.ndarray:
    """Resize shorter side to 224 (bilinear), center-crop 224x224, scale to [0, 1],
    then standardize per channel. Returns float32 (3, 224, 224).

    Odd crop leftovers are floored: a 226-high resize crops 1 px at the top
    and 1 px at the bottom; a 225-high resize would crop 0 at the top.
    """
    rgb = image.convert("RGB")
    new_w, new_h = _resized_size(*rgb.size, target=IMAGE_SIZE)
    resized = rgb.resize((new_w, new_h), Image.BILINEAR)
    left = (new_w - IMAGE_SIZE) // 2
    top = (new_h - IMAGE_SIZE) // 2
    cropped = resized.crop((left, top, left + IMAGE_SIZE, top + IMAGE_SIZE))
    pixels = np.asarray(cropped, dtype=np.float32).transpose(2, 0, 1) / 255.0
    mean = np.asarray(CHANNEL_MEAN, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(CHANNEL_STD, dtype=np.float32).reshape(3, 1, 1)
    return (pixels - mean) / std


def denormalize(pixels: np.ndarray) -> np.ndarray:
    """Invert channel standardization back to [0, 1] RGB (same CHW layout)."""
    mean = np.asarray(CHANNEL_MEAN, dtype=np.float32).reshape(3, 1, 1)
    std = np.asarray(CHANNEL_STD, dtype=np.float32).reshape(3, 1, 1)
    return np.clip(pixels * std + mean, 0.0, 1.0)


def load_sample_image(path: Path | str) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except Exception as exc:  # PIL raises a zoo of decode errors
        raise ImageDecodeError(str(path), exc) from exc


class ImageCollection(Sequence):
    """Ordered, lazily-decoded set of labeled images under one dataset root.

    Records are (dataset-relative path, label) pairs sorted by path, so
    iteration order is stable across runs. Pixels are decoded and
    preprocessed on access.
    """

    def __init__(
        self,
        root: Path | str,
        records: Sequence[tuple[str, int]],
        class_names: Sequence[str],
        report: LoadReport | None = None,
    ):
        self.root = Path(root)
        self.records = list(records)
        self.class_names = tuple(class_names)
        self.report = report

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> ImageSample:
        rel_path, label = self.records[index]
        image = load_sample_image(self.root / rel_path)
        return ImageSample(
            pixels=preprocess(image),
            label=label,
            class_names=self.class_names,
            source_path=rel_path,
        )

    def __iter__(self) -> Iterator[ImageSample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.records], dtype=np.int64)

    @property
    def source_paths(self) -> list[str]:
        return [path for path, _ in self.records]

    def class_counts(self) -> Counter:
        return Counter(self.labels.tolist())

    def subset(self, indices: Sequence[int]) -> "ImageCollection":
        """New collection over the given record indices, order preserved."""
        records = [self.records[i] for i in indices]
        return ImageCollection(self.root, records, self.class_names)


def _scan_tree(
    root: Path,
    class_names: Sequence[str],
    extensions: tuple[str, ...],
    exclude_substring: str | None = None,
) -> tuple[list[tuple[str, int]], LoadReport]:
    records: list[tuple[str, int]] = []
    skipped: list[str] = []
    for label, name in enumerate(class_names):
        class_dir = root / name
        for path in sorted(class_dir.iterdir()):
            if not path.is_file() or path.suffix.lower() not in extensions:
                continue
            if exclude_substring and exclude_substring in path.name:
                continue
            rel = str(path.relative_to(root))
            try:
                with Image.open(path) as img:
                    img.verify()
            except Exception as exc:
                logger.warning("skipping unreadable image %s (%s)", path, exc)
                skipped.append(rel)
                continue
            records.append((rel, label))
    records.sort(key=lambda rec: rec[0])
    return records, LoadReport(total=len(records), skipped=tuple(skipped))


def load_pbc(root: Path | str) -> ImageCollection:
    """Load the blood-cell dataset: one subdirectory of JPEGs per class.

    Class names are the subdirectory names in sorted order (for the public
    dump: basophil, eosinophil, erythroblast, ig, lymphocyte, monocyte,
    neutrophil, platelet). Unreadable files are skipped and counted in the
    collection's LoadReport.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    class_names = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not class_names:
        raise DatasetError(f"no classes found under {root} (expected one subdirectory per class)")
    records, report = _scan_tree(root, class_names, _PBC_EXTENSIONS)
    return ImageCollection(root, records, class_names, report)


def load_busi(root: Path | str) -> ImageCollection:
    """Load the breast-ultrasound dataset (benign/malignant/normal PNGs).

    Files whose names contain ``_mask`` are segmentation masks shipped with
    the public dump and are excluded.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    missing = [name for name in BUSI_CLASSES if not (root / name).is_dir()]
    if missing:
        raise DatasetError(f"no classes found under {root}: missing {missing}")
    records, report = _scan_tree(root, BUSI_CLASSES, _BUSI_EXTENSIONS, exclude_substring="_mask")
    return ImageCollection(root, records, BUSI_CLASSES, report)


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/validation partition of one collection."""

    train: ImageCollection
    validation: ImageCollection
    seed: int
    stratified: bool = True

    def __post_init__(self):
        overlap = set(self.train.source_paths) & set(self.validation.source_paths)
        if overlap:
            raise ValueError(f"train/validation overlap on {len(overlap)} paths")


def _validation_quota(counts: list[int], val_fraction: float) -> list[int]:
    # Largest-remainder apportionment: per-class counts stay within one
    # sample of fraction * class size while the total hits
    # round(fraction * N) exactly.
    total_target = int(round(val_fraction * sum(counts)))
    quotas = [val_fraction * n for n in counts]
    base = [int(np.floor(q)) for q in quotas]
    leftover = total_target - sum(base)
    order = sorted(range(len(counts)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:max(leftover, 0)]:
        base[i] += 1
    return base


def split(collection: ImageCollection, val_fraction: float, seed: int) -> DatasetSplit:
    """Deterministic stratified split. Identical inputs and seed give an
    identical partition; per-class validation sizes follow val_fraction
    within one sample."""
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    labels = collection.labels
    classes = sorted(set(labels.tolist()))
    for c in classes:
        if int((labels == c).sum()) < 2:
            raise DatasetError(
                f"class {collection.class_names[c]!r} has fewer than 2 samples; cannot split"
            )
    counts = [int((labels == c).sum()) for c in classes]
    quotas = _validation_quota(counts, val_fraction)

    rng = np.random.default_rng(seed)
    val_indices: set[int] = set()
    for c, n_val in zip(classes, quotas):
        class_idx = np.flatnonzero(labels == c)
        chosen = rng.permutation(class_idx)[:n_val]
        val_indices.update(int(i) for i in chosen)

    train_idx = [i for i in range(len(collection)) if i not in val_indices]
    val_idx = [i for i in range(len(collection)) if i in val_indices]
    return DatasetSplit(
        train=collection.subset(train_idx),
        validation=collection.subset(val_idx),
        seed=seed,
        stratified=True,
    )


def sample_eval_subset(validation: ImageCollection, per_class: int, seed: int) -> ImageCollection:
    """Pick exactly per_class validation samples from every class, seeded."""
    if per_class < 0:
        raise ValueError("per_class must be non-negative")
    labels = validation.labels
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for c in sorted(set(labels.tolist())):
        class_idx = np.flatnonzero(labels == c)
        if len(class_idx) < per_class:
            raise DatasetError(
                f"class {validation.class_names[c]!r} has only {len(class_idx)} "
                f"validation samples, need {per_class}"
            )
        chosen.extend(int(i) for i in rng.permutation(class_idx)[:per_class])
    return validation.subset(sorted(chosen))


def write_split_manifest(dataset_split: DatasetSplit, path: Path | str) -> None:
    """Emit one ``<source_path>\\t<train|val>`` row per sample, in collection order."""
    assignment = {p: "train" for p in dataset_split.train.source_paths}
    assignment.update({p: "val" for p in dataset_split.validation.source_paths})
    lines = [f"{p}\t{tag}" for p, tag in sorted(assignment.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split_manifest(collection: ImageCollection, path: Path | str, seed: int = 0) -> DatasetSplit:
    """Rebuild a split of `collection` from a manifest written earlier."""
    assignment: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        source_path, tag = line.rsplit("\t", 1)
        if tag not in ("train", "val"):
            raise DatasetError(f"bad manifest tag {tag!r} in {path}")
        assignment[source_path] = tag
    missing = set(assignment) - set(collection.source_paths)
    if missing:
        raise DatasetError(f"manifest {path} names {len(missing)} paths absent from the collection")
    train_idx = [i for i, p in enumerate(collection.source_paths) if assignment.get(p) == "train"]
    val_idx = [i for i, p in enumerate(collection.source_paths) if assignment.get(p) == "val"]
    return DatasetSplit(
        train=collection.subset(train_idx),
        validation=collection.subset(val_idx),
        seed=seed,
    )
