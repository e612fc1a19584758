"""Shared fixtures: synthetic datasets shaped like the two real ones, plus
tiny and real-architecture adapters trained on them."""

import numpy as np
import pytest
from PIL import Image

from xbench import TrainConfig, build_adapter, default_spec, load_pbc, sample_eval_subset, split, tiny_spec

# Eight visually distinct blob colors, one per synthetic class.
_CLASS_COLORS = [
    (220, 40, 40), (40, 180, 40), (50, 80, 220), (220, 200, 40),
    (200, 60, 200), (40, 200, 200), (240, 140, 40), (120, 70, 20),
]
# Blob centers on a coarse grid, safely inside the center crop.
_CLASS_CENTERS = [
    (0.30, 0.30), (0.30, 0.70), (0.70, 0.30), (0.70, 0.70),
    (0.50, 0.50), (0.30, 0.50), (0.70, 0.50), (0.50, 0.30),
]


def synth_class_image(rng, class_id, width=360, height=363, radius=55):
    """Noisy gray image with a class-colored disk at a class-specific spot.

    The blob gives a fine-tuned classifier a localized, learnable cue, which
    is what the saliency and deletion-order checks rely on.
    """
    img = rng.normal(128.0, 12.0, size=(height, width, 3))
    cy, cx = _CLASS_CENTERS[class_id % 8]
    cy, cx = cy * height, cx * width
    yy, xx = np.mgrid[0:height, 0:width]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2
    color = np.array(_CLASS_COLORS[class_id % 8], dtype=np.float64)
    img[mask] = color + rng.normal(0.0, 6.0, size=(int(mask.sum()), 3))
    return Image.fromarray(np.clip(img, 0, 255).astype(np.uint8))


def build_image_tree(root, class_names, per_class, fmt="JPEG", width=360, height=363, seed=0):
    """Write <root>/<class>/<class>_<i>.<ext> synthetic images."""
    rng = np.random.default_rng(seed)
    ext = ".jpg" if fmt == "JPEG" else ".png"
    for class_id, name in enumerate(class_names):
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        count = per_class[class_id] if isinstance(per_class, (list, tuple)) else per_class
        for i in range(count):
            img = synth_class_image(rng, class_id, width=width, height=height)
            img.save(class_dir / f"{name}_{i:04d}{ext}", format=fmt)
    return root


PBC_FIXTURE_CLASSES = (
    "basophil", "eosinophil", "erythroblast", "ig",
    "lymphocyte", "monocyte", "neutrophil", "platelet",
)


@pytest.fixture(scope="session")
def pbc_root(tmp_path_factory):
    """PBC-shaped tree: 8 classes x 45 JPEGs at the real 360x363 size."""
    root = tmp_path_factory.mktemp("pbc")
    return build_image_tree(root, PBC_FIXTURE_CLASSES, per_class=45, fmt="JPEG", seed=11)


@pytest.fixture(scope="session")
def mini_root(tmp_path_factory):
    """Small 3-class tree for runner/CLI tests (64x64 JPEGs, fast decode)."""
    root = tmp_path_factory.mktemp("mini")
    return build_image_tree(
        root, ("alpha", "beta", "gamma"), per_class=12, fmt="JPEG",
        width=64, height=64, seed=5,
    )


@pytest.fixture(scope="session")
def tiny_vit_adapter():
    return build_adapter(tiny_spec("vit_b16"), 3, pretrained=False, seed=0)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_deit(pbc_root):
    """Real-architecture DeiT-tiny fine-tuned one epoch on a 320-image
    subsample (40 per class), plus a 40-image evaluation subset (5 per class).

    Session-scoped: the trained-model acceptance criteria share it. The
    training wall time is returned so each criterion can count it against
    its own runtime budget.
    """
    import time

    collection = load_pbc(pbc_root)
    parts = split(collection, val_fraction=1 / 9, seed=7)  # 40 train + 5 val per class
    train_set = sample_eval_subset(parts.train, per_class=40, seed=7)
    assert len(train_set) == 320
    eval_set = sample_eval_subset(parts.validation, per_class=5, seed=7)
    assert len(eval_set) == 40

    t0 = time.monotonic()
    adapter = build_adapter(default_spec("deit_t16"), 8, pretrained=False, seed=7)
    config = TrainConfig(batch_size=32, epochs=1, learning_rate=1e-3, seed=7)
    history = adapter.fine_tune(train_set, config)
    train_seconds = time.monotonic() - t0
    return {
        "adapter": adapter,
        "eval_set": eval_set,
        "history": history,
        "train_seconds": train_seconds,
    }
