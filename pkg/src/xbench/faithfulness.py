"""Insertion/deletion faithfulness scoring for saliency maps.

Pixels are ranked by saliency; the insertion curve tracks the target-class
probability as the top pixels are revealed onto a baseline image, the
deletion curve as they are replaced by baseline values. Curves are scored
with the trapezoid rule over the fraction-perturbed axis, normalized to
[0, 1] so AUCs are comparable across step counts.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .explainers import SaliencyMap

logger = logging.getLogger(__name__)

PredictFn = Callable[[np.ndarray], np.ndarray]  # (N, 3, H, W) -> (N, classes)


class Direction(str, Enum):
    INSERTION = "insertion"
    DELETION = "deletion"


class BaselineKind(str, Enum):
    BLUR = "blur"
    BLANK = "blank"


@dataclass(frozen=True)
class BaselineSpec:
    kind: BaselineKind
    blur_sigma: float = 11.0

    def __post_init__(self):
        if self.kind is BaselineKind.BLUR and self.blur_sigma <= 0:
            raise ValueError("blur_sigma must be positive for BLUR baselines")


# The insertion default reveals pixels onto a heavy blur; deletion blanks
# them (zeros in normalized space). Both are configurable per run.
INSERTION_BASELINE = BaselineSpec(BaselineKind.BLUR, blur_sigma=11.0)
DELETION_BASELINE = BaselineSpec(BaselineKind.BLANK)

DEFAULT_STEPS = 50


@dataclass
class PixelOrdering:
    """Permutation of flattened pixel positions, descending saliency.

    Ties are broken row-major (earlier flat position first).
    """

    indices: np.ndarray
    shape: tuple[int, int]

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        n = self.shape[0] * self.shape[1]
        if self.indices.shape != (n,) or not np.array_equal(np.sort(self.indices), np.arange(n)):
            raise ValueError("indices must be a permutation of all pixel positions")

    def reversed(self) -> "PixelOrdering":
        return PixelOrdering(self.indices[::-1].copy(), self.shape)


def rank_pixels(saliency: SaliencyMap | np.ndarray) -> PixelOrdering:
    """Stable descending sort of pixels; equal values stay in row-major order."""
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    if values.ndim != 2:
        raise ValueError("saliency must be 2-D")
    order = np.argsort(-values.ravel(), kind="stable")
    return PixelOrdering(order, values.shape)


def baseline_image(image: np.ndarray, baseline: BaselineSpec) -> np.ndarray:
    """Fully-perturbed version of `image` (channels-first, normalized space)."""
    if baseline.kind is BaselineKind.BLANK:
        return np.zeros_like(image)
    sigma = (0.0, baseline.blur_sigma, baseline.blur_sigma)
    return gaussian_filter(image, sigma=sigma)


def perturb_sequence(
    image: np.ndarray,
    ordering: PixelOrdering,
    direction: Direction,
    baseline: BaselineSpec,
    steps: int,
) -> list[np.ndarray]:
    """Images at fractions k/steps for k = 0..steps.

    Insertion reveals the top-ranked original pixels onto the baseline;
    deletion replaces them with baseline values. All three channels of a
    pixel change together. Both endpoints are always present.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    n_pixels = image.shape[-2] * image.shape[-1]
    if steps > n_pixels:
        raise ValueError(f"steps ({steps}) cannot exceed pixel count ({n_pixels})")
    if ordering.shape != image.shape[-2:]:
        raise ValueError("ordering shape does not match image")

    base = baseline_image(image, baseline)
    flat_image = image.reshape(image.shape[0], -1)
    flat_base = base.reshape(image.shape[0], -1)
    frames = []
    for k in range(steps + 1):
        count = int(round(k * n_pixels / steps))
        top = ordering.indices[:count]
        if direction is Direction.INSERTION:
            frame = flat_base.copy()
            frame[:, top] = flat_image[:, top]
        else:
            frame = flat_image.copy()
            frame[:, top] = flat_base[:, top]
        frames.append(frame.reshape(image.shape))
    return frames


@dataclass
class FaithfulnessCurve:
    """(fraction perturbed, target-class probability) samples plus their AUC."""

    fractions: np.ndarray
    probabilities: np.ndarray
    direction: Direction
    auc: float | None = None

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if len(self.fractions) != len(self.probabilities) or len(self.fractions) < 2:
            raise ValueError("need matching fractions/probabilities with at least 2 points")
        if self.fractions[0] != 0.0 or self.fractions[-1] != 1.0 or np.any(np.diff(self.fractions) <= 0):
            raise ValueError("fractions must ascend from 0 to 1")
        expected = float(np.trapezoid(self.probabilities, self.fractions))
        if self.auc is None:
            self.auc = expected
        elif abs(self.auc - expected) > 1e-9:
            raise ValueError(f"auc {self.auc} disagrees with trapezoid {expected}")


def faithfulness_curve(
    predict: PredictFn,
    image: np.ndarray,
    saliency: SaliencyMap | PixelOrdering,
    target_class: int,
    direction: Direction,
    baseline: BaselineSpec | None = None,
    steps: int = DEFAULT_STEPS,
    batch_size: int = 32,
) -> FaithfulnessCurve:
    """Track the target-class probability along the perturbation sequence.

    The unperturbed endpoint (deletion at fraction 0, insertion at 1) is
    predicted once on its own, so it equals the model's prediction for the
    untouched image exactly; the remaining steps are batched.
    """
    if baseline is None:
        baseline = DELETION_BASELINE if direction is Direction.DELETION else INSERTION_BASELINE
    ordering = saliency if isinstance(saliency, PixelOrdering) else rank_pixels(saliency)
    frames = perturb_sequence(image, ordering, direction, baseline, steps)

    probabilities = np.empty(len(frames), dtype=np.float64)
    unperturbed_idx = 0 if direction is Direction.DELETION else len(frames) - 1
    try:
        probabilities[unperturbed_idx] = predict(image[None])[0, target_class]
    except Exception as exc:
        raise RuntimeError(f"prediction oracle failed on the unperturbed image: {exc}") from exc

    remaining = [i for i in range(len(frames)) if i != unperturbed_idx]
    for start in range(0, len(remaining), batch_size):
        chunk = remaining[start:start + batch_size]
        batch = np.stack([frames[i] for i in chunk])
        try:
            out = predict(batch)
        except Exception as exc:
            raise RuntimeError(f"prediction oracle failed at steps {chunk}: {exc}") from exc
        probabilities[chunk] = out[:, target_class]

    fractions = np.linspace(0.0, 1.0, steps + 1)
    return FaithfulnessCurve(fractions, probabilities, direction)


@dataclass
class AggregateCurves:
    """Pointwise-mean curve and the mean of the per-image AUCs."""

    mean_curve: FaithfulnessCurve
    mean_auc: float
    n_curves: int


def aggregate_curves(curves: Sequence[FaithfulnessCurve]) -> AggregateCurves:
    if not curves:
        raise ValueError("no curves to aggregate")
    fractions = curves[0].fractions
    direction = curves[0].direction
    for c in curves[1:]:
        if not np.array_equal(c.fractions, fractions):
            raise ValueError("curves use different fraction grids")
        if c.direction is not direction:
            raise ValueError("cannot aggregate mixed insertion/deletion curves")
    probs = np.mean([c.probabilities for c in curves], axis=0)
    mean_curve = FaithfulnessCurve(fractions, probs, direction)
    mean_auc = float(np.mean([c.auc for c in curves]))
    return AggregateCurves(mean_curve=mean_curve, mean_auc=mean_auc, n_curves=len(curves))


# -- file formats -------------------------------------------------------------

def write_curves_csv(
    path: Path | str,
    entries: Sequence[tuple[FaithfulnessCurve, str, str, str]],
) -> Path:
    """Dump curves as `fraction,probability,image_id,model,method,direction` rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fraction", "probability", "image_id", "model", "method", "direction"])
        for curve, image_id, model, method in entries:
            for frac, prob in zip(curve.fractions, curve.probabilities):
                writer.writerow([f"{frac:.6f}", f"{prob:.8f}", image_id, model, method, curve.direction.value])
    return path


def format_auc_summary(
    auc_table: dict[tuple[str, str, Direction], float],
    models: Sequence[str],
    methods: Sequence[str],
) -> str:
    """Text table with method/model column groups and one row per direction."""
    col_width = max(10, max((len(m) for m in models), default=10) + 2)
    header_methods = " " * 12
    header_models = " " * 12
    for method in methods:
        group = "".join(f"{m:>{col_width}}" for m in models)
        header_methods += f"{method:>{col_width * len(models)}}"
        header_models += group
    lines = [header_methods, header_models]
    for direction in (Direction.DELETION, Direction.INSERTION):
        row = f"{direction.value:<12}"
        for method in methods:
            for model in models:
                value = auc_table.get((model, method, direction))
                row += f"{'--' if value is None else format(value, '.4f'):>{col_width}}"
        lines.append(row)
    return "\n".join(lines) + "\n"
