"""Saliency maps from captured forward/backward state.

Three methods are implemented:

* attention rollout — per-layer head-fused attention matrices are blended
  with the identity (residual paths), row-normalized, and chained by
  left-to-right matrix multiplication; the class-token row over patch
  columns becomes the map. Target-class agnostic by construction.
* gradient attention rollout — attention is first weighted elementwise by
  its gradient for the target class, negative products are clamped to zero,
  heads are averaged and the lowest entries optionally discarded before the
  same chain; class-specific.
* grad-cam — channel activations at the deepest spatial layer are weighted
  by spatially-averaged gradients, summed, and clamped at zero;
  class-specific.

All maps are bilinearly upsampled to the 224x224 input and min-max
normalized to [0, 1]; identically-constant maps normalize to all zeros.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from functools import reduce
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .adapters import AttentionStack, CaptureBundle, WindowLayout
from .data import IMAGE_SIZE, denormalize

logger = logging.getLogger(__name__)


class SaliencyMethod(str, Enum):
    ROLLOUT = "rollout"
    GRAD_ROLLOUT = "grad_rollout"
    GRAD_CAM = "grad_cam"


class HeadFusion(str, Enum):
    MEAN = "mean"
    MAX = "max"
    MIN = "min"


@dataclass(frozen=True)
class RolloutConfig:
    head_fusion: HeadFusion = HeadFusion.MEAN
    discard_ratio: float = 0.0
    residual_weight: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.discard_ratio < 1.0:
            raise ValueError("discard_ratio must be in [0, 1)")
        if not 0.0 <= self.residual_weight <= 1.0:
            raise ValueError("residual_weight must be in [0, 1]")


# Default for gradient rollout; plain rollout keeps discard_ratio 0.
GRAD_ROLLOUT_CONFIG = RolloutConfig(discard_ratio=0.9)


@dataclass
class SaliencyMap:
    """2-D pixel-importance field in [0, 1] at input resolution."""

    values: np.ndarray
    method: SaliencyMethod
    target_class: int | None = None
    approximate: bool = False  # set for windowed-attention rollout fallback

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("saliency values must be 2-D")
        lo, hi = float(self.values.min()), float(self.values.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"saliency values outside [0, 1]: min {lo}, max {hi}")
        if hi not in (0.0, 1.0):
            raise ValueError("saliency map must peak at 1 unless identically zero")


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; identically-constant input becomes zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.isfinite(raw).all():
        raise ValueError("saliency values must be finite")
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def upsample_to_input(map2d: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear upsampling (corner alignment off) to size x size."""
    t = torch.from_numpy(np.asarray(map2d, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def augment_attention(attention: np.ndarray, residual_weight: float) -> np.ndarray:
    """Blend one head-fused attention matrix with the identity and renormalize.

    Returns row-normalized residual_weight * I + (1 - residual_weight) * A;
    rows that end up all zero (possible only at residual_weight 0) are kept
    at zero rather than divided.
    """
    attention = np.asarray(attention, dtype=np.float64)
    if attention.ndim != 2 or attention.shape[0] != attention.shape[1]:
        raise ValueError(f"attention must be square, got {attention.shape}")
    n = attention.shape[0]
    blended = residual_weight * np.eye(n) + (1.0 - residual_weight) * attention
    row_sums = blended.sum(axis=1, keepdims=True)
    safe = np.where(row_sums == 0.0, 1.0, row_sums)
    return blended / safe


def _fuse_heads(layer: np.ndarray, fusion: HeadFusion) -> np.ndarray:
    # Head axis is third from the end for both (heads, T, T) and
    # (windows, heads, t, t) layouts.
    if fusion is HeadFusion.MEAN:
        return layer.mean(axis=-3)
    if fusion is HeadFusion.MAX:
        return layer.max(axis=-3)
    return layer.min(axis=-3)


def _discard_lowest(fused: np.ndarray, ratio: float, num_special: int) -> np.ndarray:
    """Zero the lowest `ratio` fraction of entries, never touching rows or
    columns of special tokens (class/distillation)."""
    if ratio <= 0.0:
        return fused
    out = fused.copy()
    if out.ndim == 2 and num_special > 0:
        keep = np.ones(out.shape, dtype=bool)
        keep[:num_special, :] = False
        keep[:, :num_special] = False
        eligible = np.flatnonzero(keep.ravel())
    else:
        eligible = np.arange(out.size)
    k = int(np.floor(ratio * eligible.size))
    if k <= 0:
        return out
    flat = out.reshape(-1)
    order = np.argsort(flat[eligible], kind="stable")[:k]
    flat[eligible[order]] = 0.0
    return out


def _prepare_layer(
    layer: np.ndarray,
    grad: np.ndarray | None,
    cfg: RolloutConfig,
) -> np.ndarray:
    a = layer.astype(np.float64)
    if grad is not None:
        a = np.clip(a * grad.astype(np.float64), 0.0, None)
    return _fuse_heads(a, cfg.head_fusion)


def scatter_windows(fused_windows: np.ndarray, layout: WindowLayout) -> np.ndarray:
    """Place per-window attention blocks on the full token-by-token matrix.

    Windows tile the grid, so every global token owns exactly one row; all
    positions outside a token's window remain zero.
    """
    tokens = layout.grid[0] * layout.grid[1]
    full = np.zeros((tokens, tokens), dtype=np.float64)
    positions = layout.token_positions()
    for w in range(layout.num_windows):
        idx = positions[w]
        full[np.ix_(idx, idx)] = fused_windows[w]
    return full


def merge_flow_matrix(fine_grid: tuple[int, int], coarse_grid: tuple[int, int]) -> np.ndarray:
    """Row-stochastic flow of 2x2 patch merging: each fine token feeds the
    coarse token it merges into."""
    fr, fc = fine_grid
    cr, cc = coarse_grid
    if (fr, fc) != (2 * cr, 2 * cc):
        raise ValueError(f"{coarse_grid} is not a 2x2 merge of {fine_grid}")
    flow = np.zeros((fr * fc, cr * cc), dtype=np.float64)
    for r in range(fr):
        for c in range(fc):
            flow[r * fc + c, (r // 2) * cc + (c // 2)] = 1.0
    return flow


def _chain(matrices: list[np.ndarray]) -> np.ndarray:
    return reduce(np.matmul, matrices)


def rollout_vector(
    stack: AttentionStack,
    cfg: RolloutConfig,
    grads: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Patch-token scores before spatial reshaping.

    For stacks with a class token this is the class-token row of the
    left-to-right chain of augmented layers, restricted to patch columns.
    Windowed (Swin) stacks go through the scatter-sum fallback; see
    `windowed_rollout_vector`.
    """
    if stack.num_layers < 1:
        raise ValueError("attention stack is empty")
    if grads is not None and len(grads) != stack.num_layers:
        raise ValueError("gradient stack must match attention stack")
    if stack.is_windowed:
        return windowed_rollout_vector(stack, cfg, grads)

    tokens = stack.layers[0].shape[-1]
    for i, layer in enumerate(stack.layers):
        if layer.shape[-2] != layer.shape[-1]:
            raise ValueError(f"layer {i} attention is not square: {layer.shape}")
        if layer.shape[-1] != tokens:
            raise ValueError(
                f"token-count mismatch: layer {i} has {layer.shape[-1]} tokens, layer 0 has {tokens}"
            )

    augmented = []
    for i, layer in enumerate(stack.layers):
        fused = _prepare_layer(layer, None if grads is None else grads[i], cfg)
        fused = _discard_lowest(fused, cfg.discard_ratio, stack.num_special_tokens)
        augmented.append(augment_attention(fused, cfg.residual_weight))
    product = _chain(augmented)

    if stack.num_special_tokens > 0:
        return product[0, stack.num_special_tokens:]
    # No class token: read out the uniform pooling the classifier applies.
    return product.mean(axis=0)


def windowed_rollout_vector(
    stack: AttentionStack,
    cfg: RolloutConfig,
    grads: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Rollout over windowed attention via scatter-sum (approximate).

    Each layer's fused window blocks are scattered onto the stage's full
    token-by-token matrix; stages are linked by the patch-merging flow
    matrix. The pooled classifier readout (uniform over final-stage tokens)
    replaces the class-token row, giving scores on the final-stage grid.
    """
    if not all(w is not None for w in stack.windows):
        raise ValueError("mixed global/windowed stacks are not supported")
    matrices: list[np.ndarray] = []
    prev_grid: tuple[int, int] | None = None
    for i, (layer, layout) in enumerate(zip(stack.layers, stack.windows)):
        if layer.ndim != 4 or layer.shape[-2] != layer.shape[-1]:
            raise ValueError(f"layer {i}: windowed attention must be (windows, heads, t, t)")
        fused = _prepare_layer(layer, None if grads is None else grads[i], cfg)
        fused = _discard_lowest(fused, cfg.discard_ratio, num_special=0)
        if prev_grid is not None and layout.grid != prev_grid:
            matrices.append(merge_flow_matrix(prev_grid, layout.grid))
        matrices.append(augment_attention(scatter_windows(fused, layout), cfg.residual_weight))
        prev_grid = layout.grid
    product = _chain(matrices)
    return product.mean(axis=0)


def _vector_to_map(vector: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    rows, cols = grid
    if vector.size != rows * cols:
        raise ValueError(f"{vector.size} patch scores do not fill a {rows}x{cols} grid")
    upsampled = upsample_to_input(vector.reshape(rows, cols))
    return normalize_map(upsampled)


def attention_rollout(stack: AttentionStack, cfg: RolloutConfig | None = None) -> SaliencyMap:
    """Target-class-agnostic rollout saliency at input resolution."""
    cfg = cfg or RolloutConfig()
    vector = rollout_vector(stack, cfg)
    values = _vector_to_map(vector, stack.token_grid)
    return SaliencyMap(values, SaliencyMethod.ROLLOUT, approximate=stack.is_windowed)


def gradient_attention_rollout(bundle: CaptureBundle, cfg: RolloutConfig | None = None) -> SaliencyMap:
    """Class-specific rollout weighted by target-class attention gradients."""
    cfg = cfg or GRAD_ROLLOUT_CONFIG
    stack = bundle.attentions
    vector = rollout_vector(stack, cfg, grads=bundle.attention_grads)
    values = _vector_to_map(vector, stack.token_grid)
    return SaliencyMap(
        values,
        SaliencyMethod.GRAD_ROLLOUT,
        target_class=bundle.target_class,
        approximate=stack.is_windowed,
    )


def grad_cam_map(activations: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Pre-upsample grad-cam field: relu of gradient-weighted channel sum."""
    activations = np.asarray(activations, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if activations.shape != grads.shape or activations.ndim != 3:
        raise ValueError("activations and grads must share a (channels, rows, cols) shape")
    weights = grads.mean(axis=(1, 2))
    combined = np.tensordot(weights, activations, axes=1)
    return np.maximum(combined, 0.0)


def grad_cam(bundle: CaptureBundle) -> SaliencyMap:
    """Class-discriminative map from the designated spatial layer."""
    if bundle.target_activations is None or bundle.target_grads is None:
        raise ValueError("bundle is missing target-layer activations or gradients")
    raw = grad_cam_map(bundle.target_activations, bundle.target_grads)
    values = normalize_map(upsample_to_input(raw))
    return SaliencyMap(values, SaliencyMethod.GRAD_CAM, target_class=bundle.target_class)


# -- export -----------------------------------------------------------------

def save_saliency_png(smap: SaliencyMap, path: Path | str, config_note: str = "") -> Path:
    """Write the map as 16-bit grayscale PNG plus a key-value sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scaled = np.round(smap.values.astype(np.float64) * 65535.0).astype(np.uint16)
    Image.fromarray(scaled).save(path)  # uint16 maps to 16-bit grayscale
    sidecar = path.with_suffix(".txt")
    lines = [
        f"method: {smap.method.value}",
        f"target_class: {smap.target_class}",
        f"approximate: {smap.approximate}",
    ]
    if config_note:
        lines.append(f"config: {config_note}")
    sidecar.write_text("\n".join(lines) + "\n")
    return path


def save_overlay_png(smap: SaliencyMap, pixels: np.ndarray, path: Path | str, alpha: float = 0.5) -> Path:
    """Alpha-blend the heatmap over the (normalized-space) input image."""
    import matplotlib

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = denormalize(pixels).transpose(1, 2, 0)
    heat = matplotlib.colormaps["jet"](smap.values)[..., :3]
    blend = np.clip((1.0 - alpha) * rgb + alpha * heat, 0.0, 1.0)
    Image.fromarray((blend * 255).astype(np.uint8)).save(path)
    return path
