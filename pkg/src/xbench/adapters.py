"""Uniform adapters over four pretrained transformer image classifiers.

Each adapter wraps a Hugging Face model (ViT-Base/16, DeiT-Tiny/16,
DINO ViT-Small/16, Swin-Tiny) behind one interface for fine-tuning,
probability prediction, and capture of attention probabilities, their
gradients, and target-layer activations/gradients for a chosen class.
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import ImageSample

logger = logging.getLogger(__name__)


class AdapterError(RuntimeError):
    """Adapter construction or capture failure."""


class CheckpointUnavailableError(AdapterError):
    """Pretrained weights could not be retrieved."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during fine-tuning."""


class BackboneFamily(str, Enum):
    VIT_B16 = "vit_b16"
    DEIT_T16 = "deit_t16"
    DINO_S16 = "dino_s16"
    SWIN_T = "swin_t"


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture card for one backbone.

    Carries everything needed to build the model offline (random init) or
    from its published checkpoint, plus the token geometry the explainers
    need: `token_grid` is the spatial patch grid at the layer that feeds the
    classifier, and `num_special_tokens` counts non-patch tokens (CLS, and
    for DeiT also the distillation token) preceding the patch tokens.
    """

    family: BackboneFamily
    checkpoint_id: str
    patch_size: int
    has_class_token: bool
    token_grid: tuple[int, int]
    num_special_tokens: int
    image_size: int = 224
    # ViT-style architectures
    hidden_size: int | None = None
    num_layers: int | None = None
    num_heads: int | None = None
    intermediate_size: int | None = None
    # Swin architectures
    embed_dim: int | None = None
    depths: tuple[int, ...] | None = None
    stage_heads: tuple[int, ...] | None = None
    window_size: int | None = None

    @property
    def num_patch_tokens(self) -> int:
        return self.token_grid[0] * self.token_grid[1]


DEFAULT_SPECS: dict[BackboneFamily, BackboneSpec] = {
    BackboneFamily.VIT_B16: BackboneSpec(
        family=BackboneFamily.VIT_B16,
        checkpoint_id="google/vit-base-patch16-224",
        patch_size=16,
        has_class_token=True,
        token_grid=(14, 14),
        num_special_tokens=1,
        hidden_size=768,
        num_layers=12,
        num_heads=12,
        intermediate_size=3072,
    ),
    BackboneFamily.DEIT_T16: BackboneSpec(
        family=BackboneFamily.DEIT_T16,
        checkpoint_id="facebook/deit-tiny-patch16-224",
        patch_size=16,
        has_class_token=True,
        token_grid=(14, 14),
        num_special_tokens=2,  # CLS + distillation token
        hidden_size=192,
        num_layers=12,
        num_heads=3,
        intermediate_size=768,
    ),
    BackboneFamily.DINO_S16: BackboneSpec(
        family=BackboneFamily.DINO_S16,
        checkpoint_id="facebook/dino-vits16",
        patch_size=16,
        has_class_token=True,
        token_grid=(14, 14),
        num_special_tokens=1,
        hidden_size=384,
        num_layers=12,
        num_heads=6,
        intermediate_size=1536,
    ),
    BackboneFamily.SWIN_T: BackboneSpec(
        family=BackboneFamily.SWIN_T,
        checkpoint_id="microsoft/swin-tiny-patch4-window7-224",
        patch_size=4,
        has_class_token=False,
        token_grid=(7, 7),  # final-stage grid
        num_special_tokens=0,
        embed_dim=96,
        depths=(2, 2, 6, 2),
        stage_heads=(3, 6, 12, 24),
        window_size=7,
    ),
}


def default_spec(family: BackboneFamily | str) -> BackboneSpec:
    family = BackboneFamily(family)
    return DEFAULT_SPECS[family]


def tiny_spec(family: BackboneFamily | str, **overrides) -> BackboneSpec:
    """Shrunken variant of a default spec, for CPU tests and smoke runs."""
    base = default_spec(family)
    if base.family is BackboneFamily.SWIN_T:
        small = dict(embed_dim=24, depths=(1, 1), stage_heads=(2, 2), token_grid=(28, 28))
    else:
        small = dict(hidden_size=32, num_layers=2, num_heads=2, intermediate_size=64)
    small.update(overrides)
    return dataclasses.replace(base, **small)


@dataclass(frozen=True)
class WindowLayout:
    """Placement of one Swin layer's attention windows on its token grid.

    `grid` is the stage's (rows, cols) token grid, `window_size` the side of
    each square window, and `shift` the cyclic shift applied to the grid
    before windows were carved out (0 for unshifted layers).
    """

    grid: tuple[int, int]
    window_size: int
    shift: int

    @property
    def num_windows(self) -> int:
        return (self.grid[0] // self.window_size) * (self.grid[1] // self.window_size)

    def token_positions(self) -> np.ndarray:
        """Global token index for every (window, within-window) slot.

        Returns an int array of shape (num_windows, window_size**2) mapping a
        window-local token to its index on the unshifted grid, row-major.
        """
        rows, cols = self.grid
        ws = self.window_size
        out = np.empty((self.num_windows, ws * ws), dtype=np.int64)
        w = 0
        for wr in range(rows // ws):
            for wc in range(cols // ws):
                local = 0
                for r in range(ws):
                    for c in range(ws):
                        gr = (wr * ws + r + self.shift) % rows
                        gc = (wc * ws + c + self.shift) % cols
                        out[w, local] = gr * cols + gc
                        local += 1
                w += 1
        return out


@dataclass
class AttentionStack:
    """Per-layer attention probabilities captured during one forward pass.

    Global layers are (heads, tokens, tokens) arrays. Swin layers are
    (windows, heads, w*w, w*w) arrays with a matching WindowLayout entry in
    `windows`; global layers carry None there.
    """

    layers: list[np.ndarray]
    num_special_tokens: int
    token_grid: tuple[int, int]
    windows: list[WindowLayout | None] | None = None

    def __post_init__(self):
        if self.windows is None:
            self.windows = [None] * len(self.layers)
        if len(self.windows) != len(self.layers):
            raise ValueError("windows metadata must align with layers")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def is_windowed(self) -> bool:
        return any(w is not None for w in self.windows)

    def validate(self, atol: float = 1e-4) -> None:
        """Check every attention row is a probability distribution."""
        for i, layer in enumerate(self.layers):
            if layer.min() < 0:
                raise ValueError(f"layer {i} has negative attention entries")
            row_sums = layer.sum(axis=-1)
            if not np.allclose(row_sums, 1.0, atol=atol):
                worst = float(np.abs(row_sums - 1.0).max())
                raise ValueError(f"layer {i} attention rows deviate from 1 by {worst:.2e}")


@dataclass
class CaptureBundle:
    """Everything captured for one (image, target class) pair."""

    attentions: AttentionStack
    attention_grads: list[np.ndarray]
    target_activations: np.ndarray  # (channels, rows, cols)
    target_grads: np.ndarray
    target_class: int
    probs: np.ndarray

    def __post_init__(self):
        for i, (a, g) in enumerate(zip(self.attentions.layers, self.attention_grads)):
            if a.shape != g.shape:
                raise ValueError(f"attention/gradient shape mismatch at layer {i}: {a.shape} vs {g.shape}")
        if self.target_activations.shape != self.target_grads.shape:
            raise ValueError("target activation/gradient shape mismatch")
        if abs(float(self.probs.sum()) - 1.0) > 1e-5:
            raise ValueError("probs must sum to 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 1
    learning_rate: float = 5e-5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def _build_model(spec: BackboneSpec, num_classes: int, pretrained: bool, cache_dir: str | None):
    from transformers import (
        DeiTConfig,
        DeiTForImageClassification,
        SwinConfig,
        SwinForImageClassification,
        ViTConfig,
        ViTForImageClassification,
    )

    if spec.family in (BackboneFamily.VIT_B16, BackboneFamily.DINO_S16):
        model_cls = ViTForImageClassification
        config = ViTConfig(
            hidden_size=spec.hidden_size,
            num_hidden_layers=spec.num_layers,
            num_attention_heads=spec.num_heads,
            intermediate_size=spec.intermediate_size,
            image_size=spec.image_size,
            patch_size=spec.patch_size,
            num_labels=num_classes,
            attn_implementation="eager",
        )
    elif spec.family is BackboneFamily.DEIT_T16:
        model_cls = DeiTForImageClassification
        config = DeiTConfig(
            hidden_size=spec.hidden_size,
            num_hidden_layers=spec.num_layers,
            num_attention_heads=spec.num_heads,
            intermediate_size=spec.intermediate_size,
            image_size=spec.image_size,
            patch_size=spec.patch_size,
            num_labels=num_classes,
            attn_implementation="eager",
        )
    elif spec.family is BackboneFamily.SWIN_T:
        model_cls = SwinForImageClassification
        config = SwinConfig(
            embed_dim=spec.embed_dim,
            depths=list(spec.depths),
            num_heads=list(spec.stage_heads),
            window_size=spec.window_size,
            image_size=spec.image_size,
            patch_size=spec.patch_size,
            num_labels=num_classes,
            attn_implementation="eager",
        )
    else:
        raise AdapterError(f"unknown backbone family: {spec.family!r}")

    if not pretrained:
        return model_cls(config)
    try:
        return model_cls.from_pretrained(
            spec.checkpoint_id,
            num_labels=num_classes,
            ignore_mismatched_sizes=True,
            cache_dir=cache_dir,
            attn_implementation="eager",
        )
    except Exception as exc:
        raise CheckpointUnavailableError(
            f"could not load checkpoint {spec.checkpoint_id!r}: {exc}. "
            "Check network access, or point XBENCH_CACHE at a directory that "
            "already contains the checkpoint, then retry."
        ) from exc


class TransformerAdapter:
    """One backbone + classification head with capture hooks.

    Not safe for concurrent mutation; run fine-tuning and capture from a
    single controller thread.
    """

    def __init__(
        self,
        spec: BackboneSpec,
        num_classes: int,
        pretrained: bool = True,
        cache_dir: str | None = None,
        device: str = "cpu",
        seed: int = 0,
    ):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.spec = spec
        self.num_classes = num_classes
        self.device = torch.device(device)
        cache_dir = cache_dir or os.environ.get("XBENCH_CACHE")
        torch.manual_seed(seed)  # reproducible head (and offline trunk) init
        self.model = _build_model(spec, num_classes, pretrained, cache_dir)
        self.model.to(self.device)
        self.model.eval()

    # -- internals ---------------------------------------------------------

    @property
    def _dtype(self) -> torch.dtype:
        return next(self.model.parameters()).dtype

    def _to_batch(self, inputs) -> torch.Tensor:
        if isinstance(inputs, ImageSample):
            inputs = [inputs]
        if isinstance(inputs, np.ndarray):
            pixels = inputs[None] if inputs.ndim == 3 else inputs
        else:
            pixels = np.stack([s.pixels for s in inputs])
        expected = (3, self.spec.image_size, self.spec.image_size)
        if pixels.ndim != 4 or pixels.shape[1:] != expected:
            raise ValueError(f"expected batch of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {pixels.shape}")
        return torch.from_numpy(np.ascontiguousarray(pixels)).to(device=self.device, dtype=self._dtype)

    def grad_cam_target_module(self) -> nn.Module:
        """Deepest module whose output still has spatial token structure."""
        base = self.model.base_model
        if self.spec.family is BackboneFamily.SWIN_T:
            return base.layernorm
        blocks = getattr(base, "layers", None)
        if blocks is None:  # older transformers kept blocks under encoder.layer
            blocks = base.encoder.layer
        return blocks[-1].layernorm_before

    def _window_layouts(self) -> list[WindowLayout]:
        spec = self.spec
        layouts = []
        grid_side = spec.image_size // spec.patch_size
        for stage, depth in enumerate(spec.depths):
            side = grid_side // (2 ** stage)
            for block in range(depth):
                if side <= spec.window_size:
                    ws, shift = side, 0
                else:
                    ws = spec.window_size
                    shift = 0 if block % 2 == 0 else spec.window_size // 2
                layouts.append(WindowLayout(grid=(side, side), window_size=ws, shift=shift))
        return layouts

    # -- operations --------------------------------------------------------

    def fine_tune(self, train, config: TrainConfig) -> list[dict]:
        """Fine-tune all weights with AdamW + cross-entropy.

        Returns one {'epoch', 'loss', 'accuracy'} entry per epoch. Seeded and
        deterministic up to the compute backend's own nondeterminism.
        """
        if len(train) == 0:
            raise AdapterError("training set is empty")
        if hasattr(train, "labels"):  # ImageCollection: read labels without decoding
            max_label = int(np.max(train.labels))
        else:
            max_label = max(int(s.label) for s in train)
        if max_label >= self.num_classes:
            raise AdapterError(f"label {max_label} outside the {self.num_classes}-way head")

        torch.manual_seed(config.seed)
        rng = np.random.default_rng(config.seed)
        optimizer = torch.optim.AdamW(self.model.parameters(), lr=config.learning_rate)
        loss_fn = nn.CrossEntropyLoss()
        history = []
        for epoch in range(config.epochs):
            self.model.train()
            order = rng.permutation(len(train))
            total_loss, correct, seen = 0.0, 0, 0
            for start in range(0, len(order), config.batch_size):
                chunk = order[start:start + config.batch_size]
                samples = [train[int(i)] for i in chunk]
                x = self._to_batch(samples)
                y = torch.tensor([s.label for s in samples], dtype=torch.long, device=self.device)
                optimizer.zero_grad(set_to_none=True)
                logits = self.model(x).logits
                loss = loss_fn(logits, y)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}; "
                        "lower the learning rate or inspect the inputs"
                    )
                loss.backward()
                optimizer.step()
                total_loss += float(loss.detach()) * len(chunk)
                correct += int((logits.detach().argmax(dim=-1) == y).sum())
                seen += len(chunk)
            history.append({
                "epoch": epoch,
                "loss": total_loss / seen,
                "accuracy": correct / seen,
            })
            logger.info("epoch %d: loss %.4f accuracy %.4f", epoch, history[-1]["loss"], history[-1]["accuracy"])
        self.model.eval()
        return history

    @torch.no_grad()
    def predict_proba(self, inputs, batch_size: int = 32) -> np.ndarray:
        """Softmax class probabilities, one simplex row per input image."""
        self.model.eval()
        if isinstance(inputs, np.ndarray) and inputs.ndim == 3:
            inputs = inputs[None]
        n = len(inputs)
        rows = []
        for start in range(0, n, batch_size):
            if isinstance(inputs, np.ndarray):
                batch = inputs[start:start + batch_size]
            else:
                batch = [inputs[i] for i in range(start, min(start + batch_size, n))]
            x = self._to_batch(batch)
            logits = self.model(x).logits
            rows.append(torch.softmax(logits, dim=-1).cpu().numpy())
        return np.concatenate(rows, axis=0)

    def forward_with_capture(self, sample, target_class: int) -> CaptureBundle:
        """Forward + backward on the target-class logit, capturing attention
        probabilities, their gradients, and the Grad-CAM layer's
        activations/gradients (class token(s) stripped, token grid restored)."""
        if not 0 <= target_class < self.num_classes:
            raise ValueError(f"target_class {target_class} outside [0, {self.num_classes})")
        x = self._to_batch(sample)
        if x.shape[0] != 1:
            raise ValueError("capture runs on a single image")

        self.model.eval()
        self.model.zero_grad(set_to_none=True)
        captured: dict[str, torch.Tensor] = {}

        def keep_output(module, args, output):
            output.retain_grad()
            captured["activations"] = output

        target_module = self.grad_cam_target_module()
        handle = target_module.register_forward_hook(keep_output)
        try:
            outputs = self.model(x, output_attentions=True)
        finally:
            handle.remove()

        if "activations" not in captured:
            raise AdapterError(f"capture hook on {type(target_module).__name__} never fired")
        attentions = outputs.attentions
        if not attentions:
            raise AdapterError("model returned no attention maps; self-attention blocks not found")
        for attn in attentions:
            attn.retain_grad()

        logits = outputs.logits
        logits[0, target_class].backward()

        probs = torch.softmax(logits.detach(), dim=-1)[0].cpu().numpy()
        swin = self.spec.family is BackboneFamily.SWIN_T
        layers, grads = [], []
        for i, attn in enumerate(attentions):
            if attn.grad is None:
                raise AdapterError(f"no gradient reached attention layer {i}")
            a = attn.detach().cpu().numpy()
            g = attn.grad.detach().cpu().numpy()
            if not swin:
                a, g = a[0], g[0]  # (heads, T, T)
            layers.append(np.ascontiguousarray(a))
            grads.append(np.ascontiguousarray(g))

        window_layouts: list[WindowLayout] | None = None
        if swin:
            window_layouts = self._window_layouts()
            if len(window_layouts) != len(layers):
                raise AdapterError("window metadata does not match captured attention layers")
            for layout, layer in zip(window_layouts, layers):
                if layer.shape[0] != layout.num_windows or layer.shape[-1] != layout.window_size ** 2:
                    raise AdapterError(
                        f"windowed attention shape {layer.shape} does not match layout {layout}"
                    )

        stack = AttentionStack(
            layers=layers,
            num_special_tokens=self.spec.num_special_tokens,
            token_grid=self.spec.token_grid,
            windows=window_layouts,
        )
        stack.validate()

        acts = captured["activations"]
        act = acts.detach()[0].cpu().numpy()
        grad = acts.grad.detach()[0].cpu().numpy()
        rows, cols = self.spec.token_grid
        skip = self.spec.num_special_tokens
        if act.shape[0] != skip + rows * cols:
            raise AdapterError(
                f"target layer has {act.shape[0]} tokens; expected {skip} special + {rows * cols} patches"
            )
        act = act[skip:].reshape(rows, cols, -1).transpose(2, 0, 1)
        grad = grad[skip:].reshape(rows, cols, -1).transpose(2, 0, 1)

        return CaptureBundle(
            attentions=stack,
            attention_grads=grads,
            target_activations=np.ascontiguousarray(act),
            target_grads=np.ascontiguousarray(grad),
            target_class=target_class,
            probs=probs,
        )

    # -- persistence -------------------------------------------------------

    def save_weights(self, path: Path | str) -> None:
        torch.save(self.model.state_dict(), str(path))

    def load_weights(self, path: Path | str) -> None:
        state = torch.load(str(path), map_location=self.device, weights_only=True)
        self.model.load_state_dict(state)
        self.model.eval()


def build_adapter(
    spec: BackboneSpec,
    num_classes: int,
    pretrained: bool = True,
    cache_dir: str | None = None,
    device: str = "cpu",
    seed: int = 0,
) -> TransformerAdapter:
    """Construct an adapter with a fresh `num_classes` classification head."""
    return TransformerAdapter(
        spec, num_classes, pretrained=pretrained, cache_dir=cache_dir, device=device, seed=seed
    )


def weights_filename(family: BackboneFamily, dataset: str, seed: int) -> str:
    return f"{family.value}_{dataset.lower()}_{seed}.wt"
