"""Configuration-driven orchestration: train the backbones, explain, score,
and emit every table/figure surface as static files under one run directory.

Outputs: metrics.csv, auc.csv, auc_summary.txt, curves.csv, split.manifest,
weights/*.wt (+ .metrics.txt sidecars), gallery/*.png, errors/*.png, and a
manifest.txt listing every artifact with the config hash and seeds.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from sklearn.metrics import accuracy_score, f1_score

from . import data as data_mod
from .adapters import (
    BackboneFamily,
    BackboneSpec,
    TrainConfig,
    TransformerAdapter,
    build_adapter,
    default_spec,
    weights_filename,
)
from .data import DatasetSplit, ImageCollection, denormalize, sample_eval_subset, write_split_manifest
from .explainers import (
    GRAD_ROLLOUT_CONFIG,
    RolloutConfig,
    HeadFusion,
    SaliencyMap,
    SaliencyMethod,
    attention_rollout,
    grad_cam,
    gradient_attention_rollout,
    save_saliency_png,
)
from .faithfulness import (
    BaselineKind,
    BaselineSpec,
    DEFAULT_STEPS,
    Direction,
    FaithfulnessCurve,
    aggregate_curves,
    faithfulness_curve,
    format_auc_summary,
    write_curves_csv,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VAL_FRACTION_NOTE = "validation fraction 0.15 is an assumption; the upstream protocol leaves the ratio unstated"


class ConfigError(ValueError):
    """Bad experiment configuration file or overrides."""


@dataclass
class FaithfulnessSettings:
    steps: int = DEFAULT_STEPS
    insertion_baseline: BaselineSpec = field(default_factory=lambda: BaselineSpec(BaselineKind.BLUR, 11.0))
    deletion_baseline: BaselineSpec = field(default_factory=lambda: BaselineSpec(BaselineKind.BLANK))


@dataclass
class ExperimentConfig:
    dataset: str
    output_dir: Path
    backbones: list[BackboneSpec]
    methods: list[SaliencyMethod]
    train: TrainConfig = field(default_factory=TrainConfig)
    faithfulness: FaithfulnessSettings = field(default_factory=FaithfulnessSettings)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    grad_rollout: RolloutConfig = GRAD_ROLLOUT_CONFIG
    data_root: Path | None = None
    eval_per_class: int | None = None  # None evaluates the whole validation set
    val_fraction: float = 0.15
    seed: int = 0
    pretrained: bool = True
    reuse_weights: bool = True

    def __post_init__(self):
        self.dataset = self.dataset.lower()
        if self.dataset not in ("pbc", "busi"):
            raise ConfigError(f"dataset must be 'pbc' or 'busi', got {self.dataset!r}")
        if not self.backbones:
            raise ConfigError("at least one backbone is required")
        if not self.methods:
            raise ConfigError("at least one explanation method is required")
        self.output_dir = Path(self.output_dir)
        if self.data_root is None:
            base = os.environ.get("XBENCH_DATA")
            if base:
                self.data_root = Path(base) / self.dataset
        if self.data_root is not None:
            self.data_root = Path(self.data_root)

    def resolved_data_root(self) -> Path:
        if self.data_root is None:
            raise ConfigError("no data_root configured and XBENCH_DATA is not set")
        return self.data_root

    def to_dict(self) -> dict:
        def spec_dict(spec: BackboneSpec) -> dict:
            out = {"family": spec.family.value}
            defaults = default_spec(spec.family)
            for name in (
                "hidden_size", "num_layers", "num_heads", "intermediate_size",
                "embed_dim", "depths", "stage_heads", "window_size",
                "token_grid", "num_special_tokens", "image_size",
            ):
                value = getattr(spec, name)
                if value != getattr(defaults, name):
                    out[name] = list(value) if isinstance(value, tuple) else value
            return out

        def baseline_dict(b: BaselineSpec) -> dict:
            d = {"kind": b.kind.value}
            if b.kind is BaselineKind.BLUR:
                d["blur_sigma"] = b.blur_sigma
            return d

        def rollout_dict(r: RolloutConfig) -> dict:
            return {
                "head_fusion": r.head_fusion.value,
                "discard_ratio": r.discard_ratio,
                "residual_weight": r.residual_weight,
            }

        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "data_root": str(self.data_root) if self.data_root else None,
            "output_dir": str(self.output_dir),
            "backbones": [spec_dict(s) for s in self.backbones],
            "methods": [m.value for m in self.methods],
            "train": {
                "batch_size": self.train.batch_size,
                "epochs": self.train.epochs,
                "learning_rate": self.train.learning_rate,
                "seed": self.train.seed,
            },
            "faithfulness": {
                "steps": self.faithfulness.steps,
                "insertion_baseline": baseline_dict(self.faithfulness.insertion_baseline),
                "deletion_baseline": baseline_dict(self.faithfulness.deletion_baseline),
            },
            "rollout": rollout_dict(self.rollout),
            "grad_rollout": rollout_dict(self.grad_rollout),
            "eval_per_class": self.eval_per_class,
            "val_fraction": self.val_fraction,
            "seed": self.seed,
            "pretrained": self.pretrained,
        }

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


def _parse_backbone(entry) -> BackboneSpec:
    if isinstance(entry, str):
        return default_spec(entry)
    if isinstance(entry, dict):
        entry = dict(entry)
        family = entry.pop("family", None)
        if family is None:
            raise ConfigError("backbone entries need a 'family' key")
        spec = default_spec(family)
        for key in ("depths", "stage_heads", "token_grid"):
            if key in entry:
                entry[key] = tuple(entry[key])
        try:
            return replace(spec, **entry)
        except TypeError as exc:
            raise ConfigError(f"bad backbone override for {family}: {exc}") from exc
    raise ConfigError(f"cannot parse backbone entry {entry!r}")


def _parse_baseline(entry: dict | None, default: BaselineSpec) -> BaselineSpec:
    if entry is None:
        return default
    kind = BaselineKind(entry.get("kind", default.kind.value))
    sigma = float(entry.get("blur_sigma", default.blur_sigma))
    return BaselineSpec(kind, blur_sigma=sigma)


def _parse_rollout(entry: dict | None, default: RolloutConfig) -> RolloutConfig:
    if entry is None:
        return default
    return RolloutConfig(
        head_fusion=HeadFusion(entry.get("head_fusion", default.head_fusion.value)),
        discard_ratio=float(entry.get("discard_ratio", default.discard_ratio)),
        residual_weight=float(entry.get("residual_weight", default.residual_weight)),
    )


def load_config(path: Path | str, **overrides) -> ExperimentConfig:
    """Parse a YAML experiment file; keyword overrides win over file values."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} is not a mapping")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")

    train_raw = raw.get("train", {}) or {}
    faith_raw = raw.get("faithfulness", {}) or {}
    settings = FaithfulnessSettings(
        steps=int(faith_raw.get("steps", DEFAULT_STEPS)),
        insertion_baseline=_parse_baseline(faith_raw.get("insertion_baseline"), BaselineSpec(BaselineKind.BLUR, 11.0)),
        deletion_baseline=_parse_baseline(faith_raw.get("deletion_baseline"), BaselineSpec(BaselineKind.BLANK)),
    )
    config = ExperimentConfig(
        dataset=raw.get("dataset", ""),
        data_root=raw.get("data_root"),
        output_dir=raw.get("output_dir", "runs/xbench"),
        backbones=[_parse_backbone(b) for b in raw.get("backbones", [])],
        methods=[SaliencyMethod(m) for m in raw.get("methods", [])],
        train=TrainConfig(
            batch_size=int(train_raw.get("batch_size", 32)),
            epochs=int(train_raw.get("epochs", 1)),
            learning_rate=float(train_raw.get("learning_rate", 5e-5)),
            seed=int(train_raw.get("seed", raw.get("seed", 0))),
        ),
        faithfulness=settings,
        rollout=_parse_rollout(raw.get("rollout"), RolloutConfig()),
        grad_rollout=_parse_rollout(raw.get("grad_rollout"), GRAD_ROLLOUT_CONFIG),
        eval_per_class=raw.get("eval_per_class"),
        val_fraction=float(raw.get("val_fraction", 0.15)),
        seed=int(raw.get("seed", 0)),
        pretrained=bool(raw.get("pretrained", True)),
        reuse_weights=bool(raw.get("reuse_weights", True)),
    )
    for key, value in overrides.items():
        if value is None:
            continue
        if not hasattr(config, key):
            raise ConfigError(f"unknown config override {key!r}")
        setattr(config, key, value)
    config.__post_init__()
    return config


def explain_bundle(
    bundle,
    method: SaliencyMethod,
    rollout_cfg: RolloutConfig | None = None,
    grad_rollout_cfg: RolloutConfig | None = None,
) -> SaliencyMap:
    """Explain an already-captured bundle; one capture can serve all methods."""
    if method is SaliencyMethod.ROLLOUT:
        return attention_rollout(bundle.attentions, rollout_cfg)
    if method is SaliencyMethod.GRAD_ROLLOUT:
        return gradient_attention_rollout(bundle, grad_rollout_cfg)
    return grad_cam(bundle)


def explain_image(
    adapter: TransformerAdapter,
    method: SaliencyMethod,
    pixels: np.ndarray,
    target_class: int,
    rollout_cfg: RolloutConfig | None = None,
    grad_rollout_cfg: RolloutConfig | None = None,
) -> SaliencyMap:
    """Capture and explain one image for one target class."""
    bundle = adapter.forward_with_capture(pixels, target_class)
    return explain_bundle(bundle, method, rollout_cfg, grad_rollout_cfg)


@dataclass
class ErrorCase:
    image_id: str
    true_class: str
    predicted_class: str
    confidence: float
    saliency_paths: dict[str, str]
    panel_path: str | None = None


@dataclass
class ReportBundle:
    classification_table: list[dict]
    auc_table: list[dict]
    curves: dict[tuple[str, str, Direction], FaithfulnessCurve]
    gallery_paths: list[str]
    error_cases: list[ErrorCase]
    manifest_path: str
    failures: dict[str, str]


class ExperimentRunner:
    """Owns one run directory; stages share the dataset split and adapters."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self._split: DatasetSplit | None = None
        self._eval_subset: ImageCollection | None = None
        self._adapters: dict[BackboneFamily, TransformerAdapter] = {}
        self._train_history: dict[BackboneFamily, list[dict]] = {}
        self._artifacts: list[str] = []
        self._stage_status: dict[str, str] = {}

    # -- shared state --------------------------------------------------------

    def _record(self, path: Path | str) -> Path:
        path = Path(path)
        rel = path.relative_to(self.output_dir) if path.is_absolute() else path
        self._artifacts.append(str(rel))
        return self.output_dir / rel

    def dataset_split(self) -> DatasetSplit:
        if self._split is None:
            cfg = self.config
            root = cfg.resolved_data_root()
            collection = data_mod.load_pbc(root) if cfg.dataset == "pbc" else data_mod.load_busi(root)
            if collection.report and collection.report.n_skipped:
                logger.warning("%d unreadable files skipped during load", collection.report.n_skipped)
            self._split = data_mod.split(collection, cfg.val_fraction, cfg.seed)
            manifest_path = self.output_dir / "split.manifest"
            write_split_manifest(self._split, manifest_path)
            self._record("split.manifest")
        return self._split

    def eval_subset(self) -> ImageCollection:
        if self._eval_subset is None:
            split = self.dataset_split()
            if self.config.eval_per_class is None:
                self._eval_subset = split.validation
            else:
                self._eval_subset = sample_eval_subset(
                    split.validation, self.config.eval_per_class, self.config.seed
                )
        return self._eval_subset

    def adapter(self, spec: BackboneSpec) -> TransformerAdapter:
        if spec.family not in self._adapters:
            cfg = self.config
            split = self.dataset_split()
            num_classes = len(split.train.class_names)
            adapter = build_adapter(
                spec, num_classes, pretrained=cfg.pretrained, seed=cfg.seed
            )
            weights_dir = self.output_dir / "weights"
            weights_dir.mkdir(exist_ok=True)
            weights_path = weights_dir / weights_filename(spec.family, cfg.dataset, cfg.seed)
            if cfg.reuse_weights and weights_path.exists():
                logger.info("loading cached weights %s", weights_path)
                adapter.load_weights(weights_path)
                self._train_history[spec.family] = []
            else:
                history = adapter.fine_tune(split.train, cfg.train)
                self._train_history[spec.family] = history
                adapter.save_weights(weights_path)
                sidecar = weights_path.with_suffix(".metrics.txt")
                lines = [f"epoch {h['epoch']}: loss {h['loss']:.6f} accuracy {h['accuracy']:.6f}" for h in history]
                sidecar.write_text("\n".join(lines) + "\n")
                self._record(weights_path)
                self._record(sidecar)
            self._adapters[spec.family] = adapter
        return self._adapters[spec.family]

    def _rollout_cfg(self, method: SaliencyMethod) -> RolloutConfig:
        return self.config.grad_rollout if method is SaliencyMethod.GRAD_ROLLOUT else self.config.rollout

    # -- stages ---------------------------------------------------------------

    def run_classification(self) -> list[dict]:
        """Accuracy and F1 (percent, 2 decimals) per backbone on validation."""
        split = self.dataset_split()
        validation = split.validation
        y_true = validation.labels
        if len(set(y_true.tolist())) < 2:
            logger.warning("validation set is degenerate (single class); metrics are trivial")
        rows = []
        for spec in self.config.backbones:
            row = {"model": spec.family.value, "status": "ok"}
            try:
                adapter = self.adapter(spec)
                probs = adapter.predict_proba(validation, batch_size=self.config.train.batch_size)
                y_pred = probs.argmax(axis=1)
                row["accuracy_pct"] = round(100.0 * accuracy_score(y_true, y_pred), 2)
                row["f1_weighted_pct"] = round(100.0 * f1_score(y_true, y_pred, average="weighted", zero_division=0), 2)
                row["f1_macro_pct"] = round(100.0 * f1_score(y_true, y_pred, average="macro", zero_division=0), 2)
            except Exception as exc:
                logger.exception("classification failed for %s", spec.family.value)
                row["status"] = f"failed: {exc}"
            rows.append(row)
        path = self._record("metrics.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["model", "accuracy_pct", "f1_weighted_pct", "f1_macro_pct", "status"]
            )
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
        return rows

    def run_faithfulness(self) -> tuple[list[dict], dict[tuple[str, str, Direction], FaithfulnessCurve]]:
        """Mean insertion/deletion AUC per (backbone, method) over the eval subset."""
        cfg = self.config
        subset = self.eval_subset()
        auc_rows: list[dict] = []
        mean_curves: dict[tuple[str, str, Direction], FaithfulnessCurve] = {}
        curve_entries = []
        for spec in self.config.backbones:
            adapter = self.adapter(spec)
            predict = lambda batch: adapter.predict_proba(batch, batch_size=cfg.train.batch_size)  # noqa: E731
            collected: dict[SaliencyMethod, dict[Direction, list[FaithfulnessCurve]]] = {
                m: {d: [] for d in Direction} for m in cfg.methods
            }
            skips: dict[SaliencyMethod, int] = {m: 0 for m in cfg.methods}
            for sample in subset:
                try:
                    # one capture of the predicted class serves every method
                    target = int(predict(sample.pixels[None])[0].argmax())
                    bundle = adapter.forward_with_capture(sample.pixels, target)
                except Exception as exc:
                    logger.warning("capture failed on %s: %s", sample.source_path, exc)
                    for method in cfg.methods:
                        skips[method] += 1
                    continue
                for method in cfg.methods:
                    try:
                        smap = explain_bundle(
                            bundle, method,
                            rollout_cfg=cfg.rollout, grad_rollout_cfg=cfg.grad_rollout,
                        )
                    except Exception as exc:
                        skips[method] += 1
                        logger.warning("explainer %s failed on %s: %s", method.value, sample.source_path, exc)
                        continue
                    for direction, baseline in (
                        (Direction.INSERTION, cfg.faithfulness.insertion_baseline),
                        (Direction.DELETION, cfg.faithfulness.deletion_baseline),
                    ):
                        curve = faithfulness_curve(
                            predict, sample.pixels, smap, target, direction,
                            baseline=baseline, steps=cfg.faithfulness.steps,
                            batch_size=cfg.train.batch_size,
                        )
                        collected[method][direction].append(curve)
                        curve_entries.append((curve, sample.source_path, spec.family.value, method.value))
            for method in cfg.methods:
                for direction, curves in collected[method].items():
                    if not curves:
                        auc_rows.append({
                            "model": spec.family.value, "method": method.value,
                            "direction": direction.value, "mean_auc": None,
                            "n_images": 0, "skipped": skips[method],
                        })
                        continue
                    agg = aggregate_curves(curves)
                    mean_curves[(spec.family.value, method.value, direction)] = agg.mean_curve
                    auc_rows.append({
                        "model": spec.family.value, "method": method.value,
                        "direction": direction.value, "mean_auc": round(agg.mean_auc, 4),
                        "n_images": agg.n_curves, "skipped": skips[method],
                    })
        auc_path = self._record("auc.csv")
        with open(auc_path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["model", "method", "direction", "mean_auc", "n_images", "skipped"]
            )
            writer.writeheader()
            for row in auc_rows:
                writer.writerow(row)
        curves_path = self._record("curves.csv")
        write_curves_csv(curves_path, curve_entries)
        table = {
            (row["model"], row["method"], Direction(row["direction"])): row["mean_auc"]
            for row in auc_rows if row["mean_auc"] is not None
        }
        summary_path = self._record("auc_summary.txt")
        summary_path.write_text(format_auc_summary(
            table,
            models=[s.family.value for s in self.config.backbones],
            methods=[m.value for m in cfg.methods],
        ))
        return auc_rows, mean_curves

    def render_gallery(self, samples: Sequence) -> list[str]:
        """One grid per method: rows are samples, columns are input plus one
        predicted-class heatmap per backbone."""
        import matplotlib.pyplot as plt

        if len(samples) == 0:
            return []
        paths = []
        adapters = [(spec, self.adapter(spec)) for spec in self.config.backbones]
        for method in self.config.methods:
            n_rows, n_cols = len(samples), 1 + len(adapters)
            fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.2 * n_cols, 2.2 * n_rows), squeeze=False)
            for r, sample in enumerate(samples):
                rgb = denormalize(sample.pixels).transpose(1, 2, 0)
                axes[r][0].imshow(rgb)
                axes[r][0].set_ylabel(sample.class_names[sample.label], fontsize=8)
                if r == 0:
                    axes[r][0].set_title("input", fontsize=9)
                for c, (spec, adapter) in enumerate(adapters, start=1):
                    target = int(adapter.predict_proba(sample.pixels[None])[0].argmax())
                    smap = explain_image(
                        adapter, method, sample.pixels, target,
                        rollout_cfg=self.config.rollout, grad_rollout_cfg=self.config.grad_rollout,
                    )
                    axes[r][c].imshow(rgb)
                    axes[r][c].imshow(smap.values, cmap="jet", alpha=0.5)
                    if r == 0:
                        axes[r][c].set_title(spec.family.value, fontsize=9)
                for ax in axes[r]:
                    ax.set_xticks([])
                    ax.set_yticks([])
            fig.suptitle(method.value)
            fig.tight_layout()
            out = self._record(Path("gallery") / f"{method.value}.png")
            out.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(out, dpi=120)
            plt.close(fig)
            paths.append(str(out))
        return paths

    def misclassification_report(
        self,
        adapter: TransformerAdapter,
        method: SaliencyMethod,
        validation: ImageCollection,
        max_cases: int = 10,
        all_classes: bool = False,
    ) -> list[ErrorCase]:
        """Saliency panels for misclassified validation images: the predicted
        class next to the true class (optionally every class)."""
        import matplotlib.pyplot as plt

        probs = adapter.predict_proba(validation, batch_size=self.config.train.batch_size)
        predictions = probs.argmax(axis=1)
        labels = validation.labels
        wrong = np.flatnonzero(predictions != labels)[:max_cases]
        cases: list[ErrorCase] = []
        errors_dir = self.output_dir / "errors"
        for rank, idx in enumerate(wrong):
            sample = validation[int(idx)]
            predicted = int(predictions[idx])
            confidence = float(probs[idx, predicted])
            class_ids = list(range(len(sample.class_names))) if all_classes else [predicted, sample.label]
            maps: dict[int, SaliencyMap] = {}
            saliency_paths: dict[str, str] = {}
            for class_id in class_ids:
                smap = explain_image(
                    adapter, method, sample.pixels, class_id,
                    rollout_cfg=self.config.rollout, grad_rollout_cfg=self.config.grad_rollout,
                )
                maps[class_id] = smap
                png = errors_dir / f"case{rank:02d}_class_{sample.class_names[class_id]}.png"
                png.parent.mkdir(parents=True, exist_ok=True)
                save_saliency_png(smap, png)
                self._record(png)
                self._record(png.with_suffix(".txt"))
                saliency_paths[sample.class_names[class_id]] = str(png)

            rgb = denormalize(sample.pixels).transpose(1, 2, 0)
            fig, axes = plt.subplots(1, 1 + len(class_ids), figsize=(2.4 * (1 + len(class_ids)), 2.6), squeeze=False)
            axes[0][0].imshow(rgb)
            axes[0][0].set_title(f"true: {sample.class_names[sample.label]}", fontsize=8)
            for col, class_id in enumerate(class_ids, start=1):
                axes[0][col].imshow(rgb)
                axes[0][col].imshow(maps[class_id].values, cmap="jet", alpha=0.5)
                tag = "predicted" if class_id == predicted else ("true" if class_id == sample.label else "other")
                axes[0][col].set_title(
                    f"{tag}: {sample.class_names[class_id]}"
                    + (f" ({100 * confidence:.2f}%)" if class_id == predicted else ""),
                    fontsize=8,
                )
            for ax in axes[0]:
                ax.set_xticks([])
                ax.set_yticks([])
            fig.tight_layout()
            panel = errors_dir / f"case{rank:02d}_panel.png"
            fig.savefig(panel, dpi=120)
            plt.close(fig)
            self._record(panel)

            cases.append(ErrorCase(
                image_id=sample.source_path,
                true_class=sample.class_names[sample.label],
                predicted_class=sample.class_names[predicted],
                confidence=confidence,
                saliency_paths=saliency_paths,
                panel_path=str(panel),
            ))
        return cases

    # -- composition ----------------------------------------------------------

    def write_manifest(self) -> Path:
        path = self.output_dir / "manifest.txt"
        lines = [
            f"config_hash: {self.config.config_hash()}",
            f"seed: {self.config.seed}",
            f"train_seed: {self.config.train.seed}",
            f"dataset: {self.config.dataset}",
            f"note: {VAL_FRACTION_NOTE}",
        ]
        for stage, status in self._stage_status.items():
            lines.append(f"stage {stage}: {status}")
        lines.extend(f"artifact: {p}" for p in self._artifacts)
        path.write_text("\n".join(lines) + "\n")
        return path

    def run_all(self, gallery_samples: int = 5, max_error_cases: int = 4) -> ReportBundle:
        """classification -> faithfulness -> gallery -> error analysis.

        A failing stage is recorded and later stages still run with whatever
        inputs are available.
        """
        failures: dict[str, str] = {}
        classification: list[dict] = []
        auc_rows: list[dict] = []
        curves: dict[tuple[str, str, Direction], FaithfulnessCurve] = {}
        gallery: list[str] = []
        error_cases: list[ErrorCase] = []

        def run_stage(name, fn):
            try:
                result = fn()
                self._stage_status[name] = "ok"
                return result
            except Exception as exc:
                logger.exception("stage %s failed", name)
                self._stage_status[name] = f"failed: {exc}"
                failures[name] = str(exc)
                return None

        result = run_stage("classification", self.run_classification)
        if result is not None:
            classification = result
        result = run_stage("faithfulness", self.run_faithfulness)
        if result is not None:
            auc_rows, curves = result

        def gallery_stage():
            subset = self.eval_subset()
            picks = [subset[i] for i in range(min(gallery_samples, len(subset)))]
            return self.render_gallery(picks)

        result = run_stage("gallery", gallery_stage)
        if result is not None:
            gallery = result

        def error_stage():
            cases = []
            split = self.dataset_split()
            methods = self.config.methods
            method = SaliencyMethod.GRAD_CAM if SaliencyMethod.GRAD_CAM in methods else methods[0]
            for spec in self.config.backbones:
                cases.extend(self.misclassification_report(
                    self.adapter(spec), method, split.validation, max_cases=max_error_cases
                ))
            return cases

        result = run_stage("errors", error_stage)
        if result is not None:
            error_cases = result

        manifest = self.write_manifest()
        return ReportBundle(
            classification_table=classification,
            auc_table=auc_rows,
            curves=curves,
            gallery_paths=gallery,
            error_cases=error_cases,
            manifest_path=str(manifest),
            failures=failures,
        )


def run_classification(config: ExperimentConfig) -> list[dict]:
    return ExperimentRunner(config).run_classification()


def run_faithfulness(config: ExperimentConfig):
    return ExperimentRunner(config).run_faithfulness()


def run_all(config: ExperimentConfig, **kwargs) -> ReportBundle:
    return ExperimentRunner(config).run_all(**kwargs)
