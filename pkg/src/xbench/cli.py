"""Command-line entry points: train, explain, faithfulness, report."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import numpy as np

from .adapters import BackboneFamily, build_adapter, default_spec
from .data import load_sample_image, preprocess
from .explainers import SaliencyMethod, save_overlay_png, save_saliency_png
from .runner import ExperimentRunner, load_config

logger = logging.getLogger(__name__)


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )


def _load(config_path: str, seed, output_dir, subset):
    return load_config(
        config_path,
        seed=seed,
        output_dir=Path(output_dir) if output_dir else None,
        eval_per_class=subset,
    )


@click.group()
@click.option("--verbose", is_flag=True, help="Debug logging.")
def main(verbose: bool):
    """Benchmark saliency explanations of transformer image classifiers."""
    _configure_logging(verbose)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--subset", type=int, default=None, help="Evaluation images per class.")
def train(config_path, seed, output_dir, subset):
    """Fine-tune the configured backbones and report accuracy/F1."""
    config = _load(config_path, seed, output_dir, subset)
    rows = ExperimentRunner(config).run_classification()
    for row in rows:
        click.echo(row)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--subset", type=int, default=None)
def faithfulness(config_path, seed, output_dir, subset):
    """Score insertion/deletion AUC for every configured (model, method)."""
    config = _load(config_path, seed, output_dir, subset)
    runner = ExperimentRunner(config)
    rows, _ = runner.run_faithfulness()
    runner.write_manifest()
    for row in rows:
        click.echo(row)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@click.option("--output-dir", type=click.Path(), default=None)
@click.option("--subset", type=int, default=None)
@click.option("--gallery-samples", type=int, default=5)
@click.option("--max-error-cases", type=int, default=4)
def run(config_path, seed, output_dir, subset, gallery_samples, max_error_cases):
    """Full pipeline: train, score, render galleries and error panels."""
    config = _load(config_path, seed, output_dir, subset)
    bundle = ExperimentRunner(config).run_all(
        gallery_samples=gallery_samples, max_error_cases=max_error_cases
    )
    click.echo(f"manifest: {bundle.manifest_path}")
    if bundle.failures:
        click.echo(f"failed stages: {bundle.failures}")
        sys.exit(1)


@main.command()
@click.option("--model", "family", required=True,
              type=click.Choice([f.value for f in BackboneFamily]))
@click.option("--method", "method_name", required=True,
              type=click.Choice([m.value for m in SaliencyMethod]))
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--weights", type=click.Path(exists=True), default=None,
              help="Fine-tuned .wt file; the head size is read from it.")
@click.option("--pretrained/--no-pretrained", default=False,
              help="Pull the published checkpoint instead of random init.")
@click.option("--num-classes", type=int, default=None,
              help="Head size when no --weights file is given.")
@click.option("--target-class", type=int, default=None,
              help="Class to explain; defaults to the predicted class.")
@click.option("--output", type=click.Path(), default=None)
def explain(family, method_name, image_path, weights, pretrained, num_classes, target_class, output):
    """Saliency map (16-bit PNG + sidecar + overlay) for one image."""
    import torch

    from .runner import explain_image

    spec = default_spec(family)
    if weights is not None:
        state = torch.load(weights, map_location="cpu", weights_only=True)
        if "classifier.weight" not in state:
            raise click.ClickException(f"{weights} has no classifier head")
        num_classes = state["classifier.weight"].shape[0]
    elif num_classes is None:
        raise click.ClickException("pass --weights or --num-classes")

    adapter = build_adapter(spec, num_classes, pretrained=pretrained)
    if weights is not None:
        adapter.load_weights(weights)
    elif not pretrained:
        logger.warning("explaining with an untrained model; maps will be uninformative")

    pixels = preprocess(load_sample_image(image_path))
    if target_class is None:
        target_class = int(adapter.predict_proba(pixels[None])[0].argmax())
    smap = explain_image(adapter, SaliencyMethod(method_name), pixels, target_class)

    stem = Path(output) if output else Path(image_path).with_suffix("")
    out_png = stem if stem.suffix == ".png" else stem.with_name(f"{stem.name}_{method_name}.png")
    save_saliency_png(smap, out_png)
    overlay = out_png.with_name(out_png.stem + "_overlay.png")
    save_overlay_png(smap, pixels, overlay)
    click.echo(f"saliency: {out_png}")
    click.echo(f"overlay: {overlay}")
    click.echo(f"target_class: {target_class}")


@main.command()
@click.option("--run", "run_dir", required=True, type=click.Path(exists=True))
def report(run_dir):
    """Print the tables and manifest of a finished run directory."""
    run_dir = Path(run_dir)
    manifest = run_dir / "manifest.txt"
    if manifest.exists():
        click.echo(manifest.read_text().rstrip())
    for name in ("metrics.csv", "auc.csv"):
        path = run_dir / name
        if path.exists():
            click.echo(f"\n== {name} ==")
            click.echo(path.read_text().rstrip())
    summary = run_dir / "auc_summary.txt"
    if summary.exists():
        click.echo("\n== auc_summary ==")
        click.echo(summary.read_text().rstrip())
    if not manifest.exists():
        raise click.ClickException(f"{run_dir} does not look like a run directory (no manifest.txt)")


if __name__ == "__main__":
    main()
