"""Command-line interface.

Exit codes: 0 on success, 2 on validation errors (bad trees, specs, configs,
taxonomy mismatches), 3 on backend failure in strict mode.
"""
from __future__ import annotations

import functools
import json
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import dataset as ds
from . import harness, synth
from .errors import ConfigError, GatewayError, ValidationError
from .experts import (
    MemoryBankDetector,
    MemoryBankExpertSet,
    OracleExpert,
    load_external_maps,
)
from .gateway import BackendConfig, HttpBackend, load_backend_config
from .overlay import OverlayStyle
from .prompting import AblationFlags, load_taxonomy

EXIT_VALIDATION = 2
EXIT_BACKEND = 3


def _handle_errors(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (ValidationError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_VALIDATION)
        except GatewayError as exc:
            click.echo(f"backend error: {exc}", err=True)
            sys.exit(EXIT_BACKEND)

    return wrapper


@click.group()
def main():
    """Anomaly classification pipeline and evaluation harness."""


@main.command()
@click.option("--root", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--layout", required=True, type=click.Choice(["mvtec", "visa_csv"]))
@click.option("--csv", "csv_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_handle_errors
def scan(root, layout, csv_path, out):
    """Index an image tree into a JSON sample list."""
    index = ds.scan_dataset(root, layout, csv_path)
    ds.save_index(index, out)
    click.echo(
        f"indexed {len(index.samples)} samples in {len(index.categories)} categories -> {out}"
    )


@main.command()
@click.option("--index", "index_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--spec", required=True, help="Spec file path or builtin name (mvtec_ac, visa_ac).")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_handle_errors
def refine(index_path, spec, out):
    """Apply a refinement spec to an index."""
    index = ds.load_index(index_path)
    if Path(spec).is_file():
        refinement = ds.load_refinement_spec(spec)
    else:
        refinement = ds.builtin_refinement_spec(spec)
    stats = ds.refinement_stats(index, refinement)
    refined = ds.apply_refinement(index, refinement)
    ds.save_index(refined, out)
    click.echo(
        f"refined: {stats.relabels_applied} relabels, {stats.merges_applied} merges, "
        f"{len(stats.categories_dropped)} categories dropped, "
        f"{len(stats.classes_dropped) + len(stats.classes_dropped_min_samples)} classes dropped, "
        f"{stats.samples_removed} samples removed -> {out}"
    )


@main.command("fit-expert")
@click.option("--index", "index_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--category", required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_handle_errors
def fit_expert(index_path, category, config_path, out):
    """Fit the memory-bank detector on a category's training images."""
    from . import imgio

    index = ds.load_index(index_path)
    if category not in index.categories:
        raise ConfigError(f"category not in index: {category!r}")
    params = {}
    if config_path:
        params = json.loads(Path(config_path).read_text(encoding="utf-8"))
        if "scales" in params:
            params["scales"] = tuple(params["scales"])
    detector = MemoryBankDetector(**params)
    train = index.samples_for(category, ds.TRAIN)
    if not train:
        raise ConfigError(f"category {category!r} has no training samples")
    images = [imgio.load_rgb(s.image_path) for s in train]
    detector.fit(images)
    detector.save(out, category=category)
    click.echo(
        f"fitted bank for {category}: {len(detector.bank_)} descriptors, "
        f"threshold {detector.threshold_:.4f} -> {out}"
    )


def _build_expert(spec: str, expert_threshold: float | None):
    if spec == "oracle":
        return OracleExpert()
    if spec.startswith("external:"):
        return load_external_maps(spec.split(":", 1)[1], expert_threshold)
    if spec.startswith("bank:"):
        path = Path(spec.split(":", 1)[1])
        detectors = {}
        bank_files = sorted(path.glob("*.bank")) if path.is_dir() else [path]
        for bank_file in bank_files:
            detector, category = MemoryBankDetector.load(bank_file)
            if category is None:
                raise ConfigError(
                    f"bank file {bank_file} does not record a category; refit with fit-expert"
                )
            detectors[category] = detector
        return MemoryBankExpertSet(detectors)
    raise ConfigError(
        f"unknown expert spec {spec!r}; expected oracle, external:DIR, or bank:PATH"
    )


def _build_backend(config: BackendConfig, index: ds.DatasetIndex):
    if config.kind == "openai":
        return HttpBackend(config)
    if config.kind == "echo":
        return harness.make_echo_backend(index)
    raise ConfigError(f"unknown backend kind {config.kind!r}")


def _eval_options(func):
    options = [
        click.option("--index", "index_path", required=True, type=click.Path(exists=True, dir_okay=False)),
        click.option("--expert", "expert_spec", required=True),
        click.option("--expert-threshold", type=float, default=None),
        click.option("--backend", "backend_path", required=True, type=click.Path(exists=True, dir_okay=False)),
        click.option("--taxonomy", "taxonomy_path", required=True, type=click.Path(exists=True, dir_okay=False)),
        click.option("--cache", "cache_dir", type=click.Path(file_okay=False), default=None),
        click.option("--overlay-dir", type=click.Path(file_okay=False), default=None),
        click.option("--no-ri", is_flag=True, help="Drop the reference image."),
        click.option("--no-vp", is_flag=True, help="Drop the visual prompt overlay."),
        click.option("--no-nd", is_flag=True, help="Drop the normal description."),
        click.option("--no-cs", is_flag=True, help="Drop the classification strategy."),
        click.option("--no-ad", is_flag=True, help="Drop the anomaly descriptions."),
        click.option("--seed", "reference_seed", type=int, default=0),
        click.option("--strict", is_flag=True),
        click.option("--parallelism", type=int, default=None),
        click.option("--line-width", type=int, default=3),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _make_eval_config(
    index, expert_spec, expert_threshold, backend_path, cache_dir, overlay_dir,
    no_ri, no_vp, no_nd, no_cs, no_ad, reference_seed, strict, parallelism, line_width,
):
    backend_config = load_backend_config(backend_path)
    flags = AblationFlags(
        reference_image=not no_ri,
        visual_prompt=not no_vp,
        normal_description=not no_nd,
        classification_strategy=not no_cs,
        anomaly_descriptions=not no_ad,
    )
    return harness.EvalConfig(
        expert=_build_expert(expert_spec, expert_threshold),
        backend=_build_backend(backend_config, index),
        backend_config=backend_config,
        flags=flags,
        reference_seed=reference_seed,
        cache_dir=Path(cache_dir) if cache_dir else None,
        overlay_dir=Path(overlay_dir) if overlay_dir else None,
        strict=strict,
        parallelism=parallelism if parallelism else backend_config.parallelism,
        overlay_style=OverlayStyle(line_width=line_width),
    )


@main.command("eval")
@_eval_options
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--log", "log_path", type=click.Path(dir_okay=False), default=None)
@click.option("--csv-out", type=click.Path(dir_okay=False), default=None)
@_handle_errors
def eval_command(index_path, taxonomy_path, out, log_path, csv_out, **kwargs):
    """Run the classification evaluation over anomalous test samples."""
    from .metrics import report_to_csv

    index = ds.load_index(index_path)
    taxonomy = load_taxonomy(taxonomy_path)
    cfg = _make_eval_config(index, **kwargs)
    report, records = harness.run_classification_eval(index, taxonomy, cfg)
    Path(out).write_text(harness.classification_report_json(report, cfg), encoding="utf-8")
    if log_path:
        harness.write_records(records, log_path)
    if csv_out:
        Path(csv_out).write_text(report_to_csv(report), encoding="utf-8")
    click.echo(
        f"mean acc {report.mean_acc:.4f}, f1 {report.mean_f1:.4f}, "
        f"kappa {report.mean_kappa:.4f} over {len(report.per_category)} categories -> {out}"
    )


@main.command()
@_eval_options
@click.option("--fraction", type=float, default=0.30)
@click.option("--seeds", "num_seeds", type=int, default=5)
@click.option("--seed-list", default=None, help="Comma-separated explicit seed list.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_handle_errors
def triage(index_path, taxonomy_path, fraction, num_seeds, seed_list, out, **kwargs):
    """Run the normal / negligible-anomaly / defect triage evaluation."""
    index = ds.load_index(index_path)
    taxonomy = load_taxonomy(taxonomy_path)
    cfg = _make_eval_config(index, **kwargs)
    if cfg.backend_config.kind == "echo":
        cfg = replace(cfg, backend=harness.make_triage_echo_backend(index))
    seeds = tuple(int(s) for s in seed_list.split(",")) if seed_list else None
    triage_cfg = harness.TriageConfig(
        negligible_fraction=fraction, num_seeds=num_seeds, seeds=seeds
    )
    report = harness.run_triage_eval(index, taxonomy, triage_cfg, cfg)
    Path(out).write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    click.echo(f"triage grand mean {report.grand_mean:.4f} -> {out}")


@main.command()
@_eval_options
@click.option("--flagsets", "flagsets_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_handle_errors
def ablate(index_path, taxonomy_path, flagsets_path, out, **kwargs):
    """Run the prompt-part ablation grid."""
    index = ds.load_index(index_path)
    taxonomy = load_taxonomy(taxonomy_path)
    cfg = _make_eval_config(index, **kwargs)
    entries = json.loads(Path(flagsets_path).read_text(encoding="utf-8"))
    flag_sets = [AblationFlags(**entry) for entry in entries]
    result = harness.run_ablation(index, taxonomy, cfg, flag_sets)
    Path(out).write_text(
        json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    click.echo(f"ablation columns {', '.join(result.columns)} -> {out}")


@main.command("synth")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0)
@click.option("--categories", type=int, default=3)
@click.option("--image-size", type=int, default=64)
@click.option("--train-samples", type=int, default=30)
@click.option("--test-good", type=int, default=20)
@click.option("--test-per-class", type=int, default=20)
@_handle_errors
def synth_command(out_dir, seed, categories, image_size, train_samples, test_good, test_per_class):
    """Generate the synthetic texture benchmark plus its taxonomy file."""
    from .prompting import save_taxonomy

    config = synth.SynthConfig(
        categories=categories,
        train_samples=train_samples,
        test_good=test_good,
        test_per_class=test_per_class,
        image_size=image_size,
        seed=seed,
    )
    root = synth.generate_synthetic_benchmark(out_dir, config)
    taxonomy = synth.synthetic_taxonomy(config.category_names(), config.anomaly_kinds)
    save_taxonomy(taxonomy, root / "taxonomy.json")
    click.echo(f"synthetic benchmark written to {root}")


if __name__ == "__main__":
    main()
