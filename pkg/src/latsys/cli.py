"""Command-line entry point: ``latsys <command>``."""

from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

import click

from latsys.adversarial import attack_dataset, write_adversarial_split
from latsys.dataprep import SyntheticSpec, generate_synthetic, write_dataset
from latsys.engine import decide, narrate
from latsys.features import ExtractionCounter
from latsys.harness import (
    CLEAN,
    AccuracyReport,
    ExperimentConfig,
    FeatureMemo,
    fold_banks,
    load_dataset,
    load_fold_models,
    load_golden,
    make_folds,
    read_outcomes,
    replay_traces,
    run_experiment,
    save_fold_models,
    train_fold,
)

def _config(manifest, seed) -> ExperimentConfig:
    overrides = {} if seed is None else {"seed": seed}
    if manifest is None:
        return ExperimentConfig.from_dict(None, **overrides)
    return ExperimentConfig.load(manifest, **overrides)


def _fold_dir(out: Path, fold: int) -> Path:
    return out / f"fold-{fold:02d}"


manifest_option = click.option(
    "--manifest", "-m", type=click.Path(exists=True, dir_okay=False),
    help="JSON run manifest; defaults apply to anything it leaves out.")
seed_option = click.option("--seed", type=int, default=None,
                           help="Override the manifest seed.")


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress to stderr.")
def main(verbose: int) -> None:
    """Lateralized part-based classification under adversarial attack."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--n-images", type=int, default=1600, show_default=True)
@click.option("--n-classes", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def synth(out, n_images, n_classes, seed):
    """Generate the synthetic part dataset as PNG files plus CSV metadata."""
    ds = generate_synthetic(SyntheticSpec(n_classes=n_classes, seed=seed), n_images)
    write_dataset(ds, out)
    click.echo(f"wrote {len(ds)} images to {out}")


@main.command()
@manifest_option
@seed_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--fold", "folds", type=int, multiple=True,
              help="Train only these folds (repeatable).")
def train(manifest, seed, out, folds):
    """Train holistic net, part nets and part forests for each fold."""
    config = _config(manifest, seed)
    ds = load_dataset(config)
    plan = make_folds(ds.ids, ds.labels, config.folds, config.seed)
    memo = FeatureMemo(config.feature_set)
    index_of = {image_id: i for i, image_id in enumerate(ds.ids)}
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(config.to_json() + "\n")
    (out / "folds.json").write_text(json.dumps(plan.to_dict()) + "\n")
    for fold in folds or range(plan.k):
        train_index = [index_of[i] for i in plan.train(fold)]
        models = train_fold(ds, train_index, config, fold, memo)
        save_fold_models(models, _fold_dir(out, fold))
        click.echo(f"fold {fold}: models saved to {_fold_dir(out, fold)}")


@main.command()
@click.option("--models", type=click.Path(exists=True, file_okay=False), required=True,
              help="Output directory of `latsys train`.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--fold", "folds", type=int, multiple=True)
def attack(models, out, folds):
    """Write adversarial versions of each fold's test split."""
    models = Path(models)
    config = ExperimentConfig.load(models / "manifest.json")
    ds = load_dataset(config)
    plan = make_folds(ds.ids, ds.labels, config.folds, config.seed)
    index_of = {image_id: i for i, image_id in enumerate(ds.ids)}
    for fold in folds or range(plan.k):
        fold_models = load_fold_models(_fold_dir(models, fold))
        test_ids = plan.test(fold)
        index = [index_of[i] for i in test_ids]
        for params in config.attacks:
            images, manifest = attack_dataset(
                ds.images[index], ds.labels[index], test_ids, fold_models.holistic,
                params, seed=int(config.seed), train_ids=plan.train(fold),
                model_checksum=fold_models.holistic.checksum())
            target = write_adversarial_split(
                Path(out) / f"fold-{fold:02d}" / params.name, images, test_ids, manifest)
            click.echo(f"fold {fold} {params.name}: max L-inf "
                       f"{max(manifest.linf, default=0.0):g} -> {target}")


@main.command()
@manifest_option
@seed_option
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.option("--jobs", type=int, default=1, show_default=True,
              help="Folds evaluated in parallel processes.")
def run(manifest, seed, out, jobs):
    """Full cross-validated experiment; writes report, traces and audits."""
    config = _config(manifest, seed)
    started = time.perf_counter()
    result = run_experiment(config, jobs=jobs)
    result.write(out)
    summary = result.summary
    click.echo(result.report.to_text(), nl=False)
    click.echo(f"clean inhibit fraction {summary['clean_inhibit_fraction']:.3f}; "
               f"runtime {time.perf_counter() - started:.0f}s", err=True)
    if not summary["recount_matches"] or summary["clean_inhibit_extractions"]:
        click.echo("audit failed: see summary.json", err=True)
        sys.exit(1)


@main.command(name="decide")
@click.option("--models", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--fold", type=int, default=0, show_default=True)
@click.option("--image-id", required=True)
@click.option("--attack", "attack_name", default=CLEAN, show_default=True,
              help="Condition to apply before deciding, e.g. Itr-M.")
@click.option("--json", "as_json", is_flag=True, help="Print the trace as JSON.")
def decide_cmd(models, fold, image_id, attack_name, as_json):
    """Decide a single image with one fold's models and print the trace."""
    models = Path(models)
    config = ExperimentConfig.load(models / "manifest.json")
    ds = load_dataset(config)
    if image_id not in ds.ids:
        raise click.BadParameter(f"unknown image id {image_id!r}")
    i = ds.ids.index(image_id)
    fold_models = load_fold_models(_fold_dir(models, fold))
    pixels = ds.images[i]
    if attack_name != CLEAN:
        params = {a.name: a for a in config.attacks}.get(attack_name)
        if params is None:
            raise click.BadParameter(f"attack {attack_name!r} not in the manifest")
        pixels = attack_dataset(pixels[None], [ds.labels[i]], [image_id],
                                fold_models.holistic, params)[0][0]
    counter = ExtractionCounter()
    context, attention = fold_banks(fold_models, FeatureMemo(config.feature_set),
                                    counter, config.include_face)
    trace = decide(ds.sample(i, pixels), context, attention,
                   extraction_count=lambda: counter.count, top=config.top)
    click.echo(trace.to_json() if as_json else narrate(trace))


@main.command()
@click.option("--golden", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Golden fixture file; the bundled bird cases by default.")
def replay(golden):
    """Replay the golden decision fixtures; exit 1 on any mismatch."""
    results = replay_traces(load_golden(golden))
    for r in results:
        click.echo(r.line())
    if not all(r.passed for r in results):
        sys.exit(1)


@main.command()
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Output directory of `latsys run`.")
@click.option("--csv", "as_csv", is_flag=True)
def report(run_dir, as_csv):
    """Render the accuracy table recounted from stored per-image outcomes."""
    run_dir = Path(run_dir)
    stored = AccuracyReport.from_dict(
        json.loads((run_dir / "summary.json").read_text())["report"])
    recount = AccuracyReport.from_outcomes(read_outcomes(run_dir / "outcomes.csv"),
                                           stored.conditions)
    click.echo(recount.to_csv() if as_csv else recount.to_text(), nl=False)
    if recount.to_dict() != stored.to_dict():
        click.echo("recount differs from the stored report", err=True)
        sys.exit(1)


if __name__ == "__main__":
    main()
