#!/usr/bin/env python3
# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""
cycle-interpret - train coupled simulators against a classifier and explain it.
"""

import functools
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import click
import torch
from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table

from config import ConfigError, RunConfig, example_config, load_config
from evalviz import (EVALUATION_FILE, EXPLAIN_METHODS, PROPOSED, evaluate_run, extract_pattern, render_report,
                     subject_pattern_path, warp_field_path)
from layers import checkpoint_hash, load_checkpoint, save_checkpoint
from rundir import CONFIG_NAME, ArtifactError, RunDirectory
from saliency import compute_saliency, occlusion_map
from synthdata import SyntheticDataset, gen_dataset, gen_dataset_3d
from training import INJECT, REMOVE, simulate, train_classifier, train_simulator_pair
from utils import directory_sha256, get_device
from warp import WarpField

load_dotenv()

logger = logging.getLogger(__name__)
console = Console()

CLASSIFIER_DIR = 'checkpoints/classifier'
SIMULATOR_DIR = 'checkpoints/simulator'
OCCLUSION_STRIDE = 4
OCCLUSION_WINDOW = 8


def handle_errors(func):
    """Turn library errors into `❌ Error:` lines, a JSON stderr record and an exit code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ArtifactError as e:
            code = 2
            error = e
        except (ConfigError, ValueError, FileNotFoundError) as e:
            code = 1
            error = e
        click.echo(f"❌ Error: {error}")
        click.echo(json.dumps({'error': type(error).__name__, 'message': str(error)}), err=True)
        sys.exit(code)

    return wrapper


# ── Shared steps (used by single commands and by `run`) ─────────


def _resolve_config(config_path: Optional[str], run: Optional[RunDirectory], seed: Optional[int]) -> RunConfig:
    """--config wins; otherwise the run's own config.json; otherwise defaults."""
    if config_path is None and run is not None and run.path(CONFIG_NAME).exists():
        config_path = run.path(CONFIG_NAME)
    return load_config(config_path, seed)


def _data_dir(run: RunDirectory, data: Optional[str]) -> Path:
    if data is not None:
        return Path(data)
    recorded = run.load_manifest().inputs.get('data', {}).get('path')
    if recorded is None:
        raise ArtifactError(f"No dataset given and none recorded in {run.manifest_path}; pass --data")
    return Path(recorded)


def _load_dataset(data_dir: Path) -> SyntheticDataset:
    if (data_dir / 'manifest.json').exists():
        RunDirectory(data_dir, create=False).verify()
    return SyntheticDataset.load(data_dir)


def _checkpoint(run: RunDirectory, given: Optional[str], default: str) -> Path:
    if given is not None:
        path = Path(given)
        if not (path / 'architecture.json').exists():
            raise ArtifactError("Checkpoint not found", [str(path)])
        return path
    if run.manifest_path.exists():
        run.verify(prefix=default)
    run.require([f"{default}/architecture.json"], "Checkpoint not found")
    return run.path(default)


def step_synthgen(cfg: RunConfig, out: Path) -> SyntheticDataset:
    data = cfg.data
    generate = gen_dataset if data.dims == 2 else gen_dataset_3d
    dataset = generate(
        n_per_group=data.n_per_group,
        shape=tuple(data.shape),
        seed=data.seed,
        noise_sd=data.noise_sd,
        blob_width=data.blob_width,
        train_fraction=data.train_fraction,
    )
    target = RunDirectory(out, subdirs=())
    dataset.save(out)
    target.record('synthgen', [out / 'dataset.json', out / 'samples'],
                  config={'data': cfg.to_dict()['data']}, seeds={'data': data.seed})
    click.echo(f"  ✅ {len(dataset)} images ({data.dims}D, {tuple(data.shape)}) written to {out}")
    return dataset


def step_train_classifier(cfg: RunConfig, data_dir: Path, run: RunDirectory) -> None:
    dataset = _load_dataset(data_dir)
    cfg.save(run.path(CONFIG_NAME))
    model, history = train_classifier(dataset, cfg.train, metrics_path=run.path('metrics', 'classifier.jsonl'))
    run.clear(CLASSIFIER_DIR)
    save_checkpoint(model, run.path(CLASSIFIER_DIR))
    run.record(
        'train-classifier',
        [run.path(CONFIG_NAME), run.path('metrics', 'classifier.jsonl'), run.path(CLASSIFIER_DIR)],
        config=cfg.to_dict(),
        seeds={'train': cfg.train.seed},
        inputs={'data': {'path': str(data_dir.resolve()), 'sha256': directory_sha256(data_dir)}},
    )
    if history:
        click.echo(f"  ✅ Classifier trained: test accuracy {history[-1]['test_accuracy']:.3f}")
    else:
        click.echo("  ✅ Classifier saved (0 epochs)")


def step_train_simulator(cfg: RunConfig, data_dir: Path, run: RunDirectory, classifier: Optional[str]) -> None:
    dataset = _load_dataset(data_dir)
    classifier_path = _checkpoint(run, classifier, CLASSIFIER_DIR)
    P = load_checkpoint(classifier_path, frozen=True).to(get_device())
    cfg.save(run.path(CONFIG_NAME))
    run.clear(SIMULATOR_DIR)
    simulator, history = train_simulator_pair(
        P, dataset, cfg.train,
        metrics_path=run.path('metrics', 'simulator.jsonl'),
        checkpoint_dir=run.path(SIMULATOR_DIR),
    )
    save_checkpoint(simulator, run.path(SIMULATOR_DIR))
    run.record(
        'train-simulator',
        [run.path(CONFIG_NAME), run.path('metrics', 'simulator.jsonl'), run.path(SIMULATOR_DIR)],
        config=cfg.to_dict(),
        seeds={'train': cfg.train.seed},
        inputs={
            'data': {'path': str(data_dir.resolve()), 'sha256': directory_sha256(data_dir)},
            'classifier': {'path': str(classifier_path.resolve()), 'sha256': checkpoint_hash(classifier_path)},
        },
    )
    final = f"E {history[-1].e_total:.4f}" if history else "no steps"
    click.echo(f"  ✅ Simulator trained ({cfg.train.mode}, {cfg.train.coupling}): {final}")


def _explain_proposed(run: RunDirectory, dataset: SyntheticDataset, simulator_path: Path) -> int:
    simulator = load_checkpoint(simulator_path).to(get_device())
    source = 'proposed-direct' if simulator.mode == 'direct-image' else 'proposed-jacobian'
    count = 0
    for group, task in ((0, INJECT), (1, REMOVE)):
        images, _, ids = dataset.as_arrays('test', group=group)
        simulated, fields = simulate(simulator, images, task)
        for i, subject_id in enumerate(ids):
            field = fields[i] if fields is not None else None
            pattern = extract_pattern(images[i, 0], simulated[i, 0], field, source,
                                      subject_id=int(subject_id), group=group)
            pattern.save(subject_pattern_path(run, PROPOSED, int(subject_id)))
            if field is not None:
                WarpField(field).save(warp_field_path(run, int(subject_id)))
            count += 1
    return count


def _explain_baseline(method: str, run: RunDirectory, dataset: SyntheticDataset, P, classifier_hash: str) -> int:
    if method == 'occlusion':
        images, labels, _ = dataset.as_arrays('test')
        window = (OCCLUSION_WINDOW,) * dataset.dims
        saliency = occlusion_map(P, images, labels, window=window, stride=OCCLUSION_STRIDE)
        saliency.classifier_hash = classifier_hash
        saliency.save(run.path('patterns', 'occlusion', 'population'))
        return 1
    count = 0
    for sample in dataset.select(split='test'):
        saliency = compute_saliency(method, P, sample)
        saliency.classifier_hash = classifier_hash
        saliency.save(subject_pattern_path(run, method, sample.subject_id))
        count += 1
    return count


def step_explain(methods, data_dir: Path, run: RunDirectory, classifier: Optional[str],
                 simulator: Optional[str]) -> None:
    dataset = _load_dataset(data_dir)
    classifier_path = _checkpoint(run, classifier, CLASSIFIER_DIR)
    P = load_checkpoint(classifier_path, frozen=True).to(get_device())
    classifier_hash = checkpoint_hash(classifier_path)
    inputs = {
        'data': {'path': str(data_dir.resolve()), 'sha256': directory_sha256(data_dir)},
        'classifier': {'path': str(classifier_path.resolve()), 'sha256': classifier_hash},
    }

    for method in methods:
        run.clear(f"patterns/{method}")
        run.path('patterns', method).mkdir(parents=True, exist_ok=True)
        if method == PROPOSED:
            simulator_path = _checkpoint(run, simulator, SIMULATOR_DIR)
            inputs['simulator'] = {'path': str(simulator_path.resolve()),
                                   'sha256': checkpoint_hash(simulator_path)}
            count = _explain_proposed(run, dataset, simulator_path)
        else:
            count = _explain_baseline(method, run, dataset, P, classifier_hash)
        run.record(f"explain:{method}", [run.path('patterns', method)], inputs=inputs)
        click.echo(f"  🔍 {method}: {count} map(s) written")


def _ncc_table(summary: dict) -> Table:
    table = Table(title="Pattern recovery (NCC vs ground truth)")
    table.add_column("Method", style="cyan")
    table.add_column("Mean", justify="right")
    table.add_column("Std", justify="right")
    table.add_column("n", justify="right")
    table.add_column("Group map", justify="right")
    for method in sorted(set(summary['ncc']) | set(summary['group_ncc'])):
        stats = summary['ncc'].get(method, {'mean': None, 'std': None, 'n': 0})
        group = summary['group_ncc'].get(method)
        table.add_row(
            method,
            f"{stats['mean']:.3f}" if stats['mean'] is not None else "-",
            f"{stats['std']:.3f}" if stats['std'] is not None else "-",
            str(stats['n']),
            f"{group:.3f}" if group is not None else "-",
        )
    return table


def _logit_table(summary: dict) -> Table:
    table = Table(title="Logit trajectories")
    table.add_column("Task", style="cyan")
    table.add_column("Spearman", justify="right")
    table.add_column("Var raw", justify="right")
    table.add_column("Var simulated", justify="right")
    table.add_column("Mean shift", justify="right")
    table.add_column("Cycle RMSE/IQR", justify="right")
    for task, stats in sorted(summary['logit_rank'].items()):
        table.add_row(task, f"{stats['spearman']:.3f}", f"{stats['variance_raw']:.3f}",
                      f"{stats['variance_simulated']:.3f}", f"{stats['mean_shift']:.3f}",
                      f"{summary['cycle'][task]['ratio']:.4f}")
    return table


def step_evaluate(data_dir: Path, run: RunDirectory, classifier: Optional[str], simulator: Optional[str]) -> dict:
    dataset = _load_dataset(data_dir)
    if run.manifest_path.exists():
        run.verify(prefix='patterns/', command='explain:')
    P = load_checkpoint(_checkpoint(run, classifier, CLASSIFIER_DIR), frozen=True).to(get_device())
    sim = load_checkpoint(_checkpoint(run, simulator, SIMULATOR_DIR)).to(get_device())
    summary, written = evaluate_run(run, dataset, P, sim)
    run.record('evaluate', written)
    console.print(_ncc_table(summary))
    console.print(_logit_table(summary))
    return summary


def step_report(run: RunDirectory, data_dir: Optional[Path]) -> None:
    cfg = _resolve_config(None, run, None)
    dataset = _load_dataset(data_dir) if data_dir is not None else None
    written = render_report(run.root, dataset=dataset, explain_subjects=cfg.train.explain_subjects)
    run.record('report', written)
    click.echo(f"  📊 Report written to {run.path('figures')}")


# ── CLI ─────────────────────────────────────────────────────────


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Log at DEBUG level')
def cli(verbose):
    """Interpret a binary image classifier with cycle-consistent simulators."""
    level = 'DEBUG' if verbose else os.getenv('INTERPRET_LOG_LEVEL', 'INFO').upper()
    logging.basicConfig(level=level, format='%(asctime)s - %(levelname)s - %(message)s')
    threads = os.getenv('INTERPRET_THREADS')
    if threads:
        torch.set_num_threads(int(threads))


config_option = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                             help='Run config (JSON)')
seed_option = click.option('--seed', type=int, default=None, help='Override data and train seeds')
out_option = click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='Output directory')
data_option = click.option('--data', type=click.Path(exists=True, file_okay=False), default=None,
                           help='Dataset directory (default: the one recorded in the run manifest)')
classifier_option = click.option('--classifier', type=click.Path(exists=True, file_okay=False), default=None,
                                 help=f'Classifier checkpoint (default: <out>/{CLASSIFIER_DIR})')
simulator_option = click.option('--simulator', type=click.Path(exists=True, file_okay=False), default=None,
                                help=f'Simulator checkpoint (default: <out>/{SIMULATOR_DIR})')


@cli.command('config')
@click.option('--out', '-o', type=click.Path(dir_okay=False), default='config.json', help='File to write')
@click.option('--dims', type=click.Choice(['2', '3']), default='2', help='2D or 3D synthetic setting')
@handle_errors
def config_cmd(out, dims):
    """Write an example config with every key at its default."""
    path = example_config(int(dims)).save(out)
    click.echo(f"✅ Example config written to {path}")


@cli.command()
@config_option
@out_option
@seed_option
@handle_errors
def synthgen(config_path, out, seed):
    """Generate the synthetic two-group dataset."""
    click.echo("🧪 Generating synthetic dataset...")
    step_synthgen(load_config(config_path, seed), Path(out))


@cli.command('train-classifier')
@config_option
@data_option
@out_option
@seed_option
@handle_errors
def train_classifier_cmd(config_path, data, out, seed):
    """Train the logit classifier on the train split."""
    if data is None:
        raise click.UsageError("--data is required")
    run = RunDirectory(out)
    click.echo("🧠 Training classifier...")
    step_train_classifier(_resolve_config(config_path, run, seed), Path(data), run)


@cli.command('train-simulator')
@config_option
@data_option
@classifier_option
@out_option
@seed_option
@handle_errors
def train_simulator_cmd(config_path, data, classifier, out, seed):
    """Train the coupled simulator against the frozen classifier."""
    run = RunDirectory(out)
    click.echo("🔁 Training simulator...")
    step_train_simulator(_resolve_config(config_path, run, seed), _data_dir(run, data), run, classifier)


@cli.command()
@click.option('--method', '-m', 'methods', multiple=True, type=click.Choice(EXPLAIN_METHODS + ('all',)),
              default=(PROPOSED,), show_default=True, help='Explanation method (repeatable)')
@data_option
@classifier_option
@simulator_option
@out_option
@handle_errors
def explain(methods, data, classifier, simulator, out):
    """Write pattern / saliency maps for the test split."""
    methods = EXPLAIN_METHODS if 'all' in methods else tuple(dict.fromkeys(methods))
    run = RunDirectory(out)
    click.echo(f"🔍 Explaining with {', '.join(methods)}...")
    step_explain(methods, _data_dir(run, data), run, classifier, simulator)


@cli.command()
@data_option
@classifier_option
@simulator_option
@out_option
@handle_errors
def evaluate(data, classifier, simulator, out):
    """Score stored patterns against ground truth; write metrics/evaluation.json."""
    run = RunDirectory(out, create=False)
    click.echo("📏 Evaluating...")
    step_evaluate(_data_dir(run, data), run, classifier, simulator)
    click.echo(f"✅ Wrote {run.path(EVALUATION_FILE)}")


@cli.command()
@data_option
@out_option
@handle_errors
def report(data, out):
    """Render figures, summary.csv and report.html for an evaluated run."""
    run = RunDirectory(out, create=False)
    step_report(run, Path(data) if data else None)


@cli.command()
@config_option
@out_option
@seed_option
@handle_errors
def run(config_path, out, seed):
    """Full pipeline into one directory: data, classifier, simulator, all maps, evaluation, report."""
    cfg = load_config(config_path, seed)
    run_dir = RunDirectory(out)
    data_dir = run_dir.path('data')

    click.echo("🧪 Generating synthetic dataset...")
    step_synthgen(cfg, data_dir)
    click.echo("🧠 Training classifier...")
    step_train_classifier(cfg, data_dir, run_dir)
    click.echo("🔁 Training simulator...")
    step_train_simulator(cfg, data_dir, run_dir, None)
    click.echo("🔍 Explaining with every method...")
    step_explain(EXPLAIN_METHODS, data_dir, run_dir, None, None)
    click.echo("📏 Evaluating...")
    step_evaluate(data_dir, run_dir, None, None)
    step_report(run_dir, data_dir)
    click.echo("\n✨ Done!")


@cli.command()
@out_option
@handle_errors
def verify(out):
    """Re-hash every artifact listed in a run (or dataset) manifest."""
    count = RunDirectory(out, create=False).verify()
    click.echo(f"✅ {count} artifacts match {Path(out) / 'manifest.json'}")


if __name__ == '__main__':
    cli()
