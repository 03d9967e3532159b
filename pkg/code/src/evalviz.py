# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Pattern extraction, NCC scoring, group maps and the run report."""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import matplotlib

matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from jinja2 import Environment, FileSystemLoader  # noqa: E402

from layers import predict_logits  # noqa: E402
from rundir import ArtifactError, RunDirectory  # noqa: E402
from saliency import METHODS, SaliencyMap  # noqa: E402
from synthdata import SyntheticDataset, ground_truth_pattern, group_difference_map  # noqa: E402
from training import (  # noqa: E402
    INJECT,
    REMOVE,
    accuracy,
    balanced_accuracy,
    cycle_fidelity,
    logit_rank_statistics,
    logit_trajectories,
    simulate,
)
from utils import read_array, read_json, write_array, write_json  # noqa: E402
from warp import log_jacobian_map  # noqa: E402

logger = logging.getLogger(__name__)

PROPOSED_SOURCES = ('proposed-direct', 'proposed-jacobian')
SOURCES = PROPOSED_SOURCES + METHODS
PROPOSED = 'proposed'
EXPLAIN_METHODS = (PROPOSED,) + METHODS
GROUND_TRUTH = 'ground-truth'

EVALUATION_FILE = 'metrics/evaluation.json'
REPORT_INPUTS = ('metrics/evaluation.json', 'metrics/classifier.jsonl', 'metrics/simulator.jsonl')
REPORT_FILES = (
    'figures/subjects.png',
    'figures/logit_trajectories.png',
    'figures/ncc_summary.png',
    'figures/group_maps.png',
    'figures/report.html',
    'metrics/summary.csv',
)


class ZeroVarianceError(ValueError):
    """NCC is undefined for a constant map."""


class ReportError(ArtifactError):
    """render_report was pointed at a run missing some of its inputs."""


def ncc(a, b) -> float:
    """
    Normalized cross-correlation of two maps of identical shape.

    Raises:
        ZeroVarianceError: if either map is constant
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"NCC needs maps of one shape, got {a.shape} and {b.shape}")
    a = a - a.mean()
    b = b - b.mean()
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        raise ZeroVarianceError("NCC is undefined for a zero-variance map")
    return float(np.clip(np.sum(a * b) / (norm_a * norm_b), -1.0, 1.0))


@dataclass
class PatternEstimate:
    """Signed map explaining one subject (or a group when subject_id is None)."""

    values: np.ndarray
    source: str
    subject_id: Optional[int] = None
    group: Optional[int] = None
    simulated: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"Invalid pattern source '{self.source}'. Must be one of: {SOURCES}")
        self.values = np.asarray(self.values)
        if self.simulated is not None and np.shape(self.simulated) != self.values.shape:
            raise ValueError("Simulated image and pattern must share one grid")

    def oriented(self) -> np.ndarray:
        """
        Pattern pointing from group 0 towards group 1.

        Raw-minus-simulated is negative where a group-0 image received the
        pattern, so proposed patterns of group-0 subjects are negated.
        Baseline maps are returned exactly as produced.
        """
        if self.source in PROPOSED_SOURCES and self.group == 0:
            return -self.values
        return self.values

    def save(self, path: Path | str) -> Path:
        path = Path(path)
        meta = {
            'source': self.source,
            'subject_id': self.subject_id,
            'group': self.group,
            'values': {'file': path.name + '.f32', **write_array(path.parent / (path.name + '.f32'), self.values)},
        }
        if self.simulated is not None:
            meta['simulated'] = {'file': path.name + '.sim.f32',
                                 **write_array(path.parent / (path.name + '.sim.f32'), self.simulated)}
        meta_path = path.parent / (path.name + '.json')
        write_json(meta_path, meta)
        return meta_path

    @classmethod
    def load(cls, path: Path | str) -> 'PatternEstimate':
        path = Path(path)
        meta = read_json(path.parent / (path.name + '.json'))
        values = read_array(path.parent / meta['values']['file'], meta['values']['shape'])
        simulated = None
        if 'simulated' in meta:
            simulated = read_array(path.parent / meta['simulated']['file'], meta['simulated']['shape'])
        return cls(values=values, source=meta['source'], subject_id=meta['subject_id'],
                   group=meta['group'], simulated=simulated)


def extract_pattern(raw, simulated, field, source: str, subject_id: Optional[int] = None,
                    group: Optional[int] = None) -> PatternEstimate:
    """
    Per-subject pattern from one simulation.

    Args:
        raw: Raw image (*spatial)
        simulated: Simulated image (*spatial)
        field: WarpField / displacement (d, *spatial), or None in direct-image mode
        source: 'proposed-direct' (raw - simulated) or 'proposed-jacobian' (log-Jacobian of field)

    Returns:
        PatternEstimate on the image grid
    """
    raw = np.asarray(raw, dtype=np.float64)
    simulated = np.asarray(simulated, dtype=np.float64)
    if raw.shape != simulated.shape:
        raise ValueError(f"Raw {raw.shape} and simulated {simulated.shape} images differ in shape")

    if source == 'proposed-direct':
        values = raw - simulated
    elif source == 'proposed-jacobian':
        if field is None:
            raise ValueError("proposed-jacobian needs a warp field")
        values = log_jacobian_map(field).values
        if values.shape != raw.shape:
            raise ValueError(f"Warp field grid {values.shape} does not match image {raw.shape}")
    else:
        raise ValueError(f"Invalid pattern source '{source}'. Must be one of: {PROPOSED_SOURCES}")
    return PatternEstimate(values=values, source=source, subject_id=subject_id, group=group, simulated=simulated)


def group_average_map(patterns: Iterable) -> np.ndarray:
    """
    Voxelwise mean of patterns sharing one grid.

    Args:
        patterns: PatternEstimate objects or plain arrays

    Returns:
        float64 mean map
    """
    maps = [np.asarray(p.values if isinstance(p, PatternEstimate) else p, dtype=np.float64) for p in patterns]
    if not maps:
        raise ValueError("group_average_map needs at least one pattern")
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"Patterns must share one grid, got shapes {sorted(shapes)}")
    return np.mean(np.stack(maps), axis=0)


def summarize_ncc(scores: Dict[str, List[float]]) -> Dict[str, dict]:
    """Per-method mean, standard deviation and count of NCC scores."""
    summary = {}
    for method, values in sorted(scores.items()):
        values = np.asarray(values, dtype=np.float64)
        summary[method] = {
            'mean': float(values.mean()) if values.size else None,
            'std': float(values.std()) if values.size else None,
            'n': int(values.size),
        }
    return summary


# ── Run evaluation ──────────────────────────────────────────────


def subject_pattern_path(run: RunDirectory, method: str, subject_id: int) -> Path:
    return run.path('patterns', method, f"subject_{subject_id:06d}")


def warp_field_path(run: RunDirectory, subject_id: int) -> Path:
    """Displacement field behind a warp-mode proposed pattern (kept out of the subject map glob)."""
    return run.path('patterns', PROPOSED, 'fields', f"subject_{subject_id:06d}")


def _load_subject_maps(run: RunDirectory, method: str) -> List[PatternEstimate]:
    folder = run.path('patterns', method)
    estimates = []
    for meta in sorted(folder.glob('subject_*.json')):
        stem = meta.with_suffix('')
        if method == PROPOSED:
            estimates.append(PatternEstimate.load(stem))
        else:
            saliency = SaliencyMap.load(stem)
            estimates.append(PatternEstimate(values=saliency.values, source=method,
                                             subject_id=saliency.subject_id))
    return estimates


def _safe_ncc(a, b, label: str) -> Optional[float]:
    try:
        return ncc(a, b)
    except ZeroVarianceError:
        logger.warning(f"Skipping {label}: zero-variance map")
        return None


def evaluate_run(run: RunDirectory, dataset, P, simulator) -> tuple:
    """
    Score every stored pattern against ground truth and collect logit statistics.

    Per-subject maps are compared with that subject's own informative blobs;
    group averages and the population occlusion map are compared with the
    noise-free test-split group difference.

    Args:
        run: Run directory with patterns/<method>/ folders
        dataset: SyntheticDataset the run was trained on
        P: Frozen classifier
        simulator: Trained simulator

    Returns:
        (summary dict, list of written paths)
    """
    methods = [m for m in run.list_pattern_methods() if m in EXPLAIN_METHODS]
    if not methods:
        raise ArtifactError(f"No stored patterns under {run.path('patterns')}; run explain first")

    test = {s.subject_id: s for s in dataset.select(split='test')}
    difference = group_difference_map(dataset, split='test')
    written = write_group_map(run, GROUND_TRUTH, difference)

    scores, group_scores, skipped = {}, {}, {}
    for method in methods:
        if method == 'occlusion':
            population = SaliencyMap.load(run.path('patterns', 'occlusion', 'population'))
            group_scores[method] = _safe_ncc(population.values, difference, 'occlusion map')
            continue

        estimates = [e for e in _load_subject_maps(run, method) if e.subject_id in test]
        if method == PROPOSED:
            for e in estimates:
                e.group = test[e.subject_id].group
        method_scores = []
        for e in estimates:
            score = _safe_ncc(e.oriented(), ground_truth_pattern(test[e.subject_id]),
                              f"{method} subject {e.subject_id}")
            if score is not None:
                method_scores.append(score)
        scores[method] = method_scores
        skipped[method] = len(estimates) - len(method_scores)
        if estimates:
            average = group_average_map([e.oriented() for e in estimates])
            written.extend(write_group_map(run, method, average))
            group_scores[method] = _safe_ncc(average, difference, f"{method} group map")

    x, _, _ = dataset.as_arrays('test', group=0)
    y, _, _ = dataset.as_arrays('test', group=1)
    trajectories = {'inject': logit_trajectories(P, simulator, x, INJECT),
                    'remove': logit_trajectories(P, simulator, y, REMOVE)}
    all_images, labels, _ = dataset.as_arrays('test')
    cycles = {}
    for name, images, task in (('inject', x, INJECT), ('remove', y, REMOVE)):
        simulated, _ = simulate(simulator, images, task)
        cycled, _ = simulate(simulator, simulated, 1 - task)
        cycles[name] = cycle_fidelity(images, cycled, reference=all_images)

    logits = predict_logits(P, all_images)
    summary = {
        'dims': dataset.dims,
        'mode': simulator.mode,
        'coupling': simulator.coupling,
        'ncc': summarize_ncc(scores),
        'ncc_skipped': skipped,
        'group_ncc': group_scores,
        'logit_rank': {k: logit_rank_statistics(v['raw'], v['simulated']) for k, v in trajectories.items()},
        'trajectories': {k: {name: [float(s) for s in series] for name, series in v.items()}
                         for k, v in trajectories.items()},
        'cycle': cycles,
        'classifier': {'test_accuracy': accuracy(logits, labels),
                       'test_balanced_accuracy': balanced_accuracy(logits, labels)},
        'test_subjects': len(test),
    }
    path = run.path(EVALUATION_FILE)
    write_json(path, summary)
    written.append(path)
    logger.info(f"Wrote {path}")
    return summary, written


def write_group_map(run: RunDirectory, method: str, values: np.ndarray) -> List[Path]:
    """Store a group-level map as patterns/<method>/group_average.{f32,json}."""
    folder = run.path('patterns', method)
    info = write_array(folder / 'group_average.f32', values)
    meta = folder / 'group_average.json'
    write_json(meta, {'method': method, 'file': 'group_average.f32', **info})
    return [folder / 'group_average.f32', meta]


def read_group_map(run: RunDirectory, method: str) -> np.ndarray:
    meta = read_json(run.path('patterns', method, 'group_average.json'))
    return read_array(run.path('patterns', method, meta['file']), meta['shape'])


# ── Report ──────────────────────────────────────────────────────


def _display_slice(values: np.ndarray) -> np.ndarray:
    """2D maps as-is; volumes as their central slice along the first axis."""
    values = np.asarray(values)
    return values if values.ndim == 2 else values[values.shape[0] // 2]


def _imshow(ax, values, title: str, signed: bool = False) -> None:
    image = _display_slice(values)
    if signed:
        limit = float(np.abs(image).max()) or 1.0
        ax.imshow(image, cmap='RdBu_r', vmin=-limit, vmax=limit)
    else:
        ax.imshow(image, cmap='gray')
    ax.set_title(title, fontsize=8)
    ax.axis('off')


def _plot_subjects(run: RunDirectory, dataset, count: int, path: Path) -> None:
    estimates = [e for e in _load_subject_maps(run, PROPOSED)
                 if e.subject_id in {s.subject_id for s in dataset.select(split='test')}]
    estimates = estimates[:max(count, 1)]
    fig, axes = plt.subplots(len(estimates), 4, figsize=(8, 2 * len(estimates)), squeeze=False)
    for row, estimate in zip(axes, estimates):
        sample = dataset.by_id(estimate.subject_id)
        _imshow(row[0], sample.pixels, f"raw #{sample.subject_id} (group {sample.group})")
        _imshow(row[1], estimate.simulated if estimate.simulated is not None else sample.pixels, "simulated")
        _imshow(row[2], estimate.values, estimate.source, signed=True)
        _imshow(row[3], ground_truth_pattern(sample), "ground truth")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_trajectories(trajectories: dict, path: Path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, (name, series) in zip(axes, sorted(trajectories.items())):
        order = np.argsort(series['raw'], kind='stable')
        steps = np.arange(len(order))
        for label in ('raw', 'simulated', 'cycle'):
            ax.plot(steps, np.asarray(series[label])[order], label=label, linewidth=1)
        ax.axhline(0.0, color='k', linewidth=0.5)
        ax.set_title(f"{name} (sorted by raw logit)")
        ax.set_xlabel("subject")
        ax.set_ylabel("logit")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_ncc(summary: dict, path: Path) -> None:
    methods = sorted(summary)
    means = [summary[m]['mean'] if summary[m]['mean'] is not None else 0.0 for m in methods]
    stds = [summary[m]['std'] if summary[m]['std'] is not None else 0.0 for m in methods]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(len(methods)), means, yerr=stds, color='steelblue', capsize=3)
    ax.set_xticks(np.arange(len(methods)))
    ax.set_xticklabels(methods, rotation=30, ha='right')
    ax.axhline(0.0, color='k', linewidth=0.5)
    ax.set_ylabel("mean NCC vs ground truth")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_group_maps(run: RunDirectory, methods: List[str], path: Path) -> None:
    panels = [GROUND_TRUTH] + methods
    fig, axes = plt.subplots(1, len(panels), figsize=(2.5 * len(panels), 2.8), squeeze=False)
    for ax, method in zip(axes[0], panels):
        if method == 'occlusion':
            values = SaliencyMap.load(run.path('patterns', 'occlusion', 'population')).values
        else:
            values = read_group_map(run, method)
        _imshow(ax, values, method, signed=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _summary_rows(evaluation: dict) -> List[dict]:
    methods = sorted(set(evaluation['ncc']) | set(evaluation['group_ncc']))
    rows = []
    for method in methods:
        stats = evaluation['ncc'].get(method, {'mean': None, 'std': None, 'n': 0})
        rows.append({
            'method': method,
            'mean_ncc': stats['mean'],
            'std_ncc': stats['std'],
            'n': stats['n'],
            'group_ncc': evaluation['group_ncc'].get(method),
        })
    return rows


def render_report(run_dir: Path | str, dataset=None, explain_subjects: int = 8,
                  templates_dir: Optional[Path] = None) -> List[Path]:
    """
    Render figures, summary.csv and an HTML page for an evaluated run.

    Args:
        run_dir: Run directory
        dataset: SyntheticDataset (default: loaded from the manifest's data input)
        explain_subjects: Number of per-subject panels
        templates_dir: Folder containing report.html (default: code/templates)

    Returns:
        Paths of every written file (exactly REPORT_FILES)

    Raises:
        ReportError: listing every missing input
    """
    run = RunDirectory(run_dir, create=False) if Path(run_dir).is_dir() else None
    if run is None:
        raise ReportError(f"Run directory {run_dir} does not exist", list(REPORT_INPUTS))

    missing = []
    if not any(run.path('patterns', PROPOSED).glob('subject_*.json')):
        missing.append(f"patterns/{PROPOSED}/subject_*")
    if dataset is None:
        data_dir = run.load_manifest().inputs.get('data', {}).get('path')
        if not data_dir or not (Path(data_dir) / 'dataset.json').exists():
            missing.append("dataset (manifest input 'data')")
    run.require(REPORT_INPUTS, f"Cannot render report for {run.root}", known_missing=missing, error=ReportError)
    if dataset is None:
        dataset = SyntheticDataset.load(run.load_manifest().inputs['data']['path'])

    evaluation = read_json(run.path(EVALUATION_FILE))
    run.path('figures').mkdir(parents=True, exist_ok=True)

    _plot_subjects(run, dataset, explain_subjects, run.path('figures', 'subjects.png'))
    _plot_trajectories(evaluation['trajectories'], run.path('figures', 'logit_trajectories.png'))
    _plot_ncc(evaluation['ncc'], run.path('figures', 'ncc_summary.png'))
    _plot_group_maps(run, sorted(evaluation['group_ncc']), run.path('figures', 'group_maps.png'))

    rows = _summary_rows(evaluation)
    with open(run.path('metrics', 'summary.csv'), 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=['method', 'mean_ncc', 'std_ncc', 'n', 'group_ncc'])
        writer.writeheader()
        writer.writerows(rows)

    if templates_dir is None:
        templates_dir = Path(__file__).parent.parent / "templates"
    env = Environment(loader=FileSystemLoader(str(templates_dir)), autoescape=True)
    html = env.get_template("report.html").render(
        run_name=run.root.name,
        evaluation=evaluation,
        rows=rows,
        manifest=run.load_manifest(),
        figures=[Path(p).name for p in REPORT_FILES if p.endswith('.png')],
    )
    with open(run.path('figures', 'report.html'), 'w') as f:
        f.write(html)

    logger.info(f"Report written to {run.path('figures')}")
    return [run.path(rel) for rel in REPORT_FILES]
