# SPDX-FileCopyrightText: 2025 Luis Villa <luis@lu.is>
#
# SPDX-License-Identifier: BlueOak-1.0.0

"""Tests for pattern extraction, NCC scoring, evaluation and the report."""

import csv
import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from evalviz import (
    EVALUATION_FILE,
    REPORT_FILES,
    REPORT_INPUTS,
    PatternEstimate,
    ReportError,
    ZeroVarianceError,
    evaluate_run,
    extract_pattern,
    group_average_map,
    ncc,
    read_group_map,
    render_report,
    subject_pattern_path,
    summarize_ncc,
)
from layers import build_classifier_2d, build_simulator, freeze
from rundir import RunDirectory
from saliency import SaliencyMap
from synthdata import gen_dataset, ground_truth_pattern, group_difference_map


class TestNcc:
    """Tests for ncc."""

    def test_self_and_negation(self):
        """A map correlates +1 with itself and -1 with its negation."""
        a = np.random.default_rng(0).normal(size=(8, 8))
        assert ncc(a, a) == pytest.approx(1.0)
        assert ncc(a, -a) == pytest.approx(-1.0)

    def test_affine_invariance(self):
        """Positive scaling and offsets do not change the score."""
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(6, 6)), rng.normal(size=(6, 6))
        assert ncc(3.0 * a + 7.0, b) == pytest.approx(ncc(a, b), abs=1e-12)

    def test_bounded(self):
        """Scores stay within [-1, 1]."""
        rng = np.random.default_rng(2)
        for _ in range(10):
            assert -1.0 <= ncc(rng.normal(size=(4, 4, 4)), rng.normal(size=(4, 4, 4))) <= 1.0

    def test_zero_variance(self):
        """Constant maps raise ZeroVarianceError."""
        with pytest.raises(ZeroVarianceError):
            ncc(np.ones((4, 4)), np.random.default_rng(0).normal(size=(4, 4)))

    def test_shape_mismatch(self):
        """Maps of different shapes cannot be compared."""
        with pytest.raises(ValueError):
            ncc(np.zeros((4, 4)), np.zeros((4, 5)))


class TestPatternEstimate:
    """Tests for extract_pattern and PatternEstimate."""

    def test_direct_pattern_is_raw_minus_simulated(self):
        """Direct-image patterns subtract the simulation."""
        raw = np.arange(16.0).reshape(4, 4)
        estimate = extract_pattern(raw, raw - 2.0, None, 'proposed-direct', subject_id=3, group=1)
        np.testing.assert_allclose(estimate.values, 2.0)

    def test_unchanged_image_gives_zero_pattern(self):
        """No edit means no pattern."""
        raw = np.random.default_rng(0).normal(size=(4, 4))
        assert np.all(extract_pattern(raw, raw, None, 'proposed-direct').values == 0)

    def test_jacobian_pattern_zero_for_zero_field(self):
        """A zero field has zero log-Jacobian everywhere."""
        raw = np.zeros((4, 4))
        estimate = extract_pattern(raw, raw, np.zeros((2, 4, 4)), 'proposed-jacobian')
        assert np.all(estimate.values == 0)

    def test_jacobian_needs_field(self):
        """proposed-jacobian without a field is an error."""
        with pytest.raises(ValueError):
            extract_pattern(np.zeros((4, 4)), np.zeros((4, 4)), None, 'proposed-jacobian')

    def test_orientation(self):
        """Proposed group-0 patterns are negated; baselines are not."""
        values = np.ones((2, 2))
        assert np.all(PatternEstimate(values, 'proposed-direct', group=0).oriented() == -1)
        assert np.all(PatternEstimate(values, 'proposed-direct', group=1).oriented() == 1)
        assert np.all(PatternEstimate(values, 'bp', group=0).oriented() == 1)

    def test_unknown_source(self):
        """Sources are validated."""
        with pytest.raises(ValueError):
            PatternEstimate(np.zeros((2, 2)), 'lime')

    def test_save_and_load_keeps_simulation(self):
        """Simulated image travels with the pattern."""
        estimate = extract_pattern(np.ones((4, 4)), np.zeros((4, 4)), None, 'proposed-direct', 5, 0)
        with tempfile.TemporaryDirectory() as tmp:
            estimate.save(Path(tmp) / 'subject_000005')
            loaded = PatternEstimate.load(Path(tmp) / 'subject_000005')
        assert (loaded.subject_id, loaded.group) == (5, 0)
        np.testing.assert_array_equal(loaded.simulated, np.zeros((4, 4)))


class TestGroupAverages:
    """Tests for group_average_map and summarize_ncc."""

    def test_mean_of_maps(self):
        """Voxelwise mean over patterns."""
        average = group_average_map([np.zeros((2, 2)), np.full((2, 2), 4.0)])
        np.testing.assert_allclose(average, 2.0)

    def test_single_pattern_is_itself(self):
        """Averaging one map returns it."""
        a = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_allclose(group_average_map([a]), a)

    def test_shape_mismatch_and_empty(self):
        """Mismatched grids and empty inputs are rejected."""
        with pytest.raises(ValueError):
            group_average_map([np.zeros((2, 2)), np.zeros((3, 3))])
        with pytest.raises(ValueError):
            group_average_map([])

    def test_summarize(self):
        """Mean, std and count per method; empty methods report None."""
        summary = summarize_ncc({'bp': [0.2, 0.4], 'grad-cam': []})
        assert summary['bp']['mean'] == pytest.approx(0.3)
        assert summary['bp']['n'] == 2
        assert summary['grad-cam'] == {'mean': None, 'std': None, 'n': 0}


@pytest.fixture
def evaluated_run():
    """A run whose stored maps equal each subject's ground truth."""
    dataset = gen_dataset(n_per_group=10, seed=0)
    with tempfile.TemporaryDirectory() as tmp:
        run = RunDirectory(Path(tmp) / 'run')
        for sample in dataset.select(split='test'):
            truth = ground_truth_pattern(sample)
            SaliencyMap(values=truth, method='bp', subject_id=sample.subject_id).save(
                subject_pattern_path(run, 'bp', sample.subject_id))
            sign = 1.0 if sample.group == 1 else -1.0
            estimate = extract_pattern(sample.pixels, sample.pixels - sign * truth, None, 'proposed-direct',
                                       sample.subject_id, sample.group)
            path = subject_pattern_path(run, 'proposed', sample.subject_id)
            path.parent.mkdir(parents=True, exist_ok=True)
            estimate.save(path)
        run.path('patterns', 'occlusion').mkdir()
        SaliencyMap(values=group_difference_map(dataset, split='test'), method='occlusion').save(
            run.path('patterns', 'occlusion', 'population'))

        P = freeze(build_classifier_2d())
        summary, written = evaluate_run(run, dataset, P, build_simulator())
        yield run, dataset, summary, written


class TestEvaluateRun:
    """Tests for evaluate_run."""

    def test_perfect_maps_score_one(self, evaluated_run):
        """Maps equal to ground truth give NCC 1."""
        _, _, summary, _ = evaluated_run
        assert summary['ncc']['bp']['mean'] == pytest.approx(1.0, abs=1e-5)
        assert summary['ncc']['proposed']['mean'] == pytest.approx(1.0, abs=1e-5)
        assert summary['ncc']['proposed']['n'] == 4
        assert summary['group_ncc']['occlusion'] == pytest.approx(1.0, abs=1e-5)
        assert summary['test_subjects'] == 4

    def test_writes_evaluation_and_group_maps(self, evaluated_run):
        """evaluation.json and one group map per subject-level method."""
        run, dataset, summary, written = evaluated_run
        assert run.path(EVALUATION_FILE) in written
        assert json.loads(run.path(EVALUATION_FILE).read_text())['ncc'] == summary['ncc']
        np.testing.assert_allclose(read_group_map(run, 'ground-truth'),
                                   group_difference_map(dataset, split='test'), rtol=1e-6)
        assert read_group_map(run, 'bp').shape == (32, 32)

    def test_logit_statistics_present(self, evaluated_run):
        """Both simulation directions report rank statistics and cycle fidelity."""
        _, _, summary, _ = evaluated_run
        assert set(summary['logit_rank']) == {'inject', 'remove'}
        assert summary['cycle']['inject']['mean_rmse'] == pytest.approx(0.0, abs=1e-6)
        assert summary['mode'] == 'direct-image'


class TestRenderReport:
    """Tests for render_report."""

    def test_empty_run_lists_every_missing_input(self):
        """All missing inputs are reported at once."""
        with tempfile.TemporaryDirectory() as tmp:
            RunDirectory(tmp)
            with pytest.raises(ReportError) as excinfo:
                render_report(tmp)
        problems = excinfo.value.problems
        for rel in REPORT_INPUTS:
            assert rel in problems
        assert 'patterns/proposed/subject_*' in problems
        assert any('dataset' in p for p in problems)

    def test_missing_run_directory(self):
        """A nonexistent run is a ReportError."""
        with pytest.raises(ReportError):
            render_report('/nonexistent/run')

    def test_renders_all_files(self, evaluated_run):
        """Figures, summary.csv and the HTML page are written."""
        run, dataset, _, _ = evaluated_run
        run.path('metrics', 'classifier.jsonl').write_text('{"epoch": 1}\n')
        run.path('metrics', 'simulator.jsonl').write_text('{"step": 1}\n')
        paths = render_report(run.root, dataset=dataset, explain_subjects=2)
        assert [p.relative_to(run.root).as_posix() for p in paths] == list(REPORT_FILES)
        assert all(p.exists() for p in paths)
        with open(run.path('metrics', 'summary.csv')) as f:
            methods = {row['method'] for row in csv.DictReader(f)}
        assert {'bp', 'proposed', 'occlusion'} <= methods
        assert 'proposed' in run.path('figures', 'report.html').read_text()
