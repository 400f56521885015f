"""Tests for metrics files, summaries and projections."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from fedlsi.errors import ReportError
from fedlsi.report import (
    METRICS_HEADER,
    MetricsRow,
    compare_methods,
    fit_pca,
    linear_probe_accuracy,
    local_split,
    project,
    read_metrics_csv,
    rounds_to_fraction,
    select_best_round,
    summarize,
    write_metrics_csv,
    write_projection_csv,
)


def _run(
    method: str,
    seed: int,
    unseen: int,
    val: list[float],
    test: list[float],
) -> list[MetricsRow]:
    rows = []
    for round_no, (v, u) in enumerate(zip(val, test, strict=True), start=1):
        rows.append(MetricsRow(method, seed, unseen, round_no, "val", v, 0.5))
        rows.append(MetricsRow(method, seed, unseen, round_no, "unseen", u, 0.7))
        rows.append(
            MetricsRow(method, seed, unseen, round_no, local_split(0), v, 0.4)
        )
    return rows


class TestMetricsFile:
    """Tests for the metrics CSV."""

    def test_format(self, tmp_path: Path):
        """Test the header and six-decimal formatting."""
        path = tmp_path / "metrics.csv"
        write_metrics_csv([MetricsRow("lsi", 0, 2, 1, "unseen", 0.5, 1.25)], path)
        assert path.read_bytes() == (
            b"method,seed,unseen,round,split,accuracy,loss\n"
            b"lsi,0,2,1,unseen,0.500000,1.250000\n"
        )

    def test_read_back(self, tmp_path: Path):
        """Test written rows parse back."""
        path = tmp_path / "metrics.csv"
        rows = _run("fedavg", 1, 0, [0.5, 0.75], [0.25, 0.5])
        write_metrics_csv(rows, path)
        assert read_metrics_csv(path) == rows

    def test_wrong_header(self, tmp_path: Path):
        """Test a file with other columns is rejected."""
        path = tmp_path / "metrics.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ReportError, match="header"):
            read_metrics_csv(path)

    def test_header_constant(self):
        """Test the column order."""
        assert METRICS_HEADER[3:] == ("round", "split", "accuracy", "loss")

    def test_accuracy_range(self):
        """Test accuracies outside [0, 1] are refused."""
        with pytest.raises(ReportError):
            MetricsRow("lsi", 0, 0, 1, "val", 1.5, 0.0)


class TestSelection:
    """Tests for best-round selection."""

    def test_highest_validation(self):
        """Test the round with the best validation accuracy is chosen."""
        rows = _run("lsi", 0, 0, [0.5, 0.9, 0.7], [0.1, 0.2, 0.3])
        selection = select_best_round(rows)
        assert selection.round_no == 2
        assert selection.unseen_accuracy == 0.2
        assert selection.final_unseen_accuracy == 0.3
        assert selection.local_accuracy == 0.9

    def test_earliest_on_ties(self):
        """Test ties go to the earliest round."""
        rows = _run("lsi", 0, 0, [0.8, 0.8, 0.8], [0.1, 0.2, 0.3])
        assert select_best_round(rows).round_no == 1

    def test_no_validation_uses_final(self):
        """Test runs without validation rows select the last round."""
        run = _run("lsi", 0, 0, [0.5, 0.9], [0.1, 0.2])
        rows = [r for r in run if r.split != "val"]
        selection = select_best_round(rows)
        assert selection.round_no == 2
        assert np.isnan(selection.val_accuracy)

    def test_no_unseen_rows(self):
        """Test a run needs unseen rows."""
        with pytest.raises(ReportError):
            select_best_round([MetricsRow("lsi", 0, 0, 1, "val", 0.5, 0.1)])


class TestRoundsToFraction:
    """Tests for convergence speed."""

    def test_first_round_reaching_fraction(self):
        """Test the first 1-based round above 90% of the final value."""
        assert rounds_to_fraction([0.1, 0.5, 0.91, 0.95, 1.0]) == 3

    def test_flat_curve(self):
        """Test a constant curve converges in round 1."""
        assert rounds_to_fraction([0.4, 0.4]) == 1

    def test_empty(self):
        """Test an empty curve is rejected."""
        with pytest.raises(ReportError):
            rounds_to_fraction([])


class TestSummaries:
    """Tests for summaries and method comparison."""

    def test_summarize(self):
        """Test per-domain mean and population std over seeds."""
        rows = (
            _run("lsi", 0, 0, [0.9], [0.6])
            + _run("lsi", 1, 0, [0.9], [0.8])
            + _run("lsi", 0, 1, [0.9], [0.4])
        )
        summary = summarize(rows)["lsi"]
        cell = summary["domains"]["0"]["selected"]
        assert cell["mean"] == pytest.approx(0.7)
        assert cell["std"] == pytest.approx(0.1)
        assert cell["n"] == 2
        assert summary["average"] == pytest.approx(0.55)

    def test_compare_methods(self):
        """Test wins, mean difference and the one-sided sign test."""
        rows = []
        for seed in range(6):
            rows += _run("fedavg", seed, 0, [0.5, 0.6], [0.4, 0.5])
            rows += _run("lsi", seed, 0, [0.5, 0.6], [0.5, 0.6])
        result = compare_methods(rows)["0"]
        assert result["wins"] == 6
        assert result["losses"] == 0
        assert result["mean_difference"] == pytest.approx(0.1)
        assert result["sign_test_p"] == pytest.approx(0.5**6)
        assert result["seeds"] == list(range(6))

    def test_compare_ties_only(self):
        """Test identical methods give p = 1."""
        rows = _run("fedavg", 0, 0, [0.5], [0.5]) + _run("lsi", 0, 0, [0.5], [0.5])
        assert compare_methods(rows)["0"]["sign_test_p"] == 1.0


class TestProjection:
    """Tests for PCA projections and the linear probe."""

    def test_pca_recovers_dominant_axis(self, rng):
        """Test the first component follows the widest direction."""
        data = rng.normal(size=(200, 3)) * np.array([10.0, 1.0, 0.1])
        _, basis, ratio = fit_pca(data)
        assert abs(basis[0, 0]) > 0.99
        assert basis[0, 0] > 0
        assert ratio[0] > 0.9
        assert basis.shape == (2, 3)

    def test_pca_needs_rows(self):
        """Test a single row cannot be projected."""
        with pytest.raises(ReportError):
            fit_pca(np.zeros((1, 3)))

    def test_project_rows(self, rng, tmp_path: Path):
        """Test every latent gets one row tagged with its source."""
        original = [(0, rng.normal(size=(5, 4)), np.arange(5) % 2)]
        synthesized = [(0, rng.normal(size=(3, 4)), np.array([0, 1, 1]))]
        rows, explained = project(original, synthesized)
        assert [r.source for r in rows] == ["original"] * 5 + ["synthesized"] * 3
        assert explained.shape == (2,)
        path = tmp_path / "projections.csv"
        write_projection_csv(rows, explained, path)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# explained_variance=")
        assert lines[1] == "source,client,label,pc1,pc2"
        assert len(lines) == 10

    def test_project_needs_synthesized(self, rng):
        """Test an empty synthesized set is rejected."""
        with pytest.raises(ReportError):
            project([(0, rng.normal(size=(5, 4)), np.zeros(5, int))], [])

    def test_probe_separable(self, rng):
        """Test the probe fits linearly separable classes."""
        labels = np.arange(60) % 3
        centers = np.array([[4.0, 0.0], [-4.0, 0.0], [0.0, 4.0]])
        features = centers[labels] + rng.normal(size=(60, 2)) * 0.3
        assert linear_probe_accuracy(features, labels) >= 0.95
