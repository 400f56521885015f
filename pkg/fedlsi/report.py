"""Metrics rows, summaries, method comparison and latent projections."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from scipy.stats import binomtest

from .const import METRIC_DECIMALS
from .errors import ReportError
from .layers import LinearLayer
from .optim import AdamState, adam_step
from .tensor import ComputationTape, backward, cross_entropy, no_grad

_LOGGER = logging.getLogger(__name__)

METRICS_HEADER = ("method", "seed", "unseen", "round", "split", "accuracy", "loss")
PROJECTION_HEADER = ("source", "client", "label", "pc1", "pc2")

SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_UNSEEN = "unseen"


def local_split(client_id: int) -> str:
    """Return the split name of one client's local data."""
    return f"local-client-{client_id}"


@dataclass(frozen=True)
class MetricsRow:
    """Accuracy and loss of one model on one split."""

    method: str
    seed: int
    unseen: int
    round_no: int
    split: str
    accuracy: float
    loss: float

    def __post_init__(self) -> None:
        """Validate the accuracy range."""
        if not 0.0 <= self.accuracy <= 1.0:
            raise ReportError(f"accuracy {self.accuracy} outside [0, 1]")


def _fmt(value: float) -> str:
    return f"{value:.{METRIC_DECIMALS}f}"


def write_metrics_csv(rows: Iterable[MetricsRow], path: Path | str) -> None:
    """Write rows with fixed 6-decimal formatting and ``\\n`` line endings."""
    try:
        with Path(path).open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for row in rows:
                writer.writerow(
                    [
                        row.method,
                        row.seed,
                        row.unseen,
                        row.round_no,
                        row.split,
                        _fmt(row.accuracy),
                        _fmt(row.loss),
                    ]
                )
    except OSError as err:
        raise ReportError(f"cannot write {path}: {err}") from err


def read_metrics_csv(path: Path | str) -> list[MetricsRow]:
    """Parse a file written by ``write_metrics_csv``."""
    try:
        with Path(path).open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle)
            header = next(reader, None)
            if header is None or tuple(header) != METRICS_HEADER:
                raise ReportError(f"{path}: unexpected header {header}")
            return [
                MetricsRow(
                    method,
                    int(seed),
                    int(unseen),
                    int(round_no),
                    split,
                    float(accuracy),
                    float(loss),
                )
                for method, seed, unseen, round_no, split, accuracy, loss in reader
            ]
    except OSError as err:
        raise ReportError(f"cannot read {path}: {err}") from err
    except ValueError as err:
        raise ReportError(f"{path}: malformed row: {err}") from err


RunKey = tuple[str, int, int]


def group_runs(rows: Iterable[MetricsRow]) -> dict[RunKey, list[MetricsRow]]:
    """Group rows by (method, seed, unseen domain)."""
    runs: dict[RunKey, list[MetricsRow]] = defaultdict(list)
    for row in rows:
        runs[(row.method, row.seed, row.unseen)].append(row)
    return dict(runs)


def _curve(rows: Sequence[MetricsRow], split: str) -> dict[int, float]:
    return {r.round_no: r.accuracy for r in rows if r.split == split}


@dataclass(frozen=True)
class Selection:
    """The best-validation round of one run and its accuracies."""

    round_no: int
    val_accuracy: float
    unseen_accuracy: float
    final_unseen_accuracy: float
    local_accuracy: float


def select_best_round(rows: Sequence[MetricsRow]) -> Selection:
    """Pick the round with the highest validation accuracy, earliest on ties."""
    val = _curve(rows, SPLIT_VAL)
    unseen = _curve(rows, SPLIT_UNSEEN)
    if not unseen:
        raise ReportError("run has no unseen-domain rows")
    rounds = sorted(unseen)
    if val:
        best = min(rounds, key=lambda r: (-val.get(r, -1.0), r))
    else:
        best = rounds[-1]
    local = [
        r.accuracy
        for r in rows
        if r.round_no == best and r.split.startswith("local-client-")
    ]
    return Selection(
        best,
        val.get(best, float("nan")),
        unseen[best],
        unseen[rounds[-1]],
        float(np.mean(local)) if local else float("nan"),
    )


def rounds_to_fraction(curve: Sequence[float], fraction: float = 0.9) -> int:
    """Return the first 1-based round reaching ``fraction`` of the final value."""
    if not curve:
        raise ReportError("empty accuracy curve")
    target = fraction * curve[-1]
    for index, value in enumerate(curve, start=1):
        if value >= target:
            return index
    return len(curve)


def unseen_curve(rows: Sequence[MetricsRow]) -> list[float]:
    """Return unseen accuracy ordered by round."""
    unseen = _curve(rows, SPLIT_UNSEEN)
    return [unseen[r] for r in sorted(unseen)]


def _cell(values: Sequence[float]) -> dict[str, float]:
    return {
        "mean": float(np.mean(values)),
        "std": float(np.std(values)),
        "n": len(values),
    }


def summarize(rows: Iterable[MetricsRow]) -> dict[str, Any]:
    """Per-method, per-domain mean and population std over seeds.

    ``average`` is the arithmetic mean of the per-domain means.
    """
    per_cell: dict[str, dict[int, list[Selection]]] = defaultdict(
        lambda: defaultdict(list)
    )
    for (method, _seed, unseen), run in sorted(group_runs(rows).items()):
        per_cell[method][unseen].append(select_best_round(run))

    summary: dict[str, Any] = {}
    for method, domains in sorted(per_cell.items()):
        cells = {}
        for unseen, selections in sorted(domains.items()):
            cells[str(unseen)] = {
                "selected": _cell([s.unseen_accuracy for s in selections]),
                "final": _cell([s.final_unseen_accuracy for s in selections]),
                "best_round": [s.round_no for s in selections],
                "local": _cell([s.local_accuracy for s in selections]),
            }
        summary[method] = {
            "domains": cells,
            "average": float(
                np.mean([cell["selected"]["mean"] for cell in cells.values()])
            ),
            "average_final": float(
                np.mean([cell["final"]["mean"] for cell in cells.values()])
            ),
            "average_local": float(
                np.mean([cell["local"]["mean"] for cell in cells.values()])
            ),
        }
    return summary


def compare_methods(
    rows: Iterable[MetricsRow],
    baseline: str = "fedavg",
    candidate: str = "lsi",
    fraction: float = 0.9,
) -> dict[str, Any]:
    """Compare two methods seed by seed on every unseen domain.

    Reports mean accuracies, the mean difference, a one-sided sign test
    (candidate better than baseline, ties dropped) and rounds-to-fraction.
    """
    runs = group_runs(rows)
    domains = sorted({unseen for method, _, unseen in runs if method == baseline})
    result: dict[str, Any] = {}
    for unseen in domains:
        seeds = sorted(
            seed
            for method, seed, domain in runs
            if method == baseline
            and domain == unseen
            and (candidate, seed, unseen) in runs
        )
        if not seeds:
            continue
        base = [select_best_round(runs[(baseline, s, unseen)]) for s in seeds]
        cand = [select_best_round(runs[(candidate, s, unseen)]) for s in seeds]
        diffs = [c.unseen_accuracy - b.unseen_accuracy for b, c in zip(base, cand)]
        wins = sum(d > 0 for d in diffs)
        losses = sum(d < 0 for d in diffs)
        p_value = (
            binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue
            if wins + losses
            else 1.0
        )
        base_rounds = [
            rounds_to_fraction(unseen_curve(runs[(baseline, s, unseen)]), fraction)
            for s in seeds
        ]
        cand_rounds = [
            rounds_to_fraction(unseen_curve(runs[(candidate, s, unseen)]), fraction)
            for s in seeds
        ]
        result[str(unseen)] = {
            "seeds": seeds,
            baseline: float(np.mean([b.unseen_accuracy for b in base])),
            candidate: float(np.mean([c.unseen_accuracy for c in cand])),
            "mean_difference": float(np.mean(diffs)),
            "wins": wins,
            "losses": losses,
            "sign_test_p": float(p_value),
            f"{baseline}_rounds": base_rounds,
            f"{candidate}_rounds": cand_rounds,
            "faster_or_equal": sum(
                c <= b for b, c in zip(base_rounds, cand_rounds, strict=True)
            ),
        }
    return result


@dataclass(frozen=True)
class ProjectionRow:
    """One latent vector projected onto two principal components."""

    source: str
    client: int
    label: int
    pc1: float
    pc2: float


def fit_pca(
    matrix: np.ndarray, components: int = 2
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (mean, components, explained variance ratio) of ``matrix``.

    Component signs are fixed so the largest-magnitude loading is positive.
    """
    data = np.asarray(matrix, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ReportError("PCA needs at least 2 rows")
    mean = data.mean(axis=0)
    _, singular, vt = np.linalg.svd(data - mean, full_matrices=False)
    basis = vt[:components]
    pivots = np.argmax(np.abs(basis), axis=1)
    basis = basis * np.sign(basis[np.arange(len(basis)), pivots])[:, None]
    variance = singular**2
    total = variance.sum()
    ratio = variance[:components] / total if total > 0 else np.zeros(components)
    return mean, basis, ratio


def project(
    original: Sequence[tuple[int, np.ndarray, np.ndarray]],
    synthesized: Sequence[tuple[int, np.ndarray, np.ndarray]],
) -> tuple[list[ProjectionRow], np.ndarray]:
    """Fit PCA on the union of original and synthesized latents and project both.

    Each input item is (client id, latents, labels).
    """
    if not synthesized or all(len(z) == 0 for _, z, _ in synthesized):
        raise ReportError("nothing synthesized to project")
    groups = [("original", item) for item in original] + [
        ("synthesized", item) for item in synthesized
    ]
    mean, basis, ratio = fit_pca(np.concatenate([z for _, (_, z, _) in groups]))
    rows = []
    for source, (client, latents, labels) in groups:
        coords = (latents - mean) @ basis.T
        rows.extend(
            ProjectionRow(source, client, int(label), float(x), float(y))
            for (x, y), label in zip(coords, labels, strict=True)
        )
    return rows, ratio


def write_projection_csv(
    rows: Iterable[ProjectionRow], explained: np.ndarray, path: Path | str
) -> None:
    """Write projections preceded by a comment line with the explained variance."""
    try:
        with Path(path).open("w", newline="", encoding="utf-8") as handle:
            handle.write(
                "# explained_variance=" + ",".join(_fmt(v) for v in explained) + "\n"
            )
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(PROJECTION_HEADER)
            for row in rows:
                writer.writerow(
                    [row.source, row.client, row.label, _fmt(row.pc1), _fmt(row.pc2)]
                )
    except OSError as err:
        raise ReportError(f"cannot write {path}: {err}") from err


def linear_probe_accuracy(
    features: np.ndarray,
    labels: np.ndarray,
    *,
    test_features: np.ndarray | None = None,
    test_labels: np.ndarray | None = None,
    steps: int = 300,
    lr: float = 0.05,
    seed: int = 0,
) -> float:
    """Fit a softmax-regression probe with full-batch Adam and return its accuracy.

    Accuracy is measured on the test arrays when given, else on the training
    arrays.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    center = x.mean(axis=0)
    probe = LinearLayer(
        x.shape[1], int(y.max()) + 1, np.random.default_rng(seed)
    )
    state = AdamState(lr=lr)
    normalized = (x - center) / scale
    for _ in range(steps):
        with ComputationTape() as tape:
            loss = cross_entropy(probe(normalized), y)
        probe.zero_grad()
        backward(tape, loss)
        adam_step(probe.parameters(), state)

    eval_x = x if test_features is None else np.asarray(test_features, dtype=np.float64)
    eval_y = y if test_labels is None else np.asarray(test_labels, dtype=np.int64)
    with no_grad():
        logits = probe((eval_x - center) / scale)
    return float(np.mean(np.argmax(logits.data, axis=1) == eval_y))
