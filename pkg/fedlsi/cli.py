"""Command-line entry points for the fedlsi simulator."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .config import (
    UNSEEN_ALL,
    ExperimentConfig,
    apply_overrides,
    load_domains,
    parse_config,
    unseen_domains,
)
from .const import (
    COMMS_FILE,
    LAMBDA_DI_GRID,
    METRICS_FILE,
    PROJECTIONS_FILE,
    REPORT_FILE,
    STREAM_LABELS,
    STREAM_SERVER,
)
from .coordinator import fedavg_config, run_pipeline
from .data import DomainDataset, leave_one_out_split, stream_rng, write_csv
from .diagnostics import run_diagnostics
from .errors import FedLsiError, ReportError
from .federation import (
    ClientState,
    Method,
    init_global_model,
    local_train_stage1,
    make_clients,
)
from .inversion import sample_label_targets, synthesize_for_targets
from .layers import forward_encoder
from .report import (
    MetricsRow,
    compare_methods,
    linear_probe_accuracy,
    project,
    read_metrics_csv,
    summarize,
    write_metrics_csv,
    write_projection_csv,
)
from .tensor import no_grad

_LOGGER = logging.getLogger(__name__)

DOMAINS_FILE = "domains.csv"

Latents = tuple[int, np.ndarray, np.ndarray]

ABLATION_GRID = ((False, False), (True, False), (False, True), (True, True))
PROJECTION_VARIANTS = {
    "full": {},
    "no-cls": {"lambda_cls": 0.0},
    "no-bn": {"lambda_bn": 0.0},
    "no-norm": {"lambda_norm": 0.0},
}


@dataclass
class RunSet:
    """Metrics and per-run summaries of several runs."""

    rows: list[MetricsRow] = field(default_factory=list)
    runs: list[dict[str, Any]] = field(default_factory=list)
    failures: list[dict[str, Any]] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        """Return whether some run failed."""
        return bool(self.failures)


def _yes_no(flag: bool) -> str:
    return "yes" if flag else "no"


def ablation_label(use_di: bool, use_importance: bool) -> str:
    """Return the method label of one ablation row."""
    return f"lsi-di-{_yes_no(use_di)}-imp-{_yes_no(use_importance)}"


def _write_json(data: Any, path: Path) -> None:
    try:
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as err:
        raise ReportError(f"cannot write {path}: {err}") from err


def run_set(config: ExperimentConfig, label: str, out: Path) -> RunSet:
    """Run every (unseen domain, seed) pair of ``config`` under ``label``."""
    result = RunSet()
    for seed in config.seeds:
        datasets = load_domains(config, seed)
        for unseen in unseen_domains(config, datasets):
            run_dir = out / f"{label}-seed{seed}-unseen{unseen}"
            try:
                run_dir.mkdir(parents=True, exist_ok=True)
                split = leave_one_out_split(
                    datasets, unseen, config.data.val_fraction, seed
                )
                report = run_pipeline(split, config, seed, dump_dir=run_dir)
            except (FedLsiError, OSError) as err:
                _LOGGER.error(
                    "Run %s seed %d unseen %d failed: %s", label, seed, unseen, err
                )
                result.failures.append(
                    {"method": label, "seed": seed, "unseen": unseen, "error": str(err)}
                )
                continue
            rows = [
                MetricsRow(
                    label, r.seed, r.unseen, r.round_no, r.split, r.accuracy, r.loss
                )
                for r in report.rows
            ]
            result.rows.extend(rows)
            report.ledger.write_csv(run_dir / COMMS_FILE)
            diagnostics = run_diagnostics(report)
            diagnostics["run"]["method"] = label
            _write_json(diagnostics, run_dir / REPORT_FILE)
            selection = report.selection
            result.runs.append(
                {
                    "method": label,
                    "seed": seed,
                    "unseen": unseen,
                    "best_round": selection.round_no,
                    "selected_unseen_accuracy": selection.unseen_accuracy,
                    "final_unseen_accuracy": selection.final_unseen_accuracy,
                    "comms": report.ledger.totals(),
                    "cumulative_params": report.ledger.cumulative_params(),
                }
            )
    return result


def _finish(result: RunSet, out: Path, extra: dict[str, Any] | None = None) -> int:
    write_metrics_csv(result.rows, out / METRICS_FILE)
    summary: dict[str, Any] = {
        "partial": result.partial,
        "failures": result.failures,
        "runs": result.runs,
        "summary": summarize(result.rows) if result.rows else {},
    }
    if extra:
        summary.update(extra)
    _write_json(summary, out / REPORT_FILE)
    _LOGGER.info("Wrote %s and %s to %s", METRICS_FILE, REPORT_FILE, out)
    return 1 if result.partial else 0


def cmd_gen_data(config: ExperimentConfig, seed: int, out: Path) -> int:
    """Write the configured domains to a CSV file."""
    out.mkdir(parents=True, exist_ok=True)
    datasets = load_domains(config, seed)
    write_csv(datasets, out / DOMAINS_FILE)
    _LOGGER.info("Wrote %d domains to %s", len(datasets), out / DOMAINS_FILE)
    return 0


def cmd_run(config: ExperimentConfig, out: Path) -> int:
    """Run the configured method over every unseen domain and seed."""
    out.mkdir(parents=True, exist_ok=True)
    if config.rounds.method is Method.FEDAVG:
        config = fedavg_config(config)
    return _finish(run_set(config, config.rounds.method.value, out), out)


def cmd_ablation(config: ExperimentConfig, out: Path) -> int:
    """Run the four (use_di, use_importance) combinations from shared seeds."""
    out.mkdir(parents=True, exist_ok=True)
    combined = RunSet()
    table = []
    for use_di, use_importance in ABLATION_GRID:
        label = ablation_label(use_di, use_importance)
        variant = config.with_rounds(
            method=Method.LSI, use_di=use_di, use_importance=use_importance
        )
        result = run_set(variant, label, out)
        combined.rows.extend(result.rows)
        combined.runs.extend(result.runs)
        combined.failures.extend(result.failures)
        cell = summarize(result.rows).get(label, {}) if result.rows else {}
        table.append(
            {
                "use_di": use_di,
                "use_importance": use_importance,
                "method": label,
                "average": cell.get("average"),
            }
        )
    return _finish(combined, out, {"ablation": table})


def cmd_sweep(
    config: ExperimentConfig, values: Sequence[float], out: Path
) -> int:
    """Run one set per lambda_di value; rows sorted by value, largest first."""
    if not values:
        raise ReportError("sweep needs at least one value")
    out.mkdir(parents=True, exist_ok=True)
    combined = RunSet()
    table = []
    for value in sorted(values, reverse=True):
        label = f"lsi-lambda_di-{value:g}"
        result = run_set(config.with_rounds(lambda_di=value), label, out)
        combined.rows.extend(result.rows)
        combined.runs.extend(result.runs)
        combined.failures.extend(result.failures)
        cell = summarize(result.rows).get(label, {}) if result.rows else {}
        table.append({"lambda_di": value, "average": cell.get("average")})
    return _finish(combined, out, {"sweep": table})


def _client_latents(
    config: ExperimentConfig, datasets: list[DomainDataset], unseen: int, seed: int
) -> tuple[list[ClientState], list[Latents]]:
    split = leave_one_out_split(datasets, unseen, config.data.val_fraction, seed)
    classes = max(d.classes for d in datasets)
    model = init_global_model(
        split.clients[0].dim, config.model.hidden, config.model.latent, classes, seed
    )
    clients = make_clients(split.clients, model, seed)
    original: list[Latents] = []
    for client in clients:
        local_train_stage1(client, config.rounds.stage1_epochs, config.optimizer)
        data = client.train_data
        with no_grad():
            latents = forward_encoder(client.encoder, data.features).data
        original.append((client.client_id, latents, data.labels))
    return clients, original


def cmd_project(
    config: ExperimentConfig, seed: int, unseen: int, out: Path
) -> int:
    """Export 2-D projections of original and synthesized latents per variant."""
    out.mkdir(parents=True, exist_ok=True)
    datasets = load_domains(config, seed)
    clients, original = _client_latents(config, datasets, unseen, seed)
    probes: dict[str, dict[str, Any]] = {}
    for variant, changes in PROJECTION_VARIANTS.items():
        synth = replace(config.synth, **changes)
        synthesized: list[Latents] = []
        for client in clients:
            cid = client.client_id
            targets = sample_label_targets(
                client.train_data, synth.samples, stream_rng(seed, cid, STREAM_LABELS)
            )
            bank = synthesize_for_targets(
                client.head,
                targets,
                synth,
                stream_rng(seed, cid, STREAM_SERVER),
                client_id=cid,
                seed=seed,
            )
            synthesized.append((cid, bank.vectors, bank.labels))
        rows, explained = project(original, synthesized)
        name = (
            PROJECTIONS_FILE
            if variant == "full"
            else PROJECTIONS_FILE.replace(".csv", f"-{variant}.csv")
        )
        write_projection_csv(rows, explained, out / name)
        vectors = np.concatenate([z for _, z, _ in synthesized])
        labels = np.concatenate([y for _, _, y in synthesized])
        probes[variant] = {
            "probe_accuracy": linear_probe_accuracy(vectors, labels, seed=seed),
            "explained_variance": [float(v) for v in explained],
        }
        _LOGGER.info(
            "Projection %s: probe accuracy %.4f",
            variant,
            probes[variant]["probe_accuracy"],
        )
    _write_json({"seed": seed, "unseen": unseen, "variants": probes}, out / REPORT_FILE)
    return 0


def cmd_report(metrics: Sequence[Path], out: Path | None) -> int:
    """Summarize and compare metrics files written by earlier runs."""
    rows: list[MetricsRow] = []
    for path in metrics:
        rows.extend(read_metrics_csv(path))
    methods = {row.method for row in rows}
    result: dict[str, Any] = {"summary": summarize(rows) if rows else {}}
    if {Method.FEDAVG.value, Method.LSI.value} <= methods:
        result["comparison"] = compare_methods(rows)
    text = json.dumps(result, indent=2, sort_keys=True)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _write_json(result, out / REPORT_FILE)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser with every subcommand."""
    parser = argparse.ArgumentParser(
        prog="fedlsi",
        description="Federated domain generalization simulator",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=Path, default=None)
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--unseen", default=None, help="domain id or 'all'")
        sub.add_argument("--out", type=Path, default=None)
        sub.add_argument(
            "--transport", choices=["memory", "socket"], default=None
        )

    add_common(commands.add_parser("gen-data", help="write synthetic domains"))
    run = commands.add_parser("run", help="run one method")
    add_common(run)
    run.add_argument("--method", choices=[m.value for m in Method], default=None)
    add_common(commands.add_parser("ablation", help="2x2 toggle grid"))
    sweep = commands.add_parser("sweep", help="lambda_di sensitivity")
    add_common(sweep)
    sweep.add_argument(
        "--param", choices=["lambda_di"], default="lambda_di"
    )
    sweep.add_argument(
        "--values", type=float, nargs="+", default=list(LAMBDA_DI_GRID)
    )
    add_common(commands.add_parser("project", help="latent projections"))
    report = commands.add_parser("report", help="summarize metrics files")
    report.add_argument("--metrics", type=Path, nargs="+", required=True)
    report.add_argument("--out", type=Path, default=None)
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    return apply_overrides(
        parse_config(args.config),
        seed=args.seed,
        method=getattr(args, "method", None),
        unseen=args.unseen,
        out=args.out,
        transport=args.transport,
    )


def main(argv: Sequence[str] | None = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "report":
            return cmd_report(args.metrics, args.out)
        config = _load(args)
        out = config.output
        if args.command == "gen-data":
            return cmd_gen_data(config, config.seeds[0], out)
        if args.command == "run":
            return cmd_run(config, out)
        if args.command == "ablation":
            return cmd_ablation(config, out)
        if args.command == "sweep":
            return cmd_sweep(config, args.values, out)
        unseen = (
            min(d.domain for d in load_domains(config, config.seeds[0]))
            if config.unseen == UNSEEN_ALL
            else int(config.unseen)
        )
        return cmd_project(config, config.seeds[0], unseen, out)
    except FedLsiError as err:
        _LOGGER.error("%s", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
