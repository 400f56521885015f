"""Storage accounting and diagnostics for fedlsi runs."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING, Any

if TYPE_CHECKING:
    from .coordinator import ExperimentReport

_LOGGER = logging.getLogger(__name__)

REDACTED = "**REDACTED**"
TO_REDACT = {"vectors", "labels", "csv"}


class Location(StrEnum):
    """Where an artifact is held."""

    CLIENT = "client"
    SERVER = "server"


@dataclass
class StorageEntry:
    """One stored model or artifact and the stages bounding its lifetime."""

    artifact: str
    location: Location
    owner: int
    size: int
    stored_at: str
    purged_at: str | None = None

    @property
    def live(self) -> bool:
        """Return whether the artifact is still held."""
        return self.purged_at is None


@dataclass
class StorageTable:
    """What each stage stores where, and when it is destroyed."""

    entries: list[StorageEntry] = field(default_factory=list)

    def store(
        self,
        artifact: str,
        location: Location,
        owner: int,
        size: int,
        stage: str,
    ) -> StorageEntry:
        """Record a newly held artifact."""
        entry = StorageEntry(artifact, location, owner, size, stage)
        self.entries.append(entry)
        return entry

    def purge(
        self,
        artifact: str,
        stage: str,
        *,
        location: Location | None = None,
        owner: int | None = None,
    ) -> int:
        """Mark matching live entries purged; return how many were."""
        purged = 0
        for entry in self.entries:
            if (
                entry.live
                and entry.artifact == artifact
                and location in (None, entry.location)
                and owner in (None, entry.owner)
            ):
                entry.purged_at = stage
                purged += 1
        if not purged:
            _LOGGER.warning("No live %s to purge at %s", artifact, stage)
        return purged

    def live(self) -> list[StorageEntry]:
        """Return the entries not yet purged."""
        return [entry for entry in self.entries if entry.live]

    def lifetime(self, artifact: str) -> dict[str, str | None]:
        """Return the first store and last purge stage of an artifact."""
        matching = [e for e in self.entries if e.artifact == artifact]
        if not matching:
            return {"stored_at": None, "purged_at": None}
        purges = [e.purged_at for e in matching]
        return {
            "stored_at": matching[0].stored_at,
            "purged_at": None if None in purges else purges[-1],
        }

    def as_rows(self) -> list[dict[str, Any]]:
        """Return JSON-ready rows."""
        return [
            {**asdict(entry), "location": entry.location.value}
            for entry in self.entries
        ]


def redact(data: Any, to_redact: Iterable[str] = TO_REDACT) -> Any:
    """Return a copy of ``data`` with the values of sensitive keys replaced."""
    keys = set(to_redact)
    if isinstance(data, Mapping):
        return {
            key: REDACTED if key in keys and value is not None else redact(value, keys)
            for key, value in data.items()
        }
    if isinstance(data, list | tuple):
        return [redact(item, keys) for item in data]
    return data


def run_diagnostics(report: ExperimentReport) -> dict[str, Any]:
    """Return diagnostics for a finished run."""
    selection = report.selection
    return redact(
        {
            "run": {
                "method": report.method,
                "seed": report.seed,
                "unseen": report.unseen,
            },
            "config": report.config,
            "best_round": {
                "round": selection.round_no,
                "val_accuracy": selection.val_accuracy,
                "unseen_accuracy": selection.unseen_accuracy,
            },
            "comms": report.ledger.totals(),
            "storage": {
                "entries": report.storage.as_rows(),
                "live": [entry.artifact for entry in report.storage.live()],
            },
            "banks": [asdict(summary) for summary in report.banks],
            "bank_lifetime": report.storage.lifetime("bank"),
        }
    )
