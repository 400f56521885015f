"""Tests for storage accounting and diagnostics."""

from __future__ import annotations

import json
import logging

import pytest

from fedlsi.coordinator import FederationCoordinator
from fedlsi.diagnostics import (
    REDACTED,
    Location,
    StorageTable,
    redact,
    run_diagnostics,
)


class TestStorageTable:
    """Tests for artifact lifetimes."""

    def test_purge_by_location(self):
        """Test purging can target one location."""
        table = StorageTable()
        table.store("generator", Location.SERVER, 0xFFFF, 10, "stage3")
        table.store("generator", Location.CLIENT, 0, 10, "stage3")
        assert table.purge("generator", "stage3", location=Location.SERVER) == 1
        assert [e.location for e in table.live()] == [Location.CLIENT]

    def test_purge_nothing_warns(self, caplog):
        """Test purging an absent artifact logs a warning."""
        with caplog.at_level(logging.WARNING):
            assert StorageTable().purge("bank", "stage3") == 0
        assert "No live bank" in caplog.text

    def test_lifetime(self):
        """Test the first store and the last purge bound the lifetime."""
        table = StorageTable()
        for owner in (0, 1):
            table.store("bank", Location.SERVER, owner, 12, "stage2")
        table.purge("bank", "stage3", owner=0)
        assert table.lifetime("bank") == {"stored_at": "stage2", "purged_at": None}
        table.purge("bank", "stage3")
        assert table.lifetime("bank") == {"stored_at": "stage2", "purged_at": "stage3"}
        assert table.lifetime("head") == {"stored_at": None, "purged_at": None}

    def test_rows(self):
        """Test rows carry plain location strings."""
        table = StorageTable()
        table.store("head", Location.CLIENT, 1, 115, "stage1")
        (row,) = table.as_rows()
        assert row["location"] == "client"
        assert row["purged_at"] is None


class TestRedact:
    """Tests for redaction."""

    def test_nested(self):
        """Test sensitive keys are replaced at any depth."""
        data = {"banks": [{"vectors": [1, 2], "size": 2}], "data": {"csv": "x.csv"}}
        assert redact(data) == {
            "banks": [{"vectors": REDACTED, "size": 2}],
            "data": {"csv": REDACTED},
        }

    def test_none_is_kept(self):
        """Test absent values are not marked redacted."""
        assert redact({"csv": None}) == {"csv": None}

    def test_custom_keys(self):
        """Test callers may pass their own key set."""
        assert redact({"seed": 3, "x": 1}, {"seed"}) == {"seed": REDACTED, "x": 1}


class TestRunDiagnostics:
    """Tests for diagnostics of a finished run."""

    @pytest.mark.asyncio
    async def test_run(self, split, fast_config):
        """Test diagnostics are JSON-ready and show the bank lifetime."""
        report = await FederationCoordinator(split, fast_config, 0).run()
        diagnostics = run_diagnostics(report)
        json.dumps(diagnostics)
        assert diagnostics["run"] == {"method": "lsi", "seed": 0, "unseen": 2}
        assert diagnostics["bank_lifetime"] == {
            "stored_at": "stage2",
            "purged_at": "stage3",
        }
        live = sorted(diagnostics["storage"]["live"])
        assert live == ["encoder", "encoder", "head", "head"]
        assert diagnostics["comms"] == report.ledger.totals()
        assert len(diagnostics["banks"]) == 2
