"""Tests for the federated pipeline coordinator."""

from __future__ import annotations

import dataclasses
from unittest.mock import patch

import numpy as np
import pytest

from fedlsi.config import ExperimentConfig
from fedlsi.coordinator import (
    FederationCoordinator,
    Inbox,
    expect_blob,
    fedavg_config,
    run_fedavg,
    run_pipeline,
    stage,
)
from fedlsi.data import FederationSplit
from fedlsi.diagnostics import Location
from fedlsi.errors import (
    FederationError,
    InversionError,
    ProtocolError,
    StageError,
    TensorError,
)
from fedlsi.federation import Method, local_train_stage1, local_train_stage4
from fedlsi.layers import flatten_state, parameter_count, state_size
from fedlsi.report import SPLIT_TRAIN, SPLIT_UNSEEN, SPLIT_VAL, local_split
from fedlsi.transport import (
    Direction,
    MemoryChannel,
    MessageType,
    ModelPart,
    TransportKind,
    encode_values,
    send_blob,
)


def _accuracies(report) -> list[tuple[int, str, float, float]]:
    return [(r.round_no, r.split, r.accuracy, r.loss) for r in report.rows]


class TestPipeline:
    """Tests for a full run over memory channels."""

    @pytest.mark.asyncio
    async def test_rows_per_round_and_split(self, split, fast_config):
        """Test every round is evaluated on every split."""
        report = await FederationCoordinator(split, fast_config, 0).run()
        splits = {SPLIT_TRAIN, SPLIT_VAL, SPLIT_UNSEEN, local_split(0), local_split(1)}
        for round_no in (1, 2):
            assert {r.split for r in report.rows if r.round_no == round_no} == splits
        assert report.method == "lsi"
        assert report.unseen == 2
        assert report.selection.round_no in (1, 2)
        assert sorted(report.stage1_losses) == [0, 1]

    @pytest.mark.asyncio
    async def test_ledger_matches_closed_form(self, split, fast_config):
        """Test each client moves |head| + |G| + R*2*(|enc| + |head|) parameters."""
        coordinator = FederationCoordinator(split, fast_config, 0)
        report = await coordinator.run()
        encoder = state_size(coordinator.template.encoder)
        head = state_size(coordinator.template.head)
        generator = state_size(coordinator._generator_template())
        rounds = fast_config.rounds.rounds
        for client_id in (0, 1):
            assert report.ledger.client_params(client_id) == (
                head + generator + rounds * 2 * (encoder + head)
            )
        importance = parameter_count(coordinator.template.encoder) + parameter_count(
            coordinator.template.head
        )
        samples = fast_config.synth.samples
        assert report.ledger.total_aux() == 2 * (samples + rounds * importance)

    @pytest.mark.asyncio
    async def test_cumulative_grows_by_round_cost(self, split, fast_config):
        """Test every round adds exactly 2 * m * (|enc| + |head|) parameters."""
        coordinator = FederationCoordinator(split, fast_config, 0)
        report = await coordinator.run()
        encoder = state_size(coordinator.template.encoder)
        head = state_size(coordinator.template.head)
        generator = state_size(coordinator._generator_template())
        clients = len(split.clients)
        cumulative = report.ledger.cumulative_params()
        assert len(cumulative) == fast_config.rounds.rounds + 1
        assert cumulative[0] == clients * (head + generator)
        per_round = clients * 2 * (encoder + head)
        assert np.diff(cumulative).tolist() == [per_round] * fast_config.rounds.rounds

    @pytest.mark.asyncio
    async def test_inversion_and_translator_leave_encoders(self, split, fast_config):
        """Test encoders are bit-identical from local training to round 1."""
        after_stage1: dict[int, np.ndarray] = {}
        before_stage4: dict[int, np.ndarray] = {}

        def train_stage1(client, *args):
            losses = local_train_stage1(client, *args)
            after_stage1[client.client_id] = flatten_state(client.encoder).copy()
            return losses

        def train_stage4(client, *args):
            before_stage4.setdefault(
                client.client_id, flatten_state(client.encoder).copy()
            )
            return local_train_stage4(client, *args)

        with (
            patch("fedlsi.coordinator.local_train_stage1", train_stage1),
            patch("fedlsi.coordinator.local_train_stage4", train_stage4),
        ):
            await FederationCoordinator(split, fast_config, 0).run()
        assert sorted(before_stage4) == sorted(after_stage1) == [0, 1]
        for client_id, state in after_stage1.items():
            np.testing.assert_array_equal(before_stage4[client_id], state)

    @pytest.mark.asyncio
    async def test_pre_round_pattern(self, split, fast_config):
        """Test only heads and labels go up and only G comes down before round 1."""
        report = await FederationCoordinator(split, fast_config, 0).run()
        early = [r for r in report.ledger.records if r.round_no == 0]
        uploads = {r.part for r in early if r.direction is Direction.UPLOAD}
        downloads = {r.part for r in early if r.direction is Direction.DOWNLOAD}
        assert uploads == {ModelPart.HEAD, ModelPart.LABELS}
        assert downloads == {ModelPart.GENERATOR}

    @pytest.mark.asyncio
    async def test_server_holds_nothing_after_run(self, split, fast_config):
        """Test banks, heads, discriminator and generators are all purged."""
        report = await FederationCoordinator(split, fast_config, 0).run()
        live = report.storage.live()
        assert {(e.artifact, e.location) for e in live} == {
            ("encoder", Location.CLIENT),
            ("head", Location.CLIENT),
        }
        assert report.storage.lifetime("bank") == {
            "stored_at": "stage2",
            "purged_at": "stage3",
        }
        samples = fast_config.synth.samples
        assert all(summary.size == samples for summary in report.banks)

    @pytest.mark.asyncio
    async def test_deterministic(self, split, fast_config):
        """Test two runs with the same seed agree exactly."""
        first = await FederationCoordinator(split, fast_config, 0).run()
        second = await FederationCoordinator(split, fast_config, 0).run()
        assert _accuracies(first) == _accuracies(second)

    @pytest.mark.asyncio
    async def test_parallel_matches_sequential(self, split, fast_config):
        """Test client threads do not change the results or the ledger."""
        parallel = dataclasses.replace(fast_config, parallel=True)
        first = await FederationCoordinator(split, fast_config, 0).run()
        second = await FederationCoordinator(split, parallel, 0).run()
        assert _accuracies(first) == _accuracies(second)
        assert first.ledger.records == second.ledger.records

    @pytest.mark.asyncio
    async def test_socket_matches_memory(self, split, fast_config):
        """Test the loopback websocket transport gives the same run."""
        socket = dataclasses.replace(fast_config, transport=TransportKind.SOCKET)
        first = await FederationCoordinator(split, fast_config, 0).run()
        second = await FederationCoordinator(split, socket, 0).run()
        assert _accuracies(first) == _accuracies(second)
        assert first.ledger.total_bytes() == second.ledger.total_bytes()

    @pytest.mark.asyncio
    async def test_bank_dump(self, split, fast_config, tmp_path):
        """Test the debug flag writes one bank file per client."""
        config = dataclasses.replace(
            fast_config, synth=dataclasses.replace(fast_config.synth, dump=True)
        )
        await FederationCoordinator(split, config, 0, dump_dir=tmp_path).run()
        assert sorted(p.name for p in tmp_path.iterdir()) == [
            "bank-client-0.csv",
            "bank-client-1.csv",
        ]

    def test_run_pipeline(self, split, fast_config):
        """Test the synchronous entry point."""
        report = run_pipeline(split, fast_config, 0)
        assert len(report.rows) == 2 * 5


class TestFedAvg:
    """Tests for the baseline."""

    @pytest.mark.asyncio
    async def test_ablation_without_both_terms_is_fedavg(self, split, fast_config):
        """Test LSI without invariance or importance reproduces FedAvg."""
        plain = fast_config.with_rounds(use_di=False, use_importance=False)
        lsi = await FederationCoordinator(split, plain, 0).run()
        fedavg = await FederationCoordinator(split, fedavg_config(fast_config), 0).run()
        assert _accuracies(lsi) == _accuracies(fedavg)
        assert fedavg.method == "fedavg"

    @pytest.mark.asyncio
    async def test_fedavg_ledger(self, split, fast_config):
        """Test FedAvg moves R*2*(|enc| + |head|) per client and no aux values."""
        coordinator = FederationCoordinator(split, fedavg_config(fast_config), 0)
        report = await coordinator.run()
        encoder = state_size(coordinator.template.encoder)
        head = state_size(coordinator.template.head)
        rounds = fast_config.rounds.rounds
        assert report.ledger.client_params(0) == rounds * 2 * (encoder + head)
        assert report.ledger.total_aux() == 0
        assert report.banks == []

    def test_fedavg_config(self, fast_config: ExperimentConfig):
        """Test the baseline config turns every LSI term off."""
        rounds = fedavg_config(fast_config).rounds
        assert rounds.method is Method.FEDAVG
        assert not rounds.invariance_active
        assert not rounds.importance_active

    def test_run_fedavg(self, split, fast_config):
        """Test the synchronous baseline entry point."""
        assert run_fedavg(split, fast_config, 0).method == "fedavg"


class TestFailures:
    """Tests for failure propagation."""

    @pytest.mark.asyncio
    async def test_inversion_failure_is_tagged(self, split, fast_config):
        """Test a failing inversion surfaces as a stage2 error."""
        with (
            patch(
                "fedlsi.coordinator.synthesize_for_targets",
                side_effect=InversionError("diverged"),
            ),
            pytest.raises(StageError) as err,
        ):
            await FederationCoordinator(split, fast_config, 0).run()
        assert err.value.stage == "stage2"
        assert "diverged" in str(err.value)

    @pytest.mark.asyncio
    async def test_training_failure_is_tagged(self, split, fast_config):
        """Test a failing local training surfaces as a stage1 error."""
        with (
            patch(
                "fedlsi.coordinator.local_train_stage1",
                side_effect=TensorError("nan loss"),
            ),
            pytest.raises(StageError) as err,
        ):
            await FederationCoordinator(split, fast_config, 0).run()
        assert err.value.stage == "stage1"

    def test_stage_keeps_existing_tag(self):
        """Test nested stages keep the innermost tag."""
        with pytest.raises(StageError) as err, stage("round"), stage("stage4"):
            raise FederationError("boom")
        assert err.value.stage == "stage4"

    def test_needs_two_clients(self, split, fast_config):
        """Test a federation of one client is rejected."""
        lonely = FederationSplit(split.clients[:1], split.unseen)
        with pytest.raises(FederationError):
            FederationCoordinator(lonely, fast_config, 0)


class TestInbox:
    """Tests for server-side upload buffering."""

    @pytest.mark.asyncio
    async def test_duplicate_upload(self):
        """Test the same upload twice is a protocol error."""
        channel = MemoryChannel("server")
        blob = encode_values(np.ones(3), ModelPart.HEAD, 0, 0)
        for _ in range(2):
            await send_blob(channel, MessageType.PARAM_UPLOAD, blob)
        with pytest.raises(ProtocolError, match="duplicate"):
            await Inbox(channel).take([(0, 1, ModelPart.HEAD)])

    @pytest.mark.asyncio
    async def test_closed_uplink(self):
        """Test a closed uplink fails the wait."""
        channel = MemoryChannel("server")
        await channel.close()
        with pytest.raises(FederationError):
            await Inbox(channel).take([(0, 0, ModelPart.HEAD)])

    @pytest.mark.asyncio
    async def test_expect_blob_checks_part(self):
        """Test a blob of the wrong part is rejected."""
        channel = MemoryChannel("client-0")
        blob = encode_values(np.ones(3), ModelPart.HEAD, 0, 1)
        await send_blob(channel, MessageType.PARAM_BROADCAST, blob)
        with pytest.raises(ProtocolError):
            await expect_blob(channel, MessageType.PARAM_BROADCAST, ModelPart.ENCODER)
