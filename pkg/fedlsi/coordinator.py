"""Client and server actors running the federated pipeline over channels."""

from __future__ import annotations

import asyncio
import logging
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, TypeVar

import numpy as np

from .config import ExperimentConfig
from .const import SERVER_ID, STREAM_LABELS, STREAM_SERVER
from .data import DomainDataset, FederationSplit, concat_datasets, stream_rng
from .diagnostics import Location, StorageTable
from .errors import FederationError, FedLsiError, ProtocolError, StageError
from .federation import (
    Aggregation,
    ClientState,
    GlobalModel,
    ImportanceVector,
    Method,
    aggregate,
    compute_importance,
    evaluate,
    init_global_model,
    local_train_stage1,
    local_train_stage4,
    make_clients,
    normalize_importance,
)
from .inversion import (
    SynthBank,
    bank_accuracy,
    dump_bank_csv,
    purge_bank,
    sample_label_targets,
    stat_gap,
    synthesize_for_targets,
)
from .layers import ClassifierHead, Mode, state_size
from .report import (
    SPLIT_TRAIN,
    SPLIT_UNSEEN,
    SPLIT_VAL,
    MetricsRow,
    Selection,
    local_split,
    select_best_round,
)
from .translator import GeneratorNet, TranslatorTrainer
from .transport import (
    Channel,
    CommsLedger,
    Direction,
    MessageType,
    ModelPart,
    ParamBlob,
    check_policy,
    decode_ack,
    decode_params,
    encode_ack,
    encode_params,
    encode_values,
    open_channels,
    recv_frame,
    send_blob,
    send_frame,
)

_LOGGER = logging.getLogger(__name__)

_T = TypeVar("_T")

BlobKey = tuple[int, int, ModelPart]

STAGE_END = "end"


@contextmanager
def stage(tag: str) -> Iterator[None]:
    """Re-raise simulator failures inside the block tagged with ``tag``."""
    try:
        yield
    except StageError:
        raise
    except FedLsiError as err:
        raise StageError(tag, str(err)) from err


@dataclass(frozen=True)
class BankSummary:
    """What remains known about a synthesized bank after its purge."""

    client_id: int
    size: int
    head_accuracy: float
    init_gap: float
    final_gap: float
    class_counts: list[int]
    config_hash: str


@dataclass
class ExperimentReport:
    """Everything one (method, seed, unseen domain) run produced."""

    method: str
    seed: int
    unseen: int
    rows: list[MetricsRow]
    ledger: CommsLedger
    storage: StorageTable
    banks: list[BankSummary]
    config: dict[str, Any]
    final_model: GlobalModel
    best_model: GlobalModel
    stage1_losses: dict[int, list[float]] = field(default_factory=dict)

    @property
    def selection(self) -> Selection:
        """Return the best-validation round and its accuracies."""
        return select_best_round(self.rows)


class Inbox:
    """Server-side buffer of uploads keyed by (round, client, part)."""

    def __init__(self, channel: Channel) -> None:
        """Initialize over the server's receiving channel."""
        self.channel = channel
        self.blobs: dict[BlobKey, ParamBlob] = {}
        self.acks: set[tuple[int, int]] = set()

    async def _pull(self) -> None:
        frame = await recv_frame(self.channel)
        if frame is None:
            raise FederationError("uplink closed mid-protocol")
        if frame.msg_type is MessageType.ACK:
            self.acks.add(decode_ack(frame))
            return
        if frame.msg_type is not MessageType.PARAM_UPLOAD:
            raise ProtocolError(f"server received {frame.msg_type.name}")
        blob = ParamBlob.from_frame(frame)
        check_policy(frame.msg_type, blob)
        key = (blob.round_no, blob.client_id, blob.part)
        if key in self.blobs:
            raise ProtocolError(f"duplicate upload {key}")
        self.blobs[key] = blob

    async def take(self, keys: Sequence[BlobKey]) -> dict[BlobKey, ParamBlob]:
        """Wait until every key arrived, then remove and return them."""
        while any(key not in self.blobs for key in keys):
            await self._pull()
        return {key: self.blobs.pop(key) for key in keys}

    async def wait_acks(self, expected: set[tuple[int, int]]) -> None:
        """Wait until every (client, round) ack arrived."""
        while not expected <= self.acks:
            await self._pull()


async def expect_blob(
    channel: Channel, msg_type: MessageType, part: ModelPart
) -> ParamBlob:
    """Receive one blob and check its message type and model part."""
    frame = await recv_frame(channel)
    if frame is None:
        raise FederationError(f"downlink {getattr(channel, 'name', '')} closed")
    if frame.msg_type is not msg_type:
        raise ProtocolError(f"expected {msg_type.name}, got {frame.msg_type.name}")
    blob = ParamBlob.from_frame(frame)
    if blob.part is not part:
        raise ProtocolError(f"expected {part.name}, got {blob.part.name}")
    return blob


class FederationCoordinator:
    """Runs one client actor per training domain and a server actor.

    All parameters cross the transport as framed blobs; the coordinator only
    evaluates the global model the server broadcasts.
    """

    def __init__(
        self,
        split: FederationSplit,
        config: ExperimentConfig,
        seed: int,
        *,
        dump_dir: Path | None = None,
    ) -> None:
        """Build the common starting model and the clients."""
        if len(split.clients) < 2:
            raise FederationError("need at least 2 training clients")
        self.split = split
        self.config = config
        self.seed = seed
        self.dump_dir = dump_dir
        classes = max(d.classes for d in [*split.clients, split.unseen])
        self.template = init_global_model(
            split.clients[0].dim,
            config.model.hidden,
            config.model.latent,
            classes,
            seed,
        )
        self.clients = make_clients(split.clients, self.template, seed)
        self.ledger = CommsLedger()
        self.storage = StorageTable()
        self.rows: list[MetricsRow] = []
        self.banks: list[BankSummary] = []
        self.stage1_losses: dict[int, list[float]] = {}
        self.final_model = self.template.clone()
        self.best_model = self.template.clone()
        self._best_val = -1.0
        self._train_pool = concat_datasets([c.train_data for c in self.clients])
        val_sets = [c.dataset.val() for c in self.clients]
        self._val_pool: DomainDataset | None = (
            concat_datasets(val_sets) if any(len(v) for v in val_sets) else None
        )

    @property
    def method(self) -> Method:
        """Return the configured method."""
        return self.config.rounds.method

    @property
    def uses_translator(self) -> bool:
        """Return whether stages 2 and 3 run."""
        return self.method is Method.LSI

    async def _compute(
        self, func: Callable[..., _T], *args: Any, **kwargs: Any
    ) -> _T:
        if self.config.parallel:
            return await asyncio.to_thread(func, *args, **kwargs)
        return func(*args, **kwargs)

    def _generator_template(self) -> GeneratorNet:
        gan = self.config.gan
        return GeneratorNet(
            self.config.model.latent,
            len(self.clients),
            gan.hidden,
            gan.dropout,
            np.random.default_rng(0),
        )

    async def run(self) -> ExperimentReport:
        """Run every stage and round; return the report."""
        rounds = self.config.rounds
        _LOGGER.info(
            "Starting %s run: seed %d, unseen domain %d, %d clients, %d rounds",
            self.method.value,
            self.seed,
            self.split.unseen.domain,
            len(self.clients),
            rounds.rounds,
        )
        for client in self.clients:
            cid = client.client_id
            for name, module in (("encoder", client.encoder), ("head", client.head)):
                self.storage.store(
                    name, Location.CLIENT, cid, state_size(module), "stage1"
                )

        async with open_channels(self.config.transport) as factory:
            inbox = Inbox(factory.channel("server"))
            downlinks = [
                factory.channel(f"client-{c.client_id}") for c in self.clients
            ]
            try:
                async with asyncio.TaskGroup() as group:
                    group.create_task(self._server(inbox, downlinks))
                    for client, downlink in zip(self.clients, downlinks, strict=True):
                        group.create_task(
                            self._client(client, inbox.channel, downlink)
                        )
            except ExceptionGroup as failures:
                raise failures.exceptions[0]  # noqa: B904

        if self.uses_translator:
            self.storage.purge("generator", STAGE_END, location=Location.CLIENT)
        self.ledger.records.sort(
            key=lambda r: (
                r.round_no,
                r.direction is Direction.DOWNLOAD,
                r.client_id,
                r.part,
            )
        )
        report = ExperimentReport(
            method=self.method.value,
            seed=self.seed,
            unseen=self.split.unseen.domain,
            rows=self.rows,
            ledger=self.ledger,
            storage=self.storage,
            banks=self.banks,
            config=self.config.as_dict(),
            final_model=self.final_model,
            best_model=self.best_model,
            stage1_losses=dict(sorted(self.stage1_losses.items())),
        )
        selection = report.selection
        _LOGGER.info(
            "Finished: best round %d, val %.4f, unseen %.4f",
            selection.round_no,
            selection.val_accuracy,
            selection.unseen_accuracy,
        )
        return report

    async def _client(
        self, client: ClientState, uplink: Channel, downlink: Channel
    ) -> None:
        cid = client.client_id
        rounds = self.config.rounds
        opt = self.config.optimizer

        with stage("stage1"):
            self.stage1_losses[cid] = await self._compute(
                local_train_stage1, client, rounds.stage1_epochs, opt
            )

        generator: GeneratorNet | None = None
        if self.uses_translator:
            with stage("stage2"):
                await send_blob(
                    uplink,
                    MessageType.PARAM_UPLOAD,
                    encode_params(client.head, ModelPart.HEAD, cid, 0),
                    self.ledger,
                )
                targets = sample_label_targets(
                    client.train_data,
                    self.config.synth.samples,
                    stream_rng(self.seed, cid, STREAM_LABELS),
                )
                await send_blob(
                    uplink,
                    MessageType.PARAM_UPLOAD,
                    encode_values(targets, ModelPart.LABELS, cid, 0),
                    self.ledger,
                )
            with stage("stage3"):
                blob = await expect_blob(
                    downlink, MessageType.GENERATOR_DELIVERY, ModelPart.GENERATOR
                )
                generator = self._generator_template()
                decode_params(blob, generator)
                generator.set_mode(Mode.EVAL)
                await send_frame(uplink, encode_ack(cid, 0))

        for round_no in range(1, rounds.rounds + 1):
            with stage("stage4"):
                await self._compute(
                    local_train_stage4, client, generator, rounds, opt
                )
            with stage("stage5"):
                await self._upload_round(client, uplink, round_no)
            with stage("round"):
                encoder_blob = await expect_blob(
                    downlink, MessageType.PARAM_BROADCAST, ModelPart.ENCODER
                )
                head_blob = await expect_blob(
                    downlink, MessageType.PARAM_BROADCAST, ModelPart.HEAD
                )
                decode_params(encoder_blob, client.encoder)
                decode_params(head_blob, client.head)

    async def _upload_round(
        self, client: ClientState, uplink: Channel, round_no: int
    ) -> None:
        cid = client.client_id
        rounds = self.config.rounds
        blobs = [
            encode_params(client.encoder, ModelPart.ENCODER, cid, round_no),
            encode_params(client.head, ModelPart.HEAD, cid, round_no),
        ]
        if rounds.importance_active:
            importance = await self._compute(
                compute_importance, client, client.train_data, rounds.squared_norm
            )
            blobs.append(
                encode_values(
                    importance.encoder, ModelPart.IMPORTANCE_ENCODER, cid, round_no
                )
            )
            blobs.append(
                encode_values(importance.head, ModelPart.IMPORTANCE_HEAD, cid, round_no)
            )
        for blob in blobs:
            await send_blob(uplink, MessageType.PARAM_UPLOAD, blob, self.ledger)

    async def _server(self, inbox: Inbox, downlinks: Sequence[Channel]) -> None:
        if self.uses_translator:
            banks = await self._synthesize_banks(inbox)
            await self._deliver_translator(inbox, downlinks, banks)
        for round_no in range(1, self.config.rounds.rounds + 1):
            with stage("stage5"):
                model = await self._aggregate_round(inbox, round_no)
            with stage("round"):
                encoder_blob = encode_params(
                    model.encoder, ModelPart.ENCODER, SERVER_ID, round_no
                )
                head_blob = encode_params(
                    model.head, ModelPart.HEAD, SERVER_ID, round_no
                )
                decode_params(encoder_blob, model.encoder)
                decode_params(head_blob, model.head)
                for index, downlink in enumerate(downlinks):
                    for blob in (encoder_blob, head_blob):
                        await send_blob(
                            downlink,
                            MessageType.PARAM_BROADCAST,
                            blob,
                            self.ledger,
                            client_id=index,
                        )
                self._evaluate(round_no, model)

    async def _synthesize_banks(self, inbox: Inbox) -> list[SynthBank]:
        synth = self.config.synth
        m = len(self.clients)
        with stage("stage2"):
            uploads = await inbox.take(
                [
                    (0, d, part)
                    for d in range(m)
                    for part in (ModelPart.HEAD, ModelPart.LABELS)
                ]
            )
            heads = []
            for d in range(m):
                head: ClassifierHead = self.template.head.clone()
                decode_params(uploads[(0, d, ModelPart.HEAD)], head)
                self.storage.store(
                    "head", Location.SERVER, d, state_size(head), "stage2"
                )
                heads.append(head)
            _LOGGER.info("Stage 2: inverting %d client heads", m)
            banks = await asyncio.gather(
                *(
                    self._compute(
                        synthesize_for_targets,
                        heads[d],
                        uploads[(0, d, ModelPart.LABELS)].values.astype(np.int64),
                        synth,
                        stream_rng(self.seed, d, STREAM_SERVER),
                        client_id=d,
                        seed=self.seed,
                    )
                    for d in range(m)
                )
            )
            for head, bank in zip(heads, banks, strict=True):
                d = bank.client_id
                self.storage.store(
                    "bank", Location.SERVER, d, bank.vectors.size, "stage2"
                )
                self.banks.append(
                    BankSummary(
                        d,
                        len(bank),
                        bank_accuracy(head, bank),
                        bank.init_gap,
                        stat_gap(bank.vectors, head.bn),
                        np.bincount(bank.labels, minlength=head.classes).tolist(),
                        bank.config_hash,
                    )
                )
                if synth.dump and self.dump_dir is not None:
                    self.dump_dir.mkdir(parents=True, exist_ok=True)
                    dump_bank_csv(bank, self.dump_dir / f"bank-client-{d}.csv")
                self.storage.purge("head", "stage2", location=Location.SERVER, owner=d)
        return list(banks)

    async def _deliver_translator(
        self, inbox: Inbox, downlinks: Sequence[Channel], banks: list[SynthBank]
    ) -> None:
        with stage("stage3"):
            trainer = TranslatorTrainer(
                banks,
                self.config.gan,
                stream_rng(self.seed, SERVER_ID, STREAM_SERVER),
            )
            self.storage.store(
                "discriminator",
                Location.SERVER,
                SERVER_ID,
                state_size(trainer.discriminator),
                "stage3",
            )
            _LOGGER.info("Stage 3: training the translator on %d banks", len(banks))
            nets = await self._compute(trainer.train)
            generator_size = state_size(nets.generator)
            self.storage.store(
                "generator", Location.SERVER, SERVER_ID, generator_size, "stage3"
            )
            for bank in banks:
                purge_bank(bank)
            self.storage.purge("bank", "stage3")
            self.storage.purge("discriminator", "stage3")

            blob = encode_params(nets.generator, ModelPart.GENERATOR, SERVER_ID, 0)
            for index, downlink in enumerate(downlinks):
                await send_blob(
                    downlink,
                    MessageType.GENERATOR_DELIVERY,
                    blob,
                    self.ledger,
                    client_id=index,
                )
            self.storage.purge("generator", "stage3", location=Location.SERVER)
            await inbox.wait_acks({(d, 0) for d in range(len(downlinks))})
            for index in range(len(downlinks)):
                self.storage.store(
                    "generator", Location.CLIENT, index, generator_size, "stage3"
                )

    async def _aggregate_round(self, inbox: Inbox, round_no: int) -> GlobalModel:
        rounds = self.config.rounds
        m = len(self.clients)
        parts = [ModelPart.ENCODER, ModelPart.HEAD]
        if rounds.importance_active:
            parts += [ModelPart.IMPORTANCE_ENCODER, ModelPart.IMPORTANCE_HEAD]
        uploads = await inbox.take(
            [(round_no, d, part) for d in range(m) for part in parts]
        )
        models = []
        for d in range(m):
            model = self.template.clone()
            decode_params(uploads[(round_no, d, ModelPart.ENCODER)], model.encoder)
            decode_params(uploads[(round_no, d, ModelPart.HEAD)], model.head)
            models.append(model)

        importances = None
        if rounds.importance_active:
            encoders = normalize_importance(
                [uploads[(round_no, d, parts[2])].values for d in range(m)]
            )
            heads = normalize_importance(
                [uploads[(round_no, d, parts[3])].values for d in range(m)]
            )
            importances = [
                ImportanceVector(e, h) for e, h in zip(encoders, heads, strict=True)
            ]
        rule = Aggregation.IMPORTANCE if importances else Aggregation.UNIFORM
        _LOGGER.debug("Round %d: aggregating %d clients (%s)", round_no, m, rule)
        return aggregate(models, importances)

    def _evaluate(self, round_no: int, model: GlobalModel) -> None:
        splits: list[tuple[str, DomainDataset | None]] = [
            (SPLIT_TRAIN, self._train_pool),
            (SPLIT_VAL, self._val_pool),
            (SPLIT_UNSEEN, self.split.unseen),
        ]
        splits += [(local_split(c.client_id), c.train_data) for c in self.clients]
        accuracy: dict[str, float] = {}
        for name, dataset in splits:
            if dataset is None:
                continue
            result = evaluate(model, dataset)
            accuracy[name] = result.accuracy
            self.rows.append(
                MetricsRow(
                    self.method.value,
                    self.seed,
                    self.split.unseen.domain,
                    round_no,
                    name,
                    result.accuracy,
                    result.loss,
                )
            )
        self.final_model = model.clone()
        val = accuracy.get(SPLIT_VAL, float("inf"))
        if val > self._best_val or SPLIT_VAL not in accuracy:
            self._best_val = val
            self.best_model = model.clone()
        _LOGGER.info(
            "Round %d/%d: unseen %.4f, val %.4f, train %.4f",
            round_no,
            self.config.rounds.rounds,
            accuracy[SPLIT_UNSEEN],
            accuracy.get(SPLIT_VAL, float("nan")),
            accuracy[SPLIT_TRAIN],
        )


def run_pipeline(
    split: FederationSplit,
    config: ExperimentConfig,
    seed: int,
    *,
    dump_dir: Path | None = None,
) -> ExperimentReport:
    """Run stages 1 to 3 once, then the configured rounds of stages 4 and 5."""
    coordinator = FederationCoordinator(split, config, seed, dump_dir=dump_dir)
    return asyncio.run(coordinator.run())


def fedavg_config(config: ExperimentConfig) -> ExperimentConfig:
    """Return ``config`` reduced to plain FedAvg."""
    return config.with_rounds(
        method=Method.FEDAVG,
        use_di=False,
        use_importance=False,
        aggregation=Aggregation.UNIFORM,
    )


def run_fedavg(
    split: FederationSplit, config: ExperimentConfig, seed: int
) -> ExperimentReport:
    """Cross entropy only, uniform aggregation, no inversion or translator."""
    return run_pipeline(split, fedavg_config(config), seed)
