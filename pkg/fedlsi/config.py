"""Experiment configuration: YAML documents validated with voluptuous."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import voluptuous as vol
import yaml

from .const import (
    DEFAULT_AMBIENT_DIM,
    DEFAULT_ANGLES,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CLASSES,
    DEFAULT_DROPOUT,
    DEFAULT_GAN_HIDDEN,
    DEFAULT_GAN_LR,
    DEFAULT_GAN_STEPS,
    DEFAULT_HIDDEN,
    DEFAULT_LAMBDA_BN,
    DEFAULT_LAMBDA_CLS,
    DEFAULT_LAMBDA_CLSD,
    DEFAULT_LAMBDA_CLSG,
    DEFAULT_LAMBDA_DI,
    DEFAULT_LAMBDA_NORM,
    DEFAULT_LAMBDA_REC,
    DEFAULT_LATENT_DIM,
    DEFAULT_LOCAL_EPOCHS,
    DEFAULT_LR,
    DEFAULT_MOMENTUM,
    DEFAULT_NOISE,
    DEFAULT_ROUNDS,
    DEFAULT_SAMPLES_PER_DOMAIN,
    DEFAULT_SYNTH_LR,
    DEFAULT_SYNTH_SAMPLES,
    DEFAULT_SYNTH_STEPS,
    DEFAULT_VAL_FRACTION,
    DEFAULT_WEIGHT_DECAY,
)
from .data import (
    DomainDataset,
    DomainShift,
    SyntheticSpec,
    generate_rotated_blobs,
    load_csv,
)
from .errors import ConfigError, FedLsiError
from .federation import Aggregation, Method, OptimizerConfig, RoundConfig
from .inversion import SynthConfig
from .translator import GanConfig
from .transport import TransportKind

_LOGGER = logging.getLogger(__name__)

UNSEEN_ALL = "all"

_NON_NEGATIVE = vol.All(vol.Coerce(float), vol.Range(min=0))
_POSITIVE = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
_COUNT = vol.All(int, vol.Range(min=1))
_BATCH = vol.All(int, vol.Range(min=2))

DATA_SCHEMA = vol.Schema(
    {
        vol.Optional("csv", default=None): vol.Any(None, str),
        vol.Optional("classes", default=DEFAULT_CLASSES): vol.All(
            int, vol.Range(min=2)
        ),
        vol.Optional("angles", default=list(DEFAULT_ANGLES)): vol.All(
            [vol.Coerce(float)], vol.Length(min=3)
        ),
        vol.Optional("scales", default=None): vol.Any(None, [_POSITIVE]),
        vol.Optional("shifts", default=None): vol.Any(
            None, [vol.All([vol.Coerce(float)], vol.Length(min=2, max=2))]
        ),
        vol.Optional("noise", default=DEFAULT_NOISE): _NON_NEGATIVE,
        vol.Optional("samples_per_domain", default=DEFAULT_SAMPLES_PER_DOMAIN): _COUNT,
        vol.Optional("ambient_dim", default=DEFAULT_AMBIENT_DIM): vol.All(
            int, vol.Range(min=2)
        ),
        vol.Optional("embed_seed", default=0): vol.All(int, vol.Range(min=0)),
        vol.Optional("val_fraction", default=DEFAULT_VAL_FRACTION): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)
        ),
    }
)

MODEL_SCHEMA = vol.Schema(
    {
        vol.Optional("hidden", default=list(DEFAULT_HIDDEN)): [_COUNT],
        vol.Optional("latent", default=DEFAULT_LATENT_DIM): _COUNT,
    }
)

OPTIMIZER_SCHEMA = vol.Schema(
    {
        vol.Optional("lr", default=DEFAULT_LR): _POSITIVE,
        vol.Optional("momentum", default=DEFAULT_MOMENTUM): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)
        ),
        vol.Optional("weight_decay", default=DEFAULT_WEIGHT_DECAY): _NON_NEGATIVE,
        vol.Optional("batch_size", default=DEFAULT_BATCH_SIZE): _BATCH,
    }
)

ROUNDS_SCHEMA = vol.Schema(
    {
        vol.Optional("rounds", default=DEFAULT_ROUNDS): _COUNT,
        vol.Optional("local_epochs", default=DEFAULT_LOCAL_EPOCHS): _COUNT,
        vol.Optional("lambda_di", default=DEFAULT_LAMBDA_DI): _NON_NEGATIVE,
        vol.Optional("aggregation", default=Aggregation.IMPORTANCE.value): vol.In(
            [a.value for a in Aggregation]
        ),
        vol.Optional("method", default=Method.LSI.value): vol.In(
            [m.value for m in Method]
        ),
        vol.Optional("use_di", default=True): bool,
        vol.Optional("use_importance", default=True): bool,
        vol.Optional("squared_norm", default=False): bool,
        vol.Optional("first_stage_epochs", default=None): vol.Any(
            None, vol.All(int, vol.Range(min=0))
        ),
    }
)

SYNTH_SCHEMA = vol.Schema(
    {
        vol.Optional("lambda_cls", default=DEFAULT_LAMBDA_CLS): _NON_NEGATIVE,
        vol.Optional("lambda_bn", default=DEFAULT_LAMBDA_BN): _NON_NEGATIVE,
        vol.Optional("lambda_norm", default=DEFAULT_LAMBDA_NORM): _NON_NEGATIVE,
        vol.Optional("lr", default=DEFAULT_SYNTH_LR): _POSITIVE,
        vol.Optional("steps", default=DEFAULT_SYNTH_STEPS): vol.All(
            int, vol.Range(min=0)
        ),
        vol.Optional("batch_size", default=DEFAULT_BATCH_SIZE): _BATCH,
        vol.Optional("samples", default=DEFAULT_SYNTH_SAMPLES): _BATCH,
        vol.Optional("dump", default=False): bool,
    }
)

GAN_SCHEMA = vol.Schema(
    {
        vol.Optional("lambda_clsg", default=DEFAULT_LAMBDA_CLSG): _NON_NEGATIVE,
        vol.Optional("lambda_rec", default=DEFAULT_LAMBDA_REC): _NON_NEGATIVE,
        vol.Optional("lambda_clsd", default=DEFAULT_LAMBDA_CLSD): _NON_NEGATIVE,
        vol.Optional("g_lr", default=DEFAULT_GAN_LR): _POSITIVE,
        vol.Optional("d_lr", default=DEFAULT_GAN_LR): _POSITIVE,
        vol.Optional("steps", default=DEFAULT_GAN_STEPS): vol.All(
            int, vol.Range(min=0)
        ),
        vol.Optional("batch_size", default=DEFAULT_BATCH_SIZE): _COUNT,
        vol.Optional("hidden", default=DEFAULT_GAN_HIDDEN): _COUNT,
        vol.Optional("dropout", default=DEFAULT_DROPOUT): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)
        ),
    }
)

CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional("data", default=dict): DATA_SCHEMA,
        vol.Optional("unseen", default=UNSEEN_ALL): vol.Any(
            UNSEEN_ALL, vol.All(int, vol.Range(min=0))
        ),
        vol.Optional("model", default=dict): MODEL_SCHEMA,
        vol.Optional("optimizer", default=dict): OPTIMIZER_SCHEMA,
        vol.Optional("rounds", default=dict): ROUNDS_SCHEMA,
        vol.Optional("synth", default=dict): SYNTH_SCHEMA,
        vol.Optional("gan", default=dict): GAN_SCHEMA,
        vol.Optional("seeds", default=[0]): vol.All(
            [vol.All(int, vol.Range(min=0))], vol.Length(min=1)
        ),
        vol.Optional("output", default="runs"): str,
        vol.Optional("transport", default=TransportKind.MEMORY.value): vol.In(
            [t.value for t in TransportKind]
        ),
        vol.Optional("parallel", default=False): bool,
    },
    extra=vol.PREVENT_EXTRA,
)


@dataclass(frozen=True)
class ModelConfig:
    """Encoder hidden widths and latent dimension."""

    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    latent: int = DEFAULT_LATENT_DIM


@dataclass(frozen=True)
class DataConfig:
    """Where the domains come from and how clients split off validation."""

    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    csv: Path | None = None
    val_fraction: float = DEFAULT_VAL_FRACTION


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs besides the seed."""

    data: DataConfig = field(default_factory=DataConfig)
    unseen: int | str = UNSEEN_ALL
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    rounds: RoundConfig = field(default_factory=RoundConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    seeds: tuple[int, ...] = (0,)
    output: Path = Path("runs")
    transport: TransportKind = TransportKind.MEMORY
    parallel: bool = False

    def with_rounds(self, **changes: Any) -> ExperimentConfig:
        """Return a copy with some RoundConfig fields replaced."""
        try:
            return replace(self, rounds=replace(self.rounds, **changes))
        except FedLsiError as err:
            raise ConfigError(str(err)) from err

    def as_dict(self) -> dict[str, Any]:
        """Return a JSON-ready snapshot."""
        snapshot = asdict(self)
        snapshot["data"]["csv"] = None if self.data.csv is None else str(self.data.csv)
        snapshot["output"] = str(self.output)
        snapshot["transport"] = self.transport.value
        snapshot["rounds"]["aggregation"] = self.rounds.aggregation.value
        snapshot["rounds"]["method"] = self.rounds.method.value
        return snapshot


def _synthetic_spec(data: dict[str, Any]) -> SyntheticSpec:
    angles = data["angles"]
    scales = data["scales"] or [1.0] * len(angles)
    shifts = data["shifts"] or [[0.0, 0.0]] * len(angles)
    if not len(angles) == len(scales) == len(shifts):
        raise ConfigError("data.scales and data.shifts must match data.angles")
    return SyntheticSpec(
        classes=data["classes"],
        domains=tuple(
            DomainShift(angle, scale, (shift[0], shift[1]))
            for angle, scale, shift in zip(angles, scales, shifts, strict=True)
        ),
        noise=data["noise"],
        samples_per_domain=data["samples_per_domain"],
        ambient_dim=data["ambient_dim"],
        embed_seed=data["embed_seed"],
    )


def config_from_dict(document: dict[str, Any] | None) -> ExperimentConfig:
    """Validate a parsed document and build the config."""
    try:
        doc = CONFIG_SCHEMA(document or {})
    except vol.Invalid as err:
        raise ConfigError(f"invalid config: {err}") from err

    data = doc["data"]
    rounds = doc["rounds"]
    try:
        return ExperimentConfig(
            data=DataConfig(
                _synthetic_spec(data),
                None if data["csv"] is None else Path(data["csv"]),
                data["val_fraction"],
            ),
            unseen=doc["unseen"],
            model=ModelConfig(tuple(doc["model"]["hidden"]), doc["model"]["latent"]),
            optimizer=OptimizerConfig(**doc["optimizer"]),
            rounds=RoundConfig(
                **{
                    **rounds,
                    "aggregation": Aggregation(rounds["aggregation"]),
                    "method": Method(rounds["method"]),
                }
            ),
            synth=SynthConfig(**doc["synth"]),
            gan=GanConfig(**doc["gan"]),
            seeds=tuple(doc["seeds"]),
            output=Path(doc["output"]),
            transport=TransportKind(doc["transport"]),
            parallel=doc["parallel"],
        )
    except FedLsiError as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid config: {err}") from err


def parse_config(path: Path | str | None) -> ExperimentConfig:
    """Load a YAML config; ``None`` yields the defaults."""
    if path is None:
        return config_from_dict({})
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed config {path}: {err}") from err
    if document is not None and not isinstance(document, dict):
        raise ConfigError(f"config {path} must be a mapping")
    _LOGGER.debug("Loaded config from %s", path)
    return config_from_dict(document)


def apply_overrides(
    config: ExperimentConfig,
    *,
    seed: int | None = None,
    method: str | None = None,
    unseen: str | None = None,
    out: Path | str | None = None,
    transport: str | None = None,
) -> ExperimentConfig:
    """Apply command-line flags on top of a loaded config."""
    changes: dict[str, Any] = {}
    if seed is not None:
        changes["seeds"] = (seed,)
    if unseen is not None:
        if unseen == UNSEEN_ALL:
            changes["unseen"] = UNSEEN_ALL
        else:
            try:
                changes["unseen"] = int(unseen)
            except ValueError as err:
                raise ConfigError(f"unseen must be an id or 'all': {unseen}") from err
    if out is not None:
        changes["output"] = Path(out)
    if transport is not None:
        try:
            changes["transport"] = TransportKind(transport)
        except ValueError as err:
            raise ConfigError(f"unknown transport {transport}") from err
    config = replace(config, **changes)
    if method is not None:
        try:
            config = config.with_rounds(method=Method(method))
        except ValueError as err:
            raise ConfigError(f"unknown method {method}") from err
    return config


def load_domains(config: ExperimentConfig, seed: int = 0) -> list[DomainDataset]:
    """Read the CSV when configured, else generate the synthetic domains."""
    if config.data.csv is not None:
        return load_csv(config.data.csv)
    spec = config.data.spec
    spec.validate()
    return generate_rotated_blobs(spec, seed)


def unseen_domains(
    config: ExperimentConfig, datasets: list[DomainDataset]
) -> list[int]:
    """Return the held-out domain ids to rotate over."""
    ids = sorted(d.domain for d in datasets)
    if config.unseen == UNSEEN_ALL:
        return ids
    if config.unseen not in ids:
        raise ConfigError(f"unseen domain {config.unseen} not among {ids}")
    return [int(config.unseen)]
