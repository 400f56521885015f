"""Local training, invariance retraining, importance weighting and aggregation."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import NamedTuple, Protocol

import numpy as np

from .const import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_LAMBDA_DI,
    DEFAULT_LOCAL_EPOCHS,
    DEFAULT_LR,
    DEFAULT_MOMENTUM,
    DEFAULT_ROUNDS,
    DEFAULT_WEIGHT_DECAY,
    IMPORTANCE_FLOOR,
    SERVER_ID,
    STREAM_INVARIANCE,
    STREAM_TRAIN,
)
from .data import DomainDataset, minibatch_iter, stream_rng
from .errors import FederationError, TensorError
from .layers import (
    ClassifierHead,
    MlpEncoder,
    Mode,
    Module,
    flatten_parameters,
    forward_classifier,
    forward_encoder,
    load_parameters,
    load_state,
)
from .optim import SgdState, sgd_step
from .tensor import (
    ComputationTape,
    Tensor,
    backward,
    cross_entropy,
    no_grad,
    row_norm,
)
from .translator import GeneratorNet, translate

_LOGGER = logging.getLogger(__name__)


class Aggregation(StrEnum):
    """Server-side aggregation rule."""

    UNIFORM = "uniform"
    IMPORTANCE = "importance"


class Method(StrEnum):
    """Training method."""

    LSI = "lsi"
    FEDAVG = "fedavg"


@dataclass(frozen=True)
class OptimizerConfig:
    """SGD hyperparameters for local training."""

    lr: float = DEFAULT_LR
    momentum: float = DEFAULT_MOMENTUM
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    batch_size: int = DEFAULT_BATCH_SIZE

    def __post_init__(self) -> None:
        """Validate ranges."""
        if self.batch_size < 1:
            raise FederationError("batch size must be at least 1")
        try:
            self.new_state()
        except TensorError as err:
            raise FederationError(str(err)) from err

    def new_state(self) -> SgdState:
        """Return fresh optimizer state."""
        return SgdState(self.lr, self.momentum, self.weight_decay)


@dataclass(frozen=True)
class RoundConfig:
    """Round schedule, invariance weight, aggregation rule and ablation toggles."""

    rounds: int = DEFAULT_ROUNDS
    local_epochs: int = DEFAULT_LOCAL_EPOCHS
    lambda_di: float = DEFAULT_LAMBDA_DI
    aggregation: Aggregation = Aggregation.IMPORTANCE
    method: Method = Method.LSI
    use_di: bool = True
    use_importance: bool = True
    squared_norm: bool = False
    first_stage_epochs: int | None = None

    def __post_init__(self) -> None:
        """Validate ranges."""
        if self.rounds < 1:
            raise FederationError("rounds must be at least 1")
        if self.local_epochs < 1:
            raise FederationError("local epochs must be at least 1")
        if self.lambda_di < 0:
            raise FederationError("lambda_di must be non-negative")
        if self.first_stage_epochs is not None and self.first_stage_epochs < 0:
            raise FederationError("first_stage_epochs must be non-negative")

    @property
    def stage1_epochs(self) -> int:
        """Return the epoch count of the initial local training."""
        if self.first_stage_epochs is None:
            return self.local_epochs
        return self.first_stage_epochs

    @property
    def invariance_active(self) -> bool:
        """Return whether stage 4 adds the invariance penalty."""
        return self.method is Method.LSI and self.use_di and self.lambda_di > 0

    @property
    def importance_active(self) -> bool:
        """Return whether aggregation is importance-weighted."""
        return (
            self.method is Method.LSI
            and self.use_importance
            and self.aggregation is Aggregation.IMPORTANCE
        )


class HasModel(Protocol):
    """Anything holding an encoder and a classifier head."""

    encoder: MlpEncoder
    head: ClassifierHead


@dataclass
class GlobalModel:
    """Aggregated encoder and head."""

    encoder: MlpEncoder
    head: ClassifierHead

    def clone(self) -> GlobalModel:
        """Return an independent copy."""
        return GlobalModel(self.encoder.clone(), self.head.clone())


@dataclass
class ClientState:
    """One training client: its model replica, data and private RNG streams."""

    client_id: int
    encoder: MlpEncoder
    head: ClassifierHead
    dataset: DomainDataset
    seed: int = 0
    train_rng: np.random.Generator = field(init=False, repr=False)
    invariance_rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        """Derive the client's RNG streams from (seed, client id)."""
        self.train_rng = stream_rng(self.seed, self.client_id, STREAM_TRAIN)
        self.invariance_rng = stream_rng(self.seed, self.client_id, STREAM_INVARIANCE)

    @property
    def train_data(self) -> DomainDataset:
        """Return the client's training portion."""
        return self.dataset.train()

    def parameters(self) -> list[Tensor]:
        """Return encoder then head parameters."""
        return self.encoder.parameters() + self.head.parameters()


class ImportanceVector(NamedTuple):
    """Per-scalar importance of encoder and head parameters."""

    encoder: np.ndarray
    head: np.ndarray


class EvalResult(NamedTuple):
    """Accuracy and mean cross entropy on a dataset."""

    accuracy: float
    loss: float


def init_global_model(
    in_dim: int,
    hidden: Sequence[int],
    latent_dim: int,
    classes: int,
    seed: int,
) -> GlobalModel:
    """Build the common starting model every client clones."""
    rng = stream_rng(seed, SERVER_ID, STREAM_TRAIN)
    return GlobalModel(
        MlpEncoder.build(in_dim, hidden, latent_dim, rng),
        ClassifierHead(latent_dim, classes, rng),
    )


def make_clients(
    datasets: Sequence[DomainDataset], model: GlobalModel, seed: int
) -> list[ClientState]:
    """Create one client per dataset, each starting from a copy of ``model``."""
    return [
        ClientState(index, model.encoder.clone(), model.head.clone(), dataset, seed)
        for index, dataset in enumerate(datasets)
    ]


def _train_epochs(
    client: ClientState,
    epochs: int,
    opt: OptimizerConfig,
    generator: GeneratorNet | None = None,
    lambda_di: float = 0.0,
) -> list[float]:
    data = client.train_data
    if len(data) == 0:
        raise FederationError(f"client {client.client_id} has no training data")
    state = opt.new_state()
    params = client.parameters()
    losses = []
    for epoch in range(epochs):
        total, batches = 0.0, 0
        for batch in minibatch_iter(data, opt.batch_size, client.train_rng):
            if len(batch.labels) < 2:
                _LOGGER.warning(
                    "Client %d: skipping batch of size 1 (batch norm)",
                    client.client_id,
                )
                continue
            with ComputationTape() as tape:
                z = forward_encoder(client.encoder, batch.features)
                logits = forward_classifier(client.head, z, Mode.TRAIN)
                loss = cross_entropy(logits, batch.labels)
                if generator is not None:
                    penalty = _invariance_penalty(
                        z, generator, client.client_id, client.invariance_rng
                    )
                    loss = loss + penalty * lambda_di
            for param in params:
                param.grad = None
            backward(tape, loss)
            sgd_step(params, state)
            total += loss.item()
            batches += 1
        mean_loss = total / max(batches, 1)
        losses.append(mean_loss)
        _LOGGER.debug(
            "Client %d epoch %d/%d: loss %.6f",
            client.client_id,
            epoch + 1,
            epochs,
            mean_loss,
        )
    return losses


def local_train_stage1(
    client: ClientState, epochs: int, opt: OptimizerConfig
) -> list[float]:
    """Train encoder and head on cross entropy; return the mean loss per epoch."""
    if epochs < 0:
        raise FederationError("epochs must be non-negative")
    return _train_epochs(client, epochs, opt)


def _invariance_penalty(
    z: Tensor, generator: GeneratorNet, client_id: int, rng: np.random.Generator
) -> Tensor:
    targets = rng.integers(0, generator.clients, size=z.shape[0])
    with generator.frozen():
        translated = translate(generator, z, client_id, targets, Mode.EVAL)
    gap = z - translated
    return (gap * gap).sum(axis=1).mean()


def loss_di(
    encoder: MlpEncoder,
    generator: GeneratorNet,
    x: np.ndarray | Tensor,
    client_id: int,
    rng: np.random.Generator,
) -> Tensor:
    """Mean squared distance between g(x) and its translation to random clients.

    The generator stays frozen; gradients reach the encoder through both
    occurrences of g(x).
    """
    if not 0 <= client_id < generator.clients:
        raise FederationError(f"client id {client_id} outside the translator range")
    return _invariance_penalty(
        forward_encoder(encoder, x), generator, client_id, rng
    )


def local_train_stage4(
    client: ClientState,
    generator: GeneratorNet | None,
    cfg: RoundConfig,
    opt: OptimizerConfig,
) -> list[float]:
    """Train on cross entropy plus lambda_di times the invariance loss.

    Without an active invariance term this is exactly stage 1 training.
    """
    if generator is None or not cfg.invariance_active:
        return _train_epochs(client, cfg.local_epochs, opt)
    return _train_epochs(client, cfg.local_epochs, opt, generator, cfg.lambda_di)


def _abs_grads(params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate(
        [
            np.zeros(p.size) if p.grad is None else np.abs(p.grad).reshape(-1)
            for p in params
        ]
    )


def _output_norm(out: Tensor, squared: bool) -> Tensor:
    if squared:
        return (out * out).sum()
    return row_norm(out).sum()


def compute_importance(
    client: HasModel, dataset: DomainDataset, squared_norm: bool = False
) -> ImportanceVector:
    """Mean absolute per-sample gradient of the output norm per parameter.

    Encoder importance differentiates the latent norm; head importance
    differentiates the logit norm with the latent held constant and the head
    in eval mode.
    """
    if len(dataset) == 0:
        raise FederationError("importance needs a nonempty dataset")
    encoder_params = client.encoder.parameters()
    head_params = client.head.parameters()
    omega_encoder = np.zeros(sum(p.size for p in encoder_params))
    omega_head = np.zeros(sum(p.size for p in head_params))

    with client.head.mode(Mode.EVAL):
        for row in dataset.features:
            x = row.reshape(1, -1)
            for param in encoder_params + head_params:
                param.grad = None
            with ComputationTape() as tape:
                z = forward_encoder(client.encoder, x)
                norm = _output_norm(z, squared_norm)
            backward(tape, norm)
            omega_encoder += _abs_grads(encoder_params)

            z_const = z.detach()
            with ComputationTape() as tape:
                logits = client.head(z_const)
                norm = _output_norm(logits, squared_norm)
            backward(tape, norm)
            omega_head += _abs_grads(head_params)

    for param in encoder_params + head_params:
        param.grad = None
    count = len(dataset)
    return ImportanceVector(omega_encoder / count, omega_head / count)


def normalize_importance(omegas: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Normalize per coordinate across clients, falling back to uniform 1/m."""
    if not omegas:
        raise FederationError("no importance vectors to normalize")
    try:
        stacked = np.stack([np.asarray(o, dtype=np.float64) for o in omegas])
    except ValueError as err:
        raise FederationError(f"misaligned importance vectors: {err}") from err
    if stacked.ndim != 2:
        raise FederationError("importance vectors must be 1-D")
    if not np.all(np.isfinite(stacked)) or np.any(stacked < 0):
        raise FederationError("importance must be finite and non-negative")
    clients = stacked.shape[0]
    totals = stacked.sum(axis=0)
    degenerate = totals < IMPORTANCE_FLOOR
    safe = np.where(degenerate, 1.0, totals)
    normalized = np.where(degenerate, 1.0 / clients, stacked / safe)
    return list(normalized)


def aggregate_vectors(
    values: Sequence[np.ndarray], weights: Sequence[np.ndarray] | None = None
) -> np.ndarray:
    """Per-coordinate weighted mean, clipped to the per-coordinate client range.

    ``weights`` are normalized importance vectors; ``None`` means uniform.
    """
    if not values:
        raise FederationError("nothing to aggregate")
    try:
        stacked = np.stack([np.asarray(v, dtype=np.float64) for v in values])
    except ValueError as err:
        raise FederationError(f"shape mismatch in aggregation: {err}") from err
    if weights is None:
        combined = stacked.mean(axis=0)
    else:
        try:
            weight = np.stack([np.asarray(w, dtype=np.float64) for w in weights])
        except ValueError as err:
            raise FederationError(f"misaligned importance weights: {err}") from err
        if weight.shape != stacked.shape:
            raise FederationError(
                f"weights {weight.shape} do not match parameters {stacked.shape}"
            )
        combined = (weight * stacked).sum(axis=0)
    return np.clip(combined, stacked.min(axis=0), stacked.max(axis=0))


def aggregate(
    models: Sequence[HasModel],
    importances: Sequence[ImportanceVector] | None = None,
) -> GlobalModel:
    """Combine client models into a global model.

    With ``importances`` (already normalized) the trainable parameters are
    weighted per coordinate; otherwise they are averaged uniformly. Head
    running statistics are always averaged uniformly.
    """
    if not models:
        raise FederationError("nothing to aggregate")
    result = GlobalModel(models[0].encoder.clone(), models[0].head.clone())
    encoder_weights = head_weights = None
    if importances is not None:
        if len(importances) != len(models):
            raise FederationError("one importance vector per client is required")
        encoder_weights = [imp.encoder for imp in importances]
        head_weights = [imp.head for imp in importances]

    load_parameters(
        result.encoder,
        aggregate_vectors(
            [flatten_parameters(m.encoder) for m in models], encoder_weights
        ),
    )
    load_parameters(
        result.head,
        aggregate_vectors([flatten_parameters(m.head) for m in models], head_weights),
    )
    bn = result.head.bn
    bn.running_mean[...] = aggregate_vectors([m.head.bn.running_mean for m in models])
    bn.running_var[...] = aggregate_vectors([m.head.bn.running_var for m in models])
    return result


def copy_state(source: Module, target: Module) -> None:
    """Overwrite every serialized array of ``target`` with those of ``source``."""
    arrays = source.state_arrays()
    if not arrays:
        raise FederationError("cannot copy an empty module")
    load_state(target, np.concatenate([a.reshape(-1) for a in arrays]))


def broadcast(model: HasModel, clients: Sequence[HasModel]) -> None:
    """Overwrite every client's encoder and head, running statistics included."""
    for client in clients:
        try:
            copy_state(model.encoder, client.encoder)
            copy_state(model.head, client.head)
        except TensorError as err:
            raise FederationError(f"broadcast failed: {err}") from err


def evaluate(model: HasModel, dataset: DomainDataset) -> EvalResult:
    """Eval-mode accuracy and mean cross entropy."""
    if len(dataset) == 0:
        raise FederationError(f"cannot evaluate on empty domain {dataset.domain}")
    with no_grad():
        z = forward_encoder(model.encoder, dataset.features)
        logits = forward_classifier(model.head, z, Mode.EVAL)
        loss = cross_entropy(logits, dataset.labels).item()
    predictions = np.argmax(logits.data, axis=1)
    return EvalResult(float(np.mean(predictions == dataset.labels)), loss)
