"""Latent-space representation translator trained against a two-headed critic."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .const import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_DROPOUT,
    DEFAULT_GAN_HIDDEN,
    DEFAULT_GAN_LR,
    DEFAULT_GAN_STEPS,
    DEFAULT_LAMBDA_CLSD,
    DEFAULT_LAMBDA_CLSG,
    DEFAULT_LAMBDA_REC,
    LEAKY_RELU_SLOPE,
    LOG_CLAMP,
)
from .data import SeedLike, as_rng
from .errors import TensorError, TranslatorError
from .inversion import SynthBank
from .layers import Dropout, LayerNorm, LinearLayer, Mode, Module
from .optim import AdamState, adam_step
from .tensor import (
    ComputationTape,
    Tensor,
    abs_,
    as_tensor,
    backward,
    clamp_min,
    concat,
    cross_entropy,
    leaky_relu,
    log,
    sigmoid,
)

_LOGGER = logging.getLogger(__name__)

_PROGRESS_EVERY = 100

ClientIds = int | Sequence[int] | np.ndarray


@dataclass(frozen=True)
class GanConfig:
    """Loss weights and schedule of translator training."""

    lambda_clsg: float = DEFAULT_LAMBDA_CLSG
    lambda_rec: float = DEFAULT_LAMBDA_REC
    lambda_clsd: float = DEFAULT_LAMBDA_CLSD
    g_lr: float = DEFAULT_GAN_LR
    d_lr: float = DEFAULT_GAN_LR
    steps: int = DEFAULT_GAN_STEPS
    batch_size: int = DEFAULT_BATCH_SIZE
    hidden: int = DEFAULT_GAN_HIDDEN
    dropout: float = DEFAULT_DROPOUT

    def __post_init__(self) -> None:
        """Validate ranges."""
        if min(self.lambda_clsg, self.lambda_rec, self.lambda_clsd) < 0:
            raise TranslatorError("translator coefficients must be non-negative")
        if self.g_lr <= 0 or self.d_lr <= 0:
            raise TranslatorError("translator learning rates must be positive")
        if self.steps < 0 or self.batch_size < 1 or self.hidden < 1:
            raise TranslatorError("invalid translator schedule")
        if not 0 <= self.dropout < 1:
            raise TranslatorError("dropout must lie in [0, 1)")


class GeneratorNet(Module):
    """Three dense layers mapping (z, one-hot source, one-hot target) to z'.

    Hidden layers apply layer normalization, leaky ReLU and dropout.
    """

    def __init__(
        self,
        latent_dim: int,
        clients: int,
        hidden: int,
        dropout: float,
        rng: np.random.Generator,
    ) -> None:
        """Initialize for ``clients`` conditioning ids over ``latent_dim`` latents."""
        self.latent_dim = latent_dim
        self.clients = clients
        dropout_rng = np.random.default_rng(rng.integers(0, 2**32))
        self.fc1 = LinearLayer(latent_dim + 2 * clients, hidden, rng)
        self.ln1 = LayerNorm(hidden)
        self.drop1 = Dropout(dropout, dropout_rng)
        self.fc2 = LinearLayer(hidden, hidden, rng)
        self.ln2 = LayerNorm(hidden)
        self.drop2 = Dropout(dropout, dropout_rng)
        self.fc3 = LinearLayer(hidden, latent_dim, rng)

    def children(self) -> list[Module]:
        return [
            self.fc1,
            self.ln1,
            self.drop1,
            self.fc2,
            self.ln2,
            self.drop2,
            self.fc3,
        ]

    def forward(self, x: Tensor) -> Tensor:
        out = self.drop1(leaky_relu(self.ln1(self.fc1(x)), LEAKY_RELU_SLOPE))
        out = self.drop2(leaky_relu(self.ln2(self.fc2(out)), LEAKY_RELU_SLOPE))
        return self.fc3(out)


class DiscriminatorNet(Module):
    """Shared dense trunk with a real/fake score head and a client-index head."""

    def __init__(
        self, latent_dim: int, clients: int, hidden: int, rng: np.random.Generator
    ) -> None:
        """Initialize for ``clients`` client ids over ``latent_dim`` latents."""
        self.clients = clients
        self.fc1 = LinearLayer(latent_dim, hidden, rng)
        self.fc2 = LinearLayer(hidden, hidden, rng)
        self.src_head = LinearLayer(hidden, 1, rng)
        self.cls_head = LinearLayer(hidden, clients, rng)

    def children(self) -> list[Module]:
        return [self.fc1, self.fc2, self.src_head, self.cls_head]

    def forward(self, x: Tensor) -> Tensor:
        out = leaky_relu(self.fc1(x), LEAKY_RELU_SLOPE)
        return leaky_relu(self.fc2(out), LEAKY_RELU_SLOPE)

    def src(self, z: Tensor | np.ndarray) -> Tensor:
        """Return (b, 1) real/fake logits."""
        return self.src_head(self(z))

    def cls(self, z: Tensor | np.ndarray) -> Tensor:
        """Return (b, m) client-index logits."""
        return self.cls_head(self(z))


class TranslatorNets(NamedTuple):
    """Generator and discriminator trained together."""

    generator: GeneratorNet
    discriminator: DiscriminatorNet


class TranslatorBatch(NamedTuple):
    """Same-class minibatch with source and sampled target client ids."""

    vectors: np.ndarray
    source: np.ndarray
    target: np.ndarray
    label: int


def _ids(ids: ClientIds, batch: int, clients: int) -> np.ndarray:
    values = np.broadcast_to(np.asarray(ids, dtype=np.int64), (batch,))
    if np.any(values < 0) or np.any(values >= clients):
        raise TranslatorError(f"client id outside [0, {clients})")
    return values


def _one_hot(ids: np.ndarray, clients: int) -> np.ndarray:
    return np.eye(clients)[ids]


def translate(
    generator: GeneratorNet,
    z: Tensor | np.ndarray,
    source: ClientIds,
    target: ClientIds,
    mode: Mode = Mode.EVAL,
) -> Tensor:
    """Map latents from client ``source`` to client ``target``.

    ``source`` and ``target`` are one id for the whole batch or one per row.
    """
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != generator.latent_dim:
        raise TranslatorError(
            f"translate: expected (b, {generator.latent_dim}), got {z.shape}"
        )
    batch, clients = z.shape[0], generator.clients
    inputs = concat(
        [
            z,
            _one_hot(_ids(source, batch, clients), clients),
            _one_hot(_ids(target, batch, clients), clients),
        ],
        axis=1,
    )
    with generator.mode(mode):
        return generator(inputs)


def loss_adv(
    discriminator: DiscriminatorNet,
    real: Tensor | np.ndarray,
    fake: Tensor | np.ndarray,
) -> Tensor:
    """Logistic adversarial objective, maximized by the discriminator."""
    real_prob = clamp_min(sigmoid(discriminator.src(real)), LOG_CLAMP)
    fake_prob = clamp_min(1.0 - sigmoid(discriminator.src(fake)), LOG_CLAMP)
    return log(real_prob).mean() + log(fake_prob).mean()


def loss_clsd(
    discriminator: DiscriminatorNet, z: Tensor | np.ndarray, domains: ClientIds
) -> Tensor:
    """Cross entropy of the client-index head against the true source clients."""
    z = as_tensor(z)
    labels = _ids(domains, z.shape[0], discriminator.clients)
    return cross_entropy(discriminator.cls(z), labels)


def _clsg_from_fake(
    discriminator: DiscriminatorNet, fake: Tensor, target: np.ndarray
) -> Tensor:
    with discriminator.frozen():
        return cross_entropy(discriminator.cls(fake), target)


def loss_clsg(
    discriminator: DiscriminatorNet,
    generator: GeneratorNet,
    z: Tensor | np.ndarray,
    source: ClientIds,
    target: ClientIds,
    mode: Mode = Mode.TRAIN,
) -> Tensor:
    """Cross entropy of the frozen client head on translations against ``target``."""
    z = as_tensor(z)
    fake = translate(generator, z, source, target, mode)
    return _clsg_from_fake(
        discriminator, fake, _ids(target, z.shape[0], generator.clients)
    )


def loss_rec(
    generator: GeneratorNet,
    z: Tensor | np.ndarray,
    source: ClientIds,
    target: ClientIds,
    mode: Mode = Mode.TRAIN,
) -> Tensor:
    """Mean absolute error of the source -> target -> source round trip."""
    z = as_tensor(z)
    forward = translate(generator, z, source, target, mode)
    restored = translate(generator, forward, target, source, mode)
    return abs_(z - restored).mean()


class TranslatorTrainer:
    """Alternating discriminator and generator updates over pooled banks."""

    def __init__(
        self, banks: Sequence[SynthBank], cfg: GanConfig, seed: SeedLike
    ) -> None:
        """Initialize both networks and pool the banks per class."""
        if len(banks) < 2:
            raise TranslatorError("translator training needs at least 2 client banks")
        for bank in banks:
            if len(bank) == 0:
                raise TranslatorError(f"bank of client {bank.client_id} is empty")
        self.cfg = cfg
        self.rng = as_rng(seed)
        self.clients = len(banks)
        latent_dim = banks[0].vectors.shape[1]
        self.nets = TranslatorNets(
            GeneratorNet(latent_dim, self.clients, cfg.hidden, cfg.dropout, self.rng),
            DiscriminatorNet(latent_dim, self.clients, cfg.hidden, self.rng),
        )
        self._g_state = AdamState(lr=cfg.g_lr)
        self._d_state = AdamState(lr=cfg.d_lr)
        self._pools = self._pool_by_class(banks)

    def _pool_by_class(
        self, banks: Sequence[SynthBank]
    ) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        classes = max(int(bank.labels.max()) for bank in banks) + 1
        pools: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for label in range(classes):
            vectors, sources = [], []
            for index, bank in enumerate(banks):
                mask = bank.labels == label
                if not mask.any():
                    _LOGGER.warning(
                        "Class %d missing from bank of client %d; skipping pair",
                        label,
                        bank.client_id,
                    )
                    continue
                vectors.append(bank.vectors[mask])
                sources.append(np.full(int(mask.sum()), index))
            if vectors:
                pools[label] = (np.concatenate(vectors), np.concatenate(sources))
        return pools

    @property
    def generator(self) -> GeneratorNet:
        """Return the generator."""
        return self.nets.generator

    @property
    def discriminator(self) -> DiscriminatorNet:
        """Return the discriminator."""
        return self.nets.discriminator

    def sample_batch(self) -> TranslatorBatch:
        """Draw a minibatch of one class with uniform target clients."""
        labels = sorted(self._pools)
        label = labels[int(self.rng.integers(len(labels)))]
        vectors, sources = self._pools[label]
        size = self.cfg.batch_size
        rows = self.rng.choice(len(vectors), size=size, replace=len(vectors) < size)
        target = self.rng.integers(0, self.clients, size=size)
        return TranslatorBatch(vectors[rows], sources[rows], target, label)

    def discriminator_step(self, batch: TranslatorBatch) -> float:
        """Minimize -L_adv + lambda_clsd * L_clsd over discriminator parameters."""
        generator, discriminator = self.nets
        with generator.frozen(), ComputationTape() as tape:
            fake = translate(
                generator, batch.vectors, batch.source, batch.target, Mode.TRAIN
            )
            loss = -loss_adv(discriminator, batch.vectors, fake) + (
                loss_clsd(discriminator, batch.vectors, batch.source)
                * self.cfg.lambda_clsd
            )
        discriminator.zero_grad()
        backward(tape, loss)
        adam_step(discriminator.parameters(), self._d_state)
        return loss.item()

    def generator_step(self, batch: TranslatorBatch) -> float:
        """Minimize L_adv + lambda_clsg * L_clsg + lambda_rec * L_rec over G."""
        generator, discriminator = self.nets
        with discriminator.frozen(), ComputationTape() as tape:
            fake = translate(
                generator, batch.vectors, batch.source, batch.target, Mode.TRAIN
            )
            restored = translate(
                generator, fake, batch.target, batch.source, Mode.TRAIN
            )
            rec = abs_(as_tensor(batch.vectors) - restored).mean()
            loss = (
                loss_adv(discriminator, batch.vectors, fake)
                + _clsg_from_fake(discriminator, fake, batch.target)
                * self.cfg.lambda_clsg
                + rec * self.cfg.lambda_rec
            )
        generator.zero_grad()
        backward(tape, loss)
        adam_step(generator.parameters(), self._g_state)
        return loss.item()

    def train(self) -> TranslatorNets:
        """Run ``cfg.steps`` alternating updates and return both networks."""
        for step in range(self.cfg.steps):
            batch = self.sample_batch()
            try:
                d_loss = self.discriminator_step(batch)
                g_loss = self.generator_step(batch)
            except TensorError as err:
                raise TranslatorError(
                    f"translator training diverged at step {step}: {err}"
                ) from err
            if step % _PROGRESS_EVERY == 0:
                _LOGGER.debug(
                    "Translator step %d: d_loss %.6f g_loss %.6f", step, d_loss, g_loss
                )
        self.generator.set_mode(Mode.EVAL)
        self.discriminator.set_mode(Mode.EVAL)
        _LOGGER.info(
            "Trained translator over %d clients for %d steps",
            self.clients,
            self.cfg.steps,
        )
        return self.nets


def train_translator(
    banks: Sequence[SynthBank], cfg: GanConfig, seed: SeedLike
) -> GeneratorNet:
    """Train on same-class minibatches drawn across banks and return G only."""
    return TranslatorTrainer(banks, cfg, seed).train().generator
