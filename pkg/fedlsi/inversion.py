"""Latent space inversion: synthesize class-informative latents from a frozen head."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .const import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_LAMBDA_BN,
    DEFAULT_LAMBDA_CLS,
    DEFAULT_LAMBDA_NORM,
    DEFAULT_SYNTH_LR,
    DEFAULT_SYNTH_SAMPLES,
    DEFAULT_SYNTH_STEPS,
    STREAM_LABELS,
    STREAM_SERVER,
)
from .data import DomainDataset, SeedLike, as_rng, stream_rng
from .errors import BankPurgedError, InversionError, TensorError
from .layers import BatchNorm1d, ClassifierHead, Mode, forward_classifier
from .optim import AdamState, adam_step
from .tensor import ComputationTape, Tensor, as_tensor, backward, cross_entropy, no_grad

_LOGGER = logging.getLogger(__name__)

_PROGRESS_EVERY = 100


@dataclass(frozen=True)
class SynthConfig:
    """Coefficients and schedule of the inversion objective."""

    lambda_cls: float = DEFAULT_LAMBDA_CLS
    lambda_bn: float = DEFAULT_LAMBDA_BN
    lambda_norm: float = DEFAULT_LAMBDA_NORM
    lr: float = DEFAULT_SYNTH_LR
    steps: int = DEFAULT_SYNTH_STEPS
    batch_size: int = DEFAULT_BATCH_SIZE
    samples: int = DEFAULT_SYNTH_SAMPLES
    dump: bool = False

    def __post_init__(self) -> None:
        """Validate ranges."""
        if min(self.lambda_cls, self.lambda_bn, self.lambda_norm) < 0:
            raise InversionError("inversion coefficients must be non-negative")
        if self.lr <= 0:
            raise InversionError("inversion learning rate must be positive")
        if self.steps < 0:
            raise InversionError("inversion steps must be non-negative")
        if self.batch_size < 2 or self.samples < 2:
            raise InversionError("inversion needs batches of at least 2 vectors")

    def digest(self) -> str:
        """Return a short stable hash of the configuration."""
        payload = repr(sorted(asdict(self).items())).encode()
        return hashlib.sha256(payload).hexdigest()[:12]


@dataclass
class SynthBank:
    """Synthesized latent vectors and labels for one client.

    After ``purge`` the vectors and labels are gone and reading them raises
    BankPurgedError.
    """

    client_id: int
    _vectors: np.ndarray | None = field(repr=False)
    _labels: np.ndarray | None = field(repr=False)
    seed: int = 0
    config_hash: str = ""
    init_gap: float = float("nan")

    @property
    def purged(self) -> bool:
        """Return whether the bank was destroyed."""
        return self._vectors is None

    @property
    def vectors(self) -> np.ndarray:
        """Return the (s, p) latent matrix."""
        if self._vectors is None:
            raise BankPurgedError(f"bank of client {self.client_id} was purged")
        return self._vectors

    @property
    def labels(self) -> np.ndarray:
        """Return the (s,) target labels."""
        if self._labels is None:
            raise BankPurgedError(f"bank of client {self.client_id} was purged")
        return self._labels

    def __len__(self) -> int:
        return len(self.labels)

    def purge(self) -> None:
        """Drop the vectors and labels."""
        self._vectors = None
        self._labels = None


def sample_label_targets(
    dataset: DomainDataset, count: int, seed: SeedLike
) -> np.ndarray:
    """Draw ``count`` labels with replacement from the client's empirical labels."""
    if len(dataset) == 0:
        raise InversionError(f"client {dataset.domain} has no labels to sample")
    if count < 0:
        raise InversionError("target count must be non-negative")
    return as_rng(seed).choice(dataset.labels, size=count, replace=True)


def loss_clsz(z: Tensor, labels: np.ndarray, head: ClassifierHead) -> Tensor:
    """Cross entropy of the head on ``z``, normalizing with running statistics."""
    try:
        logits = forward_classifier(head, z, Mode.EVAL)
    except TensorError as err:
        raise InversionError(f"loss_clsz: {err}") from err
    return cross_entropy(logits, labels)


def loss_bn(z: Tensor, bn: BatchNorm1d) -> Tensor:
    """Squared distance of batch mean and variance to the running statistics.

    The batch variance uses the unbiased estimator.
    """
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != bn.num_features:
        raise InversionError(f"loss_bn: expected (b, {bn.num_features}), got {z.shape}")
    batch = z.shape[0]
    if batch < 2:
        raise InversionError("loss_bn: batch variance needs at least 2 vectors")
    mean = z.mean(axis=0)
    centered = z - mean
    var = (centered * centered).sum(axis=0) * (1.0 / (batch - 1))
    mean_gap = mean - bn.running_mean
    var_gap = var - bn.running_var
    return (mean_gap * mean_gap).sum() + (var_gap * var_gap).sum()


def loss_norm(z: Tensor) -> Tensor:
    """Mean squared Euclidean norm of the rows of ``z``."""
    z = as_tensor(z)
    return (z * z).sum(axis=1).mean()


def synthesis_loss(
    z: Tensor, labels: np.ndarray, head: ClassifierHead, cfg: SynthConfig
) -> Tensor:
    """Weighted sum of the class, statistic and norm terms."""
    total = loss_clsz(z, labels, head) * cfg.lambda_cls
    if cfg.lambda_bn > 0:
        total = total + loss_bn(z, head.bn) * cfg.lambda_bn
    if cfg.lambda_norm > 0:
        total = total + loss_norm(z) * cfg.lambda_norm
    return total


def stat_gap(vectors: np.ndarray, bn: BatchNorm1d) -> float:
    """Mean absolute gap between per-feature means and the running means."""
    return float(np.mean(np.abs(np.mean(vectors, axis=0) - bn.running_mean)))


def chunk_bounds(samples: int, batch_size: int) -> list[tuple[int, int]]:
    """Split ``samples`` into batches, merging a remainder below 2 into its neighbor."""
    bounds = [
        (start, min(start + batch_size, samples))
        for start in range(0, samples, batch_size)
    ]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < 2:
        last = bounds.pop()
        bounds[-1] = (bounds[-1][0], last[1])
    return bounds


def synthesize_for_targets(
    head: ClassifierHead,
    targets: np.ndarray,
    cfg: SynthConfig,
    rng: np.random.Generator,
    *,
    client_id: int,
    seed: int = 0,
) -> SynthBank:
    """Optimize standard-normal noise until the frozen head predicts ``targets``."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size < 2:
        raise InversionError("need at least 2 label targets")
    vectors = rng.standard_normal((targets.size, head.latent_dim))
    init_gap = stat_gap(vectors, head.bn)

    with head.frozen():
        for start, stop in chunk_bounds(targets.size, cfg.batch_size):
            vectors[start:stop] = _optimize_chunk(
                head, vectors[start:stop], targets[start:stop], cfg, client_id
            )

    if not np.all(np.isfinite(vectors)):
        raise InversionError(f"client {client_id}: synthesized non-finite latents")
    _LOGGER.info(
        "Synthesized %d latents for client %d (%d steps)",
        targets.size,
        client_id,
        cfg.steps,
    )
    return SynthBank(
        client_id,
        vectors,
        targets,
        seed=seed,
        config_hash=cfg.digest(),
        init_gap=init_gap,
    )


def _optimize_chunk(
    head: ClassifierHead,
    init: np.ndarray,
    labels: np.ndarray,
    cfg: SynthConfig,
    client_id: int,
) -> np.ndarray:
    z = Tensor(init, requires_grad=True)
    state = AdamState(lr=cfg.lr)
    for step in range(cfg.steps):
        try:
            with ComputationTape() as tape:
                loss = synthesis_loss(z, labels, head, cfg)
            backward(tape, loss)
        except TensorError as err:
            raise InversionError(
                f"client {client_id}: inversion diverged at step {step}: {err}"
            ) from err
        adam_step([z], state)
        z.grad = None
        if step % _PROGRESS_EVERY == 0:
            _LOGGER.debug(
                "Client %d inversion step %d: loss %.6f", client_id, step, loss.item()
            )
    return z.data


def synthesize(
    head: ClassifierHead,
    dataset: DomainDataset,
    cfg: SynthConfig,
    seed: int,
    client_id: int | None = None,
) -> SynthBank:
    """Sample label targets from ``dataset`` and invert them through ``head``."""
    client = dataset.domain if client_id is None else client_id
    targets = sample_label_targets(
        dataset, cfg.samples, stream_rng(seed, client, STREAM_LABELS)
    )
    return synthesize_for_targets(
        head,
        targets,
        cfg,
        stream_rng(seed, client, STREAM_SERVER),
        client_id=client,
        seed=seed,
    )


def bank_accuracy(head: ClassifierHead, bank: SynthBank) -> float:
    """Return the fraction of bank vectors the head assigns their target label."""
    with no_grad():
        logits = forward_classifier(head, bank.vectors, Mode.EVAL)
    return float(np.mean(np.argmax(logits.data, axis=1) == bank.labels))


def purge_bank(bank: SynthBank) -> None:
    """Destroy a bank; later reads raise BankPurgedError."""
    bank.purge()
    _LOGGER.debug("Purged bank of client %d", bank.client_id)


def dump_bank_csv(bank: SynthBank, path: Path | str) -> None:
    """Write ``client,label,z0..z{p-1}`` rows for debugging."""
    vectors = bank.vectors
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["client", "label", *(f"z{i}" for i in range(vectors.shape[1]))]
        )
        for row, label in zip(vectors, bank.labels, strict=True):
            writer.writerow(
                [bank.client_id, int(label), *(repr(float(v)) for v in row)]
            )
    _LOGGER.warning("Dumped synthesized bank of client %d to %s", bank.client_id, path)
