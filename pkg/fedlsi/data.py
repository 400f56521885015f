"""Synthetic rotated-blob domains, CSV ingestion and leave-one-domain-out splits."""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .const import (
    DEFAULT_AMBIENT_DIM,
    DEFAULT_ANGLES,
    DEFAULT_CLASSES,
    DEFAULT_NOISE,
    DEFAULT_SAMPLES_PER_DOMAIN,
    DEFAULT_VAL_FRACTION,
    PROTOTYPE_RADIUS,
)
from .errors import DataError

_LOGGER = logging.getLogger(__name__)

SeedLike = int | np.random.Generator


@dataclass(frozen=True)
class LabeledExample:
    """One feature vector with its class and domain."""

    features: tuple[float, ...]
    label: int
    domain: int


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """All examples of one domain, optionally tagged train/val.

    Arrays are made read-only on construction so a dataset can be shared
    between client actors.
    """

    domain: int
    features: np.ndarray
    labels: np.ndarray
    classes: int
    val_mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        """Validate shapes and freeze the arrays."""
        features = np.array(self.features, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if features.ndim != 2 or labels.shape != (features.shape[0],):
            raise DataError(
                f"domain {self.domain}: {labels.shape} labels for {features.shape}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise DataError(f"domain {self.domain}: label outside [0, {self.classes})")
        if not np.all(np.isfinite(features)):
            raise DataError(f"domain {self.domain}: non-finite feature")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        if self.val_mask is not None:
            mask = np.array(self.val_mask, dtype=bool)
            if mask.shape != labels.shape:
                raise DataError(f"domain {self.domain}: split mask shape mismatch")
            mask.setflags(write=False)
            object.__setattr__(self, "val_mask", mask)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def dim(self) -> int:
        """Return the feature width k."""
        return int(self.features.shape[1])

    @property
    def examples(self) -> list[LabeledExample]:
        """Return the examples as records."""
        return [
            LabeledExample(tuple(float(v) for v in row), int(label), self.domain)
            for row, label in zip(self.features, self.labels, strict=True)
        ]

    def subset(self, mask: np.ndarray) -> DomainDataset:
        """Return the examples selected by a boolean mask, untagged."""
        return DomainDataset(
            self.domain, self.features[mask], self.labels[mask], self.classes
        )

    def train(self) -> DomainDataset:
        """Return the training portion (everything when untagged)."""
        if self.val_mask is None:
            return self
        return self.subset(~self.val_mask)

    def val(self) -> DomainDataset:
        """Return the validation portion (nothing when untagged)."""
        if self.val_mask is None:
            return self.subset(np.zeros(len(self), dtype=bool))
        return self.subset(self.val_mask)

    def class_counts(self) -> np.ndarray:
        """Return the number of examples per class."""
        return np.bincount(self.labels, minlength=self.classes)


def concat_datasets(
    datasets: Sequence[DomainDataset], domain: int = -1
) -> DomainDataset:
    """Pool several datasets into one untagged dataset."""
    if not datasets:
        raise DataError("nothing to pool")
    return DomainDataset(
        domain,
        np.concatenate([d.features for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        max(d.classes for d in datasets),
    )


@dataclass(frozen=True)
class DomainShift:
    """Rotation (degrees), scale and 2-D shift applied to the class prototypes."""

    angle: float
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for rotated-blob domains."""

    classes: int = DEFAULT_CLASSES
    domains: tuple[DomainShift, ...] = field(
        default_factory=lambda: tuple(DomainShift(a) for a in DEFAULT_ANGLES)
    )
    noise: float = DEFAULT_NOISE
    samples_per_domain: int = DEFAULT_SAMPLES_PER_DOMAIN
    ambient_dim: int = DEFAULT_AMBIENT_DIM
    embed_seed: int = 0

    def validate(self) -> None:
        """Raise DataError when the recipe cannot produce a federation."""
        if self.classes < 2:
            raise DataError("need at least 2 classes")
        if len(self.domains) < 3:
            raise DataError("need at least 3 domains (2 clients and 1 unseen)")
        if self.noise < 0:
            raise DataError("noise sigma must be non-negative")
        if self.samples_per_domain < self.classes:
            raise DataError("every domain needs at least one sample per class")
        if self.ambient_dim < 2:
            raise DataError("ambient dimension must be at least 2")


class FederationSplit(NamedTuple):
    """Training clients (train+val tagged) and the unseen test domain."""

    clients: list[DomainDataset]
    unseen: DomainDataset


class Batch(NamedTuple):
    """One minibatch of features and labels."""

    features: np.ndarray
    labels: np.ndarray


def rotate(points: np.ndarray, angle: float) -> np.ndarray:
    """Rotate (n, 2) points counter-clockwise by ``angle`` degrees."""
    theta = np.deg2rad(angle)
    cos, sin = np.cos(theta), np.sin(theta)
    rotation = np.array([[cos, -sin], [sin, cos]])
    return np.asarray(points, dtype=np.float64) @ rotation.T


def class_prototypes(classes: int, radius: float = PROTOTYPE_RADIUS) -> np.ndarray:
    """Place ``classes`` points evenly on a circle."""
    angles = 2 * np.pi * np.arange(classes) / classes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def embedding_matrix(ambient_dim: int, embed_seed: int) -> np.ndarray:
    """Return a (k, 2) matrix with orthonormal columns."""
    rng = np.random.default_rng(embed_seed)
    q, r = np.linalg.qr(rng.standard_normal((ambient_dim, 2)))
    return q * np.sign(np.diag(r))


def generate_rotated_blobs(spec: SyntheticSpec, seed: int) -> list[DomainDataset]:
    """Generate one dataset per domain shift, deterministically per seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    prototypes = class_prototypes(spec.classes)
    embed = embedding_matrix(spec.ambient_dim, spec.embed_seed)
    datasets = []
    for domain, shift in enumerate(spec.domains):
        labels = rng.permutation(np.arange(spec.samples_per_domain) % spec.classes)
        points = rotate(prototypes[labels], shift.angle) * shift.scale
        points = points + np.asarray(shift.shift, dtype=np.float64)
        points = points + rng.normal(0.0, spec.noise, size=points.shape)
        datasets.append(DomainDataset(domain, points @ embed.T, labels, spec.classes))
        _LOGGER.debug(
            "Generated domain %d (angle %.1f, %d samples)",
            domain,
            shift.angle,
            spec.samples_per_domain,
        )
    return datasets


def write_csv(datasets: Sequence[DomainDataset], path: Path | str) -> None:
    """Write datasets as ``domain,label,f0..f{k-1}`` rows."""
    if not datasets:
        raise DataError("nothing to write")
    dim = datasets[0].dim
    if any(d.dim != dim for d in datasets):
        raise DataError("datasets disagree on feature width")
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["domain", "label", *(f"f{i}" for i in range(dim))])
        for dataset in datasets:
            for row, label in zip(dataset.features, dataset.labels, strict=True):
                writer.writerow(
                    [dataset.domain, int(label), *(repr(float(v)) for v in row)]
                )


def load_csv(path: Path | str) -> list[DomainDataset]:
    """Read a ``domain,label,f0..`` file into one dataset per domain."""
    try:
        with Path(path).open(newline="") as handle:
            rows = list(csv.reader(handle))
    except OSError as err:
        raise DataError(f"cannot read {path}: {err}") from err
    if not rows:
        raise DataError(f"{path}: missing header")

    header = [cell.strip() for cell in rows[0]]
    dim = len(header) - 2
    expected = ["domain", "label", *(f"f{i}" for i in range(dim))]
    if dim < 1 or header != expected:
        raise DataError(f"{path}: unexpected columns {header}")

    grouped: dict[int, tuple[list[list[float]], list[int]]] = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 2:
            raise DataError(
                f"{path}:{line_no}: ragged row with {len(row) - 2} features, "
                f"expected {dim}"
            )
        try:
            domain, label = int(row[0]), int(row[1])
            features = [float(v) for v in row[2:]]
        except ValueError as err:
            raise DataError(f"{path}:{line_no}: {err}") from err
        if domain < 0 or label < 0:
            raise DataError(f"{path}:{line_no}: negative domain or label")
        bucket = grouped.setdefault(domain, ([], []))
        bucket[0].append(features)
        bucket[1].append(label)

    if not grouped:
        return []
    classes = max(2, max(max(labels) for _, labels in grouped.values()) + 1)
    return [
        DomainDataset(domain, np.array(features), np.array(labels), classes)
        for domain, (features, labels) in sorted(grouped.items())
    ]


def leave_one_out_split(
    datasets: Sequence[DomainDataset],
    unseen_id: int,
    val_fraction: float = DEFAULT_VAL_FRACTION,
    seed: int = 0,
) -> FederationSplit:
    """Hold out one domain for testing and tag a stratified val split elsewhere.

    Client order follows domain id; client indices 0..m-1 are positions in
    ``clients``.
    """
    if not 0 <= val_fraction < 1:
        raise DataError("val_fraction must lie in [0, 1)")
    by_id = {d.domain: d for d in datasets}
    if unseen_id not in by_id:
        raise DataError(f"unseen domain {unseen_id} not present")
    ordered = sorted(datasets, key=lambda d: d.domain)
    remaining = [d for d in ordered if d.domain != unseen_id]
    if len(remaining) < 2:
        raise DataError("need at least 2 training domains")
    if val_fraction == 0:
        _LOGGER.warning("val_fraction is 0; validation sets are empty")

    rng = np.random.default_rng(seed)
    clients = []
    for dataset in remaining:
        mask = np.zeros(len(dataset), dtype=bool)
        for label in range(dataset.classes):
            members = np.flatnonzero(dataset.labels == label)
            if members.size == 0:
                raise DataError(f"domain {dataset.domain} has no class {label}")
            n_val = min(int(round(val_fraction * members.size)), members.size - 1)
            mask[rng.permutation(members)[:n_val]] = True
        clients.append(
            DomainDataset(
                dataset.domain,
                dataset.features,
                dataset.labels,
                dataset.classes,
                val_mask=mask,
            )
        )
    _LOGGER.info(
        "Split: unseen domain %d, clients %s",
        unseen_id,
        [c.domain for c in clients],
    )
    return FederationSplit(clients, by_id[unseen_id])


def stream_rng(seed: int, client_id: int, purpose: int) -> np.random.Generator:
    """Return an independent generator for one (seed, client, purpose) triple."""
    return np.random.default_rng(np.random.SeedSequence([seed, client_id, purpose]))


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def minibatch_iter(
    dataset: DomainDataset,
    batch_size: int,
    seed: SeedLike,
    *,
    same_class: bool = False,
    drop_incomplete: bool = False,
    epochs: int = 1,
) -> Iterator[Batch]:
    """Yield shuffled minibatches for ``epochs`` passes.

    With ``same_class`` every batch holds a single label; batches are formed
    per class and their order is shuffled. Passing a generator instead of a
    seed continues its stream across calls.
    """
    if batch_size < 1:
        raise DataError("batch size must be at least 1")
    if drop_incomplete and batch_size > len(dataset):
        raise DataError(
            f"batch size {batch_size} exceeds dataset of {len(dataset)} examples"
        )
    rng = as_rng(seed)
    for _ in range(epochs):
        if same_class:
            groups = []
            for label in range(dataset.classes):
                members = rng.permutation(np.flatnonzero(dataset.labels == label))
                groups.extend(_chunks(members, batch_size, drop_incomplete))
            order = rng.permutation(len(groups)) if groups else []
            chunks = [groups[i] for i in order]
        else:
            chunks = _chunks(rng.permutation(len(dataset)), batch_size, drop_incomplete)
        for indices in chunks:
            yield Batch(dataset.features[indices], dataset.labels[indices])


def _chunks(
    indices: np.ndarray, batch_size: int, drop_incomplete: bool
) -> list[np.ndarray]:
    chunks = [
        indices[start : start + batch_size]
        for start in range(0, len(indices), batch_size)
    ]
    if drop_incomplete and chunks and len(chunks[-1]) < batch_size:
        chunks.pop()
    return chunks
