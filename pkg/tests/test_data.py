"""Tests for domain generation, CSV ingestion and splits."""

from __future__ import annotations

import numpy as np
import pytest

from fedlsi.const import STREAM_LABELS, STREAM_TRAIN
from fedlsi.data import (
    DomainDataset,
    DomainShift,
    SyntheticSpec,
    concat_datasets,
    embedding_matrix,
    generate_rotated_blobs,
    leave_one_out_split,
    load_csv,
    minibatch_iter,
    rotate,
    stream_rng,
    write_csv,
)
from fedlsi.errors import DataError


class TestGeneration:
    """Tests for rotated-blob domains."""

    def test_shapes_and_balance(self, domains):
        """Test every domain has balanced classes in the ambient space."""
        assert len(domains) == 3
        for dataset in domains:
            assert dataset.features.shape == (60, 6)
            np.testing.assert_array_equal(dataset.class_counts(), [20, 20, 20])

    def test_deterministic_per_seed(self, small_spec):
        """Test the same seed gives identical data and another seed differs."""
        first = generate_rotated_blobs(small_spec, seed=3)
        second = generate_rotated_blobs(small_spec, seed=3)
        third = generate_rotated_blobs(small_spec, seed=4)
        np.testing.assert_array_equal(first[1].features, second[1].features)
        assert not np.array_equal(first[1].features, third[1].features)

    def test_rotation(self):
        """Test rotate turns (1, 0) by 90 degrees onto (0, 1)."""
        turned = rotate(np.array([[1.0, 0.0]]), 90.0)
        np.testing.assert_allclose(turned, [[0.0, 1.0]], atol=1e-12)

    def test_embedding_is_orthonormal(self):
        """Test the embedding keeps 2-D distances."""
        embed = embedding_matrix(10, 0)
        np.testing.assert_allclose(embed.T @ embed, np.eye(2), atol=1e-12)

    def test_noise_free_domains_are_rotations(self):
        """Test zero noise places samples exactly on rotated prototypes."""
        spec = SyntheticSpec(
            classes=2,
            domains=(DomainShift(0.0), DomainShift(90.0), DomainShift(180.0)),
            noise=0.0,
            samples_per_domain=4,
            ambient_dim=2,
        )
        base, _, flipped = generate_rotated_blobs(spec, seed=0)
        for label in range(2):
            a = base.features[base.labels == label][0]
            b = flipped.features[flipped.labels == label][0]
            np.testing.assert_allclose(a, -b, atol=1e-12)

    @pytest.mark.parametrize(
        ("changes", "message"),
        [
            ({"classes": 1}, "classes"),
            ({"domains": (DomainShift(0.0), DomainShift(1.0))}, "domains"),
            ({"noise": -1.0}, "noise"),
            ({"ambient_dim": 1}, "ambient"),
        ],
    )
    def test_invalid_recipe(self, changes, message):
        """Test recipes that cannot form a federation are rejected."""
        with pytest.raises(DataError, match=message):
            generate_rotated_blobs(SyntheticSpec(**changes), seed=0)


class TestDataset:
    """Tests for the dataset record."""

    def test_arrays_are_read_only(self, domains):
        """Test features cannot be modified in place."""
        with pytest.raises(ValueError):
            domains[0].features[0, 0] = 1.0

    def test_label_range_checked(self):
        """Test labels outside the class range are rejected."""
        with pytest.raises(DataError):
            DomainDataset(0, np.zeros((2, 2)), np.array([0, 3]), classes=2)

    def test_non_finite_rejected(self):
        """Test NaN features are rejected."""
        with pytest.raises(DataError):
            DomainDataset(0, np.array([[np.nan, 0.0]]), np.array([0]), classes=2)

    def test_concat(self, domains):
        """Test pooling keeps every example."""
        pooled = concat_datasets(domains)
        assert len(pooled) == 180
        assert pooled.domain == -1


class TestCsv:
    """Tests for the CSV format."""

    def test_write_then_load(self, domains, tmp_path):
        """Test a written file reloads to the same domains."""
        path = tmp_path / "domains.csv"
        write_csv(domains, path)
        loaded = load_csv(path)
        assert [d.domain for d in loaded] == [0, 1, 2]
        np.testing.assert_array_equal(loaded[2].features, domains[2].features)
        np.testing.assert_array_equal(loaded[2].labels, domains[2].labels)

    def test_ragged_row(self, tmp_path):
        """Test a short row reports its line number."""
        path = tmp_path / "bad.csv"
        path.write_text("domain,label,f0,f1\n0,1,0.5,0.5\n0,0,0.5\n")
        with pytest.raises(DataError, match=":3:"):
            load_csv(path)

    def test_header_checked(self, tmp_path):
        """Test unexpected columns are rejected."""
        path = tmp_path / "bad.csv"
        path.write_text("domain,class,f0\n0,1,0.5\n")
        with pytest.raises(DataError, match="columns"):
            load_csv(path)

    def test_missing_file(self, tmp_path):
        """Test an unreadable path raises DataError."""
        with pytest.raises(DataError):
            load_csv(tmp_path / "missing.csv")


class TestSplit:
    """Tests for the leave-one-domain-out split."""

    def test_unseen_domain_held_out(self, split):
        """Test the unseen domain is not among the clients."""
        assert [c.domain for c in split.clients] == [0, 1]
        assert split.unseen.domain == 2

    def test_validation_is_stratified(self, split):
        """Test every class contributes about val_fraction to validation."""
        for client in split.clients:
            np.testing.assert_array_equal(client.val().class_counts(), [4, 4, 4])
            assert len(client.train()) == 48

    def test_zero_fraction(self, domains):
        """Test a zero fraction leaves validation empty."""
        split = leave_one_out_split(domains, unseen_id=0, val_fraction=0.0)
        assert len(split.clients[0].val()) == 0
        assert len(split.clients[0].train()) == 60

    def test_missing_unseen(self, domains):
        """Test an unknown unseen id is rejected."""
        with pytest.raises(DataError):
            leave_one_out_split(domains, unseen_id=9)

    def test_needs_two_clients(self, domains):
        """Test a federation needs two training domains."""
        with pytest.raises(DataError):
            leave_one_out_split(domains[:2], unseen_id=0)


class TestBatches:
    """Tests for minibatch iteration and random streams."""

    def test_covers_every_example_once(self, domains):
        """Test one epoch visits each example exactly once."""
        seen = sum(len(b.labels) for b in minibatch_iter(domains[0], 16, seed=0))
        assert seen == 60

    def test_same_class_batches(self, domains):
        """Test same-class batches hold a single label."""
        for batch in minibatch_iter(domains[0], 8, seed=0, same_class=True):
            assert len(set(batch.labels.tolist())) == 1

    def test_drop_incomplete(self, domains):
        """Test incomplete batches are dropped on request."""
        sizes = [
            len(b.labels)
            for b in minibatch_iter(domains[0], 16, seed=0, drop_incomplete=True)
        ]
        assert sizes == [16, 16, 16]

    def test_oversized_batch_rejected(self, domains):
        """Test a batch larger than the dataset is rejected when dropping."""
        with pytest.raises(DataError):
            list(minibatch_iter(domains[0], 100, seed=0, drop_incomplete=True))

    def test_streams_are_independent(self):
        """Test purposes and clients give different streams."""
        a = stream_rng(0, 1, STREAM_TRAIN).random(4)
        b = stream_rng(0, 1, STREAM_LABELS).random(4)
        c = stream_rng(0, 2, STREAM_TRAIN).random(4)
        again = stream_rng(0, 1, STREAM_TRAIN).random(4)
        np.testing.assert_array_equal(a, again)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)
