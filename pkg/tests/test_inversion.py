"""Tests for latent space inversion."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from fedlsi.errors import BankPurgedError, InversionError
from fedlsi.inversion import (
    SynthBank,
    SynthConfig,
    bank_accuracy,
    chunk_bounds,
    dump_bank_csv,
    loss_bn,
    loss_clsz,
    loss_norm,
    purge_bank,
    sample_label_targets,
    stat_gap,
    synthesis_loss,
    synthesize,
    synthesize_for_targets,
)
from fedlsi.layers import Mode, flatten_state, forward_classifier
from fedlsi.tensor import Tensor, cross_entropy

FAST = SynthConfig(lr=0.05, steps=300, samples=24, batch_size=12)


class TestLosses:
    """Tests for the inversion terms."""

    def test_loss_bn_zero_at_running_statistics(self, head):
        """Test a batch matching mean and unbiased variance costs nothing."""
        spread = np.sqrt(head.bn.running_var / 2.0)
        z = np.stack([head.bn.running_mean + spread, head.bn.running_mean - spread])
        assert loss_bn(Tensor(z), head.bn).item() == pytest.approx(0.0, abs=1e-12)

    def test_loss_bn_needs_two_rows(self, head):
        """Test a single vector has no batch variance."""
        with pytest.raises(InversionError):
            loss_bn(Tensor(np.zeros((1, 4))), head.bn)

    def test_loss_bn_checks_width(self, head):
        """Test the latent width must match the head."""
        with pytest.raises(InversionError):
            loss_bn(Tensor(np.zeros((3, 5))), head.bn)

    def test_loss_norm(self):
        """Test the mean squared row norm."""
        z = Tensor(np.array([[3.0, 4.0], [0.0, 0.0]]))
        assert loss_norm(z).item() == pytest.approx(12.5)

    def test_loss_clsz_uses_running_statistics(self, head):
        """Test a single vector is scored in eval mode."""
        z = Tensor(np.ones((1, 4)))
        expected = cross_entropy(forward_classifier(head, z, Mode.EVAL), np.array([2]))
        actual = loss_clsz(z, np.array([2]), head).item()
        assert actual == pytest.approx(expected.item())

    def test_synthesis_loss_weights(self, head, rng):
        """Test zero weights drop their terms."""
        z = Tensor(rng.normal(size=(4, 4)))
        cfg = SynthConfig(lambda_cls=0.0, lambda_bn=0.0, lambda_norm=2.0)
        total = synthesis_loss(z, np.zeros(4, int), head, cfg)
        assert total.item() == pytest.approx(2.0 * loss_norm(z).item())

    def test_negative_coefficient(self):
        """Test negative weights are rejected."""
        with pytest.raises(InversionError):
            SynthConfig(lambda_bn=-1.0)


class TestChunks:
    """Tests for batch boundaries."""

    def test_even_split(self):
        """Test a remainder of two stays its own batch."""
        assert chunk_bounds(10, 4) == [(0, 4), (4, 8), (8, 10)]

    def test_single_remainder_merges(self):
        """Test a remainder of one joins the previous batch."""
        assert chunk_bounds(9, 4) == [(0, 4), (4, 9)]


class TestTargets:
    """Tests for label target sampling."""

    def test_targets_come_from_client_labels(self, domains):
        """Test only labels present in the client are drawn."""
        subset = domains[0].subset(domains[0].labels != 1)
        targets = sample_label_targets(subset, 100, seed=0)
        assert set(np.unique(targets)) <= {0, 2}

    def test_empty_client(self, domains):
        """Test a client without labels cannot be sampled."""
        empty = domains[0].subset(np.zeros(60, dtype=bool))
        with pytest.raises(InversionError):
            sample_label_targets(empty, 4, seed=0)


class TestSynthesis:
    """Tests for the optimization loop."""

    def test_head_predicts_targets(self, head, rng):
        """Test synthesized latents reach the requested labels."""
        targets = np.arange(24) % 3
        bank = synthesize_for_targets(head, targets, FAST, rng, client_id=0)
        assert bank_accuracy(head, bank) >= 0.95
        assert bank.vectors.shape == (24, 4)

    def test_statistic_term_closes_the_gap(self, head, rng):
        """Test matching statistics alone halves the mean gap."""
        cfg = SynthConfig(
            lambda_cls=0.0,
            lambda_bn=1.0,
            lambda_norm=0.0,
            lr=0.05,
            steps=300,
            samples=24,
            batch_size=24,
        )
        bank = synthesize_for_targets(head, np.zeros(24, int), cfg, rng, client_id=0)
        assert stat_gap(bank.vectors, head.bn) <= 0.5 * bank.init_gap

    def test_zero_steps_returns_initialization(self, head):
        """Test a bank without updates is the standard-normal draw itself."""
        cfg = dataclasses.replace(FAST, steps=0)
        targets = np.arange(24) % 3
        bank = synthesize_for_targets(
            head, targets, cfg, np.random.default_rng(3), client_id=0
        )
        expected = np.random.default_rng(3).standard_normal((24, 4))
        np.testing.assert_array_equal(bank.vectors, expected)

    def test_class_loss_never_rises_without_regularizers(self, head):
        """Test pure logit climbing lowers the head loss at every checkpoint."""
        targets = np.arange(12) % 3
        losses = []
        for steps in range(0, 500, 100):
            cfg = SynthConfig(
                lambda_bn=0.0,
                lambda_norm=0.0,
                lr=0.01,
                steps=steps,
                samples=12,
                batch_size=12,
            )
            bank = synthesize_for_targets(
                head, targets, cfg, np.random.default_rng(5), client_id=0
            )
            losses.append(loss_clsz(Tensor(bank.vectors), targets, head).item())
        for earlier, later in zip(losses, losses[1:], strict=False):
            assert later <= earlier + 1e-9
        assert losses[-1] < losses[0]

    def test_norm_term_shrinks_the_bank(self, head):
        """Test the norm term lowers the squared norm and the spread of the bank."""
        targets = np.arange(24) % 3
        banks = []
        for lambda_norm in (0.0, 0.1):
            cfg = dataclasses.replace(FAST, lambda_norm=lambda_norm)
            banks.append(
                synthesize_for_targets(
                    head, targets, cfg, np.random.default_rng(7), client_id=0
                ).vectors
            )
        free, bounded = banks
        assert np.mean(np.sum(bounded**2, axis=1)) < np.mean(np.sum(free**2, axis=1))
        assert np.trace(np.cov(bounded.T)) < np.trace(np.cov(free.T))

    def test_head_is_untouched(self, head, rng):
        """Test synthesis leaves parameters, statistics and flags alone."""
        before = flatten_state(head).copy()
        synthesize_for_targets(head, np.arange(6) % 3, FAST, rng, client_id=1)
        np.testing.assert_array_equal(flatten_state(head), before)
        assert all(p.requires_grad for p in head.parameters())
        assert all(p.grad is None for p in head.parameters())

    def test_deterministic(self, head, domains):
        """Test the same seed reproduces the bank."""
        cfg = SynthConfig(lr=0.05, steps=20, samples=12, batch_size=6)
        first = synthesize(head, domains[0], cfg, seed=5)
        second = synthesize(head, domains[0], cfg, seed=5)
        np.testing.assert_array_equal(first.vectors, second.vectors)
        np.testing.assert_array_equal(first.labels, second.labels)
        assert first.config_hash == cfg.digest()

    def test_too_few_targets(self, head, rng):
        """Test a single target is rejected."""
        with pytest.raises(InversionError):
            synthesize_for_targets(head, np.array([0]), FAST, rng, client_id=0)


class TestBank:
    """Tests for bank lifetime."""

    def test_purge(self):
        """Test a purged bank refuses reads."""
        bank = SynthBank(0, np.zeros((2, 4)), np.array([0, 1]))
        purge_bank(bank)
        assert bank.purged
        with pytest.raises(BankPurgedError):
            _ = bank.vectors

    def test_dump(self, tmp_path):
        """Test the debug dump writes one row per vector."""
        bank = SynthBank(3, np.array([[0.5, -1.0], [2.0, 0.0]]), np.array([1, 0]))
        path = tmp_path / "bank.csv"
        dump_bank_csv(bank, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "client,label,z0,z1"
        assert lines[1] == "3,1,0.5,-1.0"
        assert len(lines) == 3
