"""Exceptions raised by the fedlsi simulator."""

from __future__ import annotations


class FedLsiError(Exception):
    """Base exception for every simulator failure."""


class TensorError(FedLsiError):
    """Exception for shape and graph errors in the neural core."""


class NonFiniteError(TensorError):
    """Exception for NaN or Inf values reaching an op boundary."""


class MissingGradientError(TensorError):
    """Exception for an optimizer step over a parameter without a gradient."""


class DataError(FedLsiError):
    """Exception for invalid datasets, specs and splits."""


class InversionError(FedLsiError):
    """Exception for latent space inversion failures."""


class BankPurgedError(InversionError):
    """Exception for reading a synthesized bank after it was purged."""


class TranslatorError(FedLsiError):
    """Exception for representation translator failures."""


class FederationError(FedLsiError):
    """Exception for federation orchestration failures."""


class StageError(FederationError):
    """Exception tagging the pipeline stage that failed."""

    def __init__(self, stage: str, message: str) -> None:
        """Initialize with the failing stage tag."""
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class TransportError(FedLsiError):
    """Exception for transport and wire-format errors."""


class ProtocolError(TransportError):
    """Exception for bad magic, version, message type or length."""


class CrcMismatchError(TransportError):
    """Exception for a payload whose CRC32 does not match."""


class TruncatedFrameError(TransportError):
    """Exception for a frame cut short."""


class PolicyViolationError(TransportError):
    """Exception for a transfer the federation protocol forbids."""


class ConfigError(FedLsiError):
    """Exception for invalid experiment configuration."""


class ReportError(FedLsiError):
    """Exception for unreadable or unwritable experiment outputs."""
