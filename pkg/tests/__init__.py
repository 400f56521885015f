"""Tests for the fedlsi simulator."""
