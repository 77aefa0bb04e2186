"""Unit tests for Zen Bridge."""
