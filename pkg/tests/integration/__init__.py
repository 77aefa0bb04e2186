"""Integration tests for Zen Bridge."""
