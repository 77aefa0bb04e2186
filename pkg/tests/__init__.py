"""Test suite for Zen Bridge."""
