"""Adapters for files and external formats."""
