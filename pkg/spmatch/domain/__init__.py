"""Domain types, configuration models and errors."""
