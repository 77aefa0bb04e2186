"""Core services: imaging, decomposition, superpatches, search, labeling, evaluation."""
