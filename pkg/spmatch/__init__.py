"""
spmatch - Superpatch matching and exemplar-based labeling from the command line.
"""

__version__ = "1.0.0"
