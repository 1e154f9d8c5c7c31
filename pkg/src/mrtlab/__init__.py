"""Minimum risk training laboratory on a synthetic cipher corpus.

Trains small translation models, fine-tunes them against pluggable
evaluation metrics, and probes those metrics for universal adversarial
outputs and collapse.
"""

__version__ = "0.1.0"
