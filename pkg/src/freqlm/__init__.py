"""Frequency-balanced language modeling.

Trains small autoregressive models whose output layer factorizes the
next-token distribution into a frequency-class choice followed by a
within-class token choice, partitions the vocabulary into frequency
classes by maximizing normalized entropy, decodes in coupled or
decoupled mode, and scores generations with a seven-metric diversity
harness.
"""

__version__ = "0.1.0"

# Format versions for on-disk artifacts; bump on incompatible change.
PARTITION_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
GENERATIONS_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1


class ConfigError(Exception):
    """Bad or missing configuration (CLI exit code 2)."""


class DataError(Exception):
    """Bad or missing data artifact (CLI exit code 3)."""


class NumericError(Exception):
    """Non-finite values or numeric breakdown (CLI exit code 4)."""
