"""Conditional adversarial training and evaluation harness.

Provides matching-aware conditional losses (probability, Wasserstein and
least-squares variants), conditioning augmentation, progressive-growing
schedules, desk-scale synthetic datasets, and a class-probability based
quality score, wired together behind a config-driven command line.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    checkpoint,
    conditioning,
    config,
    data,
    evaluation,
    losses,
    networks,
    progressive,
    training,
)
