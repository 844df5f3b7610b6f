"""Toolkit for studying how event-sequence foundation models adapt to new clinical sites.

The package covers the full loop: synthetic two-site data generation, timeline
ingestion, cohort construction for inpatient prediction tasks, count
featurization, a histogram gradient-boosted tree baseline, a small
autoregressive transformer over coded events, frozen-representation linear
probes, label-efficiency and pretraining-scale experiments, and the evaluation
stack (AUROC, ECE, hierarchical bootstrap).
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericError

__all__ = ["ConfigError", "DataError", "NumericError", "__version__"]
