"""Heterogeneity-based two-stage contrastive learning for domain generalization."""

__version__ = "0.1.0"
