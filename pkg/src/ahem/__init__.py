"""Augmented hard example mining for generalizable re-identification,
at desk scale: deterministic augmentation kernels, a from-scratch
reference network, classification-probability hard mining with candidate
selection, and single-shot CMC evaluation."""

__version__ = "0.1.0"
