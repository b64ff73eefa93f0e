"""Desk-scale testbed for contrastive representation learning under
nonuniform latent-class distributions: sample-specific false-negative
debiasing, baseline strategies, and numerical verification of the
finite-sample approximation bound."""

__version__ = "0.1.0"
