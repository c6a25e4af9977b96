"""Adversarial attacks and the DN defense for 1-D CNN bearing-fault classifiers."""

__version__ = "0.1.0"
