"""Worst-case data-poisoning attacks against L2-regularized classifiers,
with the regularization strength learned jointly against the attack."""

__version__ = "0.1.0"
