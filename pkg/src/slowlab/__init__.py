"""Desk-scale lab for identifiable temporal disentanglement.

Sparse transition priors, normalizing flows, sequential VAEs, a
contrastive baseline, disentanglement metrics and natural-statistics
analysis, all on top of a small hand-rolled reverse-mode tape.
"""

__version__ = "0.1.0"
