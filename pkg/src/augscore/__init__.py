"""Contrastive representation learning with score-based pair weighting.

The package trains a small denoising score model alongside a contrastive
encoder and uses the distance between the score outputs of two augmented
views to reweight each pair's contrastive loss term.
"""

__version__ = "0.1.0"
