"""Bacilli detection in stained sputum-smear images.

Masks come from a patchwise attention residual U-Net; regions cut around
mask components are labelled by a hard-voting classifier ensemble.
"""

__version__ = "0.1.0"
