"""Causal attribution of high-temperature extremes.

Estimates the effect of anthropogenic forcing on annual temperature maxima
from paired factual/counterfactual gridded panels: a bivariate Husler-Reiss
data layer, a multivariate intrinsic-CAR latent layer, two-stage
Laplace-then-Gibbs inference, return-level treatment effects, and
FWER-controlled hotspot regions.
"""

__version__ = "0.1.0"
