"""Likelihood-based debiasing of recommender feedback under correlated
selection and preference noise."""

__version__ = "0.1.0"
