"""Amortized Bayesian filtering and smoothing with normalizing flows and a shared summary network."""
