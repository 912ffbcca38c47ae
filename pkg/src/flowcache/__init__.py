"""Desk-scale lab for guided-flow distillation and learnable mean-velocity
caching on toy 1D/2D distributions, with a benchmark harness that compares
caching strategies under explicit compute budgets."""

__version__ = "0.1.0"
