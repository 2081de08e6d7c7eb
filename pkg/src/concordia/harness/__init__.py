"""Datasets, synthetic generators, metrics, experiments and the command line."""
