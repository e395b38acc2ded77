"""Experiment orchestration: datasets, configuration, staged pipeline and reports."""
