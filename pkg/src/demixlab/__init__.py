"""Toolkit for music demixing experiments.

Provides sample-accurate audio primitives, stem dataset manifests,
deterministic dataset corruption (label noise and bleeding), global-SDR
evaluation and leaderboards, pluggable separators with inference-time
ensembling, robust-training baselines, TrueSkill pairwise rating, and a
live AB listening-test service.
"""

__version__ = "0.1.0"
