"""Desk-scale RL lab for fine-tuning flow-matching generative policies on
synthetic low-dimensional tasks."""

__version__ = "0.1.0"

from . import advantage, diffnet, envsuite, flowcore, harness, records, rollout, trainer  # noqa: E402,F401
