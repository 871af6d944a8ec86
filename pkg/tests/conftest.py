"""Shared fixtures: the desk-scale tracking experiment reused across acceptance checks."""

import dataclasses

import numpy as np
import pytest

from beamtrack.cli import _run_realization
from beamtrack.config import RunConfig, default_scenario


class TrackingExperiment:
    """Paired per-mode metric arrays from a batch of seeded realizations."""

    def __init__(self, results, t_steps):
        self.results = results
        self.t_steps = t_steps

    def field(self, mode, name):
        """(realizations, t_steps+1) array of one StepMetrics field."""
        return np.array(
            [[getattr(sm, name) for sm in res.metrics[mode]] for res in self.results],
            dtype=float,
        )


def run_experiment(cfg: RunConfig) -> TrackingExperiment:
    results = [_run_realization(cfg, r) for r in range(cfg.realizations)]
    return TrackingExperiment(results, cfg.scenario.t_steps)


@pytest.fixture(scope="session")
def desk_experiment():
    """20 paired df/ablation realizations at desk scale (32 beams, 10 subcarriers,
    10 tracked steps, SNR 10 dB, drift 0.5 deg/step)."""
    scenario = dataclasses.replace(
        default_scenario(), n_bs=32, n_subcarriers=10, t_steps=10
    )
    cfg = RunConfig(scenario=scenario, mode="both", realizations=20, output_dir="unused")
    return run_experiment(cfg)
