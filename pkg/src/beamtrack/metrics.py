"""Scoring of channel estimates and Monte-Carlo aggregation.

All metrics operate on stacked beamspace vectors laid out as (n_subcarriers,
m_users * n_bs) complex arrays. Aggregation uses the population (divide-by-K)
standard deviation; CSV rows are formatted with deterministic '%.17g' floats
so identical runs produce byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SUPPORT_THRESHOLD = 0.05

CSV_HEADER = "t,realization,rmse_norm,nmse,support_f1,iterations,mode,seed"


@dataclass
class StepMetrics:
    """Scores of one time step of one realization."""

    rmse_norm: float
    nmse: float
    support_f1: float
    iterations: int


@dataclass
class AggregateResult:
    """Per-time-step mean and population std across realizations."""

    mean_rmse: np.ndarray
    std_rmse: np.ndarray
    mean_nmse: np.ndarray
    std_nmse: np.ndarray
    mean_f1: np.ndarray
    std_f1: np.ndarray
    mean_iterations: np.ndarray
    std_iterations: np.ndarray


def _check_pair(estimates: np.ndarray, truth: np.ndarray):
    estimates = np.asarray(estimates)
    truth = np.asarray(truth)
    if estimates.shape != truth.shape or estimates.ndim != 2:
        raise ValueError(
            f"estimate shape {estimates.shape} and truth shape {truth.shape} "
            "must match and be (n_subcarriers, coefficients)"
        )
    return estimates, truth


def rmse_channel_norm(estimates: np.ndarray, truth: np.ndarray) -> float:
    """RMSE of the per-subcarrier channel norm: sqrt(mean_n (||est[n]|| - ||h[n]||)^2)."""
    estimates, truth = _check_pair(estimates, truth)
    gap = np.linalg.norm(estimates, axis=1) - np.linalg.norm(truth, axis=1)
    return float(np.sqrt(np.mean(gap ** 2)))


def nmse(estimates: np.ndarray, truth: np.ndarray) -> float:
    """Mean over subcarriers of ||est[n] - h[n]||^2 / ||h[n]||^2."""
    estimates, truth = _check_pair(estimates, truth)
    denom = np.sum(np.abs(truth) ** 2, axis=1)
    if np.any(denom == 0):
        raise ValueError("truth channel is zero on some subcarrier")
    num = np.sum(np.abs(estimates - truth) ** 2, axis=1)
    return float(np.mean(num / denom))


def _magnitude_profile(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim == 2:
        return np.linalg.norm(values, axis=0)
    return np.abs(values)


def support_f1(
    estimate: np.ndarray,
    truth: np.ndarray,
    rel_threshold: float = DEFAULT_SUPPORT_THRESHOLD,
) -> float:
    """F1 score between the index sets above rel_threshold * peak magnitude.

    Accepts per-coefficient magnitude vectors or (n_subcarriers, coefficients)
    arrays, in which case the l2 magnitude across subcarriers is used.
    """
    if not 0.0 < rel_threshold < 1.0:
        raise ValueError(f"rel_threshold must be in (0, 1), got {rel_threshold}")
    est_mag = _magnitude_profile(estimate)
    truth_mag = _magnitude_profile(truth)
    truth_set = set(np.flatnonzero(truth_mag > rel_threshold * truth_mag.max()).tolist())
    if not truth_set:
        raise ValueError("truth support is empty")
    if est_mag.max() == 0:
        return 0.0
    est_set = set(np.flatnonzero(est_mag > rel_threshold * est_mag.max()).tolist())
    if not est_set:
        return 0.0
    hits = len(est_set & truth_set)
    return 2.0 * hits / (len(est_set) + len(truth_set))


def step_metrics(
    estimate: np.ndarray,
    truth: np.ndarray,
    iterations: int,
    rel_threshold: float = DEFAULT_SUPPORT_THRESHOLD,
) -> StepMetrics:
    """All scores of one step in one call."""
    return StepMetrics(
        rmse_norm=rmse_channel_norm(estimate, truth),
        nmse=nmse(estimate, truth),
        support_f1=support_f1(estimate, truth, rel_threshold),
        iterations=int(iterations),
    )


def aggregate(realizations) -> AggregateResult:
    """Elementwise mean and population std per time step across realizations.

    Parameters
    ----------
    realizations : list of equal-length StepMetrics sequences, one per seed
    """
    if not realizations:
        raise ValueError("realizations list is empty")
    lengths = {len(seq) for seq in realizations}
    if len(lengths) != 1 or lengths == {0}:
        raise ValueError(f"realizations must share one nonzero length, got lengths {sorted(lengths)}")

    def field(name):
        return np.array([[getattr(sm, name) for sm in seq] for seq in realizations], dtype=float)

    rmse = field("rmse_norm")
    nm = field("nmse")
    f1 = field("support_f1")
    iters = field("iterations")
    return AggregateResult(
        mean_rmse=rmse.mean(axis=0),
        std_rmse=rmse.std(axis=0),
        mean_nmse=nm.mean(axis=0),
        std_nmse=nm.std(axis=0),
        mean_f1=f1.mean(axis=0),
        std_f1=f1.std(axis=0),
        mean_iterations=iters.mean(axis=0),
        std_iterations=iters.std(axis=0),
    )


def format_csv_row(t: int, realization: int, metrics: StepMetrics, mode: str, seed: int) -> str:
    """One metrics.csv line; floats use '%.17g' so values round-trip exactly."""
    return ",".join(
        [
            str(int(t)),
            str(int(realization)),
            f"{metrics.rmse_norm:.17g}",
            f"{metrics.nmse:.17g}",
            f"{metrics.support_f1:.17g}",
            str(int(metrics.iterations)),
            mode,
            str(int(seed)),
        ]
    )
