"""Run-level performance metrics: loss targets, convergence time, the
energy ledger, and Monte-Carlo reliability.

Loss is reported two ways because a decentralized system has no single
model: the loss of the network-average model (what the acceptance checks
use) and the mean of per-device losses.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .model import Dataset, ModelParams, TrainingDivergedError, accuracy, loss
from .protocol import (
    ENERGY_COMPONENTS,
    RoundReport,
    RunResult,
    ScenarioConfig,
    run_experiment,
)

log = logging.getLogger(__name__)

__all__ = [
    "RoundReport",
    "ReliabilityEstimate",
    "EnergyTotals",
    "convergence_time",
    "accuracy_at_time",
    "energy_totals",
    "evaluate_model",
    "reliability",
    "wilson_interval",
]


def evaluate_model(p: ModelParams, test_set: Dataset) -> tuple[float, float]:
    """(loss, accuracy) of one model on a dataset."""
    return loss(p, test_set), accuracy(p, test_set)


def convergence_time(series: list[RoundReport],
                     target_loss: float) -> float | None:
    """First cumulative simulated time at which the network-average-model
    loss is at or below the target; None when never reached."""
    if not series:
        raise ValueError("empty series")
    for rep in series:
        if rep.avg_model_loss <= target_loss:
            return rep.sim_time_s
    return None


def accuracy_at_time(series: list[RoundReport], horizon_s: float) -> float:
    """Network-average-model accuracy at the last round completed within
    the horizon (0.0 when no round has finished yet)."""
    acc = 0.0
    for rep in series:
        if rep.sim_time_s <= horizon_s:
            acc = rep.avg_model_acc
        else:
            break
    return acc


@dataclass(frozen=True)
class EnergyTotals:
    """Summed ledger: rows are vertices (BS last when present), columns
    are (tx, comp, global_tx, agg)."""

    per_vertex: np.ndarray
    components: tuple[str, ...] = ENERGY_COMPONENTS

    @property
    def by_component(self) -> dict[str, float]:
        sums = self.per_vertex.sum(axis=0)
        return {name: float(s) for name, s in zip(self.components, sums)}

    @property
    def total(self) -> float:
        return float(self.per_vertex.sum())


def energy_totals(series: list[RoundReport]) -> EnergyTotals:
    """Exact sum of the per-round ledgers (zeros for an empty series)."""
    if not series:
        return EnergyTotals(np.zeros((0, 4)))
    acc = np.zeros_like(series[0].energy)
    for rep in series:
        acc = acc + rep.energy
    return EnergyTotals(acc)


def wilson_interval(successes: int, trials: int,
                    z: float = 1.96) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 <= successes <= trials:
        raise ValueError("successes out of range")
    phat = successes / trials
    z2 = z * z
    denom = 1.0 + z2 / trials
    center = (phat + z2 / (2 * trials)) / denom
    half = (z / denom) * math.sqrt(phat * (1 - phat) / trials
                                   + z2 / (4 * trials * trials))
    return max(0.0, center - half), min(1.0, center + half)


@dataclass(frozen=True)
class ReliabilityEstimate:
    target_loss: float
    time_budget_s: float
    n_trials: int
    successes: int
    estimate: float
    ci_low: float
    ci_high: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.estimate <= 1.0:
            raise ValueError("estimate must be a probability")
        if not self.ci_low <= self.estimate <= self.ci_high:
            raise ValueError("interval must contain the estimate")


def _trial_success(args) -> bool:
    cfg, target_loss, time_budget_s = args
    try:
        result = run_experiment(cfg)
    except TrainingDivergedError as exc:
        log.warning("reliability trial seed=%d aborted: %s", cfg.seed, exc)
        return False
    t = convergence_time(result.reports, target_loss)
    return t is not None and t <= time_budget_s


def reliability(cfg: ScenarioConfig, target_loss: float, time_budget_s: float,
                n_trials: int, base_seed: int, *,
                workers: int = 1) -> ReliabilityEstimate:
    """Probability of hitting the target loss within the time budget,
    estimated over independent trials seeded base_seed + i.

    Only the wireless randomness varies across trials (data and init
    seeds stay fixed), so the estimate isolates channel luck.  Diverged
    trials count as failures.  Trial-order invariant by construction.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    jobs = [(replace(cfg, seed=base_seed + i), target_loss, time_budget_s)
            for i in range(n_trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_trial_success, jobs))
    else:
        outcomes = [_trial_success(job) for job in jobs]
    successes = sum(outcomes)
    lo, hi = wilson_interval(successes, n_trials)
    return ReliabilityEstimate(target_loss, time_budget_s, n_trials, successes,
                               successes / n_trials, lo, hi)
