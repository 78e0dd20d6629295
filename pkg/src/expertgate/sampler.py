"""Buffer-selection policies.

Gated mode implements the core mechanism of this package: when the
critic's batch uncertainty sits at or above the threshold, the next batch
comes from the expert (human) buffer; below the threshold, from the
cheap sub-optimal buffer.  The comparison is strict (sigma < epsilon
selects the sub-optimal side), so the boundary sigma == epsilon draws
expert data.  Mixed mode is the naive baseline: uniform draws from one
pre-combined dataset.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Batch, ReplayDataset, EmptyDatasetError, sample_batch

MODE_GATED = "gated"
MODE_MIXED = "mixed"


@dataclass(frozen=True)
class SamplerConfig:
    epsilon: float
    batch_size: int
    mode: str = MODE_GATED
    soa_fraction: float = 0.8

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in (MODE_GATED, MODE_MIXED):
            raise ValueError(f"mode must be '{MODE_GATED}' or '{MODE_MIXED}', got {self.mode!r}")


@dataclass(frozen=True)
class SamplerDecision:
    source: str
    sigma_observed: float
    step: int


def select_batch_gated(
    sigma: float,
    cfg: SamplerConfig,
    d_soa: ReplayDataset,
    d_h: ReplayDataset,
    rng: np.random.Generator,
    step: int = 0,
) -> tuple[Batch, SamplerDecision]:
    """Pick the buffer from the uncertainty scalar, then sample one batch."""
    if sigma < 0.0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if len(d_soa) == 0:
        raise EmptyDatasetError("sub-optimal buffer is empty")
    if len(d_h) == 0:
        raise EmptyDatasetError("human buffer is empty")
    if sigma < cfg.epsilon:
        source, dataset = "soa", d_soa
    else:
        source, dataset = "human", d_h
    batch = sample_batch(dataset, cfg.batch_size, rng)
    return batch, SamplerDecision(source=source, sigma_observed=float(sigma), step=step)


def select_batch_mixed(
    cfg: SamplerConfig,
    d_mixed: ReplayDataset,
    rng: np.random.Generator,
    step: int = 0,
) -> tuple[Batch, SamplerDecision]:
    """Uniform batch from the pre-combined dataset (naive baseline)."""
    if len(d_mixed) == 0:
        raise EmptyDatasetError("mixed buffer is empty")
    batch = sample_batch(d_mixed, cfg.batch_size, rng)
    return batch, SamplerDecision(source="mixed", sigma_observed=0.0, step=step)


def draw_ledger(decisions) -> dict[str, int]:
    """Exact batch counts per source over a run."""
    counts = {"soa": 0, "human": 0, "mixed": 0}
    for d in decisions:
        counts[d.source] += 1
    return counts


def write_decision_log(decisions, epsilon: float, batch_size: int, path) -> None:
    """Persist decisions as CSV: step, sigma, epsilon, source, batch_size."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "sigma", "epsilon", "source", "batch_size"])
        for d in decisions:
            writer.writerow([d.step, repr(d.sigma_observed), repr(epsilon), d.source, batch_size])
