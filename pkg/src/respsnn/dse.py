"""Accuracy-energy design-space exploration over spiking parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convert import SnnNetwork
from .mapping import TileGrid, TileMapping, energy
from .sim import SimConfig, classify

DEFAULT_THRESHOLDS_MV = (0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 8.0)


@dataclass(frozen=True)
class ParetoPoint:
    v_th_mv: float
    timesteps: int
    sample_size: int
    accuracy: float
    energy_pj: float  # mean per inference
    mean_spikes: float = 0.0


def sweep(net: SnnNetwork, windows, mapping: TileMapping, grid: TileGrid,
          thresholds=DEFAULT_THRESHOLDS_MV, timesteps=(64,),
          sample_sizes=(200,), v_th_profile=None,
          seed: int = 0) -> list[ParetoPoint]:
    """Full Cartesian evaluation over (V_th, T, sample size).

    Each point derives its seed from (seed, sample size, T) only, so all
    thresholds of one (size, T) pair see identical input spike trains and
    execution order cannot change results.  Energy is the mean per-inference
    total over the sampled windows.
    """
    if not thresholds or not timesteps or not sample_sizes:
        raise ValueError("axes must be non-empty")
    points = []
    for size in sample_sizes:
        size = min(size, len(windows))
        pick = np.random.default_rng((seed, size)).choice(
            len(windows), size=size, replace=False)
        sample = [windows[i] for i in pick]
        for t_steps in timesteps:
            point_seed = int(np.random.default_rng(
                (seed, size, t_steps)).integers(2 ** 31))
            for v_th in thresholds:
                cfg = SimConfig(timesteps=t_steps, v_th_mv=v_th,
                                v_th_profile=v_th_profile,
                                seed=point_seed)
                stats = classify(net, sample, cfg)
                per_window = [
                    energy(stats.spike_counts[i], mapping, grid, net).total_pj
                    for i in range(len(sample))
                ]
                points.append(ParetoPoint(
                    v_th_mv=float(v_th), timesteps=int(t_steps),
                    sample_size=int(size),
                    accuracy=float(stats.report.accuracy),
                    energy_pj=float(np.mean(per_window)),
                    mean_spikes=float(stats.total_spikes_per_window.mean()),
                ))
    return points


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    """a dominates b when it is no worse on both axes and better on one."""
    return (a.accuracy >= b.accuracy and a.energy_pj <= b.energy_pj
            and (a.accuracy > b.accuracy or a.energy_pj < b.energy_pj))


def pareto(points: list[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated subset, ordered by ascending energy.

    Duplicate (accuracy, energy) pairs keep a single representative;
    accuracy ties keep the lower-energy point.
    """
    frontier = []
    seen = set()
    for p in sorted(points, key=lambda p: (p.energy_pj, -p.accuracy)):
        if any(dominates(q, p) for q in frontier):
            continue
        key = (p.accuracy, p.energy_pj)
        if key in seen:
            continue
        seen.add(key)
        frontier.append(p)
    return frontier


def select_solution(points: list[ParetoPoint], reference_accuracy: float,
                    max_gap: float = 0.05) -> ParetoPoint:
    """Lowest-energy point whose accuracy is within max_gap of the reference;
    falls back to the highest-accuracy point when none qualifies.
    """
    ok = [p for p in points if p.accuracy >= reference_accuracy - max_gap]
    if ok:
        return min(ok, key=lambda p: (p.energy_pj, -p.accuracy))
    return max(points, key=lambda p: (p.accuracy, -p.energy_pj))
