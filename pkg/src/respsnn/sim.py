"""Discrete-time simulator for converted spiking networks.

Rate encoding, synchronous membrane integration stage by stage within each
timestep, subtract-threshold reset, first-spike max-pool gating, Poisson
comparison outputs, and dataset-level evaluation routed through the
metrics module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .convert import KIND_GATE, KIND_IF, KIND_INPUT, KIND_POISSON, SnnNetwork
from .metrics import MetricsReport, evaluate


@dataclass(frozen=True)
class SimConfig:
    timesteps: int = 256
    v_th_mv: float = 1.0
    # optional per-layer multipliers on v_th_mv, indexed by layer; a high
    # multiplier thins a layer's spikes, a low one restores downstream gain
    v_th_profile: tuple = None
    leak: float = 1.0  # per-step membrane retention; 1.0 = non-leaky IF
    seed: int = 0

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if self.v_th_mv <= 0:
            raise ValueError("v_th_mv must be > 0")
        if self.v_th_profile is not None and any(
                p <= 0 for p in self.v_th_profile):
            raise ValueError("v_th_profile entries must be > 0")
        if not 0 < self.leak <= 1:
            raise ValueError("leak must be in (0, 1]")


@dataclass
class SpikeTrace:
    """Spike events of the network neurons (inputs are stimulus, not trace)."""

    neuron_ids: np.ndarray  # event neuron ids, time-ordered
    timesteps: np.ndarray
    counts: np.ndarray  # per-neuron spike counts, indexed by neuron id
    horizon: int

    @property
    def total_spikes(self) -> int:
        return int(self.counts.sum())


def encode_rates(window_samples: np.ndarray, input_scale: float) -> np.ndarray:
    """Map standardized features to per-channel spike probabilities.

    Two-channel layout: positive parts first, rectified negative parts
    second, each clipped to [0, 1] after dividing by the input scale.
    """
    flat = np.asarray(window_samples, dtype=float).reshape(-1)
    pos = np.clip(flat / input_scale, 0.0, 1.0)
    neg = np.clip(-flat / input_scale, 0.0, 1.0)
    return np.concatenate([pos, neg])


def encode(window_samples: np.ndarray, net: SnnNetwork,
           cfg: SimConfig) -> np.ndarray:
    """Bernoulli spike trains (T, n_inputs); deterministic given cfg.seed."""
    rates = encode_rates(window_samples, net.input_scale)
    if len(rates) != net.n_inputs:
        raise ValueError("window does not match network input arity")
    rng = np.random.default_rng(cfg.seed)
    return (rng.random((cfg.timesteps, net.n_inputs)) < rates).astype(float)


def encode_isi(values: np.ndarray, timesteps: int) -> np.ndarray:
    """Inter-spike-interval encoding: one spike every round(1/v) steps.

    Exposed for the analog-to-spiking illustration only; the pipeline uses
    rate encoding.
    """
    values = np.asarray(values, dtype=float)
    trains = np.zeros((timesteps, len(values)))
    for i, v in enumerate(values):
        if v <= 0:
            continue
        interval = max(1, int(round(1.0 / min(v, 1.0))))
        trains[interval - 1::interval, i] = 1.0
    return trains


def thinning_profile(n_layers: int, factor: float) -> tuple:
    """Per-layer threshold multipliers that thin the first hidden layer.

    The first spiking layer usually carries most of the traffic while its
    consumers sum hundreds of synapses, so its rate code tolerates a coarser
    resolution.  Raising its threshold by `factor` and lowering the next
    layer's by the same factor cuts its spike count without changing any
    downstream firing rate.
    """
    if factor <= 0:
        raise ValueError("factor must be > 0")
    profile = [1.0] * n_layers
    if n_layers >= 3 and factor != 1.0:
        profile[1] = factor
        profile[2] = 1.0 / factor
    return tuple(profile)


class _SimState:
    """Per-run mutable state; one instance per simulate call."""

    def __init__(self, net: SnnNetwork, cfg: SimConfig, batch: int):
        self.v = np.zeros((batch, net.n_neurons))
        self.poisson_drive = np.zeros((batch, net.n_neurons))
        self.winners = {gate: np.full(batch, -1, dtype=int)
                        for gate, _ in net.maxpool_groups}


def _stage_matrices(net: SnnNetwork):
    """Per-stage transposed column slices of the synapse matrix."""
    csc = net.weights.tocsc()
    mats = []
    for stage in range(1, net.n_layers):
        ids = net.layer_ids(stage)
        mats.append((ids, csc[:, ids].T.tocsr()))
    return mats


def simulate_batch(net: SnnNetwork, input_trains: np.ndarray,
                   cfg: SimConfig, record_events: bool = False):
    """Run a batch of inferences in lockstep.

    input_trains: (B, T, n_inputs).  Returns (counts (B, N), output_counts
    (B, n_outputs), events or None).  Spike counts cover network neurons;
    input spikes are the stimulus and stay at zero in `counts`.
    """
    if input_trains.ndim != 3 or input_trains.shape[2] != net.n_inputs:
        raise ValueError("input trains must have shape (B, T, n_inputs)")
    batch, horizon = input_trains.shape[0], input_trains.shape[1]
    if horizon != cfg.timesteps:
        raise ValueError("input trains encoded for a different horizon")

    scale = np.full(net.n_neurons, cfg.v_th_mv)
    if cfg.v_th_profile is not None:
        profile = np.asarray(cfg.v_th_profile, dtype=float)
        if len(profile) != net.n_layers:
            raise ValueError("v_th_profile length must equal layer count")
        scale *= profile[net.layer_of]
    thr = np.where(net.kind == KIND_INPUT, 1.0, scale) * net.threshold
    if_mask = net.kind == KIND_IF
    rng = np.random.default_rng((cfg.seed, 1))
    state = _SimState(net, cfg, batch)
    stage_mats = _stage_matrices(net)
    gate_rows = {gate: members for gate, members in net.maxpool_groups}

    counts = np.zeros((batch, net.n_neurons), dtype=np.int64)
    events = ([], []) if record_events else None
    spikes = np.zeros((batch, net.n_neurons))

    for t in range(horizon):
        spikes[:, :net.n_inputs] = input_trains[:, t, :]
        spikes[:, net.n_inputs:] = 0.0
        for ids, wt in stage_mats:
            current = (wt @ spikes.T).T + net.bias[ids]
            stage_kind = net.kind[ids]

            if_sel = stage_kind == KIND_IF
            if if_sel.any():
                sel = ids[if_sel]
                v = cfg.leak * net.leak * state.v[:, sel] + current[:, if_sel]
                fired = v >= thr[sel]
                v = v - fired * thr[sel]
                state.v[:, sel] = v
                spikes[:, sel] = fired

            poi_sel = stage_kind == KIND_POISSON
            if poi_sel.any():
                sel = ids[poi_sel]
                state.poisson_drive[:, sel] += current[:, poi_sel]
                # generator rate proportional to each output's accumulated
                # drive; shared scale = the strongest output, so the winner
                # fires near once per step and count ratios track drive ratios
                drive = state.poisson_drive[:, sel]
                peak = drive.max(axis=1, keepdims=True)
                with np.errstate(invalid="ignore", divide="ignore"):
                    rate = np.where(peak > 0.0,
                                    np.clip(drive / peak, 0.0, 1.0), 0.0)
                spikes[:, sel] = rng.random(rate.shape) < rate

            gate_sel = stage_kind == KIND_GATE
            if gate_sel.any():
                for gid in ids[gate_sel]:
                    members = gate_rows[int(gid)]
                    member_spikes = spikes[:, members] > 0
                    winner = state.winners[int(gid)]
                    undecided = winner < 0
                    if undecided.any():
                        any_spike = member_spikes[undecided].any(axis=1)
                        first = member_spikes[undecided].argmax(axis=1)
                        new = np.where(any_spike, first, -1)
                        winner[undecided] = new
                    decided = winner >= 0
                    out = np.zeros(batch)
                    if decided.any():
                        rows = np.flatnonzero(decided)
                        out[rows] = member_spikes[rows, winner[rows]]
                    spikes[:, gid] = out

        net_spikes = spikes[:, net.n_inputs:] > 0
        counts[:, net.n_inputs:] += net_spikes
        if record_events:
            b_idx, n_idx = np.nonzero(net_spikes)
            if batch != 1:
                raise ValueError("event recording supports batch size 1")
            events[0].extend((net.n_inputs + n_idx).tolist())
            events[1].extend([t] * len(n_idx))

    output_counts = counts[:, net.output_ids]
    return counts, output_counts, events


def run(net: SnnNetwork, input_trains: np.ndarray, cfg: SimConfig) -> SpikeTrace:
    """Simulate one inference and record the full spike trace."""
    counts, _, events = simulate_batch(net, input_trains[None, :, :], cfg,
                                       record_events=True)
    return SpikeTrace(neuron_ids=np.asarray(events[0], dtype=int),
                      timesteps=np.asarray(events[1], dtype=int),
                      counts=counts[0], horizon=cfg.timesteps)


def decode(output_counts: np.ndarray) -> int:
    """Class = argmax of output spike counts; ties go to the lower index."""
    return int(np.argmax(output_counts))


def decode_trace(trace: SpikeTrace, output_ids: np.ndarray) -> int:
    return decode(trace.counts[output_ids])


@dataclass
class ClassifyStats:
    predictions: np.ndarray
    labels: np.ndarray
    scores: np.ndarray  # spike-count share of class 1
    spike_counts: np.ndarray  # (B, N) per-neuron counts
    total_spikes_per_window: np.ndarray
    report: MetricsReport


def classify(net: SnnNetwork, windows, cfg: SimConfig) -> ClassifyStats:
    """Evaluate a window set; per-window seeded encoding keeps runs identical."""
    labels = np.array([w.label for w in windows], dtype=int)
    trains = np.stack([
        encode(w.samples, net,
               SimConfig(timesteps=cfg.timesteps, v_th_mv=cfg.v_th_mv,
                         v_th_profile=cfg.v_th_profile, leak=cfg.leak,
                         seed=int(np.random.default_rng((cfg.seed, i)).integers(2 ** 31))))
        for i, w in enumerate(windows)
    ])
    counts, out_counts, _ = simulate_batch(net, trains, cfg)
    predictions = out_counts.argmax(axis=1)
    totals = out_counts.sum(axis=1)
    with np.errstate(invalid="ignore"):
        scores = np.where(totals > 0, out_counts[:, -1] / np.maximum(totals, 1), 0.5)
    report = evaluate(predictions, labels, scores)
    return ClassifyStats(predictions=predictions, labels=labels, scores=scores,
                         spike_counts=counts,
                         total_spikes_per_window=counts.sum(axis=1),
                         report=report)
