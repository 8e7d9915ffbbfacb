"""Conversion of a trained analog network into a spiking network.

ReLU units become integrate-and-fire neurons, conv/dense weights become
synaptic weights, biases become constant per-step input currents, flatten
is pure rewiring, dropout disappears, pool-size-1 max pooling passes
through, larger max pools become first-spike gates, average pooling
forwards rates with weight 1/pool, residual skips add weight-1 synapses,
and the softmax head becomes Poisson comparison neurons driven by each
output's accumulated weighted input.

Standardized features can be negative, so every analog input unit is
encoded on two rate channels (positive part and rectified negative part);
the first synaptic stage carries +w / -w accordingly.

Data-based weight normalization rescales each layer by the 99.9th
percentile of its analog activations so no neuron needs more than one
spike per timestep.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .nn import (CnnModel, Concatenate, Conv1D, Dense, Dropout, Flatten,
                 MaxPool1D, ResidualBlock)

KIND_INPUT = 0
KIND_IF = 1
KIND_POISSON = 2
KIND_GATE = 3

NORM_PERCENTILE = 99.9


@dataclass
class SnnNetwork:
    """Integrate-and-fire network as a sparse synapse matrix.

    weights[pre, post] is the synaptic weight (mV per spike); bias is a
    constant per-step input current (mV/step); layer_of groups neurons into
    synaptic stages evaluated in order each timestep.
    """

    n_inputs: int
    kind: np.ndarray  # (N,) neuron kind codes
    weights: sparse.csr_matrix  # (N, N) pre -> post
    bias: np.ndarray  # (N,) mV per step
    threshold: np.ndarray  # (N,) mV, default scale 1.0
    layer_of: np.ndarray  # (N,) stage index; inputs are stage 0
    output_ids: np.ndarray
    maxpool_groups: list = field(default_factory=list)  # (gate_id, member_ids)
    leak: float = 1.0
    input_scale: float = 1.0
    lambdas: np.ndarray = None  # per-stage normalization factors
    layer_probe: list = None  # per-stage analog layer index (-1 = input)
    source_model: CnnModel = None

    @property
    def n_neurons(self) -> int:
        return len(self.kind)

    @property
    def n_layers(self) -> int:
        return int(self.layer_of.max()) + 1

    def layer_ids(self, layer: int) -> np.ndarray:
        return np.flatnonzero(self.layer_of == layer)

    def validate(self):
        coo = self.weights.tocoo()
        if np.any(coo.row == coo.col):
            raise ValueError("self-loop synapse")
        if np.any(self.threshold[self.kind == KIND_IF] <= 0):
            raise ValueError("IF thresholds must be > 0")
        if np.any(self.layer_of[coo.row] >= self.layer_of[coo.col]):
            raise ValueError("synapse must go to a later stage")


class UnsupportedLayerError(ValueError):
    pass


class _Builder:
    def __init__(self):
        self.kind = []
        self.bias = []
        self.layer = []
        self.rows, self.cols, self.vals = [], [], []
        self.groups = []
        self.probes = [-1]  # stage 0 = input

    def add_neurons(self, n, kind, layer, bias=None):
        start = len(self.kind)
        self.kind.extend([kind] * n)
        self.layer.extend([layer] * n)
        if bias is None:
            self.bias.extend([0.0] * n)
        else:
            self.bias.extend(np.asarray(bias, dtype=float).tolist())
        return np.arange(start, start + n)

    def connect(self, pre, post, weight):
        self.rows.append(pre)
        self.cols.append(post)
        self.vals.append(weight)


def _weighted_layer(builder, units, weights_per_out, biases, kind, stage):
    """Create one spiking stage from analog (weights, bias) definitions.

    units: array of source unit descriptors, each a list of (neuron, coeff);
    weights_per_out: (n_units, n_out) analog weight matrix.
    """
    n_out = weights_per_out.shape[1]
    ids = builder.add_neurons(n_out, kind, stage, bias=biases)
    for j, unit in enumerate(units):
        w_row = weights_per_out[j]
        nz = np.flatnonzero(w_row)
        for (nid, coeff) in unit:
            for o in nz:
                builder.connect(nid, ids[o], coeff * w_row[o])
    return ids


def convert(model: CnnModel, two_channel_input: bool = True) -> SnnNetwork:
    """Build the spiking equivalent of a trained analog model.

    One IF neuron per ReLU unit; the converted network is unnormalized
    (all lambdas 1) until normalize_weights is applied.
    """
    builder = _Builder()
    in_len, in_ch = (model.input_shape if len(model.input_shape) == 2
                     else (model.input_shape[0], 1))
    n_analog_in = in_len * in_ch
    if two_channel_input:
        pos = builder.add_neurons(n_analog_in, KIND_INPUT, 0)
        neg = builder.add_neurons(n_analog_in, KIND_INPUT, 0)
        units = np.empty(n_analog_in, dtype=object)
        for i in range(n_analog_in):
            units[i] = [(int(pos[i]), 1.0), (int(neg[i]), -1.0)]
        n_inputs = 2 * n_analog_in
    else:
        ids = builder.add_neurons(n_analog_in, KIND_INPUT, 0)
        units = np.empty(n_analog_in, dtype=object)
        for i in range(n_analog_in):
            units[i] = [(int(ids[i]), 1.0)]
        n_inputs = n_analog_in

    shape = (in_len, in_ch)
    stage = 0

    def convert_layer(layer, units, shape, stage, model_layer_idx):
        if isinstance(layer, Dropout):
            return units, shape, stage
        if isinstance(layer, Flatten):
            return units.reshape(-1), (units.size,), stage
        if isinstance(layer, Conv1D):
            grid = units.reshape(shape)
            t_out = shape[0] - layer.kernel + 1
            # analog weight matrix from flattened receptive field to outputs
            out_units = np.empty((t_out, layer.filters), dtype=object)
            stage += 1
            builder.probes.append(model_layer_idx)
            for t in range(t_out):
                field_units = grid[t:t + layer.kernel, :].reshape(-1)
                w = layer.W.reshape(layer.kernel * shape[1], layer.filters)
                ids = _weighted_layer(builder, field_units, w, layer.b,
                                      KIND_IF, stage)
                for f in range(layer.filters):
                    out_units[t, f] = [(int(ids[f]), 1.0)]
            return out_units.reshape(-1), (t_out, layer.filters), stage
        if isinstance(layer, MaxPool1D):
            if layer.pool == 1 and layer.stride == 1:
                return units, shape, stage  # the paper's config: pass-through
            grid = units.reshape(shape)
            t_out = (shape[0] - layer.pool) // layer.stride + 1
            stage += 1
            builder.probes.append(model_layer_idx)
            out_units = np.empty((t_out, shape[1]), dtype=object)
            for t in range(t_out):
                for c in range(shape[1]):
                    members = []
                    for j in range(layer.pool):
                        unit = grid[t * layer.stride + j, c]
                        if len(unit) != 1 or unit[0][1] != 1.0:
                            raise UnsupportedLayerError(
                                "max pooling needs single-neuron inputs")
                        members.append(unit[0][0])
                    gate = builder.add_neurons(1, KIND_GATE, stage)[0]
                    for m in members:
                        builder.connect(m, int(gate), 1.0)
                    builder.groups.append((int(gate), np.array(members)))
                    out_units[t, c] = [(int(gate), 1.0)]
            return out_units.reshape(-1), (t_out, shape[1]), stage
        if isinstance(layer, Dense):
            if len(shape) != 1:
                raise UnsupportedLayerError("dense layer needs flat input")
            stage += 1
            builder.probes.append(model_layer_idx)
            kind = KIND_POISSON if layer.activation == "softmax" else KIND_IF
            ids = _weighted_layer(builder, units, layer.W, layer.b, kind, stage)
            out_units = np.empty(layer.units, dtype=object)
            for i in range(layer.units):
                out_units[i] = [(int(ids[i]), 1.0)]
            return out_units, (layer.units,), stage
        if isinstance(layer, ResidualBlock):
            in_units = units
            out_units, out_shape, stage = units, shape, stage
            for sub in layer.layers:
                out_units, out_shape, stage = convert_layer(
                    sub, out_units, out_shape, stage, model_layer_idx)
            if out_units.size != in_units.size:
                raise UnsupportedLayerError("residual branch changed width")
            # skip path: weight-1 synapses from block input to block output
            for i in range(in_units.size):
                unit_out = out_units.reshape(-1)[i]
                if len(unit_out) != 1:
                    raise UnsupportedLayerError(
                        "residual output must be single neurons")
                for (nid, coeff) in in_units.reshape(-1)[i]:
                    builder.connect(nid, unit_out[0][0], coeff)
            return out_units, out_shape, stage
        if isinstance(layer, Concatenate):
            outs = []
            max_stage = stage
            for branch in layer.branches:
                b_units, b_shape, b_stage = units, shape, stage
                for sub in branch:
                    b_units, b_shape, b_stage = convert_layer(
                        sub, b_units, b_shape, b_stage, model_layer_idx)
                outs.append(b_units.reshape(-1))
                max_stage = max(max_stage, b_stage)
            merged = np.concatenate(outs)
            return merged, (merged.size,), max_stage
        raise UnsupportedLayerError(f"unsupported layer type {type(layer).__name__}")

    for idx, layer in enumerate(model.layers):
        units, shape, stage = convert_layer(layer, units, shape, stage, idx)

    flat = units.reshape(-1)
    output_ids = []
    for unit in flat:
        if len(unit) != 1:
            raise UnsupportedLayerError("output units must be single neurons")
        output_ids.append(unit[0][0])

    n = len(builder.kind)
    weights = sparse.csr_matrix(
        (builder.vals, (builder.rows, builder.cols)), shape=(n, n))
    weights.sum_duplicates()
    layer_of = np.asarray(builder.layer, dtype=int)
    net = SnnNetwork(
        n_inputs=n_inputs,
        kind=np.asarray(builder.kind, dtype=int),
        weights=weights,
        bias=np.asarray(builder.bias, dtype=float),
        threshold=np.ones(n),
        layer_of=layer_of,
        output_ids=np.asarray(output_ids, dtype=int),
        maxpool_groups=builder.groups,
        lambdas=np.ones(int(layer_of.max()) + 1),
        layer_probe=list(builder.probes),
        source_model=model,
    )
    net.validate()
    return net


def _analog_layer_outputs(model: CnnModel, batch):
    """Per-layer outputs (pre-softmax logits for the softmax head)."""
    outs = []
    x = np.asarray(batch, dtype=float)
    for layer in model.layers:
        y = layer.forward(x, train=False)
        if isinstance(layer, Dense) and layer.activation == "softmax":
            outs.append(layer._pre)
        else:
            outs.append(y)
        x = y
    return outs


def normalize_weights(net: SnnNetwork, calibration_batch,
                      percentile: float = NORM_PERCENTILE) -> SnnNetwork:
    """Data-based per-stage weight normalization.

    Stage factor = the percentile of analog activation magnitudes observed
    on the calibration batch; synapse (pre, post) is scaled by
    lambda[stage(pre)] / lambda[stage(post)] and biases by
    1 / lambda[stage(post)], so normalized rates stay within one spike per
    timestep.
    """
    if net.source_model is None:
        raise ValueError("network carries no source model for calibration")
    if len(net.layer_probe) != net.n_layers:
        raise UnsupportedLayerError(
            "normalization unsupported for branched topologies")
    batch = np.asarray(calibration_batch, dtype=float)
    if batch.size == 0:
        raise ValueError("empty calibration batch")
    outs = _analog_layer_outputs(net.source_model, batch)

    lambdas = np.ones(net.n_layers)
    lambdas[0] = float(np.percentile(np.abs(batch), percentile))
    for stage in range(1, net.n_layers):
        probe = net.layer_probe[stage]
        lam = float(np.percentile(np.abs(outs[probe]), percentile))
        lambdas[stage] = lam if lam > 0 else 1.0
    if lambdas[0] <= 0:
        lambdas[0] = 1.0

    coo = net.weights.tocoo()
    scale = lambdas[net.layer_of[coo.row]] / lambdas[net.layer_of[coo.col]]
    weights = sparse.csr_matrix((coo.data * scale, (coo.row, coo.col)),
                                shape=net.weights.shape)
    bias = net.bias / lambdas[net.layer_of]

    return SnnNetwork(
        n_inputs=net.n_inputs, kind=net.kind.copy(), weights=weights,
        bias=bias, threshold=net.threshold.copy(),
        layer_of=net.layer_of.copy(), output_ids=net.output_ids.copy(),
        maxpool_groups=list(net.maxpool_groups), leak=net.leak,
        input_scale=float(lambdas[0]), lambdas=lambdas,
        layer_probe=list(net.layer_probe), source_model=net.source_model,
    )


# --- text serialization ----------------------------------------------------

SNN_FORMAT = "respsnn-snn"
SNN_VERSION = 1


def save_snn(net: SnnNetwork, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# {SNN_FORMAT} v{SNN_VERSION}\n")
        fh.write(f"# n_inputs {net.n_inputs}\n")
        fh.write(f"# leak {float(net.leak)!r}\n")
        fh.write(f"# input_scale {float(net.input_scale)!r}\n")
        fh.write("# lambdas " + ",".join(repr(float(x)) for x in net.lambdas) + "\n")
        fh.write("# probes " + ",".join(str(p) for p in net.layer_probe) + "\n")
        fh.write("NEURONS id,kind,layer,threshold_mv,bias\n")
        for i in range(net.n_neurons):
            fh.write(f"{i},{net.kind[i]},{net.layer_of[i]},"
                     f"{float(net.threshold[i])!r},{float(net.bias[i])!r}\n")
        fh.write("SYNAPSES pre,post,weight_mV\n")
        coo = net.weights.tocoo()
        order = np.lexsort((coo.col, coo.row))
        for i in order:
            fh.write(f"{coo.row[i]},{coo.col[i]},{float(coo.data[i])!r}\n")
        fh.write("MAXPOOL gate,members...\n")
        for gate, members in net.maxpool_groups:
            fh.write(f"{gate}," + ",".join(str(m) for m in members) + "\n")
        fh.write("OUTPUTS " + ",".join(str(o) for o in net.output_ids) + "\n")


def load_snn(path) -> SnnNetwork:
    with open(path) as fh:
        lines = [line.rstrip("\n") for line in fh]
    if not lines or not lines[0].startswith(f"# {SNN_FORMAT} "):
        raise ValueError("not a spiking-network file")
    meta = {}
    i = 1
    while lines[i].startswith("#"):
        key, _, value = lines[i][2:].partition(" ")
        meta[key] = value
        i += 1
    if not lines[i].startswith("NEURONS"):
        raise ValueError("missing NEURONS section")
    i += 1
    kind, layer, thr, bias = [], [], [], []
    while not lines[i].startswith("SYNAPSES"):
        parts = lines[i].split(",")
        kind.append(int(parts[1]))
        layer.append(int(parts[2]))
        thr.append(float(parts[3]))
        bias.append(float(parts[4]))
        i += 1
    i += 1
    rows, cols, vals = [], [], []
    while not lines[i].startswith("MAXPOOL"):
        parts = lines[i].split(",")
        rows.append(int(parts[0]))
        cols.append(int(parts[1]))
        vals.append(float(parts[2]))
        i += 1
    i += 1
    groups = []
    while not lines[i].startswith("OUTPUTS"):
        parts = [int(p) for p in lines[i].split(",")]
        groups.append((parts[0], np.asarray(parts[1:], dtype=int)))
        i += 1
    outputs = np.asarray([int(p) for p in lines[i].split(" ", 1)[1].split(",")])
    n = len(kind)
    layer_of = np.asarray(layer, dtype=int)
    return SnnNetwork(
        n_inputs=int(meta["n_inputs"]),
        kind=np.asarray(kind, dtype=int),
        weights=sparse.csr_matrix((vals, (rows, cols)), shape=(n, n)),
        bias=np.asarray(bias, dtype=float),
        threshold=np.asarray(thr, dtype=float),
        layer_of=layer_of,
        output_ids=outputs,
        maxpool_groups=groups,
        leak=float(meta["leak"]),
        input_scale=float(meta["input_scale"]),
        lambdas=np.asarray([float(x) for x in meta["lambdas"].split(",")]),
        layer_probe=[int(p) for p in meta["probes"].split(",")],
    )
