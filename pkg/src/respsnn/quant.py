"""k-bit quantization of weights/activations plus energy and size accounting.

Weights are mapped through tanh onto the unit interval, snapped to the
2^k-level grid, and de-mapped back to a signed range for inference (the
per-tensor tanh normalizer is kept alongside).  Activations are quantized
on a per-layer scale learned from a calibration batch so that ReLU outputs
larger than 1 survive the unit-interval clip.  Rounding is
half-away-from-zero everywhere.

The energy model is a two-constant calibration curve anchored to reference
totals at k=2 and k=64 for a 46,129-parameter model: energy per
(MAC + weight access) saturates as e0*(1 - exp(-k/tau)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .nn import CnnModel, Conv1D, Dense, Flatten, MaxPool1D

REFERENCE_PARAM_COUNT = 46_129
REFERENCE_ENERGY_PJ = {2: 7_089.0, 64: 134_613.0}


def round_half_away(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_value(z_r, k: int):
    """Snap values in [0,1] onto the 2^k-level grid: round((2^k-1) z)/(2^k-1)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    z = np.asarray(z_r, dtype=float)
    if np.any(z < 0) or np.any(z > 1):
        raise ValueError("input outside [0, 1]")
    levels = 2.0 ** k - 1.0
    out = round_half_away(levels * z) / levels
    return out if isinstance(z_r, np.ndarray) else float(out)


def quantize_weights(w_r, k: int):
    """Tanh-normalized weight quantization.

    Returns (w_q on the [0,1] grid, normalizer max|tanh(w_r)|).  The signed
    inference weight is recovered as (2 w_q - 1) * normalizer.
    """
    w = np.asarray(w_r, dtype=float)
    t = np.tanh(w)
    norm = float(np.max(np.abs(t)))
    if norm == 0.0:
        raise ValueError("all-zero tensor: tanh normalizer is zero")
    w_q = quantize_value(t / (2.0 * norm) + 0.5, k)
    return w_q, norm


def dequantize_weights(w_q, norm: float):
    return (2.0 * np.asarray(w_q, dtype=float) - 1.0) * norm


def quantize_activation(x_r, k: int):
    """Clip to [0,1] then snap to the k-bit grid."""
    x = np.clip(np.asarray(x_r, dtype=float), 0.0, 1.0)
    out = quantize_value(x, k)
    return out if isinstance(x_r, np.ndarray) else float(out)


def mantissa_quantize(x, k: int, b: int = 0):
    """Fixed-point mantissa quantization with b integer bits of k total."""
    if not 0 <= b < k:
        raise ValueError("need 0 <= b < k")
    arr = np.asarray(x, dtype=float)
    scaled = round_half_away(arr * 2.0 ** (k - b - 1))
    clipped = np.clip(scaled, -(2.0 ** (k - 1)), 2.0 ** (k - 1) - 1)
    out = 2.0 ** (b - k + 1) * clipped
    return out if isinstance(x, np.ndarray) else float(out)


@dataclass(frozen=True)
class QuantConfig:
    k: int
    b: int = 0  # integer bits for mantissa quantization
    apply_to: str = "both"  # weights | activations | both

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 <= self.b < self.k:
            raise ValueError("need 0 <= b < k")
        if self.apply_to not in ("weights", "activations", "both"):
            raise ValueError("apply_to must be weights|activations|both")


@dataclass
class QuantizedModel:
    source: CnnModel
    cfg: QuantConfig
    weights: list  # per parameter tensor: (w_q, norm) or None (not quantized)
    activation_scales: list  # per layer: float scale or None


def _activation_scales(model: CnnModel, calibration) -> list:
    """Per-layer max-abs ReLU output over a calibration batch."""
    scales = []
    x = np.asarray(calibration, dtype=float)
    for layer in model.layers:
        x = layer.forward(x, train=False)
        if getattr(layer, "activation", None) == "relu":
            s = float(np.abs(x).max())
            scales.append(s if s > 0 else 1.0)
        else:
            scales.append(None)
    return scales


def quantize_model(model: CnnModel, cfg: QuantConfig, calibration=None) -> QuantizedModel:
    """Post-training quantization of every parameter tensor and ReLU output."""
    weights = []
    if cfg.apply_to in ("weights", "both"):
        for _, p in model.parameters():
            weights.append(quantize_weights(p, cfg.k))
    else:
        weights = [None] * len(model.parameters())
    if cfg.apply_to in ("activations", "both"):
        if calibration is None:
            raise ValueError("activation quantization needs a calibration batch")
        scales = _activation_scales(model, calibration)
    else:
        scales = [None] * len(model.layers)
    return QuantizedModel(source=model, cfg=cfg, weights=weights,
                          activation_scales=scales)


def quantized_forward(qmodel: QuantizedModel, x):
    """Inference with quantized parameters and per-boundary activation grids.

    ReLU outputs are scaled into [0,1] by the layer's calibration scale,
    snapped to the k-bit grid, and scaled back.  Dropout is inactive.
    """
    model = qmodel.source
    k = qmodel.cfg.k
    x = np.asarray(x, dtype=float)
    originals = model.get_weights()
    try:
        if qmodel.cfg.apply_to in ("weights", "both"):
            dequant = [dequantize_weights(w_q, norm)
                       for (w_q, norm) in qmodel.weights]
            model.set_weights(dequant)
        for layer, scale in zip(model.layers, qmodel.activation_scales):
            x = layer.forward(x, train=False)
            if scale is not None:
                x = scale * quantize_activation(x / scale, k)
    finally:
        model.set_weights(originals)
    return x


def quantized_predict(qmodel: QuantizedModel, x):
    return quantized_forward(qmodel, x).argmax(axis=-1)


def model_size_bits(model_or_params, k: int) -> int:
    """Model size = parameter count x bits per parameter."""
    if isinstance(model_or_params, CnnModel):
        count = model_or_params.parameter_count()
    else:
        count = int(model_or_params)
    return count * int(k)


@dataclass(frozen=True)
class EnergyCalibration:
    """Two-point saturating energy curve per (MAC + weight access) pair.

    e(k) = e0 * (1 - exp(-k / tau)), with (e0, tau) fitted so that the
    reference operation count reproduces the anchor totals at k=2 and k=64.
    """
    e0: float
    tau: float

    def per_op_pj(self, k: int) -> float:
        return self.e0 * (1.0 - np.exp(-k / self.tau))

    @classmethod
    def fit(cls, ref_ops: int = 2 * REFERENCE_PARAM_COUNT,
            anchors: dict = None) -> "EnergyCalibration":
        anchors = anchors or REFERENCE_ENERGY_PJ
        (k1, e1), (k2, e2) = sorted(anchors.items())
        ratio = e1 / e2

        def f(tau):
            return (1.0 - np.exp(-k1 / tau)) / (1.0 - np.exp(-k2 / tau)) - ratio

        tau = brentq(f, 1e-3, 1e4)
        e0 = e1 / ((1.0 - np.exp(-k1 / tau)) * ref_ops)
        return cls(e0=e0, tau=tau)


@dataclass
class EnergyReport:
    layer_mac_pj: list
    layer_mem_pj: list
    total_pj: float
    model_size_bits: int


def _layer_op_counts(model: CnnModel):
    """(MACs, weight accesses) per parameterized layer for one inference."""
    counts = []
    shape = model.input_shape
    for layer in model.layers:
        if isinstance(layer, Conv1D):
            t_out = shape[0] - layer.kernel + 1
            macs = t_out * layer.kernel * layer.in_channels * layer.filters + t_out * layer.filters
            counts.append((macs, layer.W.size + layer.b.size))
            shape = (t_out, layer.filters)
        elif isinstance(layer, Dense):
            macs = layer.in_features * layer.units + layer.units
            counts.append((macs, layer.W.size + layer.b.size))
            shape = (layer.units,)
        elif isinstance(layer, MaxPool1D):
            t_out = (shape[0] - layer.pool) // layer.stride + 1
            counts.append((0, 0))
            shape = (t_out, shape[1])
        elif isinstance(layer, Flatten):
            counts.append((0, 0))
            shape = (int(np.prod(shape)),)
        else:
            counts.append((0, 0))
    return counts


def cnn_energy(model: CnnModel, k: int,
               calibration: EnergyCalibration = None) -> EnergyReport:
    """Per-layer MAC/memory energy for one k-bit inference."""
    calibration = calibration or EnergyCalibration.fit()
    per_op = calibration.per_op_pj(k)
    mac_pj, mem_pj = [], []
    for macs, mems in _layer_op_counts(model):
        mac_pj.append(macs * per_op)
        mem_pj.append(mems * per_op)
    total = float(sum(mac_pj) + sum(mem_pj))
    return EnergyReport(layer_mac_pj=mac_pj, layer_mem_pj=mem_pj,
                        total_pj=total,
                        model_size_bits=model_size_bits(model, k))


def reference_energy_pj(k: int, calibration: EnergyCalibration = None) -> float:
    """Calibrated total for the reference parameter count at k bits."""
    calibration = calibration or EnergyCalibration.fit()
    return 2 * REFERENCE_PARAM_COUNT * calibration.per_op_pj(k)
