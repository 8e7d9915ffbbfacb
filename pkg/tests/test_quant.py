import numpy as np
import pytest
from hypothesis import given, strategies as st

from respsnn import quant
from respsnn.quant import (EnergyCalibration, QuantConfig, dequantize_weights,
                           mantissa_quantize, model_size_bits,
                           quantize_activation, quantize_model,
                           quantize_value, quantize_weights, quantized_forward,
                           quantized_predict, reference_energy_pj)


def nearest_grid_level(z, k):
    """Brute-force oracle: nearest of the 2^k uniform levels in [0, 1]."""
    levels = np.arange(2 ** k) / (2 ** k - 1)
    gaps = np.abs(levels - z)
    best = gaps.min()
    # half-away-from-zero on positive inputs means ties go to the larger level
    return float(levels[np.nonzero(gaps <= best + 1e-15)[0][-1]])


@given(st.floats(min_value=0.0, max_value=1.0), st.integers(1, 8))
def test_quantize_value_matches_grid_oracle(z, k):
    assert quantize_value(z, k) == pytest.approx(nearest_grid_level(z, k),
                                                 abs=1e-12)


def test_quantize_value_rejects_out_of_range():
    with pytest.raises(ValueError):
        quantize_value(1.5, 4)
    with pytest.raises(ValueError):
        quantize_value(-0.1, 4)
    with pytest.raises(ValueError):
        quantize_value(0.5, 0)


def test_one_bit_grid_is_binary():
    z = np.linspace(0, 1, 11)
    out = quantize_value(z, 1)
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_weight_round_trip_error_shrinks_with_k(rng):
    w = rng.normal(scale=0.8, size=200)
    errs = []
    for k in (2, 4, 8, 16):
        w_q, norm = quantize_weights(w, k)
        back = dequantize_weights(w_q, norm)
        # dequantized values approximate tanh(w), the quantization domain
        errs.append(np.abs(back - np.tanh(w)).max())
    assert errs == sorted(errs, reverse=True)
    assert errs[-1] < 1e-3


def test_weight_grid_bounds(rng):
    w_q, norm = quantize_weights(rng.normal(size=50), 3)
    assert np.all(w_q >= 0) and np.all(w_q <= 1)
    assert 0 < norm <= 1.0  # tanh is bounded


def test_all_zero_weights_rejected():
    with pytest.raises(ValueError):
        quantize_weights(np.zeros(4), 4)


def test_activation_quantization_clips():
    assert quantize_activation(2.5, 4) == 1.0
    assert quantize_activation(-1.0, 4) == 0.0
    x = quantize_activation(np.array([0.3, 0.7]), 8)
    assert np.all((x * 255) % 1 == pytest.approx(0.0, abs=1e-9))


def test_mantissa_quantize_examples():
    # k=4, b=1: step 0.25, range [-2, 1.75]
    assert mantissa_quantize(0.3, 4, 1) == pytest.approx(0.25)
    assert mantissa_quantize(0.375, 4, 1) == pytest.approx(0.5)  # half away
    assert mantissa_quantize(5.0, 4, 1) == pytest.approx(1.75)
    assert mantissa_quantize(-5.0, 4, 1) == pytest.approx(-2.0)
    with pytest.raises(ValueError):
        mantissa_quantize(0.1, 4, 4)


@given(st.floats(-4, 4), st.integers(4, 10))
def test_mantissa_error_bounded_by_half_step(x, k):
    out = mantissa_quantize(x, k, 2)
    step = 2.0 ** (2 - k + 1)
    lo, hi = -(2.0 ** 2), 2.0 ** 2 - step
    if lo <= x <= hi:
        assert abs(out - x) <= step / 2 + 1e-12


def test_quant_config_validation():
    with pytest.raises(ValueError):
        QuantConfig(k=0)
    with pytest.raises(ValueError):
        QuantConfig(k=4, b=4)
    with pytest.raises(ValueError):
        QuantConfig(k=4, apply_to="nothing")


def test_model_size_is_count_times_bits(trained_model):
    n = trained_model.parameter_count()
    assert model_size_bits(trained_model, 8) == 8 * n
    assert model_size_bits(12345, 2) == 24690


def test_energy_calibration_hits_anchors():
    cal = EnergyCalibration.fit()
    for k, total in quant.REFERENCE_ENERGY_PJ.items():
        assert reference_energy_pj(k, cal) == pytest.approx(total, rel=1e-9)


def test_energy_monotone_and_saturating():
    cal = EnergyCalibration.fit()
    vals = [reference_energy_pj(k, cal) for k in (1, 2, 4, 8, 16, 32, 64)]
    assert vals == sorted(vals)
    # concave in k: equal-width steps buy less and less energy
    steps = [reference_energy_pj(k, cal) for k in range(2, 66, 8)]
    gaps = np.diff(steps)
    assert np.all(np.diff(gaps) < 0)


def test_cnn_energy_scales_with_ops(trained_model):
    rep = quant.cnn_energy(trained_model, 64)
    assert rep.total_pj > 0
    assert rep.model_size_bits == 64 * trained_model.parameter_count()
    # halving bit width can only reduce energy
    assert quant.cnn_energy(trained_model, 32).total_pj < rep.total_pj


def test_quantized_model_preserves_accuracy(trained_model, small_dataset,
                                            calibration):
    x = np.stack([w.samples for w in small_dataset.test])
    y = np.array([w.label for w in small_dataset.test])
    base = float((trained_model.predict(x) == y).mean())
    q = quantize_model(trained_model, QuantConfig(k=8), calibration)
    acc = float((quantized_predict(q, x) == y).mean())
    assert acc >= base - 0.05


def test_quantized_forward_restores_weights(trained_model, calibration):
    before = [w.copy() for w in trained_model.get_weights()]
    q = quantize_model(trained_model, QuantConfig(k=2), calibration)
    quantized_forward(q, calibration[:4])
    after = trained_model.get_weights()
    for a, b in zip(before, after):
        assert np.array_equal(a, b)


def test_activation_quantization_requires_calibration(trained_model):
    with pytest.raises(ValueError):
        quantize_model(trained_model, QuantConfig(k=4))
    q = quantize_model(trained_model, QuantConfig(k=4, apply_to="weights"))
    assert all(s is None for s in q.activation_scales)
