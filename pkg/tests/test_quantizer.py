import numpy as np
import pytest

from dfq_vit.autodiff import GradTape
from dfq_vit.quantizer import (ASYMMETRIC, SYMMETRIC, ActQuantizer, QuantError, QuantParams,
                               build_quantized, calibrate_ema, calibrate_minmax, dequantize,
                               fake_quant, model_size_mb, quantize)
from dfq_vit.vit import activation_sites, model_forward

from conftest import rng


def qp(k=8, lo=0.0, hi=1.0, scheme=ASYMMETRIC):
    return QuantParams(k, lo, hi, scheme)


# ---------------------------------------------------------------------------
# QuantParams
# ---------------------------------------------------------------------------

def test_delta_formula():
    p = qp(4, -1.0, 2.0)
    assert p.delta == 3.0 / 15


@pytest.mark.parametrize("args", [(0, 0.0, 1.0), (17, 0.0, 1.0), (8, 1.0, 1.0), (8, 2.0, 1.0)])
def test_invalid_params_rejected(args):
    with pytest.raises(QuantError):
        QuantParams(*args)


def test_symmetric_requires_mirrored_range():
    with pytest.raises(QuantError):
        QuantParams(8, -1.0, 2.0, SYMMETRIC)
    assert QuantParams(8, -2.0, 2.0, SYMMETRIC).q0 == -2.0


# ---------------------------------------------------------------------------
# quantize / dequantize
# ---------------------------------------------------------------------------

def test_half_rounds_to_even():
    # 0.5 / (1/255) = 127.5 -> 128
    assert quantize(0.5, qp()) == 128


def test_clip_upper():
    assert quantize(2.0, qp()) == 255


def test_one_bit_threshold():
    p = qp(1)
    assert quantize(0.4, p) == 0 and quantize(0.6, p) == 1


def test_grid_endpoints_round_trip_exactly():
    p = qp(4, -0.7, 1.3)
    assert dequantize(quantize(p.q0, p), p) == p.q0
    assert dequantize(quantize(p.qmax, p), p) == p.qmax


@pytest.mark.parametrize("k", [1, 4, 8])
def test_round_trip_error_bound(k):
    p = qp(k, -0.3, 0.9)
    x = rng(k).uniform(p.q0 - 1, p.qmax + 1, 10_000)
    err = np.abs(dequantize(quantize(x, p), p) - np.clip(x, p.q0, p.qmax))
    assert err.max() <= p.delta / 2 * (1 + 1e-12)


def test_dequantize_rejects_out_of_range_codes():
    with pytest.raises(QuantError):
        dequantize(np.array([0, 16]), qp(4))
    with pytest.raises(QuantError):
        dequantize(np.array([-1]), qp(4))


# ---------------------------------------------------------------------------
# fake quant and STE
# ---------------------------------------------------------------------------

def test_on_grid_values_are_fixed_points():
    p = qp(4, -1.0, 2.0)
    grid = dequantize(np.arange(16), p)
    assert np.array_equal(fake_quant(grid, p).data, grid)
    x = rng(1).uniform(-2, 3, 100)
    once = fake_quant(x, p).data
    assert np.array_equal(fake_quant(once, p).data, once)


def _ste_grad(x, p):
    with GradTape() as tape:
        t = tape.watch(x)
        loss = fake_quant(t, p).sum()
    return tape.backward(loss, [t])[t.node].data


def test_ste_interior_and_outside():
    p = qp(8, 0.0, 1.0)
    assert np.array_equal(_ste_grad(np.array([0.3, p.qmax + 1]), p), [1.0, 0.0])


def test_ste_mask_on_random_batch():
    p = qp(4, -0.5, 0.5)
    x = rng(2).uniform(-1, 1, (8, 8))
    x[0, :3] = [p.q0, p.qmax, 0.0]  # boundaries count as inside
    mask = ((x >= p.q0) & (x <= p.qmax)).astype(float)
    assert np.array_equal(_ste_grad(x, p), mask)


def test_surrogate_forward_is_clip():
    p = qp(4, -0.5, 0.5)
    x = rng(3).uniform(-1, 1, 50)
    assert np.array_equal(fake_quant(x, p, ste_surrogate=True).data, np.clip(x, -0.5, 0.5))


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------

def test_minmax_asymmetric_and_symmetric():
    assert calibrate_minmax(np.array([-1.0, 2.0]), ASYMMETRIC) == (-1.0, 2.0)
    assert calibrate_minmax(np.array([-1.0, 2.0]), SYMMETRIC) == (-2.0, 2.0)


def test_minmax_constant_is_widened():
    assert calibrate_minmax(np.full(5, 0.25)) == (0.25 - 1e-8, 0.25 + 1e-8)


def test_minmax_empty_rejected():
    with pytest.raises(QuantError):
        calibrate_minmax(np.array([]))


def test_ema_formula():
    lo, hi = calibrate_ema((0.0, 1.0), (0.0, 3.0), 0.9)
    assert lo == 0.0 and hi == pytest.approx(1.2, abs=1e-15)


def test_ema_zero_momentum_and_first_observation():
    assert calibrate_ema((5.0, 6.0), (0.0, 3.0), 0.0) == (0.0, 3.0)
    assert calibrate_ema(None, (0.5, 1.5), 0.9) == (0.5, 1.5)


def test_ema_fixed_point():
    r = None
    for _ in range(50):
        r = calibrate_ema(r, (-0.25, 0.75), 0.9)
    assert r == (-0.25, 0.75)


@pytest.mark.parametrize("m", [-0.1, 1.0, 1.5])
def test_ema_invalid_momentum(m):
    with pytest.raises(QuantError):
        calibrate_ema((0.0, 1.0), (0.0, 1.0), m)


def test_act_quantizer_ema_smooths():
    q = ActQuantizer(8, "ema", 0.5)
    q.observe(np.array([0.0, 1.0]))
    q.observe(np.array([0.0, 3.0]))
    assert q.range == (0.0, 2.0)


def test_act_quantizer_needs_calibration():
    with pytest.raises(QuantError):
        ActQuantizer(8).params


# ---------------------------------------------------------------------------
# quantized model
# ---------------------------------------------------------------------------

def test_w16_close_to_float(toy_config, random_params):
    img = rng(4).standard_normal((4, 3, 32, 32))
    model = build_quantized(random_params, toy_config, 16, 16)
    fp, _ = model_forward(img, random_params, toy_config)
    q = model.forward(img, calibrate=True)
    assert np.abs(q.data - fp.data).max() < 1e-2


def test_builds_are_deterministic(toy_config, random_params):
    a = build_quantized(random_params, toy_config, 4, 8)
    b = build_quantized(random_params, toy_config, 4, 8)
    assert a.weight_qparams == b.weight_qparams


def test_w4_weights_take_at_most_16_values(toy_config, random_params):
    model = build_quantized(random_params, toy_config, 4, 8)
    for name, w in model.quantized_weights().items():
        assert len(np.unique(w)) <= 16, name


def test_shadow_weights_stay_full_precision(toy_config, random_params):
    model = build_quantized(random_params, toy_config, 2, 8)
    model.forward(rng(5).standard_normal((2, 3, 32, 32)), calibrate=True)
    assert all(np.array_equal(model.params[k], random_params[k]) for k in random_params)


def test_every_site_has_one_quantizer(toy_config, random_params):
    model = build_quantized(random_params, toy_config, 4, 8)
    assert list(model.act_quantizers) == activation_sites(toy_config)
    assert all(q.range is None for q in model.act_quantizers.values())
    model.forward(rng(6).standard_normal((2, 3, 32, 32)))
    assert all(q.range is not None for q in model.act_quantizers.values())


@pytest.mark.parametrize("bits", [0, 17])
def test_bad_bit_width(toy_config, random_params, bits):
    with pytest.raises(QuantError):
        build_quantized(random_params, toy_config, bits, 8)


def test_copy_is_independent(toy_config, random_params):
    model = build_quantized(random_params, toy_config, 4, 8)
    model.forward(rng(7).standard_normal((2, 3, 32, 32)))
    other = model.copy()
    other.params["head.bias"] += 1
    assert not np.array_equal(model.params["head.bias"], other.params["head.bias"])
    img = rng(8).standard_normal((2, 3, 32, 32))
    assert np.array_equal(model.copy().forward(img).data, model.forward(img).data)


# ---------------------------------------------------------------------------
# model size
# ---------------------------------------------------------------------------

def test_size_formula_binary_megabytes():
    assert model_size_mb(2 ** 20, 8) == 1.0
    assert model_size_mb(0, 32) == 0.0


def test_published_size_table():
    # the published sizes use decimal megabytes and parameter counts in millions
    deit_b, deit_t = 86_000_000, 5_000_000
    assert model_size_mb(deit_b, 32, megabyte=1e6) == 344
    assert model_size_mb(deit_b, 8, megabyte=1e6) == 86
    assert model_size_mb(deit_b, 4, megabyte=1e6) == 43
    assert model_size_mb(deit_t, 32, megabyte=1e6) == 20
    assert model_size_mb(deit_t, 4, megabyte=1e6) == 2.5
