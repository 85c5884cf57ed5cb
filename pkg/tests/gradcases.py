"""Finite-difference gradient cases shared by the unit and acceptance suites.

Each case is ``(name, loss_fn, sample_point)``: ``loss_fn`` maps a Tensor to
a scalar Tensor and ``sample_point(seed)`` draws an evaluation point away
from any kink of that primitive.
"""
from __future__ import annotations

import numpy as np

from dfq_vit import autodiff as ad
from dfq_vit.losses import discrepancy_mae, generator_loss, hook_bandwidths, pse_loss
from dfq_vit.quantizer import build_quantized
from dfq_vit.vit import ViTConfig, init_params, model_forward

from conftest import directional_check, full_check, rng

N_POINTS = 10
TOLERANCE = 1e-4

_W = rng(100).standard_normal((3, 4))
_C = rng(101).standard_normal((3, 4))
_M = rng(102).standard_normal((4, 5))
_ROW = rng(103).standard_normal(4)


def _weighted(t):
    """Contract with fixed random weights so the gradient is not all-ones."""
    return (t * _W).sum()


def _normal(shape, offset=0.0):
    return lambda seed: rng(seed).standard_normal(shape) + offset


def _positive(shape):
    return lambda seed: 0.5 + rng(seed).uniform(0.0, 2.0, shape)


def _away_from(shape, point, gap=0.05):
    def draw(seed):
        x = rng(seed).standard_normal(shape)
        return np.where(np.abs(x - point) < gap, x + 2 * gap, x)
    return draw


PRIMITIVES = [
    ("add", lambda x: _weighted(x + _C), _normal((3, 4))),
    ("add_broadcast", lambda x: _weighted(ad.add(_C, x)), _normal((4,))),
    ("sub", lambda x: _weighted(_C - x * x), _normal((3, 4))),
    ("mul", lambda x: _weighted(x * x * _C), _normal((3, 4))),
    ("div_numerator", lambda x: _weighted(x / (1.0 + _C * _C)), _normal((3, 4))),
    ("div_denominator", lambda x: _weighted(_C / x), _positive((3, 4))),
    ("neg", lambda x: _weighted(-(x * x)), _normal((3, 4))),
    ("exp", lambda x: _weighted(ad.exp(x)), _normal((3, 4))),
    ("log", lambda x: _weighted(ad.log(x)), _positive((3, 4))),
    ("sqrt", lambda x: _weighted(ad.sqrt(x)), _positive((3, 4))),
    ("abs", lambda x: _weighted(ad.tabs(x)), _away_from((3, 4), 0.0)),
    ("maximum", lambda x: _weighted(ad.maximum(x, 0.1)), _away_from((3, 4), 0.1)),
    ("sum_axis", lambda x: (ad.tsum(x * x, axis=0) * _ROW).sum(), _normal((3, 4))),
    ("mean_axis", lambda x: (ad.mean(x * x, axis=0, keepdims=True) * _ROW).sum(), _normal((3, 4))),
    ("reshape", lambda x: _weighted(ad.reshape(x * x, (4, 3)).reshape(3, 4)), _normal((3, 4))),
    ("transpose", lambda x: _weighted(ad.transpose(x * x, (1, 0)).T), _normal((3, 4))),
    ("swapaxes", lambda x: (ad.swapaxes(x * x, 0, 2) * rng(4).standard_normal((4, 3, 2))).sum(),
     _normal((2, 3, 4))),
    ("concat", lambda x: (ad.concat([x * x, x], axis=0) * rng(5).standard_normal((6, 4))).sum(),
     _normal((3, 4))),
    ("matmul_left", lambda x: (ad.matmul(x, _M) * rng(6).standard_normal((3, 5))).sum(),
     _normal((3, 4))),
    ("matmul_right", lambda x: (ad.matmul(_C, x) * rng(6).standard_normal((3, 5))).sum(),
     _normal((4, 5))),
    ("matmul_batched", lambda x: (x @ ad.swapaxes(x, -1, -2) * rng(7).standard_normal((2, 3, 3))).sum(),
     _normal((2, 3, 4))),
    ("softmax", lambda x: _weighted(ad.softmax(x, axis=-1)), _normal((3, 4))),
    ("log_softmax", lambda x: _weighted(ad.log_softmax(x, axis=0)), _normal((3, 4))),
    ("gelu", lambda x: _weighted(ad.gelu(x)), _normal((3, 4))),
    ("layer_norm", lambda x: _weighted(ad.layer_norm(x, _ROW, _ROW[::-1].copy())), _normal((3, 4))),
    ("layer_norm_gamma", lambda x: _weighted(ad.layer_norm(_C, x, _ROW)), _normal((4,))),
    ("layer_norm_beta", lambda x: _weighted(ad.layer_norm(_C, _ROW, x * x)), _normal((4,))),
]


# ---------------------------------------------------------------------------
# composed losses on the toy model, differentiated with respect to pixels
# ---------------------------------------------------------------------------

_CFG = ViTConfig()
_BATCH = 2


def _toy_models():
    params = init_params(_CFG, seed=11)
    r = rng(12)
    teacher = {k: v + 0.2 * r.standard_normal(v.shape) for k, v in params.items()}
    student = build_quantized(teacher, _CFG, w_bits=4, a_bits=8)
    # freeze activation ranges on an unrelated batch
    student.forward(rng(13).standard_normal((8, 3, 32, 32)) * 1.5, calibrate=True)
    return teacher, student


TEACHER, STUDENT = _toy_models()


def _pixels(seed):
    return rng(1000 + seed).standard_normal((_BATCH, _CFG.channels, _CFG.image_size, _CFG.image_size))


def pse_case(seed):
    x0 = _pixels(seed)
    _, hooks = model_forward(x0, TEACHER, _CFG, capture_hooks=True)
    bw = hook_bandwidths(hooks)  # bandwidths are constants under differentiation

    def loss(x):
        _, h = model_forward(x, TEACHER, _CFG, capture_hooks=True)
        return pse_loss(h, bw)
    return loss, x0


def _l_d(x):
    o_p, _ = model_forward(x, TEACHER, _CFG)
    # clip-valued forward: the function whose exact gradient the STE backward gives
    o_q = STUDENT.forward(x, ste_surrogate=True)
    return discrepancy_mae(o_q, o_p)


def discrepancy_case(seed):
    return _l_d, _pixels(seed)


def generator_case(seed, alpha=1.0):
    pse, x0 = pse_case(seed)
    return (lambda x: generator_loss(pse(x), _l_d(x), alpha)), x0


COMPOSED = [("L_PSE", pse_case), ("L_D", discrepancy_case), ("L_G", generator_case)]


def primitive_errors(fn, draw):
    return [full_check(fn, draw(seed)) for seed in range(N_POINTS)]


def composed_errors(make):
    errs = []
    for seed in range(N_POINTS):
        fn, x0 = make(seed)
        errs.append(directional_check(fn, x0, seed=seed))
    return errs
