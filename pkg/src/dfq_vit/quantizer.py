"""Uniform fake quantization, clipping-value calibration and the quantized ViT.

The integer grid follows ``round((clip(x, q0, qmax) - q0) / delta)`` with
``delta = (qmax - q0) / (2**k - 1)``; ties round half to even.  Gradients
through ``fake_quant`` use the clipped straight-through estimator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vit import ViTConfig, ViTParams, activation_sites, is_matmul_weight, model_forward

SYMMETRIC = "symmetric"
ASYMMETRIC = "asymmetric"
DEGENERATE_WIDEN = 1e-8
EMA_MOMENTUM = 0.9

Range = Tuple[float, float]


class QuantError(ValueError):
    """Invalid quantizer parameters or integer codes."""


@dataclass(frozen=True)
class QuantParams:
    k: int
    q0: float
    qmax: float
    scheme: str = ASYMMETRIC

    def __post_init__(self):
        if not 1 <= self.k <= 16:
            raise QuantError(f"bit-width must be in [1, 16], got {self.k}")
        if not self.qmax > self.q0:
            raise QuantError(f"need qmax > q0, got ({self.q0}, {self.qmax})")
        if self.scheme not in (SYMMETRIC, ASYMMETRIC):
            raise QuantError(f"unknown scheme {self.scheme!r}")
        if self.scheme == SYMMETRIC and self.q0 != -self.qmax:
            raise QuantError("symmetric scheme requires q0 == -qmax")
        object.__setattr__(self, "q0", float(self.q0))
        object.__setattr__(self, "qmax", float(self.qmax))
        object.__setattr__(self, "delta", (self.qmax - self.q0) / (2 ** self.k - 1))

    @property
    def levels(self) -> int:
        return 2 ** self.k

    @classmethod
    def from_range(cls, k: int, rng: Range, scheme: str = ASYMMETRIC) -> "QuantParams":
        return cls(k, rng[0], rng[1], scheme)


def quantize(x, qp: QuantParams) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    q = np.rint((np.clip(x, qp.q0, qp.qmax) - qp.q0) / qp.delta)
    return q.astype(np.int64)


def dequantize(q, qp: QuantParams) -> np.ndarray:
    q = np.asarray(q)
    if q.size and (q.min() < 0 or q.max() > qp.levels - 1):
        raise QuantError(f"integer codes must lie in [0, {qp.levels - 1}]")
    return q * qp.delta + qp.q0


def fake_quant(x, qp: QuantParams, ste_surrogate: bool = False) -> Tensor:
    """Quantize-dequantize with a clipped straight-through gradient.

    With ``ste_surrogate`` the forward value is ``clip(x, q0, qmax)`` instead:
    the function whose exact derivative the STE backward computes.  Only
    used to check gradients against finite differences.
    """
    x = ad.as_tensor(x)
    if ste_surrogate:
        out = np.clip(x.data, qp.q0, qp.qmax)
    else:
        out = dequantize(quantize(x.data, qp), qp)
    tape = ad._tracked(x)
    if tape is None:
        return Tensor(out)
    mask = (x.data >= qp.q0) & (x.data <= qp.qmax)
    return tape.record(out, (x,), lambda g: (g * mask,))


def calibrate_minmax(x, scheme: str = ASYMMETRIC) -> Range:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.size == 0:
        raise QuantError("cannot calibrate on an empty tensor")
    if scheme == SYMMETRIC:
        m = float(np.abs(x).max())
        lo, hi = -m, m
    else:
        lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        lo, hi = lo - DEGENERATE_WIDEN, hi + DEGENERATE_WIDEN
    return lo, hi


def calibrate_ema(prev: Optional[Range], observed: Range, momentum: float = EMA_MOMENTUM) -> Range:
    if not 0.0 <= momentum < 1.0:
        raise QuantError(f"momentum must be in [0, 1), got {momentum}")
    if prev is None:
        return observed
    return (momentum * prev[0] + (1.0 - momentum) * observed[0],
            momentum * prev[1] + (1.0 - momentum) * observed[1])


class ActQuantizer:
    """Clipping range for one activation site, with optional EMA smoothing."""

    def __init__(self, k: int, method: str = "minmax", momentum: float = EMA_MOMENTUM,
                 scheme: str = ASYMMETRIC):
        if method not in ("minmax", "ema"):
            raise QuantError(f"unknown calibration method {method!r}")
        self.k, self.method, self.momentum, self.scheme = k, method, momentum, scheme
        self.range: Optional[Range] = None

    def observe(self, x: np.ndarray) -> None:
        obs = calibrate_minmax(x, self.scheme)
        if self.method == "ema":
            self.range = calibrate_ema(self.range, obs, self.momentum)
        else:
            self.range = obs

    @property
    def params(self) -> QuantParams:
        if self.range is None:
            raise QuantError("activation quantizer used before calibration")
        return QuantParams.from_range(self.k, self.range, self.scheme)


class _QuantOps:
    def __init__(self, model: "QuantizedModel", calibrate: bool, ste_surrogate: bool):
        self.model, self.calibrate, self.ste_surrogate = model, calibrate, ste_surrogate

    def act(self, site: str, x: Tensor) -> Tensor:
        q = self.model.act_quantizers[site]
        if self.calibrate or q.range is None:
            q.observe(x.data)
        return fake_quant(x, q.params, self.ste_surrogate)

    def weight(self, name: str, w: Tensor) -> Tensor:
        return fake_quant(w, self.model.weight_qparams[name])


class QuantizedModel:
    """Fake-quantized student holding full-precision shadow weights."""

    def __init__(self, params: ViTParams, config: ViTConfig, w_bits: int, a_bits: int,
                 calibration: str = "minmax", momentum: float = EMA_MOMENTUM):
        for bits in (w_bits, a_bits):
            if not 1 <= bits <= 16:
                raise QuantError(f"bit-width must be in [1, 16], got {bits}")
        self.config = config
        self.params: ViTParams = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self.w_bits, self.a_bits = w_bits, a_bits
        self.calibration, self.momentum = calibration, momentum
        self.weight_qparams: Dict[str, QuantParams] = {}
        self.act_quantizers: Dict[str, ActQuantizer] = {
            site: ActQuantizer(a_bits, calibration, momentum) for site in activation_sites(config)
        }
        self.recalibrate_weights()

    def recalibrate_weights(self) -> None:
        self.weight_qparams = {
            name: QuantParams.from_range(self.w_bits, calibrate_minmax(w, SYMMETRIC), SYMMETRIC)
            for name, w in self.params.items() if is_matmul_weight(name)
        }

    def forward(self, images, params: Optional[Mapping] = None, calibrate: bool = False,
                ste_surrogate: bool = False) -> Tensor:
        """Fake-quantized logits.

        ``params`` may substitute tape-watched shadow weights; ``calibrate``
        refreshes every activation range from this batch first.
        """
        ops = _QuantOps(self, calibrate, ste_surrogate)
        logits, _ = model_forward(images, params if params is not None else self.params,
                                  self.config, ops=ops)
        return logits

    __call__ = forward

    def quantized_weights(self) -> Dict[str, np.ndarray]:
        return {name: dequantize(quantize(self.params[name], qp), qp)
                for name, qp in self.weight_qparams.items()}

    def copy(self) -> "QuantizedModel":
        other = QuantizedModel(self.params, self.config, self.w_bits, self.a_bits,
                               self.calibration, self.momentum)
        for site, q in self.act_quantizers.items():
            other.act_quantizers[site].range = q.range
        other.weight_qparams = dict(self.weight_qparams)
        return other


def build_quantized(fp: ViTParams, config: ViTConfig, w_bits: int, a_bits: int,
                    calibration: str = "minmax", momentum: float = EMA_MOMENTUM) -> QuantizedModel:
    return QuantizedModel(fp, config, w_bits, a_bits, calibration, momentum)


def model_size_mb(param_count: int, bits: int, megabyte: float = 2 ** 20) -> float:
    """Storage for ``param_count`` values at ``bits`` each."""
    return param_count * bits / (8 * megabyte)
