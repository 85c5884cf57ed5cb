"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PSAQ"  u32 version
    ViTConfig: 7 x u32 (image_size, channels, patch_size, depth, heads, head_dim, n_classes)
    u32 tensor count, then per tensor:
        u32 name length, UTF-8 name, u32 rank, rank x u64 dims, f64 payload (C order)
    u8 quantizer flag; if 1:
        u32 w_bits, u32 a_bits, u8 calibration (0 minmax, 1 ema), f64 momentum
        u32 weight count, per weight: name, f64 q0, f64 qmax
        u32 site count, per site: name, u8 calibrated, f64 lo, f64 hi

Files are written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from .quantizer import SYMMETRIC, QuantizedModel, QuantParams
from .vit import ViTConfig, ViTParams, validate_params

MAGIC = b"PSAQ"
VERSION = 1
_CALIBRATION_CODES = {"minmax": 0, "ema": 1}


class CheckpointError(ValueError):
    pass


class CorruptCheckpoint(CheckpointError):
    """Truncated, trailing or otherwise malformed bytes."""


class UnsupportedVersion(CheckpointError):
    pass


@dataclass
class QuantState:
    w_bits: int
    a_bits: int
    calibration: str
    momentum: float
    weight_ranges: Dict[str, Tuple[float, float]]
    act_ranges: Dict[str, Optional[Tuple[float, float]]]


@dataclass
class Checkpoint:
    config: ViTConfig
    params: ViTParams
    quant: Optional[QuantState] = None

    def quantized_model(self) -> QuantizedModel:
        if self.quant is None:
            raise CheckpointError("checkpoint has no quantizer section")
        q = self.quant
        model = QuantizedModel(self.params, self.config, q.w_bits, q.a_bits, q.calibration, q.momentum)
        model.weight_qparams = {name: QuantParams(q.w_bits, lo, hi, SYMMETRIC)
                                for name, (lo, hi) in q.weight_ranges.items()}
        for site, rng in q.act_ranges.items():
            model.act_quantizers[site].range = rng
        return model


def quant_state(model: QuantizedModel) -> QuantState:
    return QuantState(
        model.w_bits, model.a_bits, model.calibration, model.momentum,
        {name: (qp.q0, qp.qmax) for name, qp in model.weight_qparams.items()},
        {site: q.range for site, q in model.act_quantizers.items()},
    )


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def _name(buf: io.BytesIO, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def encode(config: ViTConfig, params: ViTParams, quant: Optional[QuantState] = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<7I", *(getattr(config, f.name) for f in fields(ViTConfig))))
    buf.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = np.asarray(value, dtype="<f8")
        _name(buf, name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    if quant is None:
        buf.write(b"\x00")
        return buf.getvalue()
    buf.write(b"\x01")
    buf.write(struct.pack("<IIBd", quant.w_bits, quant.a_bits,
                          _CALIBRATION_CODES[quant.calibration], quant.momentum))
    buf.write(struct.pack("<I", len(quant.weight_ranges)))
    for name, (lo, hi) in quant.weight_ranges.items():
        _name(buf, name)
        buf.write(struct.pack("<dd", lo, hi))
    buf.write(struct.pack("<I", len(quant.act_ranges)))
    for site, rng in quant.act_ranges.items():
        _name(buf, site)
        lo, hi = rng if rng is not None else (0.0, 0.0)
        buf.write(struct.pack("<Bdd", rng is not None, lo, hi))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpoint(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpoint(f"bad tensor name: {e}") from None


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptCheckpoint("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersion(f"checkpoint version {version}, this build reads {VERSION}")
    try:
        config = ViTConfig(*r.unpack("<7I"))
    except ValueError as e:
        raise CorruptCheckpoint(f"bad model config: {e}") from None
    (count,) = r.unpack("<I")
    params: ViTParams = {}
    for _ in range(count):
        name = r.name()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    quant = None
    (flag,) = r.unpack("<B")
    if flag == 1:
        w_bits, a_bits, code, momentum = r.unpack("<IIBd")
        calibration = {v: k for k, v in _CALIBRATION_CODES.items()}.get(code)
        if calibration is None:
            raise CorruptCheckpoint(f"unknown calibration code {code}")
        (nw,) = r.unpack("<I")
        weights = {}
        for _ in range(nw):
            name = r.name()
            weights[name] = r.unpack("<dd")
        (na,) = r.unpack("<I")
        acts = {}
        for _ in range(na):
            site = r.name()
            has, lo, hi = r.unpack("<Bdd")
            acts[site] = (lo, hi) if has else None
        quant = QuantState(w_bits, a_bits, calibration, momentum, weights, acts)
    elif flag != 0:
        raise CorruptCheckpoint(f"bad quantizer flag {flag}")
    if r.pos != len(data):
        raise CorruptCheckpoint(f"{len(data) - r.pos} trailing bytes")
    try:
        validate_params(params, config)
    except ValueError as e:
        raise CorruptCheckpoint(str(e)) from None
    return Checkpoint(config, params, quant)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def atomic_write(path: Union[str, Path], data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: Union[str, Path], params: ViTParams, config: ViTConfig,
                    quant: Union[QuantState, QuantizedModel, None] = None) -> None:
    validate_params(params, config)
    if isinstance(quant, QuantizedModel):
        quant = quant_state(quant)
    atomic_write(path, encode(config, params, quant))


def save_student(path: Union[str, Path], model: QuantizedModel) -> None:
    save_checkpoint(path, model.params, model.config, model)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    return decode(Path(path).read_bytes())
