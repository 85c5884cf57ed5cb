import os
import struct

import numpy as np
import pytest

from dfq_vit.checkpoint import (MAGIC, CheckpointError, CorruptCheckpoint, UnsupportedVersion,
                                atomic_write, decode, encode, load_checkpoint, quant_state,
                                save_checkpoint, save_student)
from dfq_vit.quantizer import build_quantized
from dfq_vit.vit import ViTConfig, model_forward

from conftest import rng


def test_float_round_trip_is_byte_identical(tmp_path, toy_config, random_params):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, random_params, toy_config)
    ck = load_checkpoint(a)
    save_checkpoint(b, ck.params, ck.config)
    assert a.read_bytes() == b.read_bytes()
    assert ck.config == toy_config and ck.quant is None
    assert all(np.array_equal(ck.params[k], random_params[k]) for k in random_params)


def test_loaded_model_gives_identical_logits(tmp_path, toy_config, random_params):
    save_checkpoint(tmp_path / "m.ckpt", random_params, toy_config)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    img = rng(1).standard_normal((2, 3, 32, 32))
    assert np.array_equal(model_forward(img, ck.params, ck.config)[0].data,
                          model_forward(img, random_params, toy_config)[0].data)


def test_quantized_round_trip(tmp_path, toy_config, random_params):
    model = build_quantized(random_params, toy_config, 4, 8, "ema", 0.8)
    model.forward(rng(2).standard_normal((2, 3, 32, 32)), calibrate=True)
    save_student(tmp_path / "q.ckpt", model)
    restored = load_checkpoint(tmp_path / "q.ckpt").quantized_model()
    img = rng(3).standard_normal((2, 3, 32, 32))
    assert np.array_equal(restored.forward(img).data, model.forward(img).data)
    assert restored.calibration == "ema" and restored.momentum == 0.8
    save_student(tmp_path / "r.ckpt", restored)
    assert (tmp_path / "q.ckpt").read_bytes() == (tmp_path / "r.ckpt").read_bytes()


def test_uncalibrated_sites_survive(toy_config, random_params):
    model = build_quantized(random_params, toy_config, 4, 8)
    ck = decode(encode(toy_config, random_params, quant_state(model)))
    assert all(r is None for r in ck.quant.act_ranges.values())


def test_float_checkpoint_has_no_student(toy_config, random_params):
    with pytest.raises(CheckpointError):
        decode(encode(toy_config, random_params)).quantized_model()


@pytest.mark.parametrize("cut", [0, 3, 10, 40, -1])
def test_truncation_detected(toy_config, random_params, cut):
    data = encode(toy_config, random_params)
    with pytest.raises(CorruptCheckpoint):
        decode(data[:cut] if cut >= 0 else data[:-1])


def test_trailing_bytes_detected(toy_config, random_params):
    with pytest.raises(CorruptCheckpoint):
        decode(encode(toy_config, random_params) + b"\0")


def test_bad_magic(toy_config, random_params):
    with pytest.raises(CorruptCheckpoint):
        decode(b"XXXX" + encode(toy_config, random_params)[4:])


def test_future_version_rejected(toy_config, random_params):
    data = encode(toy_config, random_params)
    with pytest.raises(UnsupportedVersion):
        decode(MAGIC + struct.pack("<I", 99) + data[8:])


def test_mismatched_shapes_rejected(toy_config, random_params):
    other = ViTConfig(depth=1)
    data = bytearray(encode(toy_config, random_params))
    data[8:36] = struct.pack("<7I", *(getattr(other, f) for f in
                                       ("image_size", "channels", "patch_size", "depth",
                                        "heads", "head_dim", "n_classes")))
    with pytest.raises(CheckpointError):
        decode(bytes(data))


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "out.bin"
    target.write_bytes(b"old")

    def boom(*a):
        raise OSError("disk full")
    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write(target, b"new")
    assert target.read_bytes() == b"old"
    assert os.listdir(tmp_path) == ["out.bin"]


def test_missing_file(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "absent.ckpt")
