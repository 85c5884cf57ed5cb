"""A small plain vision transformer (no class token, mean-pooled head).

Parameters live in a flat ``{name: ndarray}`` mapping so they serialize
directly into checkpoints.  The forward pass optionally threads every
linear layer through a quantization context (see ``quantizer.py``) and
collects each block's pre-concat attention head outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape, Tensor

ViTParams = Dict[str, np.ndarray]
MsaHooks = List[Tensor]

MLP_RATIO = 4
INIT_STD = 0.02


class TrainingError(RuntimeError):
    """Training diverged."""


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    depth: int = 2
    heads: int = 4
    head_dim: int = 8
    n_classes: int = 4

    def __post_init__(self):
        for name in ("image_size", "channels", "patch_size", "depth", "heads", "head_dim", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"ViTConfig.{name} must be positive")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.n_patches < 4:
            raise ValueError(f"need at least 4 patches, got {self.n_patches}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def width(self) -> int:
        return self.heads * self.head_dim

    @property
    def mlp_hidden(self) -> int:
        return MLP_RATIO * self.width

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2


def param_shapes(config: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape for every learnable tensor, in canonical order."""
    D, N = config.width, config.n_patches
    shapes = {
        "patch_embed.weight": (config.patch_dim, D),
        "patch_embed.bias": (D,),
        "pos_embed": (N, D),
    }
    for l in range(config.depth):
        p = f"blocks.{l}."
        shapes.update({
            p + "ln1.gamma": (D,), p + "ln1.beta": (D,),
            p + "attn.q.weight": (D, D), p + "attn.k.weight": (D, D), p + "attn.v.weight": (D, D),
            p + "attn.proj.weight": (D, D),
            p + "ln2.gamma": (D,), p + "ln2.beta": (D,),
            p + "mlp.fc1.weight": (D, config.mlp_hidden), p + "mlp.fc1.bias": (config.mlp_hidden,),
            p + "mlp.fc2.weight": (config.mlp_hidden, D), p + "mlp.fc2.bias": (D,),
        })
    shapes.update({
        "norm.gamma": (D,), "norm.beta": (D,),
        "head.weight": (D, config.n_classes), "head.bias": (config.n_classes,),
    })
    return shapes


def is_matmul_weight(name: str) -> bool:
    """True for the projection matrices that get weight quantizers."""
    return name.endswith(".weight")


def activation_sites(config: ViTConfig) -> List[str]:
    """Every matmul operand site: the input and output of each linear layer.

    The query/key/value projections read the same normalized input, so they
    share one input site.
    """
    sites = ["patch_embed.in", "patch_embed.out"]
    for l in range(config.depth):
        p = f"blocks.{l}."
        sites += [p + "attn.qkv.in", p + "attn.q.out", p + "attn.k.out", p + "attn.v.out",
                  p + "attn.proj.in", p + "attn.proj.out",
                  p + "mlp.fc1.in", p + "mlp.fc1.out", p + "mlp.fc2.in", p + "mlp.fc2.out"]
    return sites + ["head.in", "head.out"]


def init_params(config: ViTConfig, seed: int = 0) -> ViTParams:
    rng = np.random.Generator(np.random.Philox(seed))
    params: ViTParams = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            params[name] = np.ones(shape)
        elif name.endswith((".bias", ".beta")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, INIT_STD, size=shape)
    return params


def validate_params(params: Mapping[str, np.ndarray], config: ViTConfig) -> None:
    expected = param_shapes(config)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ValueError(f"parameter names mismatch: missing={missing} extra={extra}")
    for name, shape in expected.items():
        arr = np.asarray(params[name])
        if arr.shape != shape:
            raise ad.ShapeError(f"{name}: expected {shape}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} has non-finite values")


class FloatOps:
    """Identity quantization context: the full-precision forward pass."""

    def act(self, site: str, x: Tensor) -> Tensor:
        return x

    def weight(self, name: str, w: Tensor) -> Tensor:
        return w


_FLOAT = FloatOps()

ParamLike = Union[np.ndarray, Tensor]


def _linear(x: Tensor, params, layer: str, ops, bias: bool = True) -> Tensor:
    x = ops.act(layer + ".in", x)
    y = x @ ops.weight(layer + ".weight", ad.as_tensor(params[layer + ".weight"]))
    if bias:
        y = y + params[layer + ".bias"]
    return ops.act(layer + ".out", y)


def patch_embed(image: ParamLike, params: Mapping[str, ParamLike], config: ViTConfig,
                ops=_FLOAT) -> Tensor:
    """[B, C, S, S] -> [B, N, D]; patches are flattened in (C, row, col) order."""
    image = ad.as_tensor(image)
    B = image.shape[0]
    if image.shape[1:] != (config.channels, config.image_size, config.image_size):
        raise ad.ShapeError(
            f"expected images of shape (B, {config.channels}, {config.image_size}, "
            f"{config.image_size}), got {image.shape}")
    g, p, C = config.grid, config.patch_size, config.channels
    patches = image.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    patches = patches.reshape(B, g * g, C * p * p)
    x = _linear(patches, params, "patch_embed", ops)
    return x + params["pos_embed"]


def block_view(params: Mapping[str, ParamLike], l: int) -> Dict[str, ParamLike]:
    prefix = f"blocks.{l}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


class _Prefixed:
    """Routes local site names of one block to globally unique ones."""

    def __init__(self, ops, prefix: str):
        self.ops, self.prefix = ops, prefix

    def act(self, site, x):
        return self.ops.act(self.prefix + site, x)

    def weight(self, name, w):
        return self.ops.weight(self.prefix + name, w)


def msa_forward(x: Tensor, bp: Mapping[str, ParamLike], config: ViTConfig,
                hooks: Optional[MsaHooks] = None, ops=_FLOAT) -> Tensor:
    """Multi-head self-attention on an already normalized input."""
    B, N, D = x.shape
    H, dh = config.heads, config.head_dim
    x = ops.act("attn.qkv.in", x)

    def project(layer):
        y = x @ ops.weight(layer + ".weight", ad.as_tensor(bp[layer + ".weight"]))
        y = ops.act(layer + ".out", y)
        return y.reshape(B, N, H, dh).transpose(0, 2, 1, 3)

    q, k, v = project("attn.q"), project("attn.k"), project("attn.v")
    attn = ad.softmax((q @ k.T) * (1.0 / math.sqrt(dh)), axis=-1)
    heads = attn @ v
    if hooks is not None:
        hooks.append(heads)
    merged = heads.transpose(0, 2, 1, 3).reshape(B, N, D)
    return _linear(merged, bp, "attn.proj", ops, bias=False)


def mlp_forward(x: Tensor, bp: Mapping[str, ParamLike], ops=_FLOAT) -> Tensor:
    h = ad.gelu(_linear(x, bp, "mlp.fc1", ops))
    return _linear(h, bp, "mlp.fc2", ops)


def block_forward(x: Tensor, bp: Mapping[str, ParamLike], config: ViTConfig,
                  hooks: Optional[MsaHooks] = None, ops=_FLOAT) -> Tensor:
    x_hat = x + msa_forward(ad.layer_norm(x, bp["ln1.gamma"], bp["ln1.beta"]), bp, config, hooks, ops)
    return x_hat + mlp_forward(ad.layer_norm(x_hat, bp["ln2.gamma"], bp["ln2.beta"]), bp, ops)


def model_forward(image: ParamLike, params: Mapping[str, ParamLike], config: ViTConfig,
                  capture_hooks: bool = False, ops=_FLOAT) -> Tuple[Tensor, Optional[MsaHooks]]:
    """Logits ``[B, n_classes]`` and, if requested, the per-block head outputs."""
    hooks: Optional[MsaHooks] = [] if capture_hooks else None
    x = patch_embed(image, params, config, ops)
    for l in range(config.depth):
        x = block_forward(x, block_view(params, l), config, hooks, _Prefixed(ops, f"blocks.{l}."))
    x = ad.layer_norm(x, params["norm.gamma"], params["norm.beta"])
    pooled = x.mean(axis=1)
    logits = _linear(pooled, params, "head", ops)
    return logits, hooks


def predict(images: np.ndarray, params: Mapping[str, ParamLike], config: ViTConfig,
            batch_size: int = 256, ops=_FLOAT) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        logits, _ = model_forward(images[i:i + batch_size], params, config, ops=ops)
        out.append(logits.data)
    return np.concatenate(out, axis=0)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.eye(logits.shape[-1])[labels]
    return -(ad.log_softmax(logits) * onehot).sum() / float(len(labels))


def pretrain_toy(config: ViTConfig, images: np.ndarray, labels: np.ndarray, epochs: int = 8,
                 lr: float = 1e-3, seed: int = 0, batch_size: int = 32,
                 init: Optional[ViTParams] = None, log=None) -> ViTParams:
    """Cross-entropy training with Adam from a seeded init; deterministic."""
    from .optim import Adam

    params = {k: v.copy() for k, v in (init or init_params(config, seed)).items()}
    opt = Adam(params, lr=lr)
    rng = np.random.Generator(np.random.Philox(seed + 1))
    n = len(images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = order[i:i + batch_size]
            with GradTape() as tape:
                watched = {k: tape.watch(v) for k, v in params.items()}
                logits, _ = model_forward(images[idx], watched, config)
                loss = cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.item()):
                raise TrainingError(f"loss became {loss.item()} in epoch {epoch}")
            grads = tape.backward(loss, list(watched.values()))
            opt.step({k: grads[t.node].data for k, t in watched.items()})
            total += loss.item() * len(idx)
        if log is not None:
            log(f"epoch {epoch}: loss {total / n:.4f}")
    return params
