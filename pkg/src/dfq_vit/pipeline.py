"""Data-free quantization loop: alternate sample generation and student learning.

Each cycle first pushes a batch of synthetic images (initialized from
Gaussian noise) towards higher patch-similarity entropy in the teacher and
larger teacher/student disagreement, then trains the fake-quantized student
to match the teacher on augmented views of that batch.

Random streams all come from numpy's Philox-4x64 counter-based generator,
keyed by ``(seed, purpose, cycle, step)`` so runs reproduce exactly on any
platform numpy supports.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import GradTape
from .losses import discrepancy_mae, generator_loss, kld_discrepancy, pse_loss
from .optim import AdamState, adam_step
from .quantizer import QuantizedModel, build_quantized
from .vit import ViTConfig, ViTParams, model_forward, predict

# stream tags for the keyed generators
_NOISE, _AUGMENT = 1, 2


class PipelineError(RuntimeError):
    pass


class GenerationError(PipelineError):
    def __init__(self, cycle: int, step: int, value: float):
        super().__init__(f"generator loss became {value} at cycle {cycle}, step {step}")
        self.cycle, self.step = cycle, step


class LearningError(PipelineError):
    def __init__(self, cycle: int, step: int, value: float):
        super().__init__(f"quantization loss became {value} at cycle {cycle}, step {step}")
        self.cycle, self.step = cycle, step


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: Tuple[float, float] = (0.5, 1.0)
    flip_p: float = 0.5
    jitter: bool = True
    contrast: Tuple[float, float] = (0.6, 1.4)
    brightness: Tuple[float, float] = (-0.2, 0.2)
    blur_p: float = 0.5
    blur_sigma: Tuple[float, float] = (0.1, 1.0)

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(crop_scale=(1.0, 1.0), flip_p=0.0, jitter=False, blur_p=0.0)


@dataclass(frozen=True)
class PipelineConfig:
    iterations: int = 20
    g_step: int = 50
    q_step: int = 50
    lr_g: float = 0.2
    lr_q: float = 1e-4
    alpha: float = 1.0
    batch: int = 32
    weight_decay: float = 1e-4
    seed: int = 0
    w_bits: int = 4
    a_bits: int = 8
    calibration: str = "minmax"
    ema_momentum: float = 0.9
    use_pse: bool = True
    discrepancy: str = "mae"
    kl_temperature: float = 1.0
    reset_pixel_adam: bool = True
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.iterations < 0 or self.g_step < 0 or self.q_step < 0:
            raise ConfigError("iterations, g_step and q_step must be non-negative")
        if self.batch < 1:
            raise ConfigError("batch must be at least 1")
        if self.calibration not in ("minmax", "ema"):
            raise ConfigError(f"calibration must be minmax or ema, got {self.calibration!r}")
        if self.discrepancy not in ("mae", "kl"):
            raise ConfigError(f"discrepancy must be mae or kl, got {self.discrepancy!r}")
        for bits in (self.w_bits, self.a_bits):
            if not 1 <= bits <= 16:
                raise ConfigError(f"bit-widths must be in [1, 16], got {bits}")

    @property
    def sample_budget(self) -> int:
        return self.iterations * self.q_step * self.batch


@dataclass
class MetricsRecord:
    cycle: int
    stage: str
    step: int
    loss_pse: Optional[float] = None
    loss_d: Optional[float] = None
    loss_g: Optional[float] = None
    loss_q: Optional[float] = None
    wall_ms: Optional[float] = None


@dataclass
class PipelineResult:
    student: QuantizedModel
    metrics: List[MetricsRecord]
    samples: np.ndarray
    samples_seen: int


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_mix(seed, *key)))


def _mix(*parts: int) -> int:
    # SeedSequence spreads the tuple into a full 128-bit Philox key
    words = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts]).generate_state(2, np.uint64)
    return int(words[0]) | (int(words[1]) << 64)


def init_noise(config: ViTConfig, batch: int, seed: int) -> np.ndarray:
    """i.i.d. N(0, 1) pixels of shape [batch, C, S, S]."""
    rng = keyed_rng(seed, _NOISE)
    return rng.standard_normal((batch, config.channels, config.image_size, config.image_size))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _interp_matrix(size: int, start: float, span: float) -> np.ndarray:
    """Bilinear (corner-aligned) resampling of the window [start, start+span) to ``size`` pixels."""
    pos = start + np.arange(size) * ((span - 1.0) / (size - 1) if size > 1 else 0.0)
    lo = np.minimum(np.floor(pos).astype(int), size - 1)
    hi = np.minimum(lo + 1, size - 1)
    frac = pos - lo
    m = np.zeros((size, size))
    m[np.arange(size), lo] += 1.0 - frac
    m[np.arange(size), hi] += frac
    return m


def _blur3(img: np.ndarray, sigma: float) -> np.ndarray:
    k = np.exp(-0.5 * (np.arange(-1, 2) / sigma) ** 2)
    k /= k.sum()
    p = np.pad(img, ((0, 0), (1, 1), (0, 0)), mode="edge")
    img = k[0] * p[:, :-2] + k[1] * p[:, 1:-1] + k[2] * p[:, 2:]
    p = np.pad(img, ((0, 0), (0, 0), (1, 1)), mode="edge")
    return k[0] * p[:, :, :-2] + k[1] * p[:, :, 1:-1] + k[2] * p[:, :, 2:]


def augment(images: np.ndarray, seed: int, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random resized crop, flip, per-channel colour jitter and 3x3 blur.

    Works on unconstrained real pixels; not differentiable.
    """
    B, C, S, _ = images.shape
    rng = keyed_rng(seed, _AUGMENT)
    out = np.empty_like(images)
    for i in range(B):
        img = images[i]
        scale = rng.uniform(*cfg.crop_scale)
        side = min(S, max(1.0, S * math.sqrt(scale)))
        top = rng.uniform(0.0, S - side)
        left = rng.uniform(0.0, S - side)
        img = _interp_matrix(S, top, side) @ img @ _interp_matrix(S, left, side).T
        if rng.uniform() < cfg.flip_p:
            img = img[:, :, ::-1]
        if cfg.jitter:
            gain = rng.uniform(*cfg.contrast, size=(C, 1, 1))
            shift = rng.uniform(*cfg.brightness, size=(C, 1, 1))
            img = img * gain + shift
        if rng.uniform() < cfg.blur_p:
            img = _blur3(img, rng.uniform(*cfg.blur_sigma))
        out[i] = img
    return out


# ---------------------------------------------------------------------------
# the two stages
# ---------------------------------------------------------------------------

@dataclass
class Teacher:
    params: ViTParams
    config: ViTConfig

    def __call__(self, images, capture_hooks: bool = False):
        return model_forward(images, self.params, self.config, capture_hooks=capture_hooks)


def _discrepancy(cfg: PipelineConfig):
    if cfg.discrepancy == "kl":
        return lambda o_q, o_p: kld_discrepancy(o_q, o_p, cfg.kl_temperature)
    return discrepancy_mae


def stage1_generate(teacher: Teacher, student: QuantizedModel, pixels: np.ndarray,
                    cfg: PipelineConfig, cycle: int = 0, state: Optional[AdamState] = None,
                    record: Optional[Callable[[MetricsRecord], None]] = None) -> np.ndarray:
    """Update only the pixels, by gradient descent on the generator loss."""
    pixels = pixels.copy()
    state = AdamState() if state is None else state
    disc = _discrepancy(cfg)
    needs_student = cfg.alpha != 0.0
    for step in range(cfg.g_step):
        t0 = time.perf_counter()
        if not np.all(np.isfinite(pixels)):
            raise GenerationError(cycle, step, float("nan"))
        with GradTape() as tape:
            x = tape.watch(pixels)
            o_p, hooks = teacher(x, capture_hooks=cfg.use_pse)
            l_pse = pse_loss(hooks) if cfg.use_pse else ad.Tensor(0.0)
            if needs_student:
                l_d = disc(student(x), o_p)
            else:
                # logged only; stays off the tape so it cannot steer the pixels
                l_d = disc(student(pixels), o_p.detach())
            l_g = generator_loss(l_pse, l_d if needs_student else 0.0, cfg.alpha)
        value = l_g.item() if isinstance(l_g, ad.Tensor) else float(l_g)
        if not math.isfinite(value):
            raise GenerationError(cycle, step, value)
        if tape.owns(l_g):
            grad = tape.backward(l_g, [x])[x.node].data
            adam_step({"pixels": pixels}, {"pixels": grad}, state, cfg.lr_g)
        if record is not None:
            record(MetricsRecord(cycle, "generate", step, l_pse.item(), l_d.item(), value, None,
                                 (time.perf_counter() - t0) * 1e3))
    return pixels


def stage2_learn(teacher: Teacher, student: QuantizedModel, pixels: np.ndarray,
                 cfg: PipelineConfig, state: AdamState, cycle: int = 0,
                 record: Optional[Callable[[MetricsRecord], None]] = None) -> int:
    """Train the student's shadow weights on augmented views; returns samples used."""
    disc = _discrepancy(cfg)
    used = 0
    for step in range(cfg.q_step):
        t0 = time.perf_counter()
        view = augment(pixels, _mix(cfg.seed, cycle, step), cfg.augment)
        o_p, _ = teacher(view)
        student.recalibrate_weights()
        with GradTape() as tape:
            watched = {k: tape.watch(v) for k, v in student.params.items()}
            l_q = disc(student.forward(view, params=watched, calibrate=True), o_p)
        value = l_q.item()
        if not math.isfinite(value):
            raise LearningError(cycle, step, value)
        grads = tape.backward(l_q, list(watched.values()))
        adam_step(student.params, {k: grads[t.node].data for k, t in watched.items()},
                  state, cfg.lr_q, cfg.weight_decay)
        used += len(view)
        if record is not None:
            record(MetricsRecord(cycle, "learn", step, None, None, None, value,
                                 (time.perf_counter() - t0) * 1e3))
    student.recalibrate_weights()
    return used


def run_pipeline(teacher_params: ViTParams, teacher_config: ViTConfig, cfg: PipelineConfig,
                 student_params: Optional[ViTParams] = None,
                 student_config: Optional[ViTConfig] = None,
                 log: Optional[Callable[[str], None]] = None) -> PipelineResult:
    """Quantize a student (by default a copy of the teacher) without any real data."""
    student_config = student_config or teacher_config
    if student_config.n_classes != teacher_config.n_classes:
        raise ConfigError(f"teacher emits {teacher_config.n_classes} logits, "
                          f"student {student_config.n_classes}")
    if student_params is None:
        if student_config != teacher_config:
            raise ConfigError("a student with its own architecture needs its own weights")
        student_params = teacher_params
    teacher = Teacher(teacher_params, teacher_config)
    student = build_quantized(student_params, student_config, cfg.w_bits, cfg.a_bits,
                              cfg.calibration, cfg.ema_momentum)
    if teacher_config.image_size != student_config.image_size or \
            teacher_config.channels != student_config.channels:
        raise ConfigError("teacher and student must read the same image shape")

    metrics: List[MetricsRecord] = []
    pixels = init_noise(teacher_config, cfg.batch, cfg.seed)
    student_state = AdamState()
    pixel_state = AdamState()
    seen = 0
    for cycle in range(cfg.iterations):
        if cfg.reset_pixel_adam:
            pixel_state = AdamState()
        pixels = stage1_generate(teacher, student, pixels, cfg, cycle, pixel_state, metrics.append)
        seen += stage2_learn(teacher, student, pixels, cfg, student_state, cycle, metrics.append)
        if log is not None:
            gen = [m for m in metrics if m.cycle == cycle and m.stage == "generate"]
            learn = [m for m in metrics if m.cycle == cycle and m.stage == "learn"]
            msg = f"cycle {cycle}"
            if gen:
                msg += f": L_pse {gen[-1].loss_pse:.4f} L_d {gen[-1].loss_d:.4f}"
            if learn:
                msg += f" L_q {learn[0].loss_q:.4f}->{learn[-1].loss_q:.4f}"
            log(msg)
    _fill_missing_ranges(student, pixels)
    return PipelineResult(student, metrics, pixels, seen)


def _fill_missing_ranges(student: QuantizedModel, pixels: np.ndarray) -> None:
    # with no learning steps nothing was calibrated yet; use the final batch
    if any(q.range is None for q in student.act_quantizers.values()):
        student.forward(pixels, calibrate=True)


def minmax_baseline(params: ViTParams, config: ViTConfig, cfg: PipelineConfig) -> QuantizedModel:
    """MinMax-quantized model calibrated on the initial noise batch only."""
    student = build_quantized(params, config, cfg.w_bits, cfg.a_bits, cfg.calibration,
                              cfg.ema_momentum)
    student.forward(init_noise(config, cfg.batch, cfg.seed), calibrate=True)
    return student


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def logits_of(model, images: np.ndarray, config: Optional[ViTConfig] = None,
              batch_size: int = 256) -> np.ndarray:
    if isinstance(model, QuantizedModel):
        return np.concatenate([model.forward(images[i:i + batch_size]).data
                               for i in range(0, len(images), batch_size)])
    if callable(model):
        return np.asarray(model(images))
    if config is None:
        raise TypeError("full-precision parameters need their ViTConfig")
    return predict(images, model, config, batch_size)


def evaluate(model, images: np.ndarray, labels: np.ndarray,
             config: Optional[ViTConfig] = None) -> float:
    """Top-1 accuracy.  ``model`` is a QuantizedModel, a parameter map or a logits function."""
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    pred = logits_of(model, images, config).argmax(axis=-1)
    return float((pred == np.asarray(labels)).mean())


def ablation_configs(base: PipelineConfig) -> Dict[str, PipelineConfig]:
    """Which losses steer generation: none, discrepancy only, entropy only, both."""
    return {
        "noise-only": replace(base, g_step=0),
        "D-only": replace(base, use_pse=False, alpha=base.alpha or 1.0),
        "PSE-only": replace(base, alpha=0.0),
        "PSE+D": base,
    }
