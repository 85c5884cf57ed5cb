"""File outputs: PPM sample images, metrics CSV and patch-similarity density curves."""
from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from .checkpoint import atomic_write
from .losses import GRID_POINTS, KernelDensity, block_entropies, patch_similarity
from .pipeline import MetricsRecord
from .vit import ViTConfig, ViTParams, model_forward

METRICS_HEADER = ("cycle", "stage", "step", "loss_pse", "loss_d", "loss_g", "loss_q", "wall_ms")
DENSITY_HEADER = ("block", "x", "f")
SPREAD = 3.0  # export window is mean +- SPREAD * std per image

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map ``[mu - 3 sigma, mu + 3 sigma]`` of one image onto [0, 255]."""
    image = np.asarray(image, dtype=np.float64)
    mu, sigma = image.mean(), image.std()
    if not sigma > 0:
        return np.full(image.shape, 128, dtype=np.uint8)
    scaled = (image - (mu - SPREAD * sigma)) * (255.0 / (2 * SPREAD * sigma))
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def ppm_bytes(image: np.ndarray) -> bytes:
    """Binary P6 encoding of a ``[C, H, W]`` image; one channel is replicated to grey."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(f"expected a [1 or 3, H, W] image, got shape {image.shape}")
    pixels = to_uint8(image)
    if pixels.shape[0] == 1:
        pixels = np.repeat(pixels, 3, axis=0)
    _, h, w = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.transpose(1, 2, 0).tobytes()


def export_samples(images: np.ndarray, out_dir: PathLike) -> List[Path]:
    """Write ``sample_<idx>.ppm`` for each image of a ``[B, C, H, W]`` batch."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(np.asarray(images)):
        path = out_dir / f"sample_{i}.ppm"
        atomic_write(path, ppm_bytes(img))
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write(path, _csv_text(header, rows).encode("utf-8"))


def metrics_csv(records: Iterable[MetricsRecord], wall_clock: bool = False) -> str:
    """One row per optimization step.

    ``wall_ms`` is left empty unless ``wall_clock`` is set, so the default
    output is a deterministic function of the run.
    """
    rows = ((m.cycle, m.stage, m.step, m.loss_pse, m.loss_d, m.loss_g, m.loss_q,
             m.wall_ms if wall_clock else None) for m in records)
    return _csv_text(METRICS_HEADER, rows)


def write_metrics(records: Iterable[MetricsRecord], path: PathLike, wall_clock: bool = False) -> None:
    atomic_write(path, metrics_csv(records, wall_clock).encode("utf-8"))


def read_metrics(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# density curves
# ---------------------------------------------------------------------------

def curve_grid(kd: KernelDensity, points: int = GRID_POINTS) -> np.ndarray:
    """``points`` evenly spaced abscissae over the same support as the entropy grid."""
    return np.linspace(kd.grid[0], kd.grid[-1], points)


def block_densities(params: ViTParams, config: ViTConfig, inputs: np.ndarray) -> List[KernelDensity]:
    """KDE of each block's patch similarities, pooled over the whole batch."""
    _, hooks = model_forward(inputs, params, config, capture_hooks=True)
    return [KernelDensity.fit(patch_similarity(o).data.ravel()) for o in hooks]


def mean_block_entropies(params: ViTParams, config: ViTConfig, inputs: np.ndarray) -> List[float]:
    """Per block, the batch mean of each sample's similarity entropy."""
    _, hooks = model_forward(inputs, params, config, capture_hooks=True)
    return [e.item() for e in block_entropies(hooks)]


def density_curves(params: ViTParams, config: ViTConfig, inputs: np.ndarray,
                   out_csv: Optional[PathLike] = None) -> str:
    """``block,x,f`` rows: GRID_POINTS samples of each block's density."""
    rows = []
    for l, kd in enumerate(block_densities(params, config, inputs)):
        xs = curve_grid(kd)
        rows += [(l, float(x), float(f)) for x, f in zip(xs, kd.density(xs))]
    text = _csv_text(DENSITY_HEADER, rows)
    if out_csv is not None:
        atomic_write(out_csv, text.encode("utf-8"))
    return text
