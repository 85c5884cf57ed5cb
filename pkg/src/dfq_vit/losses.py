"""Patch-similarity entropy and teacher/student discrepancy losses.

For one block's attention head outputs ``O`` of shape ``[B, H, N, d]`` the
per-sample patch similarity is the ``N x N`` matrix of cosines between the
flattened ``H*d`` vectors of each patch.  Its entries are treated as a 1-D
sample; a Gaussian kernel density estimate of that sample is integrated on a
fixed grid to get a differential entropy, which is differentiable in every
entry.  The bandwidth and the grid are constants with respect to gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NORM_FLOOR = 1e-12
BANDWIDTH_FLOOR = 1e-3
DENSITY_FLOOR = 1e-12
GRID_POINTS = 512
GRID_MARGIN = 4.0  # in bandwidths
# the grid is refined past GRID_POINTS so the spacing never exceeds h / 2
MAX_SPACING_IN_BANDWIDTHS = 0.5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_CHUNK_ELEMS = 4_000_000


class LossError(ValueError):
    pass


# ---------------------------------------------------------------------------
# patch similarity
# ---------------------------------------------------------------------------

def patch_similarity(o_l) -> Tensor:
    """Cosine similarity between patch vectors: ``[B, H, N, d] -> [B, N, N]``.

    The result is symmetrized so ``gamma[i, j] == gamma[j, i]`` holds exactly.
    """
    o_l = ad.as_tensor(o_l)
    if o_l.ndim != 4:
        raise ad.ShapeError(f"expected [B, H, N, d], got {o_l.shape}")
    B, H, N, d = o_l.shape
    u = o_l.transpose(0, 2, 1, 3).reshape(B, N, H * d)
    norms = ad.maximum(ad.sqrt((u * u).sum(axis=-1, keepdims=True)), NORM_FLOOR)
    unit = u / norms
    gamma = unit @ unit.T
    return (gamma + gamma.T) * 0.5


def reduction_factor(heads: int, head_dim: int, n_patches: int) -> float:
    """How much smaller ``N x N`` similarity is than the ``H x N x d`` head output."""
    return heads * head_dim / n_patches


# ---------------------------------------------------------------------------
# kernel density estimation
# ---------------------------------------------------------------------------

def silverman_rule(sigma: float, m: int) -> float:
    return max(1.06 * sigma * m ** (-0.2), BANDWIDTH_FLOOR)


def silverman_bandwidth(points) -> float:
    x = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64).ravel()
    if x.size == 0:
        raise LossError("bandwidth of an empty sample")
    sigma = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return silverman_rule(sigma, x.size)


def entropy_grid(h: float, lo: float = -1.0, hi: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Abscissae and trapezoid weights over ``[min(-1, lo) - 4h, max(1, hi) + 4h]``."""
    a = min(-1.0, lo) - GRID_MARGIN * h
    b = max(1.0, hi) + GRID_MARGIN * h
    q = max(GRID_POINTS, int(math.ceil((b - a) / (MAX_SPACING_IN_BANDWIDTHS * h))) + 1)
    grid = np.linspace(a, b, q)
    w = np.full(q, (b - a) / (q - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return grid, w


@dataclass
class KernelDensity:
    """Gaussian KDE of a 1-D sample, with the quadrature used to integrate it."""

    points: np.ndarray
    h: float
    grid: np.ndarray
    weights: np.ndarray

    @classmethod
    def fit(cls, points, bandwidth: Optional[float] = None) -> "KernelDensity":
        x = np.asarray(points.data if isinstance(points, Tensor) else points, dtype=np.float64).ravel()
        h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
        if not h > 0:
            raise LossError(f"bandwidth must be positive, got {h}")
        grid, w = entropy_grid(h, float(x.min()), float(x.max()))
        return cls(x, h, grid, w)

    def density(self, x) -> np.ndarray:
        z = (np.asarray(x, dtype=np.float64)[..., None] - self.points) / self.h
        return np.exp(-0.5 * z * z).sum(axis=-1) * _INV_SQRT_2PI / (self.points.size * self.h)

    def curve(self) -> np.ndarray:
        return self.density(self.grid)

    def integral(self) -> float:
        return float(self.weights @ self.curve())

    def entropy(self) -> float:
        f = self.curve()
        return float(-(self.weights * f * np.log(np.maximum(f, DENSITY_FLOOR))).sum())


def kde_density(kd: KernelDensity, x: float) -> float:
    return float(kd.density(x))


def _entropy_rows(points: np.ndarray, hs: np.ndarray, want_grad: bool):
    """Entropy of each row of ``points`` (``[K, M]``) and optionally its gradient."""
    K, M = points.shape
    ent = np.empty(K)
    grad = np.empty_like(points) if want_grad else None
    grids = [entropy_grid(h, points[i].min(), points[i].max()) for i, h in enumerate(hs)]
    sizes = np.array([g.size for g, _ in grids])
    for q in np.unique(sizes):
        rows = np.flatnonzero(sizes == q)
        step = max(1, _CHUNK_ELEMS // (q * M))
        for s in range(0, rows.size, step):
            idx = rows[s:s + step]
            grid = np.stack([grids[i][0] for i in idx])           # [k, Q]
            w = np.stack([grids[i][1] for i in idx])              # [k, Q]
            inv_h = 1.0 / hs[idx]
            z = grid[:, :, None] - points[idx][:, None, :]        # [k, Q, M]
            z *= inv_h[:, None, None]
            phi = z * z
            phi *= -0.5
            np.exp(phi, out=phi)
            f = phi.sum(axis=-1) * (_INV_SQRT_2PI * inv_h[:, None] / M)
            above = f > DENSITY_FLOOR
            logf = np.log(np.where(above, f, DENSITY_FLOOR))
            ent[idx] = -(w * f * logf).sum(axis=-1)
            if want_grad:
                dE_df = -w * (logf + above)
                # df_q/dx_m = phi(z_qm) * z_qm / (M h^2)
                phi *= z
                g = (dE_df[:, None, :] @ phi)[:, 0, :]
                grad[idx] = g * (_INV_SQRT_2PI * inv_h[:, None] ** 2 / M)
    return ent, grad


def kde_entropy(points, bandwidths=None) -> Tensor:
    """Differential entropy of the KDE of each row of ``points[..., M]``.

    ``bandwidths`` (shape ``points.shape[:-1]``) defaults to Silverman's rule
    per row; either way it is held constant under differentiation.
    """
    points = ad.as_tensor(points)
    lead = points.shape[:-1]
    flat = points.data.reshape(-1, points.shape[-1])
    if bandwidths is None:
        hs = np.array([silverman_bandwidth(row) for row in flat])
    else:
        hs = np.broadcast_to(np.asarray(bandwidths, dtype=np.float64), lead).reshape(-1).copy()
    tape = ad._tracked(points)
    ent, grad = _entropy_rows(flat, hs, want_grad=tape is not None)
    out = ent.reshape(lead)
    if tape is None:
        return Tensor(out)
    grad = grad.reshape(points.shape)
    return tape.record(out, (points,), lambda g: (np.asarray(g)[..., None] * grad,))


def gamma_bandwidths(gamma) -> np.ndarray:
    g = np.asarray(gamma.data if isinstance(gamma, Tensor) else gamma)
    flat = g.reshape(-1, g.shape[-2] * g.shape[-1])
    return np.array([silverman_bandwidth(row) for row in flat]).reshape(g.shape[:-2])


def differential_entropy(gamma, bandwidth=None) -> Tensor:
    """Entropy of the KDE over all ``N*N`` entries of each similarity matrix."""
    gamma = ad.as_tensor(gamma)
    n1, n2 = gamma.shape[-2:]
    return kde_entropy(gamma.reshape(gamma.shape[:-2] + (n1 * n2,)), bandwidth)


def block_entropies(hooks: Sequence[Tensor], bandwidths=None) -> List[Tensor]:
    """Batch-mean entropy of each block's patch similarity."""
    if not hooks:
        raise LossError("no attention outputs were captured")
    out = []
    for l, o in enumerate(hooks):
        bw = None if bandwidths is None else bandwidths[l]
        out.append(differential_entropy(patch_similarity(o), bw).mean())
    return out


def pse_loss(hooks: Sequence[Tensor], bandwidths=None) -> Tensor:
    """Sum over blocks of the batch-mean patch-similarity entropy."""
    total = None
    for e in block_entropies(hooks, bandwidths):
        total = e if total is None else total + e
    return total


def hook_bandwidths(hooks: Sequence[Tensor]) -> List[np.ndarray]:
    """Per block, per sample bandwidths; pass back to ``pse_loss`` to freeze them."""
    return [gamma_bandwidths(patch_similarity(Tensor(o.data))) for o in hooks]


# ---------------------------------------------------------------------------
# discrepancy
# ---------------------------------------------------------------------------

def _check_pair(o_q: Tensor, o_p: Tensor) -> None:
    if o_q.shape != o_p.shape or o_q.ndim != 2:
        raise ad.ShapeError(f"logit shapes must match as [B, n]: {o_q.shape} vs {o_p.shape}")


def discrepancy_mae(o_q, o_p) -> Tensor:
    """Per-sample L1 distance divided by the logit length, averaged over the batch."""
    o_q, o_p = ad.as_tensor(o_q), ad.as_tensor(o_p)
    _check_pair(o_q, o_p)
    return ad.tabs(o_q - o_p).mean()


def kld_discrepancy(o_q, o_p, temperature: float = 1.0) -> Tensor:
    """KL(softmax(o_p / T) || softmax(o_q / T)), averaged over the batch."""
    o_q, o_p = ad.as_tensor(o_q), ad.as_tensor(o_p)
    _check_pair(o_q, o_p)
    log_p = ad.log_softmax(o_p * (1.0 / temperature))
    log_q = ad.log_softmax(o_q * (1.0 / temperature))
    return (ad.exp(log_p) * (log_p - log_q)).sum() / float(o_q.shape[0])


def generator_loss(l_pse, l_d, alpha: float = 1.0):
    """Minimizing this maximizes both the entropy and the discrepancy."""
    return -l_pse - alpha * l_d
