"""Classical reconstructions of sparse scans: bicubic and Gaussian process regression.

Sparse sample ``(i, j)`` sits at full-resolution pixel ``(sigma*i, sigma*j)``,
so both methods interpolate on that lattice and extrapolate past the last
sample by clamping (bicubic) or by the kernel (GPR).
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import scanio
from .errors import ResourceError, ValidationError
from .scanio import ScanField

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# bicubic (Keys cubic convolution, a = -0.5)


def _keys(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    out = np.zeros_like(t)
    m1 = t <= 1
    m2 = (t > 1) & (t < 2)
    out[m1] = (a + 2) * t[m1] ** 3 - (a + 3) * t[m1] ** 2 + 1
    out[m2] = a * t[m2] ** 3 - 5 * a * t[m2] ** 2 + 8 * a * t[m2] - 4 * a
    return out


def cubic_matrix(n_low: int, sigma: int) -> np.ndarray:
    """(n_low*sigma, n_low) interpolation matrix with edge-clamped taps."""
    pos = np.arange(n_low * sigma) / sigma
    base = np.floor(pos).astype(int)
    M = np.zeros((pos.size, n_low))
    rows = np.arange(pos.size)
    for k in (-1, 0, 1, 2):
        idx = base + k
        w = _keys(pos - idx)
        np.add.at(M, (rows, np.clip(idx, 0, n_low - 1)), w)
    return M


def bicubic_upsample(x: ScanField, sigma: int) -> ScanField:
    scanio.check_sigma(sigma)
    h, w = x.shape
    My, Mx = cubic_matrix(h, sigma), cubic_matrix(w, sigma)
    out = My @ x.data.astype(np.float64) @ Mx.T
    if x.norm_state is scanio.NormState.NORMALIZED:
        out = np.clip(out, 0.0, 1.0)
    return x.replace(data=out)


# ---------------------------------------------------------------------------
# Gaussian process regression


@dataclass
class GprConfig:
    kernel: str = "rbf"
    length_scale: float | None = None  # high-res pixels; None -> sigma (one sample spacing)
    signal_variance: float | None = None  # None -> variance of the observations
    noise_variance: float = 1e-6
    max_points: int = 16384
    tile_obs: int = 64  # observations per tile side when tiling
    tile_overlap: int = 8  # observations shared between neighbouring tiles
    max_jitter: float = 1e-8  # relative to signal variance

    def __post_init__(self):
        if self.kernel != "rbf":
            raise ValidationError(f"unsupported kernel {self.kernel!r}")
        if self.length_scale is not None and self.length_scale <= 0:
            raise ValidationError("length_scale must be positive")
        if self.signal_variance is not None and self.signal_variance <= 0:
            raise ValidationError("signal_variance must be positive")
        if self.noise_variance < 0 or self.max_points < 1:
            raise ValidationError("noise_variance must be >= 0 and max_points >= 1")
        if not 0 <= 2 * self.tile_overlap < self.tile_obs:
            raise ValidationError("tile_overlap must be less than half of tile_obs")

    @classmethod
    def from_dict(cls, d: dict) -> "GprConfig":
        return cls(**d)


def rbf_kernel(a: np.ndarray, b: np.ndarray, length_scale: float, variance: float) -> np.ndarray:
    d2 = (
        np.sum(a**2, axis=1)[:, None]
        + np.sum(b**2, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    return variance * np.exp(-0.5 * np.maximum(d2, 0.0) / length_scale**2)


def _factor(K: np.ndarray, variance: float, max_jitter: float):
    """Cholesky factor of K, adding diagonal jitter up to ``max_jitter * variance`` if needed."""
    try:
        return linalg.cho_factor(K, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    jitter = 1e-12
    while jitter <= max_jitter * (1 + 1e-9):
        try:
            c = linalg.cho_factor(K + jitter * variance * np.eye(len(K)), lower=True, check_finite=False)
        except linalg.LinAlgError:
            jitter *= 10
            continue
        warnings.warn(f"kernel matrix ill-conditioned; added relative jitter {jitter:.0e}", RuntimeWarning, stacklevel=3)
        return c
    raise np.linalg.LinAlgError(f"kernel matrix not positive definite even with jitter {max_jitter:g}")


def gp_posterior_mean(
    obs_xy: np.ndarray,
    y: np.ndarray,
    query_xy: np.ndarray,
    length_scale: float,
    signal_variance: float,
    noise_variance: float,
    max_jitter: float = 1e-8,
) -> np.ndarray:
    """Posterior mean of a constant-mean GP: mean(y) + K*^T (K + noise I)^-1 (y - mean(y))."""
    mean = float(np.mean(y))
    K = rbf_kernel(obs_xy, obs_xy, length_scale, signal_variance)
    K[np.diag_indices_from(K)] += noise_variance
    c = _factor(K, signal_variance, max_jitter)
    alpha = linalg.cho_solve(c, y - mean, check_finite=False)
    return mean + rbf_kernel(query_xy, obs_xy, length_scale, signal_variance) @ alpha


def _grid(h: int, w: int, step: int = 1, oy: int = 0, ox: int = 0) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return np.column_stack([(yy.ravel() + oy) * step, (xx.ravel() + ox) * step]).astype(np.float64)


def _resolve(cfg: GprConfig, sigma: int, y: np.ndarray) -> tuple[float, float]:
    ls = cfg.length_scale if cfg.length_scale is not None else float(sigma)
    var = cfg.signal_variance if cfg.signal_variance is not None else float(np.var(y))
    return ls, var if var > 0 else 1.0


def _gpr_frame(obs: np.ndarray, sigma: int, cfg: GprConfig) -> np.ndarray:
    h, w = obs.shape
    y = obs.ravel().astype(np.float64)
    ls, var = _resolve(cfg, sigma, y)
    mu = gp_posterior_mean(_grid(h, w, sigma), y, _grid(h * sigma, w * sigma), ls, var, cfg.noise_variance, cfg.max_jitter)
    return mu.reshape(h * sigma, w * sigma)


def _tile_starts(n: int, size: int, step: int) -> list[int]:
    if n <= size:
        return [0]
    starts = list(range(0, n - size, step)) + [n - size]
    return sorted(set(starts))


def _blend_weight(size: int, overlap: int, at_start: bool, at_end: bool) -> np.ndarray:
    """1-D cosine ramp over the overlap region (high-res samples)."""
    w = np.ones(size)
    if overlap > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(overlap) + 0.5) / overlap)
        if not at_start:
            w[:overlap] = ramp
        if not at_end:
            w[-overlap:] = ramp[::-1]
    return w


def _gpr_tiled(obs: np.ndarray, sigma: int, cfg: GprConfig) -> np.ndarray:
    h, w = obs.shape
    t, ov = cfg.tile_obs, cfg.tile_overlap
    # hyperparameters are resolved once so tiles share one prior
    ls, var = _resolve(cfg, sigma, obs.ravel())
    tile_cfg = dataclasses.replace(cfg, length_scale=ls, signal_variance=var)
    acc = np.zeros((h * sigma, w * sigma))
    wsum = np.zeros_like(acc)
    ys, xs = _tile_starts(h, t, t - ov), _tile_starts(w, t, t - ov)
    for i0 in ys:
        for j0 in xs:
            th, tw = min(t, h - i0), min(t, w - j0)
            if th * sigma * tw * sigma > cfg.max_points:
                raise ResourceError(f"tile of {th}x{tw} observations exceeds max_points={cfg.max_points}")
            tile = obs[i0 : i0 + th, j0 : j0 + tw]
            mu = _gpr_frame(tile, sigma, tile_cfg)
            wy = _blend_weight(th * sigma, ov * sigma, i0 == 0, i0 + th == h)
            wx = _blend_weight(tw * sigma, ov * sigma, j0 == 0, j0 + tw == w)
            wt = np.outer(wy, wx)
            sl = (slice(i0 * sigma, (i0 + th) * sigma), slice(j0 * sigma, (j0 + tw) * sigma))
            acc[sl] += wt * mu
            wsum[sl] += wt
    return acc / wsum


def gpr_upsample(x: ScanField, sigma: int, config: GprConfig | None = None, tiled: bool | None = None) -> ScanField:
    """GP posterior mean on the full-resolution grid.

    The problem size is the number of grid points the GP is evaluated on,
    ``H * W``. Frames above ``config.max_points`` need tiling; ``tiled=None``
    tiles automatically for sigma 2 and 4 and refuses the x8 full frame.
    """
    scanio.check_sigma(sigma)
    cfg = config or GprConfig()
    h, w = x.shape
    n_grid = h * sigma * w * sigma
    if tiled is None:
        tiled = sigma in (2, 4) and n_grid > cfg.max_points
    obs = x.data.astype(np.float64)
    if tiled:
        if (cfg.tile_obs * sigma) ** 2 > cfg.max_points:
            tile_cfg = dataclasses.replace(
                cfg,
                tile_obs=max(2 * cfg.tile_overlap + 1, int(np.sqrt(cfg.max_points)) // sigma),
            )
        else:
            tile_cfg = cfg
        out = _gpr_tiled(obs, sigma, tile_cfg)
    else:
        if n_grid > cfg.max_points:
            raise ResourceError(
                f"GPR on a {h * sigma}x{w * sigma} grid ({n_grid} points) exceeds max_points={cfg.max_points}; "
                f"the O(N^3) full-frame solve is infeasible at this size"
            )
        out = _gpr_frame(obs, sigma, cfg)
    if x.norm_state is scanio.NormState.NORMALIZED:
        out = np.clip(out, 0.0, 1.0)
    return x.replace(data=out)
