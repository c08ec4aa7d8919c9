"""Synthetic MoS2-like dual-channel scans.

Islands nucleate at Poisson-disk sites and grow radially at a common rate
until the coverage target is met, so neighbouring islands meet along
Voronoi ridges (grain boundaries). Cracks are random polylines carved out
of the film and point defects are sprinkled on island interiors. The
height channel is broadened by a grey-scale dilation tip model.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.draw import line as draw_line

from .errors import GenerationError, ValidationError
from .scanio import Channel, ScanField, ScanPair

# defect current is suppressed on this neighbourhood around the defect pixel
_DEFECT_FOOTPRINT = np.ones((3, 3), dtype=bool)


@dataclass
class SampleSpec:
    grid_size: int = 512
    extent_um: float = 2.0
    nucleation_density: float = 6.0
    coverage_target: float = 0.6
    defect_density: float = 4.0
    crack_count: int = 2
    monolayer_height_nm: float = 0.7
    on_current_nA: float = 1.0
    off_current_nA: float = 0.05
    noise_sigma: float = 0.03
    tip_radius_px: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.grid_size < 64:
            raise ValidationError(f"grid_size must be >= 64, got {self.grid_size}")
        if not 0 < self.coverage_target <= 1:
            raise ValidationError("coverage_target must be in (0, 1]")
        if not self.on_current_nA > self.off_current_nA >= 0:
            raise ValidationError("need on_current_nA > off_current_nA >= 0")
        if self.nucleation_density < 0 or self.defect_density < 0:
            raise ValidationError("densities must be non-negative")
        if self.crack_count < 0 or self.tip_radius_px < 0 or self.noise_sigma < 0:
            raise ValidationError("crack_count, tip_radius_px and noise_sigma must be non-negative")
        if self.extent_um <= 0 or self.monolayer_height_nm <= 0:
            raise ValidationError("extent and monolayer height must be positive")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SampleSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown SampleSpec keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SampleSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class GroundTruthMask:
    film: np.ndarray
    boundaries: np.ndarray
    defects: np.ndarray
    cracks: np.ndarray

    _BITS = {"film": 1, "boundaries": 2, "defects": 4, "cracks": 8}

    def pack(self) -> np.ndarray:
        """Bit-packed uint8 raster (film=1, boundaries=2, defects=4, cracks=8)."""
        out = np.zeros(self.film.shape, dtype=np.uint8)
        for name, bit in self._BITS.items():
            out |= getattr(self, name).astype(np.uint8) * bit
        return out

    @classmethod
    def unpack(cls, packed: np.ndarray) -> "GroundTruthMask":
        return cls(**{name: (packed & bit) > 0 for name, bit in cls._BITS.items()})

    def check(self) -> None:
        shapes = {m.shape for m in (self.film, self.boundaries, self.defects, self.cracks)}
        if len(shapes) != 1:
            raise ValidationError(f"mask shapes differ: {shapes}")
        if np.any(self.boundaries & ~ndimage.binary_dilation(self.film)):
            raise ValidationError("boundaries leave the dilated film")
        if np.any(self.defects & ~self.film):
            raise ValidationError("defects outside film")


def poisson_disk_sites(n: int, size: int, rng: np.random.Generator, max_tries: int = 30) -> np.ndarray:
    """Dart-throwing Poisson-disk sampling of up to ``n`` sites in [0, size)^2.

    The exclusion radius is half the mean spacing of ``n`` uniformly placed
    points; darts that keep failing are dropped.
    """
    if n <= 0:
        return np.zeros((0, 2))
    r_min = 0.5 * size / math.sqrt(n)
    sites: list[np.ndarray] = []
    for _ in range(n):
        for _ in range(max_tries):
            p = rng.uniform(0, size, 2)
            if all(np.hypot(*(p - q)) >= r_min for q in sites):
                sites.append(p)
                break
    return np.array(sites).reshape(-1, 2)


def _pixel_centres(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return np.column_stack([yy.ravel() + 0.5, xx.ravel() + 0.5])


def _growth_radius(dist: np.ndarray, allowed: np.ndarray, target: float) -> float:
    """Smallest growth radius whose front covers ``target`` of the whole grid."""
    k = int(round(target * dist.size))
    d = np.sort(dist[allowed])
    if k <= 0:
        return -1.0
    if k >= d.size:
        return float(d[-1])
    return float(d[k - 1])


def _carve_cracks(film: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    size = film.shape[0]
    cracks = np.zeros_like(film)
    inside = np.argwhere(film)
    if count == 0 or inside.size == 0:
        return cracks
    seg_len = size / 10.0
    for _ in range(count):
        y, x = inside[rng.integers(len(inside))].astype(float)
        angle = rng.uniform(0, 2 * np.pi)
        for _ in range(int(rng.integers(2, 5))):
            angle += rng.normal(0, 0.5)
            y2 = np.clip(y + seg_len * np.sin(angle), 0, size - 1)
            x2 = np.clip(x + seg_len * np.cos(angle), 0, size - 1)
            rr, cc = draw_line(int(round(y)), int(round(x)), int(round(y2)), int(round(x2)))
            cracks[rr, cc] = True
            y, x = y2, x2
    # two pixels wide so the feature survives moderate subsampling
    cracks[:, 1:] |= cracks[:, :-1].copy()
    return cracks & film


def _plant_defects(film: np.ndarray, blocked: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Place up to ``n`` isolated single-pixel defects on film interiors.

    A site is eligible when its 5x5 neighbourhood is clean film, and sites
    are kept >= 4 px apart so suppressed neighbourhoods stay separate holes.
    """
    clean = ndimage.binary_erosion(film & ~blocked, structure=np.ones((5, 5), bool))
    defects = np.zeros_like(film)
    candidates = np.argwhere(clean)
    if n == 0 or candidates.size == 0:
        return defects
    order = rng.permutation(len(candidates))
    taken = np.zeros_like(film)
    placed = 0
    for idx in order:
        y, x = candidates[idx]
        if taken[y, x]:
            continue
        defects[y, x] = True
        taken[max(0, y - 4) : y + 5, max(0, x - 4) : x + 5] = True
        placed += 1
        if placed >= n:
            break
    return defects


def generate_sample(spec: SampleSpec) -> tuple[ScanPair, GroundTruthMask]:
    spec.validate()
    rng = np.random.default_rng(spec.rng_seed)
    size = spec.grid_size
    area_um2 = spec.extent_um**2
    pitch = spec.extent_um / size

    n_sites = int(rng.poisson(spec.nucleation_density * area_um2))
    if spec.nucleation_density > 0:
        n_sites = max(n_sites, 1)
    sites = poisson_disk_sites(n_sites, size, rng)
    if len(sites) == 0:
        raise GenerationError("no nucleation sites: coverage target is unreachable")

    dist, label = cKDTree(sites).query(_pixel_centres(size))
    dist = dist.reshape(size, size)
    label = label.reshape(size, size)

    everywhere = np.ones((size, size), bool)
    film = dist <= _growth_radius(dist, everywhere, spec.coverage_target)
    cracks = _carve_cracks(film, spec.crack_count, rng)
    # regrow with cracked pixels excluded so the coverage target still holds
    film = (dist <= _growth_radius(dist, ~cracks, spec.coverage_target)) & ~cracks

    boundaries = np.zeros_like(film)
    # a saturated film is treated as one coalesced sheet without grain boundaries
    for axis in ((0, 1) if spec.coverage_target < 1.0 else ()):
        a = np.moveaxis(label, axis, 0)
        f = np.moveaxis(film, axis, 0)
        meet = (a[1:] != a[:-1]) & f[1:] & f[:-1]
        b = np.moveaxis(boundaries, axis, 0)
        b[1:] |= meet
        b[:-1] |= meet

    n_defects = int(rng.poisson(spec.defect_density * film.sum() * pitch**2))
    defects = _plant_defects(film, boundaries | cracks, n_defects, rng)
    mask = GroundTruthMask(film=film, boundaries=boundaries, defects=defects, cracks=cracks)

    height = np.where(film, spec.monolayer_height_nm, 0.0)
    current = np.where(film, spec.on_current_nA, spec.off_current_nA)
    suppressed = boundaries | cracks | ndimage.binary_dilation(defects, structure=_DEFECT_FOOTPRINT)
    current[suppressed] = spec.off_current_nA

    sid = f"synth-{spec.rng_seed}"
    extent = (spec.extent_um, spec.extent_um)
    morph = ScanField(height, Channel.MORPHOLOGY, extent, sample_id=sid)
    morph = tip_convolve(morph, spec.tip_radius_px)
    cur = ScanField(current, Channel.CURRENT, extent, sample_id=sid)
    noise_seeds = np.random.SeedSequence(spec.rng_seed).spawn(2)
    morph = add_noise(morph, spec.noise_sigma, noise_seeds[0])
    cur = add_noise(cur, spec.noise_sigma, noise_seeds[1])
    return ScanPair(morph, cur, sid), mask


def disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius : radius + 1, -radius : radius + 1]
    return yy**2 + xx**2 <= radius**2


def tip_convolve(f: ScanField, tip_radius_px: int) -> ScanField:
    """Grey-scale dilation of the field by a disk of the given radius."""
    if tip_radius_px < 0:
        raise ValidationError("tip radius must be non-negative")
    if tip_radius_px == 0:
        return f
    out = ndimage.grey_dilation(f.data, footprint=disk(tip_radius_px), mode="nearest")
    return f.replace(data=out)


def add_noise(f: ScanField, sigma_rel: float, rng_seed) -> ScanField:
    if sigma_rel < 0:
        raise ValidationError("sigma_rel must be non-negative")
    if sigma_rel == 0:
        return f
    rng = np.random.default_rng(rng_seed)
    std = sigma_rel * float(f.data.max() - f.data.min())
    return f.replace(data=f.data + rng.normal(0.0, std, f.shape))


def sample_specs(base: SampleSpec, count: int, seed: int) -> list[SampleSpec]:
    """``count`` copies of ``base`` with independent seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count) if count else []
    return [dataclasses.replace(base, rng_seed=int(s)) for s in seeds]
