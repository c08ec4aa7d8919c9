"""Electrical/morphological property extraction from current maps and rMAE scorecards.

Film is segmented with Otsu's threshold; islands are 8-connected film
components and holes are 4-connected non-film components. Size cutoffs are
declared at 512 x 512 and scaled with the pixel count.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import skeletonize

from . import scanio
from .baselines import bicubic_upsample
from .errors import DimensionError, ValidationError
from .scanio import NormState, ScanField

EIGHT = np.ones((3, 3), dtype=bool)
FOUR = ndimage.generate_binary_structure(2, 1)

MIN_ISLAND_PX_512 = 16
DEFECT_MAX_PX_512 = 64
# holes up to 4x4 px always count as point defects, whatever the resolution
DEFECT_MAX_PX_FLOOR = 16
CRACK_ELONGATION = 3.0
# low-current gaps up to this radius (px) are treated as thin line features
THIN_GAP_RADIUS = 2

PROPERTIES = (
    "coverage_fraction",
    "mean_current",
    "defect_count",
    "defect_density",
    "extended_shape_area",
    "boundary_length",
    "crack_length",
    "island_count",
)


class Binarization(NamedTuple):
    film: np.ndarray
    threshold: float
    degenerate: bool


def binarize_current(f: ScanField) -> Binarization:
    """Otsu threshold over a 256-bin histogram; pixels >= threshold are film."""
    data = np.asarray(f.data, dtype=np.float64)
    lo, hi = float(data.min()), float(data.max())
    if lo == hi:
        warnings.warn("constant current map: no film can be segmented", RuntimeWarning, stacklevel=2)
        return Binarization(np.zeros(data.shape, bool), lo, True)
    t = float(threshold_otsu(data, nbins=256))
    return Binarization(data >= t, t, False)


def label(mask: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, int]:
    return ndimage.label(mask, structure=EIGHT if connectivity == 8 else FOUR)


def scaled_cutoff(base_px: int, shape: tuple[int, int], floor: int = 1) -> int:
    return max(floor, int(round(base_px * shape[0] * shape[1] / 512**2)))


def perimeter_edges(mask: np.ndarray) -> int:
    """Number of pixel edges between film and non-film (image border not counted)."""
    m = mask.astype(np.int8)
    return int(np.count_nonzero(np.diff(m, axis=0)) + np.count_nonzero(np.diff(m, axis=1)))


def enclosed_holes(film: np.ndarray) -> tuple[np.ndarray, int]:
    """Label 4-connected non-film components that do not touch the image border."""
    lab, n = label(~film, 4)
    border = np.unique(np.concatenate([lab[0], lab[-1], lab[:, 0], lab[:, -1]]))
    keep = np.ones(n + 1, bool)
    keep[border] = False
    keep[0] = False
    lab = np.where(keep[lab], lab, 0)
    return lab, n


def elongation(coords: np.ndarray) -> float:
    """Ratio of principal axis lengths from the second moments of pixel coordinates."""
    if len(coords) < 2:
        return 1.0
    cov = np.cov(coords.T.astype(np.float64), bias=True) + np.eye(2) / 12.0
    ev = np.linalg.eigvalsh(cov)
    return float(math.sqrt(ev[1] / ev[0]))


def skeleton_length_px(mask: np.ndarray) -> float:
    """Skeleton pixel count averaged over the 8 grid symmetries (orientation-independent)."""
    if not mask.any():
        return 0.0
    counts = [np.count_nonzero(skeletonize(scanio.dihedral(mask, k))) for k in range(8)]
    return float(np.mean(counts))


def thin_features(film: np.ndarray) -> np.ndarray:
    """Low-current pixels inside gaps narrow enough to be closed by a small disk."""
    r = THIN_GAP_RADIUS
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    disk = yy**2 + xx**2 <= r * r
    padded = np.pad(film, r + 1, mode="edge")
    closed = ndimage.binary_closing(padded, structure=disk)[r + 1 : -(r + 1), r + 1 : -(r + 1)]
    return closed & ~film


@dataclass
class PropertyReport:
    coverage_fraction: float
    mean_current: float
    defect_count: int
    defect_density: float
    extended_shape_area: float
    boundary_length: float
    crack_length: float
    island_count: int
    threshold_used: float
    degenerate: bool = False

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def check(self, total_area: float) -> None:
        if not 0 <= self.coverage_fraction <= 1:
            raise ValidationError("coverage out of [0, 1]")
        if min(self.defect_count, self.island_count) < 0:
            raise ValidationError("negative count")
        if min(self.defect_density, self.extended_shape_area, self.boundary_length, self.crack_length) < 0:
            raise ValidationError("negative length/area")
        if self.extended_shape_area > self.coverage_fraction * total_area * (1 + 1e-9):
            raise ValidationError("extended shape area exceeds film area")


def extract_properties(
    f: ScanField, extent_um: tuple[float, float] | None = None, off_level: float = 0.0
) -> PropertyReport:
    """Scalar properties of a full-resolution current map.

    ``crack_length`` measures every thin, elongated low-current line that
    cuts the film; grain boundaries and cracks look alike in current and
    both contribute.

    A constant map has no contrast to threshold. It is read as a fully
    covered film when its level exceeds ``off_level`` (in the map's physical
    units) and as bare substrate otherwise; ``degenerate`` is set either way.
    """
    extent = tuple(extent_um) if extent_um is not None else f.physical_extent
    if len(extent) != 2 or min(extent) <= 0:
        raise ValidationError(f"physical extent must be positive, got {extent}")
    raw = scanio.denormalize(f) if f.norm_state is NormState.NORMALIZED else f
    h, w = f.shape
    px_w, px_h = extent[0] / w, extent[1] / h
    px_area = px_w * px_h
    pitch = math.sqrt(px_area)
    total_area = extent[0] * extent[1]

    film, thr, degenerate = binarize_current(raw)
    if degenerate and thr > off_level:
        film = np.ones_like(film)
    coverage = float(film.mean())
    mean_current = float(raw.data[film].astype(np.float64).mean()) if film.any() else 0.0

    islands, n_islands = label(film, 8)
    sizes = np.bincount(islands.ravel(), minlength=n_islands + 1)[1:]
    min_island = scaled_cutoff(MIN_ISLAND_PX_512, f.shape)
    extended_area = float(sizes[sizes >= min_island].sum() * px_area)

    holes, _ = enclosed_holes(film)
    hole_sizes = np.bincount(holes.ravel())
    hole_sizes[0] = 0
    defect_max = scaled_cutoff(DEFECT_MAX_PX_512, f.shape, DEFECT_MAX_PX_FLOOR)
    defect_ids = np.flatnonzero((hole_sizes > 0) & (hole_sizes < defect_max))
    defect_count = int(defect_ids.size)

    thin = thin_features(film)
    if defect_count:
        thin &= ~np.isin(holes, defect_ids)
    comps, n_thin = label(thin, 8)
    crack_mask = np.zeros_like(thin)
    for i, sl in enumerate(ndimage.find_objects(comps), start=1):
        if sl is None:
            continue
        sub = comps[sl] == i
        if sub.sum() >= 3 and elongation(np.argwhere(sub)) >= CRACK_ELONGATION:
            crack_mask[sl] |= sub

    report = PropertyReport(
        coverage_fraction=coverage,
        mean_current=mean_current,
        defect_count=defect_count,
        defect_density=defect_count / total_area,
        extended_shape_area=extended_area,
        boundary_length=perimeter_edges(film) * pitch,
        crack_length=skeleton_length_px(crack_mask) * pitch,
        island_count=int(n_islands),
        threshold_used=thr,
        degenerate=degenerate,
    )
    return report


# ---------------------------------------------------------------------------
# scorecard


@dataclass
class Scorecard:
    sigma: int
    n_samples: int
    prediction: dict[str, float]
    baseline: dict[str, float]
    baseline_upsampling: str = "nearest"
    truth_reports: list[dict] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("truth_reports")
        return d

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n")


def relative_mae(method: Sequence[PropertyReport], truth: Sequence[PropertyReport], eps: float = 1e-12) -> dict[str, float]:
    out = {}
    for p in PROPERTIES:
        errs = [abs(getattr(m, p) - getattr(t, p)) / max(abs(getattr(t, p)), eps) for m, t in zip(method, truth)]
        out[p] = float(np.mean(errs))
    return out


def naive_upsample(sparse: ScanField, target_shape: tuple[int, int], method: str = "nearest") -> ScanField:
    H, W = target_shape
    h, w = sparse.shape
    if H % h or W % w or H // h != W // w:
        raise DimensionError(f"sparse shape {sparse.shape} does not divide target {target_shape}")
    sigma = H // h
    if method == "nearest":
        return scanio.nearest_upsample(sparse, sigma)
    if method == "bicubic":
        return bicubic_upsample(sparse, sigma)
    raise ValidationError(f"unknown baseline upsampling {method!r}")


def build_scorecard(
    truths: Sequence[ScanField],
    predictions: Sequence[ScanField],
    sparse_baselines: Sequence[ScanField],
    extent_um: tuple[float, float] | None = None,
    baseline_upsampling: str = "nearest",
) -> Scorecard:
    if not (len(truths) == len(predictions) == len(sparse_baselines)):
        raise DimensionError(
            f"collections differ in length: truth={len(truths)} pred={len(predictions)} sparse={len(sparse_baselines)}"
        )
    if not truths:
        raise ValidationError("scorecard needs at least one sample")
    sigma = truths[0].shape[0] // sparse_baselines[0].shape[0]
    t_rep, p_rep, b_rep = [], [], []
    for t, p, s in zip(truths, predictions, sparse_baselines):
        if p.shape != t.shape:
            raise DimensionError(f"prediction {p.shape} does not match truth {t.shape}")
        ext = extent_um or t.physical_extent
        t_rep.append(extract_properties(t, ext))
        p_rep.append(extract_properties(p, ext))
        b_rep.append(extract_properties(naive_upsample(s, t.shape, baseline_upsampling), ext))
    return Scorecard(
        sigma=int(sigma),
        n_samples=len(truths),
        prediction=relative_mae(p_rep, t_rep),
        baseline=relative_mae(b_rep, t_rep),
        baseline_upsampling=baseline_upsampling,
        truth_reports=[r.as_dict() for r in t_rep],
    )


def write_scorecard_csv(cards: Sequence[Scorecard], path) -> None:
    """Property-by-(arm, sigma) matrix, one row per property."""
    cols = []
    for c in cards:
        cols += [(f"prediction_x{c.sigma}", c.prediction), (f"baseline_x{c.sigma}", c.baseline)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["property"] + [name for name, _ in cols])
        for p in PROPERTIES:
            w.writerow([p] + [repr(float(d[p])) for _, d in cols])
