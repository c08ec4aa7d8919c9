"""Scan data model, the SCAF container format, and sparse-acquisition helpers.

A :class:`ScanField` is one channel of a C-AFM raster (height or current).
Sparse scans are dense low-resolution rasters obtained by keeping every
``sigma``-th row and column starting at index 0.

SCAF layout (little-endian)::

    b"SCAF" | version:u32 | H:u32 | W:u32 | channel:u8 | H*W float32 | JSON trailer
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    NormStateError,
    ScanCorruptionError,
    ScanFormatError,
    ValidationError,
)

MAGIC = b"SCAF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIB")
SIGMAS = (2, 4, 8)


class Channel(str, Enum):
    MORPHOLOGY = "morphology"
    CURRENT = "current"

    @property
    def code(self) -> int:
        return _CHANNEL_CODES[self]

    @property
    def default_units(self) -> str:
        return "nm" if self is Channel.MORPHOLOGY else "nA"


_CHANNEL_CODES = {Channel.MORPHOLOGY: 0, Channel.CURRENT: 1}
_CODE_CHANNELS = {v: k for k, v in _CHANNEL_CODES.items()}


class NormState(str, Enum):
    RAW = "raw"
    NORMALIZED = "normalized"


@dataclass(frozen=True)
class ScanField:
    """Single-channel raster with physical metadata.

    ``data`` is stored as a read-only float32 array. ``norm_min``/``norm_max``
    are the raw-data bounds recorded by :func:`normalize`.
    """

    data: np.ndarray
    channel: Channel
    physical_extent: tuple[float, float] = (2.0, 2.0)
    units: str = ""
    norm_state: NormState = NormState.RAW
    norm_min: float | None = None
    norm_max: float | None = None
    sample_id: str = ""

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channel", Channel(self.channel))
        object.__setattr__(self, "norm_state", NormState(self.norm_state))
        extent = tuple(float(v) for v in self.physical_extent)
        object.__setattr__(self, "physical_extent", extent)
        if not self.units:
            object.__setattr__(self, "units", self.channel.default_units)
        self.validate()

    def validate(self) -> None:
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValidationError(f"scan data must be a non-empty 2-D grid, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("scan data contains non-finite values")
        if len(self.physical_extent) != 2 or min(self.physical_extent) <= 0:
            raise ValidationError(f"physical extent must be two positive lengths, got {self.physical_extent}")
        if self.norm_state is NormState.NORMALIZED:
            if self.norm_min is None or self.norm_max is None:
                raise ValidationError("normalized field is missing its (min, max) record")
            if self.norm_min > self.norm_max:
                raise ValidationError("norm_min exceeds norm_max")
            if self.data.min() < 0.0 or self.data.max() > 1.0:
                raise ValidationError("normalized values must lie in [0, 1]")
            if self.norm_min == self.norm_max and np.any(self.data != 0):
                raise ValidationError("degenerate normalized field must be all zeros")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def pixel_pitch_um(self) -> tuple[float, float]:
        """(x, y) pixel pitch in micrometers."""
        h, w = self.shape
        return self.physical_extent[0] / w, self.physical_extent[1] / h

    def replace(self, **changes) -> "ScanField":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class ScanPair:
    morphology: ScanField
    current: ScanField
    sample_id: str = ""

    def __post_init__(self):
        if self.morphology.channel is not Channel.MORPHOLOGY:
            raise ValidationError("morphology slot holds a non-morphology field")
        if self.current.channel is not Channel.CURRENT:
            raise ValidationError("current slot holds a non-current field")
        if self.morphology.shape != self.current.shape:
            raise DimensionError(f"channel shapes differ: {self.morphology.shape} vs {self.current.shape}")
        if self.morphology.physical_extent != self.current.physical_extent:
            raise ValidationError("channel physical extents differ")

    def __getitem__(self, channel) -> ScanField:
        return self.morphology if Channel(channel) is Channel.MORPHOLOGY else self.current


# ---------------------------------------------------------------------------
# SCAF container


def _trailer(f: ScanField) -> dict:
    return {
        "physical_extent_um": list(f.physical_extent),
        "units": f.units,
        "norm_state": f.norm_state.value,
        "norm_min": f.norm_min,
        "norm_max": f.norm_max,
        "sample_id": f.sample_id,
    }


def encode_scan(f: ScanField) -> bytes:
    f.validate()
    h, w = f.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, h, w, f.channel.code)
    payload = f.data.astype("<f4", copy=False).tobytes(order="C")
    trailer = json.dumps(_trailer(f), sort_keys=True).encode("utf-8")
    return header + payload + trailer


def decode_scan(buf: bytes) -> ScanField:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise ScanFormatError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise ScanCorruptionError("truncated header")
    _, version, h, w, code = _HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise ScanFormatError(f"unsupported SCAF version {version}")
    if code not in _CODE_CHANNELS:
        raise ScanCorruptionError(f"unknown channel code {code}")
    end = _HEADER.size + 4 * h * w
    if len(buf) < end:
        raise ScanCorruptionError(f"payload truncated: need {end} bytes, file has {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=h * w, offset=_HEADER.size).reshape(h, w)
    try:
        meta = json.loads(bytes(buf[end:]).decode("utf-8"))
        extent = tuple(meta["physical_extent_um"])
        return ScanField(
            data=data.astype(np.float32),
            channel=_CODE_CHANNELS[code],
            physical_extent=extent,
            units=meta["units"],
            norm_state=NormState(meta["norm_state"]),
            norm_min=meta["norm_min"],
            norm_max=meta["norm_max"],
            sample_id=meta["sample_id"],
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise ScanCorruptionError(f"damaged trailer: {exc}") from exc


def write_scan(f: ScanField, path) -> None:
    Path(path).write_bytes(encode_scan(f))


def read_scan(path) -> ScanField:
    return decode_scan(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# sparse acquisition


def check_sigma(sigma: int, shape: tuple[int, ...] | None = None) -> int:
    if sigma not in SIGMAS:
        raise DimensionError(f"sparsity factor must be one of {SIGMAS}, got {sigma}")
    if shape is not None and any(n % sigma for n in shape):
        raise DimensionError(f"sigma={sigma} does not divide field shape {tuple(shape)}")
    return sigma


def subsample(a: np.ndarray, sigma: int) -> np.ndarray:
    """Strided subsampling on the last two axes, phase 0."""
    return a[..., ::sigma, ::sigma]


def downsample(f: ScanField, sigma: int) -> ScanField:
    check_sigma(sigma, f.shape)
    return f.replace(data=subsample(f.data, sigma))


def nearest_upsample(f: ScanField, sigma: int) -> ScanField:
    """Replicate each sample over its sigma x sigma block (naive sparse display)."""
    return f.replace(data=np.repeat(np.repeat(f.data, sigma, axis=0), sigma, axis=1))


def normalize(f: ScanField) -> ScanField:
    if f.norm_state is not NormState.RAW:
        raise NormStateError("field is already normalized")
    lo, hi = float(f.data.min()), float(f.data.max())
    if hi > lo:
        data = (f.data.astype(np.float64) - lo) / (hi - lo)
        data = np.clip(data, 0.0, 1.0)
    else:
        data = np.zeros(f.shape)
    return f.replace(data=data, norm_state=NormState.NORMALIZED, norm_min=lo, norm_max=hi)


def normalize_like(f: ScanField, ref: ScanField) -> ScanField:
    """Normalize a raw field with another field's recorded (min, max).

    Values falling outside the reference range are clipped into [0, 1].
    """
    if ref.norm_state is not NormState.NORMALIZED:
        raise NormStateError("reference field is not normalized")
    lo, hi = ref.norm_min, ref.norm_max
    span = hi - lo if hi > lo else 1.0
    data = np.clip((f.data.astype(np.float64) - lo) / span, 0.0, 1.0)
    return f.replace(data=data, norm_state=NormState.NORMALIZED, norm_min=lo, norm_max=hi)


def denormalize(f: ScanField) -> ScanField:
    if f.norm_state is not NormState.NORMALIZED:
        raise NormStateError("field is not normalized")
    data = f.data.astype(np.float64) * (f.norm_max - f.norm_min) + f.norm_min
    return f.replace(data=data, norm_state=NormState.RAW, norm_min=None, norm_max=None)


# ---------------------------------------------------------------------------
# cropping and augmentation


def random_crop_pair(low: ScanField, high: ScanField, crop_high: int, rng_seed) -> tuple[ScanField, ScanField]:
    """Co-registered random crops of a (sparse, full) pair.

    The crop origin in ``high`` is a multiple of sigma so that the low crop
    stays the strided subsample of the high crop. ``rng_seed`` may be an int
    or a ``numpy.random.Generator``.
    """
    H, W = high.shape
    h, w = low.shape
    if H % h or W % w or H // h != W // w:
        raise DimensionError(f"high {high.shape} is not an integer multiple of low {low.shape}")
    sigma = check_sigma(H // h)
    if crop_high % sigma:
        raise DimensionError(f"crop {crop_high} not divisible by sigma={sigma}")
    if crop_high > min(H, W) or crop_high < sigma:
        raise DimensionError(f"crop {crop_high} does not fit field {high.shape}")
    rng = np.random.default_rng(rng_seed)
    crop_low = crop_high // sigma
    i = int(rng.integers(0, h - crop_low + 1))
    j = int(rng.integers(0, w - crop_low + 1))
    lo = low.replace(data=low.data[i : i + crop_low, j : j + crop_low])
    hi = high.replace(data=high.data[i * sigma : i * sigma + crop_high, j * sigma : j * sigma + crop_high])
    return lo, hi


def dihedral(a: np.ndarray, code: int) -> np.ndarray:
    """Element ``code`` of the square's symmetry group acting on the last two axes.

    Codes 0-3 rotate by ``code * 90`` degrees; 4-7 transpose first.
    """
    if not 0 <= int(code) <= 7:
        raise ValidationError(f"augmentation code must be in 0..7, got {code}")
    if code >= 4:
        a = np.swapaxes(a, -1, -2)
    return np.ascontiguousarray(np.rot90(a, int(code) % 4, axes=(-2, -1)))


def _augment(f: ScanField, code: int) -> ScanField:
    w, h = f.physical_extent
    swaps = (code % 2 == 1) != (code >= 4)
    return f.replace(data=dihedral(f.data, code), physical_extent=(h, w) if swaps else (w, h))


def augment_pair(low: ScanField, high: ScanField, code: int) -> tuple[ScanField, ScanField]:
    return _augment(low, code), _augment(high, code)
