"""CT rasters: Hounsfield slices, fat windowing, rescaling and quantification.

Slices are immutable after load; every operation returns a new raster, so
per-slice work can run in parallel without locking.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptImage,
    DegenerateDimensions,
    DimensionMismatch,
    MissingMetadata,
    ValidationError,
)

HU_MIN = -1024
HU_MAX = 3071
#: Offset added to HU values when stored in 16-bit grayscale PNGs.
PNG_HU_OFFSET = 1024

#: Mask palette: index -> display colour (black, red, green, yellow).
MASK_PALETTE = [(0, 0, 0), (255, 0, 0), (0, 255, 0), (255, 255, 0)]


class FatLabel(IntEnum):
    BACKGROUND = 0
    EPICARDIAL = 1
    MEDIASTINAL = 2
    OTHER_FAT = 3


@dataclass(frozen=True)
class FatWindow:
    """Closed HU interval regarded as fat; everything else is background."""

    lo: int = -200
    hi: int = -30

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError(f"fat window requires lo < hi, got [{self.lo}, {self.hi}]")

    def contains(self, values: np.ndarray) -> np.ndarray:
        return (values >= self.lo) & (values <= self.hi)


@dataclass(frozen=True)
class HuSlice:
    """One CT slice of integer HU values with in-plane spacing metadata."""

    values: np.ndarray  # (height, width) int16, row-major
    spacing_x: float  # mm/pixel
    spacing_y: float  # mm/pixel
    z_index: int = 0

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.size == 0:
            raise ValidationError(f"slice raster must be a non-empty 2-D array, got shape {values.shape}")
        if values.min() < HU_MIN or values.max() > HU_MAX:
            raise ValidationError(
                f"HU values must lie in [{HU_MIN}, {HU_MAX}], got [{values.min()}, {values.max()}]"
            )
        if self.spacing_x <= 0 or self.spacing_y <= 0:
            raise ValidationError(f"pixel spacing must be positive, got ({self.spacing_x}, {self.spacing_y})")
        values = values.astype(np.int16, copy=False)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class CtScan:
    """Ordered stack of slices sharing dimensions and spacing."""

    patient_id: str
    slices: tuple[HuSlice, ...]
    slice_thickness: float | None = None  # mm, from the sidecar when known

    def __post_init__(self):
        slices = tuple(self.slices)
        if not slices:
            raise ValidationError("a scan needs at least one slice")
        first = slices[0]
        for prev, cur in zip(slices, slices[1:]):
            if cur.z_index <= prev.z_index:
                raise ValidationError("slice z_index must be strictly increasing")
        for s in slices:
            if (s.width, s.height) != (first.width, first.height):
                raise DimensionMismatch(
                    f"slice z={s.z_index} is {s.width}x{s.height}, expected {first.width}x{first.height}"
                )
            if (s.spacing_x, s.spacing_y) != (first.spacing_x, first.spacing_y):
                raise ValidationError(f"slice z={s.z_index} spacing differs from the first slice")
        object.__setattr__(self, "slices", slices)

    def __len__(self) -> int:
        return len(self.slices)

    @property
    def width(self) -> int:
        return self.slices[0].width

    @property
    def height(self) -> int:
        return self.slices[0].height

    @property
    def spacing_x(self) -> float:
        return self.slices[0].spacing_x

    @property
    def spacing_y(self) -> float:
        return self.slices[0].spacing_y

    def to_array(self) -> np.ndarray:
        """Stack slice rasters into a (n_slices, height, width) array."""
        return np.stack([s.values for s in self.slices])


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel class raster paired with a slice of identical dimensions."""

    labels: np.ndarray  # (height, width) uint8 over FatLabel values
    z_index: int = 0

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or labels.size == 0:
            raise ValidationError(f"mask must be a non-empty 2-D array, got shape {labels.shape}")
        if labels.min() < 0 or labels.max() > max(FatLabel):
            raise ValidationError("mask labels must be FatLabel values (0..3)")
        labels = labels.astype(np.uint8, copy=False)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]


def _raster(obj) -> np.ndarray:
    if isinstance(obj, HuSlice):
        return obj.values
    if isinstance(obj, LabelMask):
        return obj.labels
    return np.asarray(obj)


def quantize_range(values, lo: float, hi: float, bins: int) -> np.ndarray:
    """Map values onto integer bins over [lo, hi]; a degenerate range maps to bin 0."""
    v = np.asarray(values, dtype=np.float64)
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.intp)
    idx = np.floor((v - lo) * (bins / (hi - lo)))
    return np.clip(idx, 0, bins - 1).astype(np.intp)


def window_fat(slice_or_values, window: FatWindow = FatWindow()) -> np.ndarray:
    """Binary raster: 1 where the HU value falls inside the closed fat window."""
    values = _raster(slice_or_values)
    return window.contains(values).astype(np.uint8)


def apply_fat_window(slice_or_values, window: FatWindow = FatWindow()) -> np.ndarray:
    """HU raster with everything outside the fat window zeroed.

    Zero is the background sentinel; it cannot collide with in-window values
    because the fat range is strictly negative.
    """
    values = _raster(slice_or_values)
    return np.where(window.contains(values), values, 0).astype(np.int16)


def fat_display(slice_or_values, window: FatWindow = FatWindow()) -> np.ndarray:
    """Fat-range display raster: background 0, in-window HU mapped to 1..span+1.

    This is the raster atlas matching runs on: keeping background at the
    bottom of the value range makes pixel intensity rank with fat brightness,
    the same ordering the atlas weights use.
    """
    values = _raster(slice_or_values)
    return np.where(window.contains(values), values - window.lo + 1, 0).astype(np.int16)


def rescale_to_spacing(slc: HuSlice, target_spacing: float) -> HuSlice:
    """Nearest-neighbour resample of a slice onto a new isotropic pixel spacing.

    Nearest-neighbour keeps HU values exact. Output dimensions are the input
    dimensions scaled by spacing/target, rounded to the nearest integer;
    raises DegenerateDimensions when a dimension would round to zero.
    """
    if target_spacing <= 0:
        raise ValidationError(f"target spacing must be positive, got {target_spacing}")
    if slc.spacing_x == target_spacing and slc.spacing_y == target_spacing:
        return slc
    new_w = int(np.floor(slc.width * slc.spacing_x / target_spacing + 0.5))
    new_h = int(np.floor(slc.height * slc.spacing_y / target_spacing + 0.5))
    if new_w < 1 or new_h < 1:
        raise DegenerateDimensions(
            f"rescaling {slc.width}x{slc.height} to {target_spacing} mm/px collapses to {new_w}x{new_h}"
        )
    # Pixel-centre mapping: destination pixel i samples source floor((i+0.5)*src/dst).
    src_cols = np.minimum((np.arange(new_w) + 0.5) * slc.width / new_w, slc.width - 1).astype(np.intp)
    src_rows = np.minimum((np.arange(new_h) + 0.5) * slc.height / new_h, slc.height - 1).astype(np.intp)
    values = slc.values[np.ix_(src_rows, src_cols)]
    return HuSlice(values=values, spacing_x=target_spacing, spacing_y=target_spacing, z_index=slc.z_index)


def rescale_scan(scan: CtScan, target_spacing: float) -> CtScan:
    return CtScan(
        patient_id=scan.patient_id,
        slices=tuple(rescale_to_spacing(s, target_spacing) for s in scan.slices),
        slice_thickness=scan.slice_thickness,
    )


def translate(values: np.ndarray, dx: int, dy: int, fill=0) -> np.ndarray:
    """Shift a raster by whole pixels; revealed borders are filled with ``fill``."""
    out = np.full_like(values, fill)
    h, w = values.shape
    src_x0, src_x1 = max(0, -dx), min(w, w - dx)
    src_y0, src_y1 = max(0, -dy), min(h, h - dy)
    if src_x0 < src_x1 and src_y0 < src_y1:
        out[src_y0 + dy:src_y1 + dy, src_x0 + dx:src_x1 + dx] = values[src_y0:src_y1, src_x0:src_x1]
    return out


def fat_area(mask_or_binary, spacing_x: float, spacing_y: float) -> dict[int, float]:
    """Area in mm^2 covered by each class: pixel count x spacing_x x spacing_y.

    LabelMask input reports all four FatLabel classes; a binary raster
    reports classes 0 and 1.
    """
    if isinstance(mask_or_binary, LabelMask):
        labels = mask_or_binary.labels
        classes = [int(c) for c in FatLabel]
    else:
        labels = np.asarray(mask_or_binary)
        classes = [0, 1]
    pixel_area = spacing_x * spacing_y
    counts = np.bincount(labels.ravel().astype(np.int64), minlength=max(classes) + 1)
    return {c: float(counts[c]) * pixel_area for c in classes}


def fat_volume(masks: Iterable[LabelMask], spacing_x: float, spacing_y: float,
               slice_thickness: float) -> dict[int, float]:
    """Volume in mm^3: per-slice areas summed and multiplied by slice thickness."""
    if slice_thickness <= 0:
        raise ValidationError(f"slice thickness must be positive, got {slice_thickness}")
    totals: dict[int, float] = {int(c): 0.0 for c in FatLabel}
    for mask in masks:
        for c, area in fat_area(mask, spacing_x, spacing_y).items():
            totals[c] += area * slice_thickness
    return totals


# -- file formats --------------------------------------------------------------
#
# Slice files:  16-bit grayscale PNG storing HU + 1024 (bit-exact), one per
#               slice, named <patient>_<zzz>.png.
# Sidecar:      <dir>/scan.json with scan metadata -- see save_scan.
# Masks:        8-bit indexed PNG, palette index = FatLabel value.

_SLICE_NAME = re.compile(r"^(?P<patient>.+)_(?P<z>\d{3,})\.png$")
SIDECAR_NAME = "scan.json"


def save_slice_png(values: np.ndarray, path: Path | str) -> None:
    stored = (np.asarray(values).astype(np.int32) + PNG_HU_OFFSET).astype(np.uint16)
    Image.fromarray(stored).save(str(path), format="PNG")


def load_slice_png(path: Path | str) -> np.ndarray:
    try:
        with Image.open(str(path)) as img:
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImage(f"{path}: {exc}") from exc
    if arr.ndim != 2 or arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise CorruptImage(f"{path}: expected 16-bit grayscale PNG, got {arr.dtype} shape {arr.shape}")
    return (arr.astype(np.int32) - PNG_HU_OFFSET).astype(np.int16)


def save_scan(scan: CtScan, directory: Path | str) -> None:
    """Write one PNG per slice plus the JSON sidecar into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in scan.slices:
        save_slice_png(s.values, directory / f"{scan.patient_id}_{s.z_index:03d}.png")
    sidecar = {
        "patient_id": scan.patient_id,
        "spacing_x_mm": scan.spacing_x,
        "spacing_y_mm": scan.spacing_y,
        "slice_thickness_mm": scan.slice_thickness,
        "slice_count": len(scan),
    }
    (directory / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=2) + "\n")


def load_scan(directory: Path | str) -> CtScan:
    """Load a scan directory written by save_scan (or laid out the same way)."""
    directory = Path(directory)
    sidecar_path = directory / SIDECAR_NAME
    if not sidecar_path.is_file():
        raise MissingMetadata(f"no {SIDECAR_NAME} sidecar in {directory}")
    try:
        meta = json.loads(sidecar_path.read_text())
        patient_id = meta["patient_id"]
        spacing_x = float(meta["spacing_x_mm"])
        spacing_y = float(meta["spacing_y_mm"])
        slice_count = int(meta["slice_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MissingMetadata(f"{sidecar_path}: {exc}") from exc
    thickness = meta.get("slice_thickness_mm")

    found: list[tuple[int, Path]] = []
    for path in sorted(directory.glob("*.png")):
        m = _SLICE_NAME.match(path.name)
        if m and m.group("patient") == patient_id:
            found.append((int(m.group("z")), path))
    found.sort()
    if len(found) != slice_count:
        raise MissingMetadata(
            f"{directory}: sidecar promises {slice_count} slices, found {len(found)}"
        )

    slices = []
    shape = None
    for z, path in found:
        values = load_slice_png(path)
        if shape is None:
            shape = values.shape
        elif values.shape != shape:
            raise DimensionMismatch(f"{path.name}: shape {values.shape} differs from {shape}")
        slices.append(HuSlice(values=values, spacing_x=spacing_x, spacing_y=spacing_y, z_index=z))
    return CtScan(patient_id=patient_id, slices=tuple(slices),
                  slice_thickness=None if thickness is None else float(thickness))


def save_mask(mask: LabelMask, path: Path | str) -> None:
    img = Image.fromarray(mask.labels, mode="P")
    palette = []
    for rgb in MASK_PALETTE:
        palette.extend(rgb)
    img.putpalette(palette)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    img.save(str(path), format="PNG")


def load_mask(path: Path | str, z_index: int = 0) -> LabelMask:
    try:
        with Image.open(str(path)) as img:
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImage(f"{path}: {exc}") from exc
    if arr.ndim != 2:
        raise CorruptImage(f"{path}: expected indexed 8-bit PNG, got shape {arr.shape}")
    return LabelMask(labels=arr.astype(np.uint8), z_index=z_index)


def mask_paths(directory: Path | str, patient_id: str) -> list[tuple[int, Path]]:
    """Mask files for a patient, sorted by slice index."""
    directory = Path(directory)
    found = []
    for path in sorted(directory.glob(f"{patient_id}_*.png")):
        m = _SLICE_NAME.match(path.name)
        if m and m.group("patient") == patient_id:
            found.append((int(m.group("z")), path))
    found.sort()
    return found
