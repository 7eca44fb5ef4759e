"""Atlas matching for the retrosternal landmark and scan registration.

A scan is brought into the common frame in two steps: a weighted
mutual-information (WMI) search slides the atlas over one fat-windowed slice,
and a walk-based confirmation heuristic accepts or rejects each scored
position. The translation that centres the first confirmed landmark is then
applied to every slice of the scan.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image, UnidentifiedImageError

from .errors import (
    CorruptImage,
    DimensionMismatch,
    EmptyPatchSet,
    MissingMetadata,
    RecognitionFailed,
    SearchRegionTooSmall,
    ValidationError,
)
from .imaging import CtScan, FatWindow, HuSlice, fat_display, quantize_range, translate


@dataclass(frozen=True)
class Atlas:
    """Mean of aligned binary retrosternal patches; weights in [0, 1]."""

    weights: np.ndarray  # (height, width) float64
    source_count: int

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 2 or weights.size == 0:
            raise ValidationError(f"atlas must be a non-empty 2-D array, got shape {weights.shape}")
        if weights.min() < 0.0 or weights.max() > 1.0:
            raise ValidationError("atlas weights must lie in [0, 1]")
        if self.source_count < 1:
            raise ValidationError("atlas needs at least one source patch")
        weights.setflags(write=False)
        object.__setattr__(self, "weights", weights)

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @property
    def height(self) -> int:
        return self.weights.shape[0]


@dataclass
class LandmarkCandidate:
    """One scored atlas position; confirmation fills the walk fields."""

    center: tuple[int, int]  # (x, y)
    score: float
    confirmed: bool = False
    p_l_end: tuple[int, int] | None = None
    p_r_end: tuple[int, int] | None = None
    d_l: int = 0
    d_r: int = 0


@dataclass(frozen=True)
class RegistrationTransform:
    dx: int
    dy: int
    scale_applied: float  # mm/pixel the scan was resampled to before matching


@dataclass(frozen=True)
class ConfirmParams:
    """Thresholds of the walk heuristic, as fractions of the image width."""

    rect_width: int = 11
    rect_height: int = 5
    gap_max: int = 2  # non-fat pixels a moving point may jump over
    min_chord: float = 0.2
    max_chord: float = 0.55
    min_travel: float = 0.2
    chord_metric: str = "euclidean"  # or "horizontal"


def build_atlas(patches) -> Atlas:
    """Average binary patches (nonzero = fat) into a probability image."""
    patches = list(patches)
    if not patches:
        raise EmptyPatchSet("no patches to average")
    binaries = [(np.asarray(p) != 0).astype(np.int64) for p in patches]
    shape = binaries[0].shape
    for i, b in enumerate(binaries):
        if b.shape != shape:
            raise DimensionMismatch(f"patch {i} has shape {b.shape}, expected {shape}")
    total = np.zeros(shape, dtype=np.int64)
    for b in binaries:
        total += b
    return Atlas(weights=total / len(binaries), source_count=len(binaries))


def _wmi_weights(bins: int) -> np.ndarray:
    f = np.arange(bins)
    return 1.0 / (np.abs(f[:, None] - f[None, :]) + 1.0)


def _wmi_from_counts(counts: np.ndarray, log_base: float) -> np.ndarray:
    """WMI of joint-count matrices, vectorised over a leading batch axis.

    Probabilities come from integer counts so that an independent joint
    (counts[f, m] * N == row[f] * col[m]) scores exactly zero.
    """
    counts = counts.astype(np.float64)
    batched = counts.ndim == 3
    if not batched:
        counts = counts[None]
    n = counts.sum(axis=(1, 2), keepdims=True)
    row = counts.sum(axis=2, keepdims=True)
    col = counts.sum(axis=1, keepdims=True)
    denom = row * col
    nz = counts > 0
    ratio = np.ones_like(counts)
    np.divide(counts * n, denom, out=ratio, where=nz)
    p = counts / n
    weights = _wmi_weights(counts.shape[1])[None]
    terms = np.zeros_like(counts)
    np.log(ratio, out=terms)
    terms *= p * weights / math.log(log_base)
    scores = terms.sum(axis=(1, 2))
    return scores if batched else scores[0]


def wmi(fixed, moving, bins: int = 32, log_base: float = 2.0) -> float:
    """Weighted mutual information between a raster and an atlas.

    Both inputs are quantized to ``bins`` levels: the fixed raster over its
    own value range, the moving atlas over the fixed weight range [0, 1].
    Each joint-histogram term is down-weighted by 1/(|f-m|+1), the absolute
    bin-index difference, and empty cells contribute nothing.
    """
    if bins < 2:
        raise ValidationError(f"need at least 2 bins, got {bins}")
    f_raster = np.asarray(fixed, dtype=np.float64)
    m_raster = moving.weights if isinstance(moving, Atlas) else np.asarray(moving, dtype=np.float64)
    if f_raster.shape != m_raster.shape:
        raise DimensionMismatch(f"fixed {f_raster.shape} vs moving {m_raster.shape}")
    f = quantize_range(f_raster, f_raster.min(), f_raster.max(), bins)
    m = quantize_range(m_raster, 0.0, 1.0, bins)
    counts = np.bincount((f.ravel() * bins + m.ravel()).astype(np.int64),
                         minlength=bins * bins).reshape(bins, bins)
    return float(_wmi_from_counts(counts, log_base))


def _score_positions(windowed: np.ndarray, atlas: Atlas, xs: np.ndarray, ys: np.ndarray,
                     bins: int, log_base: float, chunk: int = 1024) -> np.ndarray:
    """WMI at each atlas top-left position; equals wmi() on the cut-out window.

    The atlas marginal is position-independent, and only the atlas's occupied
    bins can hold joint mass, so the moving axis is compressed to those
    columns before histogramming.
    """
    ah, aw = atlas.weights.shape
    m_idx = quantize_range(atlas.weights, 0.0, 1.0, bins).ravel()
    area = m_idx.size
    m_vals, m_comp = np.unique(m_idx, return_inverse=True)
    u = m_vals.size
    col = np.bincount(m_comp, minlength=u).astype(np.float64)
    # fold the per-term constants: w(f, m) / (N * ln g)
    term_scale = _wmi_weights(bins)[:, m_vals] / (area * math.log(log_base))

    view = sliding_window_view(windowed, (ah, aw))
    scores = np.empty(len(xs), dtype=np.float64)
    for start in range(0, len(xs), chunk):
        sl = slice(start, start + chunk)
        wins = view[ys[sl], xs[sl]].reshape(-1, area).astype(np.float64)
        n = wins.shape[0]
        wmin = wins.min(axis=1, keepdims=True)
        span = wins.max(axis=1, keepdims=True) - wmin
        scale = np.divide(bins, span, out=np.zeros_like(span), where=span > 0)
        f = np.clip(np.floor((wins - wmin) * scale), 0, bins - 1).astype(np.int64)
        flat = (np.arange(n)[:, None] * bins + f) * u + m_comp[None, :]
        counts = np.bincount(flat.ravel(), minlength=n * bins * u).reshape(n, bins, u)
        counts = counts.astype(np.float64)
        row = counts.sum(axis=2)
        denom = row[:, :, None] * col[None, None, :]
        ratio = np.divide(counts * area, denom, out=np.ones_like(counts), where=counts > 0)
        terms = np.log(ratio)
        terms *= counts
        terms *= term_scale[None]
        scores[sl] = terms.sum(axis=(1, 2))
    return scores


def locate_retrosternal(windowed: np.ndarray, atlas: Atlas,
                        search_region: tuple[int, int, int, int] | None = None,
                        stride: int = 2, bins: int = 32,
                        log_base: float = 2.0) -> list[LandmarkCandidate]:
    """Score every atlas placement in the search region, best first.

    ``windowed`` is a fat-range display raster (see imaging.fat_display):
    background 0 at the bottom of the value range, so intensity rank lines up
    with the atlas weights that the per-term 1/(|f-m|+1) weighting compares
    against. The region is a half-open (x0, y0, x1, y1) rectangle of the
    slice; the default is the upper half, where the retrosternal area lies on
    supine scans. Candidates are ordered by (score desc, y asc, x asc) so
    that parallel and serial scoring agree.
    """
    windowed = np.asarray(windowed)
    h, w = windowed.shape
    ah, aw = atlas.weights.shape
    if search_region is None:
        search_region = (0, 0, w, h // 2)
    x0, y0, x1, y1 = search_region
    x0, y0 = max(0, x0), max(0, y0)
    x1, y1 = min(w, x1), min(h, y1)
    if x1 - x0 < aw or y1 - y0 < ah:
        raise SearchRegionTooSmall(
            f"{aw}x{ah} atlas does not fit the {x1 - x0}x{y1 - y0} search region"
        )
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    xs = np.arange(x0, x1 - aw + 1, stride)
    ys = np.arange(y0, y1 - ah + 1, stride)
    gx, gy = np.meshgrid(xs, ys)
    gx, gy = gx.ravel(), gy.ravel()
    scores = _score_positions(windowed, atlas, gx, gy, bins, log_base)
    order = np.lexsort((gx, gy, -scores))
    return [
        LandmarkCandidate(center=(int(gx[i]) + aw // 2, int(gy[i]) + ah // 2),
                          score=float(scores[i]))
        for i in order
    ]


_LEFT_DIRS = ((-1, 1), (-1, 0), (0, 1))
_RIGHT_DIRS = ((1, 1), (1, 0), (0, 1))


def _walk(fat: np.ndarray, start: tuple[int, int], dirs, gap_max: int) -> tuple[tuple[int, int], int]:
    """Move through fat pixels until stuck; returns the endpoint and path length.

    Directions are tried in priority order; each may jump up to ``gap_max``
    consecutive non-fat pixels provided the landing pixel is fat. Every step
    is monotone in x and y, so termination is guaranteed.
    """
    h, w = fat.shape
    x, y = start
    travelled = 0
    moved = True
    while moved:
        moved = False
        for dx, dy in dirs:
            for step in range(1, gap_max + 2):
                tx, ty = x + dx * step, y + dy * step
                if not (0 <= tx < w and 0 <= ty < h):
                    break
                if fat[ty, tx]:
                    x, y, travelled, moved = tx, ty, travelled + step, True
                    break
            if moved:
                break
    return (x, y), travelled


def _seed_points(fat: np.ndarray, center: tuple[int, int], params: ConfirmParams):
    """Bottom-left-most and bottom-right-most fat pixels of rectangle A.

    Falls back to the candidate centre when A holds no fat at all; the walks
    then go nowhere and the travel predicate fails.
    """
    h, w = fat.shape
    cx, cy = center
    x0 = max(0, cx - params.rect_width // 2)
    x1 = min(w, cx + params.rect_width // 2 + 1)
    y0 = max(0, cy - params.rect_height // 2)
    y1 = min(h, cy + params.rect_height // 2 + 1)
    block = fat[y0:y1, x0:x1]
    ys, xs = np.nonzero(block)
    if xs.size == 0:
        return (cx, cy), (cx, cy)
    bottom = ys == ys.max()
    row_xs = xs[bottom]
    left = (x0 + int(row_xs.min()), y0 + int(ys.max()))
    right = (x0 + int(row_xs.max()), y0 + int(ys.max()))
    return left, right


def confirm_candidate(windowed: np.ndarray, candidate: LandmarkCandidate,
                      w: int | None = None,
                      params: ConfirmParams = ConfirmParams()) -> bool:
    """Walk two points down-left and down-right from the candidate and test:

    1. their final separation lies strictly between min_chord*w and max_chord*w,
    2. neither walked path is shorter than half the other,
    3. each endpoint moved at least min_travel*w pixels from its seed.

    Fills the candidate's endpoint and path-length fields and sets
    ``confirmed``; returns the verdict. False is the only failure signal.
    """
    windowed = np.asarray(windowed)
    if w is None:
        w = windowed.shape[1]
    fat = windowed != 0
    cx, cy = candidate.center
    if not (0 <= cx < fat.shape[1] and 0 <= cy < fat.shape[0]):
        raise ValidationError(f"candidate centre {candidate.center} outside the slice")
    seed_l, seed_r = _seed_points(fat, (cx, cy), params)
    end_l, d_l = _walk(fat, seed_l, _LEFT_DIRS, params.gap_max)
    end_r, d_r = _walk(fat, seed_r, _RIGHT_DIRS, params.gap_max)

    if params.chord_metric == "horizontal":
        chord = abs(end_r[0] - end_l[0])
    else:
        chord = math.hypot(end_r[0] - end_l[0], end_r[1] - end_l[1])
    travel_l = math.hypot(end_l[0] - seed_l[0], end_l[1] - seed_l[1])
    travel_r = math.hypot(end_r[0] - seed_r[0], end_r[1] - seed_r[1])

    ok = (
        params.min_chord * w < chord < params.max_chord * w
        and d_l >= d_r / 2
        and d_r >= d_l / 2
        and travel_l >= params.min_travel * w
        and travel_r >= params.min_travel * w
    )
    candidate.p_l_end = end_l
    candidate.p_r_end = end_r
    candidate.d_l = d_l
    candidate.d_r = d_r
    candidate.confirmed = ok
    return ok


def register_scan(scan: CtScan, atlas: Atlas, target_center: tuple[float, float],
                  *, slice_index: int = 0, window: FatWindow = FatWindow(),
                  search_region: tuple[int, int, int, int] | None = None,
                  stride: int = 2, bins: int = 32, log_base: float = 2.0,
                  confirm_params: ConfirmParams = ConfirmParams(),
                  refine: bool = True) -> tuple[CtScan, RegistrationTransform]:
    """Find the retrosternal landmark on one slice and translate the whole scan.

    Candidates are tried best-first and each is re-confirmed; the first
    confirmed one wins. With ``refine``, a stride-1 rescan of the winning
    neighbourhood sharpens the landmark before the translation is applied.
    Raises RecognitionFailed when no position confirms.
    """
    windowed = fat_display(scan.slices[slice_index].values, window)
    candidates = locate_retrosternal(windowed, atlas, search_region, stride, bins, log_base)
    best = _first_confirmed(windowed, candidates, confirm_params)
    if best is None:
        raise RecognitionFailed(f"no confirmed retrosternal position in scan {scan.patient_id}")

    if refine and stride > 1:
        ah, aw = atlas.weights.shape
        bx = best.center[0] - aw // 2
        by = best.center[1] - ah // 2
        fine_region = (bx - stride, by - stride, bx + stride + aw, by + stride + ah)
        fine = locate_retrosternal(windowed, atlas, fine_region, 1, bins, log_base)
        refined = _first_confirmed(windowed, fine, confirm_params)
        if refined is not None:
            best = refined

    dx = int(round(target_center[0] - best.center[0]))
    dy = int(round(target_center[1] - best.center[1]))
    moved = CtScan(
        patient_id=scan.patient_id,
        slices=tuple(
            HuSlice(values=translate(s.values, dx, dy, fill=0),
                    spacing_x=s.spacing_x, spacing_y=s.spacing_y, z_index=s.z_index)
            for s in scan.slices
        ),
        slice_thickness=scan.slice_thickness,
    )
    return moved, RegistrationTransform(dx=dx, dy=dy, scale_applied=scan.spacing_x)


def _first_confirmed(windowed, candidates, params):
    for cand in candidates:
        if confirm_candidate(windowed, cand, params=params):
            return cand
    return None


# -- persistence ----------------------------------------------------------------

_ATLAS_SCALE = 65535


def save_atlas(atlas: Atlas, path: Path | str, *, bins: int = 32, log_base: float = 2.0) -> None:
    """16-bit grayscale PNG of weight*65535 plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stored = np.round(atlas.weights * _ATLAS_SCALE).astype(np.uint16)
    Image.fromarray(stored).save(str(path), format="PNG")
    sidecar = {"source_count": atlas.source_count, "bins": bins, "log_base": log_base}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_atlas(path: Path | str) -> tuple[Atlas, dict]:
    path = Path(path)
    sidecar_path = path.with_suffix(".json")
    if not sidecar_path.is_file():
        raise MissingMetadata(f"no sidecar {sidecar_path.name} next to {path.name}")
    try:
        meta = json.loads(sidecar_path.read_text())
        source_count = int(meta["source_count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise MissingMetadata(f"{sidecar_path}: {exc}") from exc
    try:
        with Image.open(str(path)) as img:
            arr = np.asarray(img)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImage(f"{path}: {exc}") from exc
    atlas = Atlas(weights=arr.astype(np.float64) / _ATLAS_SCALE, source_count=source_count)
    return atlas, meta
