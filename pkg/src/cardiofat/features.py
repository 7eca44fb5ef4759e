"""Per-pixel feature vectors from registered, fat-windowed CT slices.

Each fat pixel yields its grey level, absolute and centre-of-gravity-relative
positions, and texture statistics of the surrounding vicinity: windowed mean,
co-occurrence moments, grey-mass geometric moments, run-length statistics and
a sup-metric Gaussian smooth value. Rows are always emitted in (z, y, x)
order, so any parallel schedule produces the identical dataset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .errors import (
    AlignmentMismatch,
    DegenerateWindow,
    EmptySlice,
    EvenWindowSize,
    ValidationError,
    ZeroMass,
)
from .imaging import CtScan, FatLabel, FatWindow, LabelMask, apply_fat_window, quantize_range

#: Co-occurrence offsets (dy, dx): 0, 45, 90 and 135 degrees.
DEFAULT_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))

ATTRIBUTE_NAMES = (
    "grey", "x", "y", "z", "x_rel", "y_rel", "win_mean",
    "glcm_energy", "glcm_contrast", "glcm_correlation", "glcm_homogeneity", "glcm_entropy",
    "mom_mu20", "mom_mu02", "mom_mu11",
    "run_percentage", "grey_level_nonuniformity", "csv",
)

CLASS_VALUES = ("epicardial", "mediastinal", "other")

#: FatLabel value -> class index (background has no class).
_LABEL_TO_CLASS = np.array([-1, 0, 1, 2], dtype=np.intp)


@dataclass(frozen=True)
class FeatureParams:
    """Knobs of the feature extractor; defaults match the training setup."""

    window_size: int = 25
    levels: int = 16
    sigma: float | None = None  # None resolves to window radius / 2
    window: FatWindow = FatWindow()
    cog_weighting: str = "grey"  # or "binary"

    def __post_init__(self):
        if self.window_size % 2 == 0 or self.window_size < 1:
            raise EvenWindowSize(f"vicinity size must be odd, got {self.window_size}")
        if self.levels < 2:
            raise ValidationError(f"need at least 2 grey levels, got {self.levels}")

    @property
    def radius(self) -> int:
        return self.window_size // 2

    def resolved_sigma(self) -> float:
        return self.sigma if self.sigma is not None else self.radius / 2

    def to_dict(self) -> dict:
        return {
            "window_size": self.window_size,
            "levels": self.levels,
            "sigma": self.sigma,
            "fat_lo": self.window.lo,
            "fat_hi": self.window.hi,
            "cog_weighting": self.cog_weighting,
        }

    @staticmethod
    def from_dict(d: dict) -> "FeatureParams":
        return FeatureParams(
            window_size=int(d["window_size"]),
            levels=int(d["levels"]),
            sigma=None if d.get("sigma") is None else float(d["sigma"]),
            window=FatWindow(int(d["fat_lo"]), int(d["fat_hi"])),
            cog_weighting=str(d.get("cog_weighting", "grey")),
        )


class GlcmMoments(NamedTuple):
    energy: float
    contrast: float
    correlation: float
    homogeneity: float
    entropy: float


class RunLengthStats(NamedTuple):
    run_percentage: float
    grey_level_nonuniformity: float


def center_of_gravity(windowed, weighting: str = "grey") -> tuple[float, float]:
    """Centroid (x, y) of the non-background pixels of a fat-windowed raster.

    Grey weighting uses the HU magnitude as mass (fat HU are negative, so the
    magnitude keeps masses positive with the identical centroid); binary
    weighting counts every non-background pixel equally.
    """
    v = np.asarray(windowed)
    nz = v != 0
    if not nz.any():
        raise EmptySlice("no non-background pixels")
    if weighting == "binary":
        mass = nz.astype(np.float64)
    elif weighting == "grey":
        mass = np.abs(v).astype(np.float64)
    else:
        raise ValidationError(f"unknown weighting {weighting!r}")
    total = mass.sum()
    ys, xs = np.indices(v.shape)
    return float((mass * xs).sum() / total), float((mass * ys).sum() / total)


def extract_window(stack, x: int, y: int, z: int, size: int = 25) -> np.ndarray:
    """size x size vicinity centred at (x, y) on slice z; outside cells are 0."""
    if size % 2 == 0 or size < 1:
        raise EvenWindowSize(f"vicinity size must be odd, got {size}")
    arr = np.asarray(stack[z])
    r = size // 2
    out = np.zeros((size, size), dtype=arr.dtype)
    h, w = arr.shape
    sy0, sy1 = max(0, y - r), min(h, y + r + 1)
    sx0, sx1 = max(0, x - r), min(w, x + r + 1)
    if sy0 < sy1 and sx0 < sx1:
        out[sy0 - (y - r):sy1 - (y - r), sx0 - (x - r):sx1 - (x - r)] = arr[sy0:sy1, sx0:sx1]
    return out


def _levels_with_background(window, levels: int, value_range) -> np.ndarray:
    """Quantized grey levels; background (value 0) cells are marked -1."""
    win = np.asarray(window, dtype=np.float64)
    bg = win == 0
    if value_range is None:
        vals = win[~bg]
        if vals.size == 0:
            raise DegenerateWindow("window is entirely background")
        lo, hi = float(vals.min()), float(vals.max())
    else:
        lo, hi = value_range
    q = quantize_range(win, lo, hi, levels).astype(np.int64)
    q[bg] = -1
    return q


def _glcm_counts(q: np.ndarray, levels: int, offsets) -> tuple[np.ndarray, int]:
    """Symmetric co-occurrence counts over the offset set; background excluded."""
    counts = np.zeros((levels, levels), dtype=np.int64)
    pairs = 0
    h, w = q.shape
    for dy, dx in offsets:
        y0, y1 = max(0, -dy), h - max(0, dy)
        x0, x1 = max(0, -dx), w - max(0, dx)
        if y0 >= y1 or x0 >= x1:
            continue
        a = q[y0:y1, x0:x1]
        b = q[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
        valid = (a >= 0) & (b >= 0)
        if not valid.any():
            continue
        idx = a[valid] * levels + b[valid]
        c = np.bincount(idx, minlength=levels * levels).reshape(levels, levels)
        counts += c + c.T
        pairs += int(valid.sum())
    return counts, pairs


def _glcm_props(counts: np.ndarray) -> GlcmMoments:
    p = counts.astype(np.float64)
    p /= p.sum()
    levels = p.shape[0]
    i = np.arange(levels, dtype=np.float64)
    diff = i[:, None] - i[None, :]
    energy = float((p * p).sum())
    contrast = float((p * diff**2).sum())
    homogeneity = float((p / (1.0 + diff**2)).sum())
    nz = p > 0
    entropy = float(-(p[nz] * np.log2(p[nz])).sum())
    pi = p.sum(axis=1)
    pj = p.sum(axis=0)
    mu_i = float((i * pi).sum())
    mu_j = float((i * pj).sum())
    var_i = float(((i - mu_i) ** 2 * pi).sum())
    var_j = float(((i - mu_j) ** 2 * pj).sum())
    denom = math.sqrt(var_i * var_j)
    if denom == 0.0:
        correlation = 1.0  # zero-variance matrix: the window is one grey level
    else:
        correlation = float(((i[:, None] - mu_i) * (i[None, :] - mu_j) * p).sum() / denom)
    return GlcmMoments(energy, contrast, correlation, homogeneity, entropy)


def glcm_moments(window, levels: int = 16, offsets=DEFAULT_OFFSETS,
                 value_range: tuple[float, float] | None = None) -> GlcmMoments:
    """Haralick moments of the vicinity's symmetric co-occurrence matrix.

    The window is quantized to ``levels`` grey bins over ``value_range`` (its
    own non-background range when None); background cells never pair.
    """
    if levels < 2:
        raise ValidationError(f"need at least 2 levels, got {levels}")
    q = _levels_with_background(window, levels, value_range)
    counts, pairs = _glcm_counts(q, levels, offsets)
    if pairs < 2:
        raise DegenerateWindow(f"only {pairs} co-occurring pairs")
    return _glcm_props(counts)


def _run_stats(q: np.ndarray) -> tuple[int, int, np.ndarray]:
    """(run_count, counted_pixels, runs per level) of horizontal maximal runs."""
    valid = q >= 0
    same_as_left = np.zeros_like(valid)
    same_as_left[:, 1:] = valid[:, 1:] & valid[:, :-1] & (q[:, 1:] == q[:, :-1])
    starts = valid & ~same_as_left
    run_levels = q[starts]
    run_count = int(starts.sum())
    per_level = np.bincount(run_levels, minlength=int(q.max()) + 1 if run_count else 1)
    return run_count, int(valid.sum()), per_level


def run_length_stats(window, levels: int = 16,
                     value_range: tuple[float, float] | None = None) -> RunLengthStats:
    """Run percentage and grey-level non-uniformity of horizontal runs.

    Runs are maximal horizontal stretches of one quantized level; background
    cells break runs and are not counted.
    """
    if levels < 2:
        raise ValidationError(f"need at least 2 levels, got {levels}")
    q = _levels_with_background(window, levels, value_range)
    run_count, counted, per_level = _run_stats(q)
    if counted == 0 or run_count == 0:
        raise DegenerateWindow("window is entirely background")
    rp = run_count / counted
    gln = float((per_level.astype(np.float64) ** 2).sum() / run_count)
    return RunLengthStats(rp, gln)


def geometric_moments(window) -> tuple[float, float, float]:
    """Second-order central moments (mu20, mu02, mu11) with grey magnitude as mass.

    Moments are taken about the grey-mass centroid and normalized by total
    mass; background cells carry zero mass.
    """
    win = np.asarray(window, dtype=np.float64)
    mass = np.abs(win)
    total = mass.sum()
    if total == 0:
        raise ZeroMass("window carries no grey mass")
    ys, xs = np.indices(win.shape)
    xbar = (mass * xs).sum() / total
    ybar = (mass * ys).sum() / total
    mu20 = float((mass * (xs - xbar) ** 2).sum() / total)
    mu02 = float((mass * (ys - ybar) ** 2).sum() / total)
    mu11 = float((mass * (xs - xbar) * (ys - ybar)).sum() / total)
    return mu20, mu02, mu11


def csv_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized kernel: 1-D Gaussian density of the Chebyshev (sup) distance."""
    if sigma <= 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    r = size // 2
    dy, dx = np.indices((size, size)) - r
    d = np.maximum(np.abs(dx), np.abs(dy)).astype(np.float64)
    g = np.exp(-(d**2) / (2.0 * sigma**2)) / (sigma * math.sqrt(2.0 * math.pi))
    return g / g.sum()


def csv(window, sigma: float | None = None) -> float:
    """Coefficient of smooth variation: the kernel-weighted mean of the window.

    The kernel weight of a cell depends only on its sup-metric distance from
    the centre, so the value is invariant under 90-degree window rotations,
    and it always lies within [min, max] of the window values.
    """
    win = np.asarray(window, dtype=np.float64)
    size = win.shape[0]
    if win.ndim != 2 or win.shape[1] != size:
        raise ValidationError(f"expected a square window, got {win.shape}")
    if sigma is None:
        sigma = (size // 2) / 2
    return float((csv_kernel(size, sigma) * win).sum())


def window_mean(window) -> float:
    """Plain arithmetic mean over every vicinity cell (background zeros included)."""
    return float(np.asarray(window, dtype=np.float64).mean())


def pixel_features(stack, x: int, y: int, z_stack: int, params: FeatureParams,
                   cog: tuple[float, float] | None = None,
                   z_value: int | None = None) -> np.ndarray:
    """Reference single-pixel feature vector assembled from the per-window ops.

    The batched extractor must reproduce this row for every pixel; it exists
    for tests and one-off inspection, not for bulk extraction.
    """
    windowed = np.asarray(stack[z_stack])
    if cog is None:
        cog = center_of_gravity(windowed, params.cog_weighting)
    win = extract_window(stack, x, y, z_stack, params.window_size)
    vrange = (float(params.window.lo), float(params.window.hi))
    glcm = glcm_moments(win, params.levels, DEFAULT_OFFSETS, vrange)
    runs = run_length_stats(win, params.levels, vrange)
    mu20, mu02, mu11 = geometric_moments(win)
    zv = z_stack if z_value is None else z_value
    return np.array([
        float(windowed[y, x]), float(x), float(y), float(zv),
        x - cog[0], y - cog[1],
        window_mean(win),
        glcm.energy, glcm.contrast, glcm.correlation, glcm.homogeneity, glcm.entropy,
        mu20, mu02, mu11,
        runs.run_percentage, runs.grey_level_nonuniformity,
        csv(win, params.resolved_sigma()),
    ])


#: GLCM moments of a window with fewer than two co-occurring pairs: the
#: constant-window limit, used by the batch extractor where the strict
#: operation would refuse the vicinity.
_DEGENERATE_GLCM = GlcmMoments(1.0, 0.0, 1.0, 1.0, 0.0)


def _integral(arr: np.ndarray) -> np.ndarray:
    out = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1), dtype=np.float64)
    out[1:, 1:] = arr.cumsum(axis=0).cumsum(axis=1)
    return out


class SliceFeatureExtractor:
    """Feature rows for many pixels of one slice, batched for speed.

    Integral images give exact window sums for the mean and the geometric
    moments (all quantities are integers below 2**53), an FFT convolution
    evaluates the smooth-variation field, and only the co-occurrence and
    run-length statistics fall back to a per-pixel loop over precomputed
    padded level rasters.
    """

    def __init__(self, windowed_stack, z_stack: int, params: FeatureParams,
                 z_value: int | None = None):
        self.params = params
        self.z_value = z_stack if z_value is None else z_value
        windowed = np.asarray(windowed_stack[z_stack])
        self.windowed = windowed
        self.cog = center_of_gravity(windowed, params.cog_weighting)
        r = params.radius
        self._r = r

        vrange = (float(params.window.lo), float(params.window.hi))
        q = quantize_range(windowed, vrange[0], vrange[1], params.levels).astype(np.int64)
        q[windowed == 0] = -1
        self._q_pad = np.pad(q, r, constant_values=-1)

        values_pad = np.pad(windowed.astype(np.float64), r)
        self._sum_values = _integral(values_pad)

        mass_pad = np.abs(values_pad)
        ypad, xpad = np.indices(mass_pad.shape, dtype=np.float64)
        self._sum_m = _integral(mass_pad)
        self._sum_mx = _integral(mass_pad * xpad)
        self._sum_my = _integral(mass_pad * ypad)
        self._sum_mxx = _integral(mass_pad * xpad * xpad)
        self._sum_myy = _integral(mass_pad * ypad * ypad)
        self._sum_mxy = _integral(mass_pad * xpad * ypad)

        kernel = csv_kernel(params.window_size, params.resolved_sigma())
        self._csv_field = fftconvolve(windowed.astype(np.float64), kernel, mode="same")

    def _window_sums(self, integral, xs, ys):
        s = self.params.window_size
        return (integral[ys + s, xs + s] - integral[ys, xs + s]
                - integral[ys + s, xs] + integral[ys, xs])

    def rows(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Feature matrix for pixels (xs[i], ys[i]); order follows the input."""
        xs = np.asarray(xs, dtype=np.intp)
        ys = np.asarray(ys, dtype=np.intp)
        n = xs.size
        p = self.params
        size = p.window_size
        r = self._r

        out = np.empty((n, len(ATTRIBUTE_NAMES)), dtype=np.float64)
        out[:, 0] = self.windowed[ys, xs]
        out[:, 1] = xs
        out[:, 2] = ys
        out[:, 3] = self.z_value
        out[:, 4] = xs - self.cog[0]
        out[:, 5] = ys - self.cog[1]
        out[:, 6] = self._window_sums(self._sum_values, xs, ys) / (size * size)

        # Geometric moments: shift raw absolute-coordinate sums (exact
        # integers) to window-local coordinates before normalizing.
        sm = self._window_sums(self._sum_m, xs, ys)
        sx = self._window_sums(self._sum_mx, xs, ys) - xs * sm
        sy = self._window_sums(self._sum_my, xs, ys) - ys * sm
        sxx = (self._window_sums(self._sum_mxx, xs, ys)
               - 2.0 * xs * self._window_sums(self._sum_mx, xs, ys) + xs * xs * sm)
        syy = (self._window_sums(self._sum_myy, xs, ys)
               - 2.0 * ys * self._window_sums(self._sum_my, xs, ys) + ys * ys * sm)
        sxy = (self._window_sums(self._sum_mxy, xs, ys)
               - xs * self._window_sums(self._sum_my, xs, ys)
               - ys * self._window_sums(self._sum_mx, xs, ys) + xs * ys * sm)
        with np.errstate(invalid="ignore", divide="ignore"):
            xbar = sx / sm
            ybar = sy / sm
            out[:, 12] = sxx / sm - xbar**2
            out[:, 13] = syy / sm - ybar**2
            out[:, 14] = sxy / sm - xbar * ybar

        levels = p.levels
        qp = self._q_pad
        for i in range(n):
            block = qp[ys[i]:ys[i] + size, xs[i]:xs[i] + size]
            counts, pairs = _glcm_counts(block, levels, DEFAULT_OFFSETS)
            glcm = _glcm_props(counts) if pairs >= 2 else _DEGENERATE_GLCM
            out[i, 7:12] = glcm
            run_count, counted, per_level = _run_stats(block)
            out[i, 15] = run_count / counted
            out[i, 16] = (per_level.astype(np.float64) ** 2).sum() / run_count

        out[:, 17] = self._csv_field[ys, xs]
        return out


@dataclass
class Dataset:
    """Feature rows plus the attribute schema; the nominal class is last."""

    X: np.ndarray  # (n, len(attribute_names)) float64
    y: np.ndarray  # (n,) class indices into class_values
    attribute_names: tuple[str, ...] = ATTRIBUTE_NAMES
    class_values: tuple[str, ...] = CLASS_VALUES
    relation: str = "cardiac_fat"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64).reshape(-1, len(self.attribute_names))
        self.y = np.asarray(self.y, dtype=np.intp).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValidationError(f"{self.X.shape[0]} rows but {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= len(self.class_values)):
            raise ValidationError("class index out of range")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_attributes(self) -> int:
        return len(self.attribute_names)

    def take(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(X=self.X[indices], y=self.y[indices],
                       attribute_names=self.attribute_names,
                       class_values=self.class_values,
                       relation=self.relation, provenance=dict(self.provenance))


def build_dataset(scans: Sequence[CtScan], masks: Sequence[Sequence[LabelMask]],
                  params: FeatureParams = FeatureParams(),
                  sample_stride: int = 1) -> Dataset:
    """One row per sampled labelled fat pixel of the registered scans.

    Pixels are taken where the slice is inside the fat window and the mask is
    non-background, on the (y % stride, x % stride) == 0 grid, in (z, y, x)
    order. A mask labelling a background pixel means scan and mask are out of
    alignment and raises.
    """
    if sample_stride < 1:
        raise ValidationError(f"sample_stride must be >= 1, got {sample_stride}")
    if len(scans) != len(masks):
        raise AlignmentMismatch(f"{len(scans)} scans but {len(masks)} mask stacks")
    blocks: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    patient_ids = []
    for scan, scan_masks in zip(scans, masks):
        if len(scan_masks) != len(scan):
            raise AlignmentMismatch(
                f"scan {scan.patient_id}: {len(scan)} slices but {len(scan_masks)} masks"
            )
        patient_ids.append(scan.patient_id)
        stack = np.stack([apply_fat_window(s.values, params.window) for s in scan.slices])
        grid = np.zeros(stack.shape[1:], dtype=bool)
        grid[::sample_stride, ::sample_stride] = True
        for zi, (slc, mask) in enumerate(zip(scan.slices, scan_masks)):
            if (mask.height, mask.width) != (slc.height, slc.width):
                raise AlignmentMismatch(
                    f"scan {scan.patient_id} z={slc.z_index}: mask {mask.width}x{mask.height} "
                    f"vs slice {slc.width}x{slc.height}"
                )
            windowed = stack[zi]
            labelled = mask.labels != FatLabel.BACKGROUND
            if bool((labelled & (windowed == 0)).any()):
                raise AlignmentMismatch(
                    f"scan {scan.patient_id} z={slc.z_index}: mask labels fat outside the window"
                )
            sel = labelled & grid
            ys, xs = np.nonzero(sel)
            if ys.size == 0:
                continue
            extractor = SliceFeatureExtractor(stack, zi, params, z_value=slc.z_index)
            blocks.append(extractor.rows(xs, ys))
            labels.append(_LABEL_TO_CLASS[mask.labels[ys, xs]])
    if blocks:
        X = np.vstack(blocks)
        y = np.concatenate(labels)
    else:
        X = np.empty((0, len(ATTRIBUTE_NAMES)))
        y = np.empty((0,), dtype=np.intp)
    provenance = {"patient_ids": patient_ids, "sample_stride": sample_stride}
    provenance.update(params.to_dict())
    return Dataset(X=X, y=y, provenance=provenance)
