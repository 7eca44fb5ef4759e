"""Pipeline configuration: TOML file plus per-flag overrides.

Defaults follow the training setup: fat window [-200, -30] HU, 25x25
vicinity, 16 grey levels, forest of 10 trees with k=0 and seed 1.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import FormatError, IoError, ValidationError
from .features import FeatureParams
from .imaging import FatWindow
from .registration import ConfirmParams


@dataclass(frozen=True)
class PipelineConfig:
    fat_lo: int = -200
    fat_hi: int = -30
    standard_spacing: float = 0.7  # mm/pixel all scans are resampled to
    target_center: tuple[float, float] = (256.0, 153.6)  # (w/2, 0.3*h) for 512^2
    slice_index: int = 0  # slice used for landmark recognition
    search_stride: int = 2
    gap_max: int = 2
    bins: int = 32
    log_base: float = 2.0
    window_size: int = 25
    levels: int = 16
    sigma: float | None = None
    sample_stride: int = 1
    n_trees: int = 10
    k_per_split: int = 0
    seed: int = 1
    threads: int = 1

    def fat_window(self) -> FatWindow:
        return FatWindow(self.fat_lo, self.fat_hi)

    def feature_params(self) -> FeatureParams:
        return FeatureParams(window_size=self.window_size, levels=self.levels,
                             sigma=self.sigma, window=self.fat_window())

    def confirm_params(self) -> ConfirmParams:
        return ConfirmParams(gap_max=self.gap_max)


_TOML_MAP = {
    ("window", "lo"): "fat_lo",
    ("window", "hi"): "fat_hi",
    ("registration", "spacing"): "standard_spacing",
    ("registration", "target_center"): "target_center",
    ("registration", "slice_index"): "slice_index",
    ("registration", "search_stride"): "search_stride",
    ("registration", "gap_max"): "gap_max",
    ("registration", "bins"): "bins",
    ("registration", "log_base"): "log_base",
    ("features", "window_size"): "window_size",
    ("features", "levels"): "levels",
    ("features", "sigma"): "sigma",
    ("features", "sample_stride"): "sample_stride",
    ("forest", "trees"): "n_trees",
    ("forest", "k"): "k_per_split",
    ("forest", "seed"): "seed",
    ("run", "threads"): "threads",
}


def load_config(path: Path | str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.is_file():
        raise IoError(f"config file not found: {path}")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    fields = {}
    for (table, key), attr in _TOML_MAP.items():
        if table in data and key in data[table]:
            value = data[table][key]
            if attr == "target_center":
                if not (isinstance(value, list) and len(value) == 2):
                    raise ValidationError(f"{path}: target_center must be [x, y]")
                value = (float(value[0]), float(value[1]))
            fields[attr] = value
    try:
        return replace(PipelineConfig(), **fields)
    except TypeError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
