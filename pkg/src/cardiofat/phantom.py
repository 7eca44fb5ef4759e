"""Synthetic cardiac phantoms with analytic ground truth.

Each phantom is a stack of identical-geometry slices: a fat-valued
pericardial ring with a retrosternal patch merged into its top, epicardial
blobs inside the ring and mediastinal blobs outside, on a soft-tissue
background. Every class carries its own stationary texture law, so texture
features hold class signal, and every fat-labelled pixel has HU inside the
fat window. Generation is a pure function of (seed, index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .imaging import CtScan, FatLabel, FatWindow, HuSlice, LabelMask, save_mask, save_scan


@dataclass(frozen=True)
class TextureLaw:
    mean: float
    amplitude: float
    blur: float  # gaussian smoothing of the noise field; 0 = white noise


@dataclass(frozen=True)
class PhantomGeometry:
    image_size: int = 512
    n_slices: int = 3
    spacing: float = 0.7  # mm/pixel
    slice_thickness: float = 2.5  # mm
    center_jitter: int = 30  # max |offset| of the ring centre from image centre
    ring_radius: tuple[float, float] = (95.0, 115.0)
    ring_thickness: tuple[float, float] = (10.0, 14.0)
    patch_semi_x: tuple[float, float] = (22.0, 28.0)
    patch_semi_y: tuple[float, float] = (9.0, 13.0)
    blob_count: tuple[int, int] = (2, 4)  # inclusive range, per compartment
    epicardial_semi: tuple[float, float] = (10.0, 20.0)
    mediastinal_semi: tuple[float, float] = (12.0, 24.0)
    clearance: float = 6.0  # min gap between blobs and the ring, in pixels
    border_margin: int = 20
    patch_crop: tuple[int, int] = (64, 32)  # (width, height) of atlas patches

    # Texture per class; distinct means and roughness keep the two fat
    # compartments separable by grey level and by texture.
    background: TextureLaw = TextureLaw(40.0, 8.0, 0.0)
    ring: TextureLaw = TextureLaw(-110.0, 15.0, 1.0)
    patch: TextureLaw = TextureLaw(-100.0, 12.0, 1.5)
    epicardial: TextureLaw = TextureLaw(-150.0, 18.0, 2.0)
    mediastinal: TextureLaw = TextureLaw(-70.0, 22.0, 0.0)


@dataclass(frozen=True)
class Phantom:
    scan: CtScan
    masks: tuple[LabelMask, ...]
    landmark: tuple[int, int]  # true retrosternal centre (x, y)
    offset: tuple[int, int]  # ring centre displacement from the image centre
    seed: int
    index: int
    geometry: PhantomGeometry

    @property
    def patient_id(self) -> str:
        return self.scan.patient_id

    def patch(self) -> np.ndarray:
        """Binary fat-presence crop around the landmark, atlas-patch sized."""
        pw, ph = self.geometry.patch_crop
        lx, ly = self.landmark
        x0, y0 = lx - pw // 2, ly - ph // 2
        return (self.masks[0].labels[y0:y0 + ph, x0:x0 + pw] != 0).astype(np.uint8)


def _ellipse(xx, yy, cx, cy, sx, sy):
    return ((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2 <= 1.0


def _textured(rng, shape, law: TextureLaw, window: FatWindow, clip_to_window: bool):
    noise = rng.standard_normal(shape)
    if law.blur > 0:
        noise = gaussian_filter(noise, law.blur, mode="reflect")
        noise /= noise.std()
    field = law.mean + law.amplitude * noise
    if clip_to_window:
        return np.clip(np.rint(field), window.lo, window.hi)
    return np.clip(np.rint(field), window.hi + 1, 100.0)


def generate_phantom(seed: int, index: int,
                     geometry: PhantomGeometry = PhantomGeometry()) -> Phantom:
    g = geometry
    size = g.image_size
    window = FatWindow()
    rng = np.random.default_rng([seed, index])

    off_x = int(rng.integers(-g.center_jitter, g.center_jitter + 1))
    off_y = int(rng.integers(-g.center_jitter, g.center_jitter + 1))
    cx, cy = size // 2 + off_x, size // 2 + off_y
    radius = float(rng.uniform(*g.ring_radius))
    thickness = float(rng.uniform(*g.ring_thickness))

    yy, xx = np.indices((size, size), dtype=np.float64)
    dist2 = (xx - cx) ** 2 + (yy - cy) ** 2
    ring = (dist2 <= radius**2) & (dist2 >= (radius - thickness) ** 2)

    patch_sx = float(rng.uniform(*g.patch_semi_x))
    patch_sy = float(rng.uniform(*g.patch_semi_y))
    landmark = (cx, int(round(cy - radius + 2)))
    patch = _ellipse(xx, yy, landmark[0], landmark[1], patch_sx, patch_sy)

    labels = np.zeros((size, size), dtype=np.uint8)
    labels[ring | patch] = FatLabel.OTHER_FAT

    inner_limit = radius - thickness - g.clearance
    for _ in range(int(rng.integers(g.blob_count[0], g.blob_count[1] + 1))):
        sx = float(rng.uniform(*g.epicardial_semi))
        sy = float(rng.uniform(*g.epicardial_semi))
        reach = inner_limit - max(sx, sy)
        angle = float(rng.uniform(0.0, 2.0 * np.pi))
        d = float(rng.uniform(0.0, max(reach, 0.0)))
        bx, by = cx + d * np.cos(angle), cy + d * np.sin(angle)
        labels[_ellipse(xx, yy, bx, by, sx, sy)] = FatLabel.EPICARDIAL

    outer_limit = radius + g.clearance
    pw, ph = g.patch_crop
    for _ in range(int(rng.integers(g.blob_count[0], g.blob_count[1] + 1))):
        for _attempt in range(64):
            sx = float(rng.uniform(*g.mediastinal_semi))
            sy = float(rng.uniform(*g.mediastinal_semi))
            margin = g.border_margin + max(sx, sy)
            bx = float(rng.uniform(margin, size - margin))
            by = float(rng.uniform(margin, size - margin))
            if np.hypot(bx - cx, by - cy) < outer_limit + max(sx, sy):
                continue
            # keep clear of the atlas crop so recognition stays unambiguous
            if (abs(bx - landmark[0]) < pw / 2 + sx + g.clearance
                    and abs(by - landmark[1]) < ph / 2 + sy + g.clearance):
                continue
            labels[_ellipse(xx, yy, bx, by, sx, sy)] = FatLabel.MEDIASTINAL
            break

    laws = {
        int(FatLabel.OTHER_FAT): g.ring,
        int(FatLabel.EPICARDIAL): g.epicardial,
        int(FatLabel.MEDIASTINAL): g.mediastinal,
    }
    patch_region = patch & (labels == FatLabel.OTHER_FAT)

    slices = []
    for z in range(g.n_slices):
        values = _textured(rng, (size, size), g.background, window, clip_to_window=False)
        for label_value, law in laws.items():
            region = labels == label_value
            values[region] = _textured(rng, (size, size), law, window, True)[region]
        values[patch_region] = _textured(rng, (size, size), g.patch, window, True)[patch_region]
        slices.append(HuSlice(values=values.astype(np.int16), spacing_x=g.spacing,
                              spacing_y=g.spacing, z_index=z))

    scan = CtScan(patient_id=f"phantom{index:03d}", slices=tuple(slices),
                  slice_thickness=g.slice_thickness)
    masks = tuple(LabelMask(labels=labels, z_index=z) for z in range(g.n_slices))
    return Phantom(scan=scan, masks=masks, landmark=landmark, offset=(off_x, off_y),
                   seed=seed, index=index, geometry=g)


def generate_corpus(seed: int, count: int,
                    geometry: PhantomGeometry = PhantomGeometry()) -> list[Phantom]:
    return [generate_phantom(seed, i, geometry) for i in range(count)]


def write_phantom(phantom: Phantom, root: Path | str) -> Path:
    """Write scan, truth masks, metadata and the atlas patch under ``root``."""
    root = Path(root)
    pid = phantom.patient_id
    scan_dir = root / pid
    save_scan(phantom.scan, scan_dir)
    for mask in phantom.masks:
        save_mask(mask, scan_dir / "truth" / f"{pid}_{mask.z_index:03d}.png")
    meta = {
        "patient_id": pid,
        "seed": phantom.seed,
        "index": phantom.index,
        "landmark": list(phantom.landmark),
        "offset": list(phantom.offset),
    }
    (scan_dir / "phantom.json").write_text(json.dumps(meta, indent=2) + "\n")
    patches_dir = root / "patches"
    patches_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(phantom.patch() * 255).save(str(patches_dir / f"{pid}.png"), format="PNG")
    return scan_dir
