"""Brain volume handling: file I/O, downscaling, intensity scaling, augmentation
and a synthetic renderer standing in for skull-stripped MR scans.

Volumes are numpy arrays indexed ``[x, y, z]``; the ``z`` axis is
inferior-superior, so the axial plane is ``(x, y)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"RVOL"
PAPER_DIMS = (102, 108, 75)
TINY_DIMS = (26, 27, 19)
_MAX_VOXELS = 1 << 31


class VolumeFormatError(ValueError):
    """Malformed volume file."""


@dataclass
class AugmentSpec:
    max_rotation_deg: float = 5.0
    blur_sigma_max: float = 0.8
    contrast_percentiles: tuple[float, float] = (2.0, 98.0)
    percentile_jitter: float = 1.0
    rotate: bool = True
    blur: bool = True
    contrast: bool = True
    rotation_axes: tuple[int, int] = (0, 1)

    def disabled(self) -> "AugmentSpec":
        return AugmentSpec(self.max_rotation_deg, self.blur_sigma_max, self.contrast_percentiles,
                           self.percentile_jitter, False, False, False, self.rotation_axes)


def downscale(v: np.ndarray, factor: int = 2) -> np.ndarray:
    """Block-mean downscaling; trailing partial blocks are dropped."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if any(factor > d for d in v.shape):
        raise ValueError(f"factor {factor} larger than a dimension of {v.shape}")
    if factor == 1:
        return v.copy()
    x, y, z = (d // factor for d in v.shape)
    blocks = v[: x * factor, : y * factor, : z * factor].reshape(x, factor, y, factor, z, factor)
    return blocks.mean(axis=(1, 3, 5)).astype(v.dtype, copy=False)


def normalize_intensity(v: np.ndarray) -> np.ndarray:
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return np.zeros_like(v)
    return ((v - lo) / (hi - lo)).astype(v.dtype, copy=False)


def rotate(v: np.ndarray, angle_deg: float, axes=(0, 1)) -> np.ndarray:
    """Rotate within the plane ``axes`` with trilinear resampling; outside voxels are 0."""
    if angle_deg == 0:
        return v.copy()
    return ndimage.rotate(v, angle_deg, axes=axes, reshape=False, order=1, mode="constant",
                          cval=0.0)


def gaussian_blur(v: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur truncated at 3 sigma."""
    if sigma <= 0:
        return v.copy()
    return ndimage.gaussian_filter(v, sigma, truncate=3.0, mode="constant", cval=0.0)


def contrast_stretch(v: np.ndarray, low_pct: float, high_pct: float) -> np.ndarray:
    lo, hi = np.percentile(v, [low_pct, high_pct])
    if hi <= lo:
        return v.copy()
    return np.clip((v - lo) / (hi - lo), 0.0, 1.0).astype(v.dtype, copy=False)


def augment(v: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Random rotation, blur and contrast stretch, in that order; output in [0, 1]."""
    out = v
    if spec.rotate:
        angle = rng.uniform(0.0, spec.max_rotation_deg) * rng.choice((-1.0, 1.0))
        out = rotate(out, angle, spec.rotation_axes)
    if spec.blur:
        out = gaussian_blur(out, rng.uniform(0.0, spec.blur_sigma_max))
    if spec.contrast:
        j = spec.percentile_jitter
        lo = spec.contrast_percentiles[0] + rng.uniform(-j, j)
        hi = spec.contrast_percentiles[1] + rng.uniform(-j, j)
        out = contrast_stretch(out, max(lo, 0.0), min(hi, 100.0))
    if out is v:
        return v.copy()
    return np.clip(out, 0.0, 1.0).astype(v.dtype, copy=False)


def render_synthetic_brain(atrophy: float, dims=TINY_DIMS, rng: np.random.Generator | None = None,
                           scale=(1.0, 1.0, 1.0), noise: float = 0.02) -> np.ndarray:
    """Nested-ellipsoid phantom whose ventricle grows and cortex thins with ``atrophy``.

    ``scale`` jitters the head shape per subject; voxel noise comes from ``rng``.
    """
    if any(d < 16 for d in dims):
        raise ValueError(f"dims must be >= 16 per axis, got {dims}")
    atrophy = float(np.clip(atrophy, 0.0, 1.0))
    rng = rng if rng is not None else np.random.default_rng(0)
    axes = [np.linspace(-1.0, 1.0, d) / s for d, s in zip(dims, scale)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    r = np.sqrt(gx**2 + gy**2 + gz**2)
    brain_r = 0.9 - 0.05 * atrophy
    cortex = 0.22 * (1.0 - 0.6 * atrophy)
    ventricle = 0.12 + 0.28 * atrophy
    v = np.zeros(dims, dtype=np.float32)
    v[r <= brain_r] = 0.55  # grey matter band
    v[r <= brain_r - cortex] = 0.9  # white matter
    v[r <= ventricle] = 0.15  # csf
    v = gaussian_blur(v, 0.7)
    v += rng.normal(0.0, noise, size=dims).astype(np.float32)
    return np.clip(v, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# RVOL: magic, three u32 LE dims (X, Y, Z), X*Y*Z f32 LE voxels, x fastest


def write_volume(v: np.ndarray, path: str | Path) -> None:
    if v.ndim != 3:
        raise ValueError(f"volume must be 3D, got shape {v.shape}")
    header = MAGIC + struct.pack("<3I", *v.shape)
    payload = np.asarray(v, dtype="<f4").tobytes(order="F")
    Path(path).write_bytes(header + payload)


def read_volume(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic")
    if len(raw) < 16:
        raise VolumeFormatError(f"{path}: truncated header")
    dims = struct.unpack("<3I", raw[4:16])
    n = dims[0] * dims[1] * dims[2]
    if n == 0 or n >= _MAX_VOXELS:
        raise VolumeFormatError(f"{path}: invalid dims {dims}")
    if len(raw) - 16 != 4 * n:
        raise VolumeFormatError(f"{path}: header dims {dims} disagree with payload of "
                                f"{len(raw) - 16} bytes")
    data = np.frombuffer(raw, dtype="<f4", offset=16)
    return data.reshape(dims, order="F").astype(np.float32)
