"""Intensity normalisation and affine pre-resampling."""
from dataclasses import dataclass

import numpy as np

from .volume import as_volume, sample_at

LOW_PERCENTILE = 1.0
HIGH_PERCENTILE = 99.0
MIN_MASK_VOXELS = 16


class AffineFormatError(ValueError):
    pass


@dataclass(frozen=True)
class IntensityMap:
    """Clip to ``[lo, hi]`` then standardise with ``mean`` and ``std``."""

    lo: float
    hi: float
    mean: float
    std: float

    @classmethod
    def estimate(cls, vol, mask=None):
        """Robust statistics of the in-mask voxels of ``vol``."""
        vol = as_volume(vol)
        mask = _check_mask(vol, mask)
        inside = vol if mask is None else vol[mask]
        if inside.size < MIN_MASK_VOXELS:
            raise ValueError(f"need at least {MIN_MASK_VOXELS} voxels in the mask, got {inside.size}")
        lo, hi = np.percentile(inside, [LOW_PERCENTILE, HIGH_PERCENTILE])
        values = np.clip(inside, lo, hi)
        mean = values.mean()
        std = values.std()
        if not hi > lo or not std > 1e-12 * max(1.0, abs(mean)):
            raise ValueError("cannot normalise a volume with constant in-mask intensities")
        return cls(float(lo), float(hi), float(mean), float(std))

    @property
    def floor(self):
        return (self.lo - self.mean) / self.std

    def __call__(self, vol, mask=None):
        vol = as_volume(vol)
        mask = _check_mask(vol, mask)
        out = (np.clip(vol, self.lo, self.hi) - self.mean) / self.std
        if mask is not None:
            out[~mask] = self.floor
        return out


def _check_mask(vol, mask):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != vol.shape:
        raise ValueError(f"mask shape {mask.shape} does not match volume {vol.shape}")
    return mask


def normalize_robust(vol, mask=None):
    """Clip to the in-mask 1st/99th percentiles, then standardise.

    After the call the in-mask voxels have mean 0 and standard deviation 1;
    voxels outside the mask take the transformed lower clip value.
    """
    return IntensityMap.estimate(vol, mask)(vol, mask)


def nonzero_mask(vol):
    """Mask of nonzero voxels, or ``None`` when that would leave too few voxels."""
    mask = np.asarray(vol) != 0
    if mask.all() or mask.sum() < MIN_MASK_VOXELS:
        return None
    return mask


def parse_affine(text):
    """Parse a whitespace-separated, row-major 4x4 matrix."""
    try:
        values = [float(tok) for tok in text.split()]
    except ValueError as exc:
        raise AffineFormatError(f"malformed affine matrix: {exc}") from None
    if len(values) != 16:
        raise AffineFormatError(f"affine matrix needs 16 numbers, got {len(values)}")
    matrix = np.array(values).reshape(4, 4)
    if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0]):
        raise AffineFormatError("last row of an affine matrix must be 0 0 0 1")
    return matrix


def read_affine(path):
    with open(path) as fh:
        return parse_affine(fh.read())


def affine_source_coords(matrix, target_shape, source_spacing=(1.0, 1.0, 1.0),
                         target_spacing=(1.0, 1.0, 1.0)):
    """Source voxel coordinates, shape (3, nx, ny, nz), for every target voxel.

    ``matrix`` maps source millimetres (voxel index times spacing) to target
    millimetres, as FLIRT matrices do; its inverse is applied here.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if abs(np.linalg.det(matrix[:3, :3])) < 1e-12:
        raise AffineFormatError("affine matrix is not invertible")
    inverse = np.linalg.inv(matrix)
    grid = np.indices(target_shape, dtype=np.float64).reshape(3, -1)
    mm = grid * np.asarray(target_spacing, dtype=np.float64)[:, None]
    src_mm = inverse[:3, :3] @ mm + inverse[:3, 3:4]
    src = src_mm / np.asarray(source_spacing, dtype=np.float64)[:, None]
    return src.reshape((3,) + tuple(target_shape))


def apply_affine(vol, matrix, target_shape=None, source_spacing=(1.0, 1.0, 1.0),
                 target_spacing=(1.0, 1.0, 1.0)):
    """Trilinearly resample ``vol`` through ``matrix`` onto the target grid.

    ``matrix`` may be a 4x4 array or the matrix file's text.
    """
    vol = as_volume(vol)
    if isinstance(matrix, str):
        matrix = parse_affine(matrix)
    target_shape = tuple(vol.shape if target_shape is None else target_shape)
    src = affine_source_coords(matrix, target_shape, source_spacing, target_spacing)
    return sample_at(vol, src)
