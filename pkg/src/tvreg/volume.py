"""3D field arithmetic on regular voxel grids.

Scalar volumes are float arrays of shape ``(nx, ny, nz)``. Displacement and
other per-voxel vector fields are arrays of shape ``(3, nx, ny, nz)`` whose
leading axis indexes the spatial component; displacements are expressed in
voxels of the grid they live on. 1D and 2D problems use singleton axes.
"""
import math

import numpy as np

from . import _kernels_np
from ._accel import kernels

PYRAMID_SIGMA = 1.0
PYRAMID_TRUNCATE = 3.0
MIN_PYRAMID_AXIS = 4


def as_volume(vol):
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    if vol.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {vol.shape}")
    return vol


def as_field(field, shape=None):
    field = np.ascontiguousarray(field, dtype=np.float64)
    if field.ndim != 4 or field.shape[0] != 3:
        raise ValueError(f"expected a (3, nx, ny, nz) field, got shape {field.shape}")
    if shape is not None and field.shape[1:] != tuple(shape):
        raise ValueError(f"dimension mismatch: field {field.shape[1:]} vs volume {tuple(shape)}")
    return field


def check_same_dims(*arrays):
    dims = {tuple(a.shape[-3:]) for a in arrays}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch: {sorted(dims)}")


def zero_field(shape):
    return np.zeros((3,) + tuple(shape))


def _cell(x, n):
    x = min(max(float(x), 0.0), n - 1.0)
    if n == 1:
        return 0, 0, 0.0
    i0 = min(int(math.floor(x)), n - 2)
    return i0, i0 + 1, x - i0


def sample_trilinear(vol, point):
    """Interpolate ``vol`` at a continuous voxel coordinate.

    Coordinates outside ``[0, n - 1]`` are clamped to the edge first.
    """
    x0, x1, fx = _cell(point[0], vol.shape[0])
    y0, y1, fy = _cell(point[1], vol.shape[1])
    z0, z1, fz = _cell(point[2], vol.shape[2])
    c00 = (1.0 - fx) * vol[x0, y0, z0] + fx * vol[x1, y0, z0]
    c10 = (1.0 - fx) * vol[x0, y1, z0] + fx * vol[x1, y1, z0]
    c01 = (1.0 - fx) * vol[x0, y0, z1] + fx * vol[x1, y0, z1]
    c11 = (1.0 - fx) * vol[x0, y1, z1] + fx * vol[x1, y1, z1]
    c0 = (1.0 - fy) * c00 + fy * c10
    c1 = (1.0 - fy) * c01 + fy * c11
    return float((1.0 - fz) * c0 + fz * c1)


def warp_scalar(vol, disp):
    """Return ``out(x) = vol(x + disp(x))`` with trilinear sampling."""
    vol = as_volume(vol)
    disp = as_field(disp, vol.shape)
    return kernels().warp_linear(vol, disp)


def warp_nearest(labels, disp):
    """Nearest-neighbour pull of an integer volume through ``disp``."""
    labels = np.asarray(labels)
    disp = as_field(disp, labels.shape)
    idx = []
    for axis, n in enumerate(labels.shape):
        base = np.arange(n).reshape([-1 if a == axis else 1 for a in range(3)])
        # floor(x + 0.5): halves round up, unlike np.rint's banker's rounding
        pos = np.floor(base + disp[axis] + 0.5)
        idx.append(np.clip(pos, 0, n - 1).astype(np.intp))
    return labels[tuple(idx)]


def gradient_central(vol):
    """Central differences inside, one-sided at the faces; singleton axes give 0."""
    vol = as_volume(vol)
    out = np.zeros((3,) + vol.shape)
    for axis in range(3):
        if vol.shape[axis] > 1:
            out[axis] = np.gradient(vol, axis=axis, edge_order=1)
    return out


def grad_forward(u):
    """Forward differences, zero on the far face of each axis."""
    return _kernels_np.grad_forward(as_volume(u))


def div_backward(v):
    """Backward divergence, the negative adjoint of :func:`grad_forward`."""
    return kernels().div_backward(as_field(v))


def _smooth_axis(vol, axis, weights):
    r = len(weights) // 2
    n = vol.shape[axis]
    moved = np.moveaxis(vol, axis, 0)
    acc = np.zeros_like(moved)
    norm = np.zeros(n)
    for offset in range(-r, r + 1):
        lo, hi = max(0, -offset), min(n, n - offset)
        if lo >= hi:
            continue
        acc[lo:hi] += weights[offset + r] * moved[lo + offset:hi + offset]
        norm[lo:hi] += weights[offset + r]
    acc /= norm.reshape((-1,) + (1,) * (vol.ndim - 1))
    return np.moveaxis(acc, 0, axis)


def gaussian_weights(sigma=PYRAMID_SIGMA, truncate=PYRAMID_TRUNCATE):
    r = int(truncate * sigma + 0.5)
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def downsample(vol):
    """Blur with a boundary-renormalised Gaussian, then keep every other voxel."""
    vol = as_volume(vol)
    if min(vol.shape) < 2:
        raise ValueError(f"cannot downsample a volume with an axis shorter than 2: {vol.shape}")
    weights = gaussian_weights()
    out = vol
    for axis in range(3):
        out = _smooth_axis(out, axis, weights)
    return np.ascontiguousarray(out[::2, ::2, ::2])


def _axis_ratio(n_coarse, n_fine):
    if n_fine == n_coarse:
        return 1.0
    # pyramid levels decimate by 2, so coarse voxel i sits at fine voxel 2i
    if (n_fine + 1) // 2 == n_coarse:
        return 2.0
    return n_fine / n_coarse


def upsample_displacement(disp, new_dims):
    """Resample a field onto a finer grid, rescaling it to fine-grid voxels."""
    disp = as_field(disp)
    new_dims = tuple(int(n) for n in new_dims)
    old_dims = disp.shape[1:]
    if len(new_dims) != 3 or any(n < o for n, o in zip(new_dims, old_dims)):
        raise ValueError(f"target dims {new_dims} smaller than field dims {old_dims}")
    ratios = [_axis_ratio(o, n) for o, n in zip(old_dims, new_dims)]
    # coarse-grid coordinates of every fine voxel
    sample = np.zeros((3,) + new_dims)
    for axis in range(3):
        fine = np.arange(new_dims[axis], dtype=np.float64)
        shape = [-1 if a == axis else 1 for a in range(3)]
        sample[axis] = (fine / ratios[axis]).reshape(shape)
    out = np.empty((3,) + new_dims)
    for comp in range(3):
        out[comp] = ratios[comp] * sample_at(disp[comp], sample)
    return out


def sample_at(vol, coords):
    """Trilinear samples of ``vol`` at voxel coordinates ``coords`` (3, ...), clamped."""
    vol = as_volume(vol)
    coords = np.asarray(coords, dtype=np.float64)
    cells = [_kernels_np._axis_cell(coords[a], vol.shape[a]) for a in range(3)]
    (x0, x1, fx), (y0, y1, fy), (z0, z1, fz) = cells
    c00 = (1.0 - fx) * vol[x0, y0, z0] + fx * vol[x1, y0, z0]
    c10 = (1.0 - fx) * vol[x0, y1, z0] + fx * vol[x1, y1, z0]
    c01 = (1.0 - fx) * vol[x0, y0, z1] + fx * vol[x1, y0, z1]
    c11 = (1.0 - fx) * vol[x0, y1, z1] + fx * vol[x1, y1, z1]
    c0 = (1.0 - fy) * c00 + fy * c10
    c1 = (1.0 - fy) * c01 + fy * c11
    return (1.0 - fz) * c0 + fz * c1


def pyramid_dims(dims, levels):
    """Grid sizes from coarsest to finest for a ``levels``-deep pyramid."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = [tuple(int(n) for n in dims)]
    for _ in range(levels - 1):
        out.append(tuple((n + 1) // 2 for n in out[-1]))
    for shape in out[1:]:
        if min(shape) < MIN_PYRAMID_AXIS:
            raise ValueError(
                f"pyramid of {levels} levels on {tuple(dims)} drops an axis below "
                f"{MIN_PYRAMID_AXIS} voxels")
    return out[::-1]


def build_pyramid(vol, levels):
    """List of volumes from coarsest to finest; the last entry is ``vol``."""
    vol = as_volume(vol)
    pyramid_dims(vol.shape, levels)
    out = [vol]
    for _ in range(levels - 1):
        out.append(downsample(out[-1]))
    return out[::-1]
