"""Pointwise dissimilarity and its linearisation at the current deformation."""
from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np

from .volume import as_field, as_volume, check_same_dims, gradient_central, warp_scalar


@dataclass(frozen=True)
class Linearization:
    """First-order model ``p0 + grad_p . h`` of the pointwise residual.

    Attributes
    ----------
    p0 : ndarray, shape (nx, ny, nz)
        Signed residual at the current deformation (warped moving minus fixed).
    grad_p : ndarray, shape (3, nx, ny, nz)
        Spatial gradient of the residual with respect to the displacement.
    grad_norm_sq : ndarray, shape (nx, ny, nz)
        Cached ``sum_i grad_p[i] ** 2``.
    """

    p0: np.ndarray
    grad_p: np.ndarray
    grad_norm_sq: np.ndarray

    @classmethod
    def from_arrays(cls, p0, grad_p):
        p0 = as_volume(p0)
        grad_p = as_field(grad_p, p0.shape)
        return cls(p0, grad_p, np.einsum("i...,i...->...", grad_p, grad_p))

    @property
    def shape(self):
        return self.p0.shape


Metric = Callable[[np.ndarray, np.ndarray, np.ndarray], Linearization]


def sad_energy(moving_warped, fixed):
    moving_warped = as_volume(moving_warped)
    fixed = as_volume(fixed)
    check_same_dims(moving_warped, fixed)
    return float(np.abs(moving_warped - fixed).sum())


def linearize_sad(moving, fixed, u_tilde):
    """Residual and gradient of the absolute-difference metric at ``u_tilde``.

    The gradient is taken on the warped moving image (warp first, then
    difference), so it is sampled consistently with the residual.
    """
    moving = as_volume(moving)
    fixed = as_volume(fixed)
    check_same_dims(moving, fixed)
    u_tilde = as_field(u_tilde, fixed.shape)
    warped = warp_scalar(moving, u_tilde)
    return Linearization.from_arrays(warped - fixed, gradient_central(warped))


METRICS: Dict[str, Metric] = {"sad": linearize_sad}


def register_metric(name, fn):
    """Make a metric available to the registration driver under ``name``.

    ``fn(moving, fixed, u_tilde)`` must return a :class:`Linearization` whose
    residual the solver drives towards zero in the L1 sense.
    """
    METRICS[name] = fn


def get_metric(name):
    try:
        return METRICS[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; known: {sorted(METRICS)}") from None
