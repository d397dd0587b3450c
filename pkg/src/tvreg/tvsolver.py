"""Augmented-Lagrangian dual solver for the linearised TV-L1 subproblem.

The subproblem is::

    min_h  sum_x |p0 + grad_p . h|  +  alpha * sum_i TV(u_i + h_i)

with isotropic TV on forward differences. Its dual has a pointwise variable
``w`` (``|w| <= 1``) for the data term and one vector field ``q_i``
(``|q_i| <= alpha``) per displacement component, coupled by the constraints
``F_i = w * g_i + div q_i = 0``. The displacement update ``h`` is the
multiplier of those constraints and is recovered by the multiplier step.
"""
import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ._accel import kernels
from .similarity import Linearization
from .volume import as_field, grad_forward

log = logging.getLogger(__name__)

DEGENERATE_DENOMINATOR = 1e-8


class NumericalError(ArithmeticError):
    """A non-finite value appeared; ``step`` names the update that produced it."""

    def __init__(self, step, iteration):
        super().__init__(f"non-finite value after {step} at iteration {iteration}")
        self.step = step
        self.iteration = iteration


def active_axes(shape):
    return max(1, sum(n > 1 for n in shape))


@dataclass(frozen=True)
class SolverParams:
    alpha: float = 0.30
    c: float = 0.2
    delta: float = 5e-4
    max_iters: int = 220
    tau_q: Optional[float] = None  # None: 1 / (4 * active_axes * c)

    def step_size(self, shape):
        limit = 1.0 / (4.0 * active_axes(shape) * self.c)
        if self.tau_q is None:
            return limit
        if not 0.0 < self.tau_q <= limit * (1.0 + 1e-12):
            raise ValueError(f"tau_q must lie in (0, {limit:g}] on a grid of shape {shape}")
        return float(self.tau_q)

    def validate(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.c > 0:
            raise ValueError("c must be positive")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class DualState:
    """Solver variables; ``divq[i]`` caches ``div_backward(q[i])``."""

    w: np.ndarray
    q: np.ndarray  # (3 components, 3 axes, nx, ny, nz)
    h: np.ndarray
    divq: np.ndarray
    resid: np.ndarray

    @classmethod
    def zeros(cls, shape):
        shape = tuple(shape)
        return cls(np.zeros(shape), np.zeros((3, 3) + shape), np.zeros((3,) + shape),
                   np.zeros((3,) + shape), np.zeros((3,) + shape))

    @classmethod
    def from_arrays(cls, w, q, h):
        w = np.array(w, dtype=np.float64)
        q = np.array(q, dtype=np.float64)
        h = np.array(h, dtype=np.float64)
        divq = np.stack([kernels().div_backward(q[i]) for i in range(3)])
        return cls(w, q, h, divq, np.zeros_like(h))

    def data_targets(self, c):
        """``T_i = h_i / c - div q_i``, the targets of the w-subproblem."""
        return self.h / c - self.divq

    def tv_targets(self, lin, c):
        """``U_i = h_i / c - w * g_i``, the targets of the q-subproblems."""
        return self.h / c - self.w * lin.grad_p

    def q_norms(self):
        return np.sqrt((self.q * self.q).sum(axis=1))


@dataclass
class SolverDiagnostics:
    iterations: int
    converged: bool
    residuals: np.ndarray
    energy: float
    initial_energy: float
    history: List[float] = field(default_factory=list)


def update_w(state, lin, params):
    """Pointwise closed-form maximiser in ``w``, clamped to ``[-1, 1]``.

    ``w = (c * sum_i g_i T_i - p0) / (c * |g|^2)``; where ``c * |g|^2`` is below
    1e-8 only the linear term survives and ``w = -sign(p0)``.
    """
    kernels().w_step(lin.p0, lin.grad_p, lin.grad_norm_sq, state.h, state.divq,
                     float(params.c), state.w)


def update_q(state, u_tilde, lin, params, grad_u=None):
    """One projected gradient step per component on the q-subproblems.

    Descends ``(c/2) |div q_i - U_i|^2 + <q_i, grad u_i>`` and projects each
    voxel's 3-vector onto the ball of radius alpha.
    """
    if grad_u is None:
        grad_u = np.stack([grad_forward(u_tilde[i]) for i in range(3)])
    k = kernels()
    tau = params.step_size(lin.shape)
    for i in range(3):
        k.q_step(state.q[i], state.divq[i], state.h[i], state.w, lin.grad_p[i], grad_u[i],
                 float(params.c), tau, float(params.alpha))
        state.divq[i] = k.div_backward(state.q[i])


def update_h(state, lin, params):
    """Multiplier step ``h_i <- h_i - c * (w g_i + div q_i)``; stores the residual."""
    kernels().h_step(state.w, lin.grad_p, state.divq, state.h, float(params.c), state.resid)


def residual_fields(state, lin, params):
    """Constraint fields ``F_i`` and the statistics ``r_i = c * mean|F_i|``."""
    resid = state.w * lin.grad_p + state.divq
    return resid, _statistics(resid, params.c)


def _statistics(resid, c):
    return c * np.abs(resid).reshape(3, -1).mean(axis=1)


def tv_norm(v):
    d = grad_forward(v)
    return float(np.sqrt((d * d).sum(axis=0)).sum())


def primal_energy(lin, u_tilde, h, alpha):
    """``sum |p0 + grad_p . h| + alpha * sum_i TV(u_i + h_i)``."""
    u_tilde = as_field(u_tilde, lin.shape)
    h = as_field(h, lin.shape)
    data = np.abs(lin.p0 + np.einsum("i...,i...->...", lin.grad_p, h)).sum()
    return float(data) + alpha * sum(tv_norm(u_tilde[i] + h[i]) for i in range(3))


def _dual_orientation(lin):
    # The closed-form w-step maximises -w*p0 - (c/2)|w g - T|^2, which belongs to
    # the Lagrangian of |p0 - g.h|. Running the iteration on g = -grad_p makes
    # the multipliers minimise |p0 + grad_p.h| as intended.
    return Linearization(lin.p0, -lin.grad_p, lin.grad_norm_sq)


def _first_bad_step(state):
    if not np.isfinite(state.w).all():
        return "w-update"
    if not np.isfinite(state.q).all():
        return "q-update"
    return "h-update"


def solve_subproblem(lin, u_tilde, params, callback=None, verbose=False, log_every=20):
    """Minimise the linearised subproblem around ``u_tilde``.

    Parameters
    ----------
    lin : Linearization
        Residual and gradient at ``u_tilde``.
    u_tilde : ndarray, shape (3, nx, ny, nz)
        Current deformation; only its TV enters the subproblem.
    params : SolverParams
    callback : callable, optional
        Called as ``callback(iteration, state, residuals)`` after each iteration.
    verbose : bool
        Log ``iteration r1 r2 r3 energy`` every ``log_every`` iterations at
        INFO level. Without it the same lines go to DEBUG when that level
        is enabled on this module's logger.

    Returns
    -------
    h : ndarray, shape (3, nx, ny, nz)
        Displacement update.
    diag : SolverDiagnostics
    """
    params.validate()
    u_tilde = as_field(u_tilde, lin.shape)
    for name, arr in (("p0", lin.p0), ("grad_p", lin.grad_p), ("u_tilde", u_tilde)):
        if not np.isfinite(arr).all():
            raise NumericalError(f"input {name}", 0)
    dual = _dual_orientation(lin)
    grad_u = np.stack([grad_forward(u_tilde[i]) for i in range(3)])
    state = DualState.zeros(lin.shape)
    if verbose:
        level = logging.INFO
    elif log.isEnabledFor(logging.DEBUG):
        level = logging.DEBUG
    else:
        level = None
    history = []
    residuals = np.zeros(3)
    converged = False
    it = 0
    for it in range(1, params.max_iters + 1):
        update_w(state, dual, params)
        update_q(state, u_tilde, dual, params, grad_u)
        update_h(state, dual, params)
        residuals = _statistics(state.resid, params.c)
        worst = float(residuals.max())
        if not np.isfinite(worst) or not np.isfinite(state.h).all():
            raise NumericalError(_first_bad_step(state), it)
        history.append(worst)
        if callback is not None:
            callback(it, state, residuals)
        if level is not None and (it % log_every == 0 or it == 1):
            log.log(level, "%d %.6e %.6e %.6e %.6f", it, *residuals,
                    primal_energy(lin, u_tilde, state.h, params.alpha))
        if worst <= params.delta:
            converged = True
            break
    h = state.h
    diag = SolverDiagnostics(
        iterations=it,
        converged=converged,
        residuals=residuals,
        energy=primal_energy(lin, u_tilde, h, params.alpha),
        initial_energy=primal_energy(lin, u_tilde, np.zeros_like(h), params.alpha),
        history=history,
    )
    return h, diag
