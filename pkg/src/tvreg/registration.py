"""Coarse-to-fine driver: pyramid loop, warp loop, displacement accumulation."""
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .similarity import get_metric, sad_energy
from .tvsolver import SolverParams, solve_subproblem, tv_norm
from .volume import (
    as_volume, build_pyramid, check_same_dims, upsample_displacement, warp_scalar, zero_field,
)

log = logging.getLogger(__name__)

# step halvings tried when a full update raises the level energy
MAX_BACKTRACKS = 4


@dataclass(frozen=True)
class RegistrationParams:
    alpha: float = 0.30
    levels: int = 3
    warps_per_level: int = 4
    max_iters: int = 220
    delta: float = 5e-4
    c: float = 0.2
    eps_h: float = 1e-3
    metric: str = "sad"

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.warps_per_level < 1:
            raise ValueError("warps_per_level must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def solver(self):
        return SolverParams(alpha=self.alpha, c=self.c, delta=self.delta, max_iters=self.max_iters)


@dataclass
class WarpRecord:
    warp: int
    iterations: int
    converged: bool
    residual: float
    model_energy: float  # subproblem energy at the returned update
    energy: float  # level energy sad + alpha * tv after the accepted update
    sad: float
    tv: float
    mean_update: float
    step: float  # fraction of the solver update that was accepted


@dataclass
class LevelReport:
    level: int
    shape: tuple
    start_energy: float
    restarted_from_zero: bool
    warps: List[WarpRecord] = field(default_factory=list)


@dataclass
class RegistrationResult:
    displacement: np.ndarray
    levels: List[LevelReport]
    sad_initial: float
    sad_final: float

    def warp_records(self):
        return [w for lev in self.levels for w in lev.warps]


def total_variation(u):
    return sum(tv_norm(u[i]) for i in range(3))


def level_energy(fixed, moving, u, alpha):
    """Nonlinear objective ``SAD(moving(x + u), fixed) + alpha * TV(u)``."""
    sad = sad_energy(warp_scalar(moving, u), fixed)
    tv = total_variation(u)
    return sad + alpha * tv, sad, tv


def mean_norm(field):
    return float(np.sqrt((field * field).sum(axis=0)).mean())


def compose_total_update(h_list, shape=None):
    """Voxelwise sum of per-warp updates."""
    if not h_list:
        if shape is None:
            raise ValueError("shape is required to compose an empty update list")
        return zero_field(shape)
    total = np.zeros_like(np.asarray(h_list[0], dtype=np.float64))
    for h in h_list:
        h = np.asarray(h, dtype=np.float64)
        if h.shape != total.shape:
            raise ValueError(f"dimension mismatch: {h.shape} vs {total.shape}")
        total += h
    return total


def warp_loop(level_fixed, level_moving, u_in, params, level=1, updates=None):
    """Run up to ``warps_per_level`` linearise-solve-accumulate cycles.

    Each solver update is accepted in full when it does not raise the level
    energy; otherwise it is halved up to ``MAX_BACKTRACKS`` times, and the
    loop stops if no fraction helps. Accepted updates are appended to
    ``updates`` when a list is given.

    Returns
    -------
    u : ndarray, shape (3, nx, ny, nz)
    records : list of WarpRecord
    """
    fixed = as_volume(level_fixed)
    moving = as_volume(level_moving)
    check_same_dims(fixed, moving, u_in)
    linearize = get_metric(params.metric)
    solver = params.solver()
    u = np.array(u_in, dtype=np.float64)
    energy, _, _ = level_energy(fixed, moving, u, params.alpha)
    records = []
    for k in range(1, params.warps_per_level + 1):
        lin = linearize(moving, fixed, u)
        h, diag = solve_subproblem(lin, u, solver)
        step = 1.0
        accepted = None
        for _ in range(MAX_BACKTRACKS + 1):
            trial = u + step * h
            e_new, sad, tv = level_energy(fixed, moving, trial, params.alpha)
            if e_new <= energy:
                accepted = trial
                break
            step *= 0.5
        if accepted is None:
            step = 0.0
            e_new, sad, tv = level_energy(fixed, moving, u, params.alpha)
        else:
            u = accepted
            energy = e_new
            if updates is not None:
                updates.append(step * h)
        moved = step * mean_norm(h)
        rec = WarpRecord(k, diag.iterations, diag.converged, float(diag.residuals.max()),
                         diag.energy, energy, sad, tv, moved, step)
        records.append(rec)
        log.info("level=%d warp=%d iters=%d sad=%.6g tv=%.6g", level, k, diag.iterations, sad, tv)
        if accepted is None or moved < params.eps_h:
            break
    return u, records


def register(fixed, moving, params=RegistrationParams()):
    """Estimate ``u`` such that ``moving(x + u(x))`` matches ``fixed(x)``.

    Inputs are assumed affinely pre-aligned and intensity-normalised.
    """
    fixed = as_volume(fixed)
    moving = as_volume(moving)
    check_same_dims(fixed, moving)
    for name, vol in (("fixed", fixed), ("moving", moving)):
        if not np.isfinite(vol).all():
            raise ValueError(f"{name} volume contains non-finite values")
    fixed_pyr = build_pyramid(fixed, params.levels)
    moving_pyr = build_pyramid(moving, params.levels)
    u = zero_field(fixed_pyr[0].shape)
    reports = []
    for level, (f_l, m_l) in enumerate(zip(fixed_pyr, moving_pyr), start=1):
        if u.shape[1:] != f_l.shape:
            u = upsample_displacement(u, f_l.shape)
        start, _, _ = level_energy(f_l, m_l, u, params.alpha)
        restarted = False
        if level > 1:
            identity = sad_energy(m_l, f_l)
            # a coarse estimate that does worse than identity is dropped
            if identity < start:
                u = zero_field(f_l.shape)
                start, restarted = identity, True
        u, records = warp_loop(f_l, m_l, u, params, level=level)
        reports.append(LevelReport(level, f_l.shape, start, restarted, records))
    return RegistrationResult(
        displacement=u,
        levels=reports,
        sad_initial=sad_energy(moving, fixed),
        sad_final=sad_energy(warp_scalar(moving, u), fixed),
    )
