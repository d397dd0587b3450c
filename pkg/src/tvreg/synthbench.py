"""Synthetic cases with known deformations, and independent subproblem oracles."""
import csv
import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ._accel import kernels
from .preprocess import IntensityMap
from .similarity import Linearization
from .tvsolver import SolverParams, solve_subproblem
from .volume import as_field, warp_nearest, warp_scalar, zero_field

KINDS = ("blobs", "checker-smoothed", "ramp")

EXHAUSTIVE_MAX_VOXELS = 5
EXHAUSTIVE_RANGE = 2.0
EXHAUSTIVE_STEP = 0.125
DESCENT_MAX_VOXELS = 256

# tight stopping so certification measures the optimum the iteration reaches
CERTIFY_DELTA = 1e-7
CERTIFY_MAX_ITERS = 20000
CERTIFY_RTOL = 1e-3
CERTIFY_ATOL = 1e-6


@dataclass
class SyntheticCase:
    fixed: np.ndarray
    moving: np.ndarray
    truth: np.ndarray
    seed: int
    kind: str
    amplitude: float
    sigma: float
    moving_labels: Optional[np.ndarray] = None
    fixed_labels: Optional[np.ndarray] = None


def _active(dims):
    return [a for a, n in enumerate(dims) if n > 1]


def make_smooth_deformation(dims, amplitude, sigma, seed, n_bumps=6):
    """Sum of Gaussian-bump displacements, rescaled so the peak norm is ``amplitude``."""
    dims = tuple(int(n) for n in dims)
    active = _active(dims)
    limit = min(dims[a] for a in active) / 4.0 if active else 0.0
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if amplitude >= limit and amplitude > 0:
        raise ValueError(f"amplitude {amplitude} must be below min(dims)/4 = {limit}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    field_ = zero_field(dims)
    if amplitude == 0:
        return field_
    grid = np.indices(dims, dtype=np.float64)
    for _ in range(n_bumps):
        centre = rng.uniform(0, np.array(dims) - 1.0)
        direction = np.zeros(3)
        direction[active] = rng.normal(size=len(active))
        direction /= np.linalg.norm(direction)
        r2 = sum((grid[a] - centre[a]) ** 2 for a in active)
        bump = np.exp(-0.5 * r2 / sigma**2)
        field_ += direction[:, None, None, None] * bump
    peak = np.sqrt((field_ * field_).sum(axis=0)).max()
    field_ *= amplitude / peak
    # the rescale can overshoot by an ulp
    while np.sqrt((field_ * field_).sum(axis=0)).max() > amplitude:
        field_ *= 1.0 - np.finfo(np.float64).eps
    return field_


def _smooth(vol, sigma):
    from scipy.ndimage import gaussian_filter

    return gaussian_filter(vol, sigma=[sigma if n > 1 else 0 for n in vol.shape], mode="nearest")


def base_image(kind, dims, seed):
    dims = tuple(int(n) for n in dims)
    rng = np.random.default_rng(seed)
    grid = np.indices(dims, dtype=np.float64)
    active = _active(dims)
    if kind == "blobs":
        img = np.zeros(dims)
        n_blobs = max(8, int(np.prod(dims)) // 2000)
        for _ in range(n_blobs):
            centre = rng.uniform(0, np.array(dims) - 1.0)
            width = rng.uniform(2.0, 5.0)
            r2 = sum((grid[a] - centre[a]) ** 2 for a in active)
            img += rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0]) * np.exp(-0.5 * r2 / width**2)
        return img
    if kind == "checker-smoothed":
        period = 8
        parity = sum((grid[a] // period).astype(int) for a in active) % 2
        return _smooth(parity.astype(np.float64), 1.5)
    if kind == "ramp":
        return grid[active[0]].copy() if active else np.zeros(dims)
    raise ValueError(f"unknown kind {kind!r}; expected one of {KINDS}")


def label_image(base, n_labels=3):
    """Quantise an image into background plus ``n_labels`` intensity classes."""
    edges = np.quantile(base, np.linspace(0.25, 1.0, n_labels + 1)[:-1])
    return np.searchsorted(edges, base, side="right").astype(np.int32)


def make_test_pair(kind, dims, deformation, noise_sigma=0.0, seed=0, amplitude=0.0, sigma=0.0):
    """Moving = base image; fixed = base pulled through ``deformation`` plus noise.

    ``noise_sigma`` is relative to the base image's standard deviation. The
    robust intensity map is estimated on the base image and applied to both
    images, so ``fixed`` stays the warped ``moving`` up to noise and clipping.
    Labels follow the same construction.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {KINDS}")
    dims = tuple(int(n) for n in dims)
    deformation = as_field(deformation, dims)
    base = base_image(kind, dims, seed)
    fixed = warp_scalar(base, deformation)
    if noise_sigma > 0:
        rng = np.random.default_rng([seed, 1])
        fixed = fixed + noise_sigma * base.std() * rng.normal(size=dims)
    moving_labels = label_image(base)
    intensity = IntensityMap.estimate(base)
    return SyntheticCase(
        fixed=intensity(fixed),
        moving=intensity(base),
        truth=deformation,
        seed=seed,
        kind=kind,
        amplitude=amplitude,
        sigma=sigma,
        moving_labels=moving_labels,
        fixed_labels=warp_nearest(moving_labels, deformation),
    )


def make_case(kind, dims, amplitude, sigma, seed, noise_sigma=0.0):
    truth = make_smooth_deformation(dims, amplitude, sigma, seed)
    return make_test_pair(kind, dims, truth, noise_sigma, seed, amplitude, sigma)


def loop_energy(p0, grad_p, u_tilde, h, alpha):
    """Subproblem energy by explicit loops; deliberately shares no code with the solver."""
    nx, ny, nz = p0.shape
    total = 0.0
    for i, j, k in itertools.product(range(nx), range(ny), range(nz)):
        r = p0[i, j, k]
        for a in range(3):
            r += grad_p[a, i, j, k] * h[a, i, j, k]
        total += abs(r)
    for a in range(3):
        v = u_tilde[a] + h[a]
        for i, j, k in itertools.product(range(nx), range(ny), range(nz)):
            dx = v[i + 1, j, k] - v[i, j, k] if i + 1 < nx else 0.0
            dy = v[i, j + 1, k] - v[i, j, k] if j + 1 < ny else 0.0
            dz = v[i, j, k + 1] - v[i, j, k] if k + 1 < nz else 0.0
            total += alpha * math.sqrt(dx * dx + dy * dy + dz * dz)
    return total


def _exhaustive(lin, u_tilde, alpha):
    p0 = lin.p0
    n = p0.size
    if n > EXHAUSTIVE_MAX_VOXELS or p0.shape[1:] != (1, 1):
        raise ValueError(f"exhaustive mode needs a 1D grid of at most {EXHAUSTIVE_MAX_VOXELS} voxels")
    if np.any(lin.grad_p[1:] != 0):
        raise ValueError("exhaustive mode needs the gradient confined to the first component")
    levels = np.arange(-EXHAUSTIVE_RANGE, EXHAUSTIVE_RANGE + EXHAUSTIVE_STEP / 2, EXHAUSTIVE_STEP)
    a = p0.ravel()
    g = lin.grad_p[0].ravel()
    u = u_tilde[0].ravel()
    m = len(levels)
    # every voxel gets its own broadcast axis; sweep the first voxel in chunks
    rest = n - 1
    axes = [levels.reshape([m if d == i else 1 for d in range(rest)]) for i in range(rest)]
    best, best_h = np.inf, None
    for first in levels:
        hs = [np.asarray(first)] + axes
        e = abs(a[0] + g[0] * first) + np.zeros([m] * rest)
        for x in range(1, n):
            e = e + np.abs(a[x] + g[x] * hs[x])
        for x in range(n - 1):
            e = e + alpha * np.abs(u[x + 1] + hs[x + 1] - u[x] - hs[x])
        idx = np.unravel_index(np.argmin(e), e.shape) if rest else ()
        if e[idx] < best:
            best = float(e[idx])
            best_h = [first] + [levels[i] for i in idx]
    h = np.zeros_like(u_tilde)
    h[0] = np.array(best_h).reshape(p0.shape)
    # components without a data term reach zero TV exactly
    h[1:] = -u_tilde[1:]
    return h


def _descent(lin, u_tilde, alpha, iters, step0, rounds):
    if lin.p0.size > DESCENT_MAX_VOXELS:
        raise ValueError(f"descent mode is limited to {DESCENT_MAX_VOXELS} voxels")
    k = kernels()
    h = np.zeros_like(u_tilde)
    sub = np.zeros_like(u_tilde)
    best_h = h.copy()
    best = np.inf
    per_round = max(1, iters // rounds)
    scale = step0
    for _ in range(rounds):
        h[:] = best_h
        for it in range(per_round):
            e = k.subgradient_energy(lin.p0, lin.grad_p, u_tilde, h, alpha, sub)
            if e < best:
                best = e
                best_h[:] = h
            h -= scale / math.sqrt(it + 1.0) * sub
        scale *= 0.5
    return best_h


def _conic(lin, u_tilde, alpha):
    import cvxpy as cp

    shape = lin.p0.shape
    n = lin.p0.size
    hs = [cp.Variable(n) for _ in range(3)]
    data = lin.p0.ravel() + sum(cp.multiply(lin.grad_p[a].ravel(), hs[a]) for a in range(3))
    idx = np.arange(n).reshape(shape)
    tv = 0
    for a in range(3):
        v = u_tilde[a].ravel() + hs[a]
        diffs = []
        for axis in range(3):
            if shape[axis] < 2:
                continue
            lo = np.take(idx, range(shape[axis] - 1), axis=axis).ravel()
            hi = np.take(idx, range(1, shape[axis]), axis=axis).ravel()
            d = np.zeros((n, n))
            d[lo, hi] = 1.0
            d[lo, lo] = -1.0
            diffs.append(d @ v)
        if diffs:
            tv = tv + cp.sum(cp.norm(cp.vstack(diffs), 2, axis=0))
    problem = cp.Problem(cp.Minimize(cp.sum(cp.abs(data)) + alpha * tv))
    problem.solve(solver=cp.CLARABEL)
    return np.stack([np.asarray(hv.value).reshape(shape) for hv in hs])


def oracle_min_subproblem(lin, u_tilde, alpha, mode="descent", iters=200_000, step0=0.5,
                          rounds=10):
    """Minimise the linearised subproblem independently of the dual solver.

    Modes
    -----
    ``exhaustive``
        Joint grid search of the first displacement component over
        ``[-2, 2]`` in steps of 0.125 (1D grids of at most 5 voxels).
    ``descent``
        Subgradient descent with steps ``step0 / sqrt(k + 1)`` and best-iterate
        tracking, restarted ``rounds`` times from the best point with the
        initial step halved each round (``rounds=1`` is the plain schedule).
    ``conic``
        Second-order cone program solved by cvxpy/Clarabel.

    Returns ``(h, energy)`` with the energy recomputed by :func:`loop_energy`.
    """
    u_tilde = as_field(u_tilde, lin.shape)
    if mode == "exhaustive":
        h = _exhaustive(lin, u_tilde, alpha)
    elif mode == "descent":
        h = _descent(lin, u_tilde, alpha, iters, step0, rounds)
    elif mode == "conic":
        h = _conic(lin, u_tilde, alpha)
    else:
        raise ValueError(f"unknown oracle mode {mode!r}")
    return h, loop_energy(lin.p0, lin.grad_p, u_tilde, h, alpha)


def random_instance(shape, rng, degenerate=False):
    p0 = rng.normal(size=shape)
    grad = np.zeros((3,) + shape) if degenerate else rng.normal(size=(3,) + shape)
    u_tilde = 0.5 * rng.normal(size=(3,) + shape)
    alpha = float(rng.choice([0.1, 0.3, 1.0]))
    return Linearization.from_arrays(p0, grad), u_tilde, alpha


@dataclass
class CertificationRow:
    case: int
    shape: tuple
    alpha: float
    degenerate: bool
    solver_energy: float
    oracle_energy: float
    iterations: int

    @property
    def rel_gap(self):
        return (self.solver_energy - self.oracle_energy) / max(abs(self.oracle_energy), 1e-300)

    @property
    def passed(self):
        return self.solver_energy <= self.oracle_energy * (1 + CERTIFY_RTOL) + CERTIFY_ATOL


@dataclass
class CertificationReport:
    mode: str
    rows: List[CertificationRow] = field(default_factory=list)

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    @property
    def failures(self):
        return [r for r in self.rows if not r.passed]

    def to_text(self):
        lines = [f"{'case':>4} {'shape':>10} {'alpha':>5} {'solver':>12} {'oracle':>12} "
                 f"{'rel_gap':>10} {'iters':>6} status"]
        for r in self.rows:
            shape = "x".join(str(n) for n in r.shape)
            lines.append(f"{r.case:>4} {shape:>10} {r.alpha:>5.2f} {r.solver_energy:>12.6f} "
                         f"{r.oracle_energy:>12.6f} {r.rel_gap:>10.2e} {r.iterations:>6} "
                         f"{'ok' if r.passed else 'FAIL'}")
        lines.append(f"certification ({self.mode}): {len(self.rows) - len(self.failures)}/"
                     f"{len(self.rows)} passed -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case", "shape", "alpha", "degenerate", "solver_energy",
                             "oracle_energy", "rel_gap", "iterations", "passed"])
            for r in self.rows:
                writer.writerow([r.case, "x".join(map(str, r.shape)), r.alpha, int(r.degenerate),
                                 repr(r.solver_energy), repr(r.oracle_energy), repr(r.rel_gap),
                                 r.iterations, int(r.passed)])


def certify_solver(n_cases=20, dims_1d=32, dims_2d=(8, 8), seed=7, mode="conic",
                   solver_params=None):
    """Compare the dual solver with an oracle on random tiny subproblems.

    Cases alternate between a 1D grid of ``dims_1d`` voxels and a 2D grid of
    ``dims_2d``; every fifth case has a zero gradient (pure TV plus constant
    data term).
    """
    rng = np.random.default_rng(seed)
    report = CertificationReport(mode)
    for case in range(n_cases):
        shape = (dims_1d, 1, 1) if case % 2 == 0 else (dims_2d[0], dims_2d[1], 1)
        degenerate = case % 5 == 4
        lin, u_tilde, alpha = random_instance(shape, rng, degenerate)
        params = solver_params or SolverParams(alpha=alpha, delta=CERTIFY_DELTA,
                                               max_iters=CERTIFY_MAX_ITERS)
        if params.alpha != alpha:
            params = SolverParams(alpha=alpha, c=params.c, delta=params.delta,
                                  max_iters=params.max_iters, tau_q=params.tau_q)
        h, diag = solve_subproblem(lin, u_tilde, params)
        solver_e = loop_energy(lin.p0, lin.grad_p, u_tilde, h, alpha)
        _, oracle_e = oracle_min_subproblem(lin, u_tilde, alpha, mode=mode)
        report.rows.append(CertificationRow(case, shape, alpha, degenerate, solver_e, oracle_e,
                                            diag.iterations))
    return report
