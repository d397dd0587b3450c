import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tvreg.similarity import Linearization, linearize_sad
from tvreg.synthbench import (
    CERTIFY_DELTA, CERTIFY_MAX_ITERS, loop_energy, make_case, oracle_min_subproblem, random_instance,
)
from tvreg.tvsolver import (
    DualState, NumericalError, SolverParams, primal_energy, residual_fields, solve_subproblem,
    update_h, update_q, update_w,
)
from tvreg.volume import zero_field


def lin_1voxel(p0, g):
    return Linearization.from_arrays(np.full((1, 1, 1), p0), np.array(g, float).reshape(3, 1, 1, 1))


def loop_div(v):
    """Backward-difference divergence written out voxel by voxel."""
    shape = v.shape[1:]
    out = np.zeros(shape)
    for idx in itertools.product(*[range(n) for n in shape]):
        for a in range(3):
            if idx[a] < shape[a] - 1:
                out[idx] += v[(a,) + idx]
            if idx[a] > 0:
                prev = list(idx)
                prev[a] -= 1
                out[idx] -= v[(a,) + tuple(prev)]
    return out


# ---- parameters ---------------------------------------------------------------

def test_params_defaults_and_step():
    p = SolverParams()
    assert (p.alpha, p.c, p.delta, p.max_iters) == (0.30, 0.2, 5e-4, 220)
    assert p.step_size((8, 8, 8)) == pytest.approx(1 / (12 * 0.2))
    assert p.step_size((8, 8, 1)) == pytest.approx(1 / (8 * 0.2))
    with pytest.raises(ValueError):
        SolverParams(tau_q=1.0).step_size((8, 8, 8))


@pytest.mark.parametrize("kw", [dict(alpha=0), dict(c=-1), dict(delta=0), dict(max_iters=0)])
def test_params_validate(kw):
    with pytest.raises(ValueError):
        SolverParams(**kw).validate()


# ---- w-step -------------------------------------------------------------------

def test_w_clamps_to_one():
    # unconstrained value (1 * 1.8 - 0.1) / 1 = 1.7
    lin = lin_1voxel(0.1, [1, 0, 0])
    state = DualState.zeros((1, 1, 1))
    state.h[0] = 1.8
    update_w(state, lin, SolverParams(c=1.0))
    assert state.w.item() == 1.0


def test_w_degenerate_sign_rule():
    state = DualState.zeros((1, 1, 1))
    update_w(state, lin_1voxel(0.7, [0, 0, 0]), SolverParams())
    assert state.w.item() == -1.0
    update_w(state, lin_1voxel(-0.2, [0, 0, 0]), SolverParams())
    assert state.w.item() == 1.0
    update_w(state, lin_1voxel(0.0, [0, 0, 0]), SolverParams())
    assert state.w.item() == 0.0


def test_w_printed_formula_example():
    lin = lin_1voxel(0.1, [1, 0, 0])
    state = DualState.zeros((1, 1, 1))
    state.h[0] = 0.2  # T_1 = h_1 / c - div q_1 = 0.2
    update_w(state, lin, SolverParams(c=1.0))
    assert state.w.item() == pytest.approx(0.1, abs=1e-15)


# ---- q-step -------------------------------------------------------------------

def test_q_projection_to_alpha():
    shape = (3, 1, 1)
    alpha = 0.3
    q = np.zeros((3, 3) + shape)
    q[0, 0, 1, 0, 0] = 2 * alpha
    state = DualState.from_arrays(np.zeros(shape), q, np.zeros((3,) + shape))
    lin = Linearization.from_arrays(np.zeros(shape), np.zeros((3,) + shape))
    update_q(state, zero_field(shape), lin, SolverParams(alpha=alpha, c=1e-6, tau_q=1e-9))
    norm = state.q_norms()[0, 1].item()
    assert norm <= alpha
    assert norm == pytest.approx(alpha, rel=1e-12)


def test_q_zero_fixed_point():
    shape = (4, 4, 4)
    state = DualState.zeros(shape)
    lin = Linearization.from_arrays(np.zeros(shape), np.zeros((3,) + shape))
    update_q(state, zero_field(shape), lin, SolverParams())
    assert np.all(state.q == 0) and np.all(state.divq == 0)


def test_q_two_voxel_hand_step():
    shape = (2, 1, 1)
    u = zero_field(shape)
    u[0, 1] = 1.0
    state = DualState.zeros(shape)
    lin = Linearization.from_arrays(np.zeros(shape), np.zeros((3,) + shape))
    update_q(state, u, lin, SolverParams(alpha=1.0, c=1.0, tau_q=0.25))
    assert state.q[0, 0, 0, 0, 0] == -0.25
    assert np.count_nonzero(state.q) == 1
    assert np.allclose(state.divq[0].ravel(), [-0.25, 0.25])


def test_q_step_decreases_its_objective(rng):
    shape = (6, 5, 1)
    lin, u, alpha = random_instance(shape, rng)
    params = SolverParams(alpha=10.0)  # ball large enough that projection stays inactive
    state = DualState.zeros(shape)
    state.h[:] = rng.normal(size=state.h.shape)
    state.w[:] = rng.uniform(-1, 1, size=shape)
    from tvreg.volume import grad_forward

    def objective(st_):
        U = st_.tv_targets(lin, params.c)
        val = 0.0
        for i in range(3):
            val += 0.5 * params.c * ((st_.divq[i] - U[i]) ** 2).sum()
            val += (st_.q[i] * grad_forward(u[i])).sum()
        return val

    before = objective(state)
    update_q(state, u, lin, params)
    assert objective(state) < before


def test_q_divergence_cache_matches_loops(rng):
    shape = (3, 4, 2)
    state = DualState.from_arrays(rng.uniform(-1, 1, shape), 0.1 * rng.normal(size=(3, 3) + shape),
                                  rng.normal(size=(3,) + shape))
    for i in range(3):
        assert np.allclose(state.divq[i], loop_div(state.q[i]), atol=1e-14)


# ---- h-step and residuals -----------------------------------------------------

def test_h_unchanged_when_dual_zero(rng):
    shape = (3, 3, 3)
    lin, _, _ = random_instance(shape, rng)
    h0 = rng.normal(size=(3,) + shape)
    state = DualState.from_arrays(np.zeros(shape), np.zeros((3, 3) + shape), h0)
    update_h(state, lin, SolverParams())
    assert np.array_equal(state.h, h0)


def test_h_unchanged_when_residual_zero():
    shape = (1, 1, 1)
    lin = lin_1voxel(0.0, [0.5, 0, 0])
    state = DualState.zeros(shape)
    state.w[:] = 0.2
    state.divq[0] = -0.1  # w g_1 + div q_1 = 0
    state.h[:] = 0.7
    update_h(state, lin, SolverParams())
    assert np.allclose(state.h, 0.7, atol=1e-16)


def test_h_arithmetic_example():
    lin = lin_1voxel(0.0, [0.3, 0, 0])
    state = DualState.zeros((1, 1, 1))
    state.w[:] = 1.0
    state.divq[0] = -0.1
    update_h(state, lin, SolverParams(c=2.0))
    assert state.h[0].item() == pytest.approx(-0.4, abs=1e-15)
    assert state.h[1].item() == 0.0


def test_residual_zero_state(rng):
    shape = (4, 4, 4)
    lin, _, _ = random_instance(shape, rng)
    F, r = residual_fields(DualState.zeros(shape), lin, SolverParams())
    assert np.all(F == 0) and np.all(r == 0)


def test_residual_loop_oracle(rng):
    shape = (4, 4, 4)
    lin, _, _ = random_instance(shape, rng)
    state = DualState.from_arrays(rng.uniform(-1, 1, shape), 0.2 * rng.normal(size=(3, 3) + shape),
                                  np.zeros((3,) + shape))
    params = SolverParams(c=0.7)
    F, r = residual_fields(state, lin, params)
    for i in range(3):
        div = loop_div(state.q[i])
        expected = np.zeros(shape)
        for idx in itertools.product(range(4), repeat=3):
            expected[idx] = state.w[idx] * lin.grad_p[(i,) + idx] + div[idx]
        assert np.allclose(F[i], expected, atol=1e-14)
        assert r[i] == pytest.approx(0.7 * np.abs(expected).sum() / expected.size, rel=1e-13)


# ---- primal energy ------------------------------------------------------------

def test_primal_energy_examples(rng):
    shape = (5, 4, 3)
    lin0 = Linearization.from_arrays(np.zeros(shape), rng.normal(size=(3,) + shape))
    z = zero_field(shape)
    assert primal_energy(lin0, z, z, 0.3) == 0.0
    lin, u, alpha = random_instance(shape, rng)
    base = primal_energy(lin, u, z, alpha)
    expected = np.abs(lin.p0).sum() + alpha * loop_energy(np.zeros(shape), np.zeros((3,) + shape), u, z, 1.0)
    assert base == pytest.approx(expected, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(3, 1, 1), (3, 3, 1), (2, 3, 2)]))
def test_primal_energy_matches_loops(seed, shape):
    rng = np.random.default_rng(seed)
    lin, u, alpha = random_instance(shape, rng)
    h = rng.normal(size=(3,) + shape)
    assert primal_energy(lin, u, h, alpha) == pytest.approx(
        loop_energy(lin.p0, lin.grad_p, u, h, alpha), rel=1e-12)


# ---- full solver --------------------------------------------------------------

def test_zero_problem_returns_zero(rng):
    shape = (6, 6, 6)
    lin = Linearization.from_arrays(np.zeros(shape), rng.normal(size=(3,) + shape))
    h, diag = solve_subproblem(lin, zero_field(shape), SolverParams())
    assert np.abs(h).max() <= 1e-6
    assert diag.converged and diag.energy == 0.0


def translation_problem_1d(shift=1.5, n=32):
    x = np.arange(n, dtype=float)
    signal = lambda t: np.sin(t / 3.0) + 0.5 * np.cos(t / 5.0)
    moving = signal(x).reshape(n, 1, 1)
    fixed = signal(x + shift).reshape(n, 1, 1)
    return linearize_sad(moving, fixed, zero_field((n, 1, 1)))


def test_translation_1d_matches_oracle():
    lin = translation_problem_1d()
    u = zero_field(lin.shape)
    # energy equivalence needs a converged solve; 5e-4 leaves a ~1% gap here
    params = SolverParams(delta=CERTIFY_DELTA, max_iters=CERTIFY_MAX_ITERS)
    h, diag = solve_subproblem(lin, u, params)
    assert diag.converged
    _, best = oracle_min_subproblem(lin, u, 0.30, mode="conic")
    assert diag.energy <= best * (1 + 1e-3)


def test_tv_dominated_limit_is_constant(rng):
    # at alpha = 1e3 the dual fields are O(alpha), so the absolute residual test needs a
    # tighter delta before the returned update is flat
    lin, _, _ = random_instance((8, 8, 1), rng)
    h, diag = solve_subproblem(lin, zero_field(lin.shape),
                               SolverParams(alpha=1e3, c=0.02, delta=1e-6, max_iters=20000))
    assert diag.converged
    for i in range(3):
        assert np.ptp(h[i]) <= 1e-3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([(32, 1, 1), (8, 8, 1), (4, 4, 4)]), st.booleans())
def test_never_worsens(seed, shape, degenerate):
    lin, u, alpha = random_instance(shape, np.random.default_rng(seed), degenerate)
    h, diag = solve_subproblem(lin, u, SolverParams(alpha=alpha))
    assert primal_energy(lin, u, h, alpha) <= primal_energy(lin, u, np.zeros_like(h), alpha) + 1e-6


class ConstraintRecorder:
    def __init__(self, alpha):
        self.alpha = alpha
        self.voxel_iterations = 0
        self.w_max = 0.0
        self.q_max = 0.0

    def __call__(self, it, state, residuals):
        self.w_max = max(self.w_max, float(np.abs(state.w).max()))
        self.q_max = max(self.q_max, float(state.q_norms().max()))
        assert np.abs(state.w).max() <= 1.0
        assert state.q_norms().max() <= self.alpha
        assert np.isfinite(state.h).all()
        self.voxel_iterations += state.w.size


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([(32, 1, 1), (8, 8, 1), (5, 4, 3)]), st.booleans())
def test_constraints_hold_every_iteration(seed, shape, degenerate):
    lin, u, alpha = random_instance(shape, np.random.default_rng(seed), degenerate)
    rec = ConstraintRecorder(alpha)
    solve_subproblem(lin, u, SolverParams(alpha=alpha), callback=rec)
    assert rec.voxel_iterations > 0


@pytest.mark.parametrize("shape", [(16, 1, 1), (6, 6, 1)])
@pytest.mark.parametrize("s", [0.5, 3.0])
def test_scaling_consistency(shape, s):
    rng = np.random.default_rng(1)
    lin, u, alpha = random_instance(shape, rng)
    tight = dict(delta=1e-10, max_iters=100_000)
    _, d1 = solve_subproblem(lin, u, SolverParams(alpha=alpha, **tight))
    scaled = Linearization.from_arrays(s * lin.p0, s * lin.grad_p)
    _, d2 = solve_subproblem(scaled, u, SolverParams(alpha=s * alpha, **tight))
    assert d2.energy == pytest.approx(s * d1.energy, rel=1e-6)


def smoothed_increase(history, window=10):
    s = np.convolve(history, np.ones(window) / window, mode="valid")
    return float(np.diff(s).max()) if len(s) > 1 else -np.inf


def synthetic_histories(kind, dims, warps=3):
    case = make_case(kind, dims, 2.0, 6.0, seed=3, noise_sigma=0.01)
    u = zero_field(dims)
    out = []
    for _ in range(warps):
        lin = linearize_sad(case.moving, case.fixed, u)
        h, diag = solve_subproblem(lin, u, SolverParams())
        out.append(diag.history)
        u = u + h
    return out


SUITE = [(kind, dims) for kind in ("blobs", "checker-smoothed", "ramp")
         for dims in ((16, 16, 16), (32, 32, 32))]


@pytest.mark.parametrize("kind,dims", SUITE)
def test_smoothed_residual_non_increasing_first_warp(kind, dims):
    history = synthetic_histories(kind, dims, warps=1)[0]
    assert smoothed_increase(history) <= 0.0


@pytest.mark.xfail(strict=True, reason="on later warps the residual oscillates with a period "
                                       "near 30 iterations, which a 10-iteration mean keeps")
def test_smoothed_residual_non_increasing_all_warps():
    worst = max(smoothed_increase(h) for kind, dims in SUITE
                for h in synthetic_histories(kind, dims))
    assert worst <= 0.0


def test_non_finite_input_raises():
    shape = (3, 3, 3)
    p0 = np.zeros(shape)
    p0[1, 1, 1] = np.nan
    lin = Linearization.from_arrays(p0, np.ones((3,) + shape))
    with pytest.raises(NumericalError) as err:
        solve_subproblem(lin, zero_field(shape), SolverParams())
    assert err.value.step == "input p0"


def test_diagnostics_and_log(caplog, rng):
    lin, u, alpha = random_instance((8, 8, 1), rng)
    with caplog.at_level(logging.INFO, logger="tvreg.tvsolver"):
        h, diag = solve_subproblem(lin, u, SolverParams(alpha=alpha, max_iters=40), verbose=True)
    assert diag.iterations == len(diag.history) <= 40
    assert diag.residuals.shape == (3,)
    assert diag.energy == pytest.approx(primal_energy(lin, u, h, alpha))
    first = caplog.records[0].getMessage().split()
    assert first[0] == "1" and len(first) == 5


def test_backends_agree(rng):
    from tvreg import _accel

    if not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    lin, u, alpha = random_instance((6, 5, 4), rng)
    out = {}
    for name in ("numba", "numpy"):
        with _accel.backend(name):
            out[name] = solve_subproblem(lin, u, SolverParams(alpha=alpha))
    (h1, d1), (h2, d2) = out["numba"], out["numpy"]
    assert d1.iterations == d2.iterations
    assert np.allclose(h1, h2, rtol=0, atol=1e-10)
