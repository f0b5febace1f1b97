"""Tests for the periodic Poisson solve, Moser flow, and diffeomorphism proxy.

Oracles: single-Fourier-mode closed forms for the Poisson equation, the 1D
monotone (quantile) map for pushforward agreement, and analytic derivatives
for the Jacobian checks.
"""
import numpy as np
import pytest

from randmap.geometry import unit_torus_grid
from randmap.measures import GridDensity, grid_pushforward, wasserstein_1d
from randmap.moser import (
    FlowMap,
    MoserError,
    MoserField,
    PoissonSolution,
    continuity_residual,
    integrate_flow,
    interpolate_density,
    jacobian_min,
    moser_map,
    solve_poisson_periodic,
)
from randmap.transport import TransportMap, monotone_map_1d


def cosine_density(n, amp, shift=0.0):
    x = (np.arange(n) + 0.5) / n
    return GridDensity(1, n, 1 + amp * np.cos(2 * np.pi * (x - shift)))


# ---------------------------------------------------------------------------
# Poisson solve
# ---------------------------------------------------------------------------

def test_poisson_zero_source():
    sol = solve_poisson_periodic(np.zeros(64))
    assert np.abs(sol.u).max() == 0.0
    assert sol.residual == 0.0


def test_poisson_single_mode_1d():
    n = 64
    x = (np.arange(n) + 0.5) / n
    src = np.cos(2 * np.pi * x)
    sol = solve_poisson_periodic(src)
    want = -src / (4 * np.pi ** 2)
    assert np.abs(sol.u - want).max() <= 1e-10
    assert sol.residual <= 1e-8


def test_poisson_single_mode_2d():
    n = 32
    x = (np.arange(n) + 0.5) / n
    xx, yy = np.meshgrid(x, x, indexing="ij")
    src = np.cos(2 * np.pi * xx) * np.cos(2 * np.pi * yy)
    sol = solve_poisson_periodic(src)
    want = -src / (8 * np.pi ** 2)
    assert np.abs(sol.u - want).max() <= 1e-10
    assert sol.residual <= 1e-8


def test_poisson_random_sources_residual():
    rng = np.random.default_rng(79)
    for shape in ((64,), (32, 32)):
        src = rng.standard_normal(shape)
        src -= src.mean()
        sol = solve_poisson_periodic(src)
        assert sol.residual <= 1e-8
        assert abs(sol.u.mean()) <= 1e-12


def test_poisson_rejects_nonzero_mean():
    with pytest.raises(MoserError, match="mean"):
        solve_poisson_periodic(np.ones(64) * 0.01)


# ---------------------------------------------------------------------------
# Moser flow
# ---------------------------------------------------------------------------

def test_moser_identity_is_exact():
    rho = cosine_density(64, 0.3)
    flow = moser_map(rho, rho)
    assert np.abs(flow.map.images - flow.map.points).max() == 0.0
    assert jacobian_min(flow) == 1.0


def test_moser_pushforward_refinement_study():
    errors = {}
    for n in (64, 128):
        rho0 = GridDensity.uniform(1, n)
        rho1 = cosine_density(n, 0.5)
        flow = moser_map(rho0, rho1)
        errors[n] = flow.pushforward_error
        assert flow.pushforward_error <= 1e-2
    assert errors[64] / errors[128] >= 1.5


def test_moser_agrees_with_monotone_map():
    n = 64
    rho0 = GridDensity.uniform(1, n)
    rho1 = cosine_density(n, 0.5)
    flow = moser_map(rho0, rho1)
    quantile = monotone_map_1d(rho0, rho1)
    push_flow = grid_pushforward(flow, rho0)
    push_quant = grid_pushforward(quantile, rho0)
    assert wasserstein_1d(push_flow, push_quant, p=1, periodic=True) <= 2e-2


def test_moser_rejects_nonpositive_density():
    n = 64
    vals = np.ones(n)
    vals[0] = 0.0
    bad = GridDensity(1, n, vals / vals.mean())
    with pytest.raises(MoserError, match="positivity"):
        moser_map(GridDensity.uniform(1, n), bad)


def test_moser_rejects_mismatched_grids():
    with pytest.raises(MoserError, match="grid"):
        moser_map(GridDensity.uniform(1, 32), GridDensity.uniform(1, 64))


def test_moser_blowup_guard_reports_step():
    # near-delta target with the density floor pinned at the positivity
    # threshold: 16 steps cannot resolve the late-time field and the
    # integrator must bail out naming the offending step
    n = 64
    x = (np.arange(n) + 0.5) / n
    spike = np.exp(-((x - 0.5) ** 2) / (2 * 0.01 ** 2))
    vals = 1e-3 + (1 - 1e-3) / spike.mean() * spike
    rho1 = GridDensity(1, n, vals)
    with pytest.raises(MoserError, match="step 15"):
        moser_map(GridDensity.uniform(1, n), rho1, steps=16)


def test_flow_semigroup_consistency():
    n = 64
    rho0 = GridDensity.uniform(1, n)
    rho1 = cosine_density(n, 0.4)
    fld = MoserField(rho0, rho1, solve_poisson_periodic(rho0.values - rho1.values))
    nodes = unit_torus_grid(1, n).nodes()
    steps = 64
    direct = integrate_flow(fld, nodes, 0.0, 1.0, steps)
    half = integrate_flow(fld, nodes, 0.0, 0.5, steps // 2)
    two_stage = integrate_flow(fld, half, 0.5, 1.0, steps // 2)
    assert np.abs(direct - two_stage).max() <= 1e-8


def test_moser_checkpoints():
    n = 32
    flow = moser_map(GridDensity.uniform(1, n), cosine_density(n, 0.3),
                     checkpoints=(0.25, 0.5))
    assert set(flow.checkpoints) == {0.25, 0.5}
    for positions in flow.checkpoints.values():
        assert positions.shape == (n, 1)
        assert np.all((positions >= 0) & (positions < 1))


def test_flowmap_invariants():
    n = 32
    grid = unit_torus_grid(1, n)
    nodes = grid.nodes()
    tmap = TransportMap(nodes, nodes, route="moser", grid=grid)
    with pytest.raises(MoserError, match="step"):
        FlowMap(tmap, steps=8)
    with pytest.raises(MoserError, match="wrapped"):
        FlowMap(TransportMap(nodes, nodes + 1.0, route="moser", grid=grid), steps=32)


# ---------------------------------------------------------------------------
# Jacobian proxy
# ---------------------------------------------------------------------------

def test_jacobian_identity_exactly_one():
    n = 64
    grid = unit_torus_grid(1, n)
    nodes = grid.nodes()
    tmap = TransportMap(nodes, nodes, route="moser", grid=grid)
    assert jacobian_min(tmap) == 1.0
    grid2 = unit_torus_grid(2, 16)
    nodes2 = grid2.nodes()
    tmap2 = TransportMap(nodes2, nodes2, route="moser", grid=grid2)
    assert jacobian_min(tmap2) == 1.0


def test_jacobian_sine_map_matches_analytic_difference():
    # T(x) = x + a sin(2 pi x): the centered difference of the image grid is
    # 1 + a cos(2 pi x) sin(2 pi h)/h, minimized where cos = -1
    n, a = 64, 0.1
    grid = unit_torus_grid(1, n)
    x = grid.nodes()[:, 0]
    images = np.mod(x + a * np.sin(2 * np.pi * x), 1.0)
    tmap = TransportMap(grid.nodes(), images[:, None], route="composed", grid=grid)
    h = 1.0 / n
    factor = np.sin(2 * np.pi * h) / (2 * np.pi * h)
    oracle = (1 + a * 2 * np.pi * factor * np.cos(2 * np.pi * x)).min()
    got = jacobian_min(tmap)
    assert got == pytest.approx(oracle, abs=1e-12)
    assert got == pytest.approx(1 - 0.2 * np.pi, abs=5e-3)


def test_jacobian_positive_for_tame_densities():
    rng = np.random.default_rng(83)
    for _ in range(3):
        n = 64
        x = (np.arange(n) + 0.5) / n
        amp = rng.uniform(0.1, 0.25)
        phase = rng.random()
        rho1 = GridDensity(1, n, 1 + 2 * amp * np.cos(2 * np.pi * (x - phase)))
        assert rho1.min_value >= 0.25
        flow = moser_map(GridDensity.uniform(1, n), rho1)
        assert jacobian_min(flow) > 0


# ---------------------------------------------------------------------------
# density interpolation and the continuity identity
# ---------------------------------------------------------------------------

def test_interpolate_density_endpoints():
    rho0 = cosine_density(32, 0.2)
    rho1 = cosine_density(32, 0.4, shift=0.3)
    assert np.array_equal(interpolate_density(rho0, rho1, 0.0).values, rho0.values)
    assert np.array_equal(interpolate_density(rho0, rho1, 1.0).values, rho1.values)


def test_interpolate_density_symmetric_cancellation():
    rho0 = cosine_density(32, -0.3)
    rho1 = cosine_density(32, 0.3)
    mid = interpolate_density(rho0, rho1, 0.5)
    assert np.abs(mid.values - 1.0).max() <= 1e-12


def test_interpolate_density_rejects_bad_time():
    rho = cosine_density(32, 0.2)
    with pytest.raises(MoserError):
        interpolate_density(rho, rho, 1.5)


def test_continuity_identity_machine_precision():
    n = 64
    rho0 = cosine_density(n, 0.3)
    rho1 = cosine_density(n, 0.5, shift=0.4)
    fld = MoserField(rho0, rho1, solve_poisson_periodic(rho0.values - rho1.values))
    for t in (0.0, 0.25, 0.5, 0.75, 1.0):
        assert continuity_residual(fld, t) <= 1e-6


def test_pushforward_convergence_ratio():
    errors = []
    for n in (32, 64, 128):
        rho0 = GridDensity.uniform(1, n)
        rho1 = cosine_density(n, 0.5)
        flow = moser_map(rho0, rho1)
        errors.append(flow.pushforward_error)
    assert errors[1] / errors[0] <= 0.67
    assert errors[2] / errors[1] <= 0.67
