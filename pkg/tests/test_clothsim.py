import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edonet import _kernels, clothsim as cs
from edonet.clothsim import PhysicalParams, SimConfig

CFG = SimConfig()
MID = PhysicalParams(28.0, 2.51)


def _two_nodes(sep, k=10.0):
    pos = np.array([[0.0, 0.0, 0.0], [sep, 0.0, 0.0]])
    return cs.ClothState(pos, np.zeros_like(pos), 1, 2, 1.0, np.array([0]), np.array([1]), np.array([1.0]),
                         np.array([cs.STRUCTURAL]), PhysicalParams(k, 1.0), np.zeros((2, 3), bool),
                         np.zeros(2, bool))


def _force_oracle(state, gravity):
    """Independent per-spring loop: Hooke forces plus gravity plus loads."""
    f = np.zeros_like(state.positions)
    f[:, 2] += state.node_mass * gravity
    f += state.loads
    for i, j, rest, k in zip(state.spring_i, state.spring_j, state.rest, state.spring_constants()):
        d = state.positions[j] - state.positions[i]
        length = np.sqrt(d @ d)
        fij = k * (length - rest) * d / length
        f[i] += fij
        f[j] -= fij
    return f


# ---------------------------------------------------------------- make_cloth


def _enumerate_springs(rows, cols):
    counts = {cs.STRUCTURAL: 0, cs.SHEAR: 0, cs.BENDING: 0}
    cells = list(itertools.product(range(rows), range(cols)))
    for (r1, c1), (r2, c2) in itertools.combinations(cells, 2):
        dr, dc = abs(r1 - r2), abs(c1 - c2)
        if (dr, dc) in ((0, 1), (1, 0)):
            counts[cs.STRUCTURAL] += 1
        elif (dr, dc) == (1, 1):
            counts[cs.SHEAR] += 1
        elif (dr, dc) in ((0, 2), (2, 0)):
            counts[cs.BENDING] += 1
    return counts


@pytest.mark.parametrize("rows,cols,expected", [(2, 2, (4, 2, 0)), (3, 3, (12, 8, 6))])
def test_spring_counts(rows, cols, expected):
    state = cs.make_cloth(rows, cols, 1.0, MID)
    got = tuple(int(np.sum(state.kind == k)) for k in (cs.STRUCTURAL, cs.SHEAR, cs.BENDING))
    assert got == expected
    oracle = _enumerate_springs(rows, cols)
    assert got == (oracle[cs.STRUCTURAL], oracle[cs.SHEAR], oracle[cs.BENDING])


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 7), st.integers(2, 7), st.floats(0.01, 2.0))
def test_spring_layout_matches_enumeration(rows, cols, spacing):
    state = cs.make_cloth(rows, cols, spacing, MID)
    oracle = _enumerate_springs(rows, cols)
    for kind, n in oracle.items():
        assert int(np.sum(state.kind == kind)) == n
    lengths = np.linalg.norm(state.positions[state.spring_j] - state.positions[state.spring_i], axis=1)
    assert np.array_equal(lengths, state.rest)
    assert np.all(state.rest > 0)
    assert np.array_equal(state.spring_constants()[state.kind == cs.BENDING],
                          np.full(oracle[cs.BENDING], MID.bending))


def test_flat_rest_has_zero_spring_force():
    state = cs.make_cloth(6, 5, 0.05, MID)
    assert np.array_equal(cs.static_forces(state, gravity=0.0), np.zeros((30, 3)))


@pytest.mark.parametrize("spacing", [0.0, -1.0])
def test_non_positive_spacing_rejected(spacing):
    with pytest.raises(ValueError):
        cs.make_cloth(3, 3, spacing, MID)


# ---------------------------------------------------------------- step


def test_hooke_two_nodes():
    f = cs.static_forces(_two_nodes(1.5), gravity=0.0)
    assert np.array_equal(f, [[5.0, 0.0, 0.0], [-5.0, 0.0, 0.0]])


def test_step_at_rest_without_gravity_is_identity():
    state = cs.make_cloth(4, 4, 0.05, MID)
    out = cs.step(state, 1e-3, gravity=0.0, damping=0.02)
    assert np.array_equal(out.positions, state.positions)
    assert np.array_equal(out.velocities, state.velocities)


def test_single_mass_matches_closed_form():
    pos = np.array([[0.0, 0.0, 1.0]])
    state = cs.ClothState(pos, np.zeros_like(pos), 1, 1, 1.0, np.zeros(0, np.int64), np.zeros(0, np.int64),
                          np.zeros(0), np.zeros(0, np.int64), MID, np.zeros((1, 3), bool), np.zeros(1, bool))
    dt, g, c, m, n = 0.01, -9.81, 0.02, state.node_mass, 100
    for _ in range(n):
        state = cs.step(state, dt, gravity=g, damping=c)
    a = 1.0 - dt * c / m
    v_n = dt * g * (1.0 - a ** n) / (1.0 - a)
    z_n = 1.0 + dt * dt * g / (1.0 - a) * (n - a * (1.0 - a ** n) / (1.0 - a))
    assert abs(state.velocities[0, 2] - v_n) < 1e-10
    assert abs(state.positions[0, 2] - z_n) < 1e-10


def test_step_argument_checks():
    state = cs.make_cloth(2, 2, 1.0, MID)
    with pytest.raises(ValueError):
        cs.step(state, 0.0)
    with pytest.raises(ValueError):
        cs.step(state, 1e-3, damping=1.0)


def test_divergence_reports_dt_and_params():
    state = cs.make_cloth(4, 4, 0.05, PhysicalParams(1e6, 1e6))
    state.positions[5, 2] += 0.02
    with pytest.raises(cs.SimulationDiverged, match=r"dt=0\.5.*stiffness=1000000"):
        for _ in range(200):
            state = cs.step(state, 0.5, damping=0.0)


def test_held_nodes_follow_prescribed_trajectory_exactly():
    state = cs._hold_rows(cs.make_cloth(6, 6, 0.05, MID))
    vel = np.zeros_like(state.positions)
    vel[state.gripper_mask, 1] = 0.1
    out, _, _ = cs._run(state, 50, 1e-3, -9.81, 0.02, velocity=vel)
    held = state.gripper_mask
    expect = state.positions[held] + vel[held] * (50 * 1e-3)
    assert np.array_equal(out.positions[held], expect)
    assert np.array_equal(out.velocities[held], np.zeros_like(expect))


# ---------------------------------------------------------------- settle


def test_settle_at_rest_returns_input():
    state = cs.make_cloth(4, 4, 0.05, MID)
    out = cs.settle(state, gravity=0.0)
    assert np.array_equal(out.positions, state.positions)


def test_settle_hanging_cloth_residual_by_independent_oracle():
    state = cs.hanging_cloth(MID, CFG)
    f = _force_oracle(state, CFG.gravity)
    free = ~state.gripper_mask
    assert np.max(np.linalg.norm(f[free], axis=1)) < CFG.settle_tol
    assert np.array_equal(state.velocities, np.zeros_like(state.velocities))
    flat = cs.make_cloth(CFG.rows, CFG.cols, CFG.spacing, MID)
    assert np.array_equal(state.positions[state.gripper_mask], flat.positions[flat.gripper_mask])


def test_stiffer_cloth_sags_less():
    soft = cs.hanging_cloth(PhysicalParams(10.0, 2.51), CFG)
    stiff = cs.hanging_cloth(PhysicalParams(46.0, 2.51), CFG)
    assert -stiff.positions[:, 2].min() < -soft.positions[:, 2].min()


def test_settle_not_converged_reports_residual():
    state = cs._hold_rows(cs.make_cloth(8, 8, 0.05, MID))
    with pytest.raises(cs.NotConverged, match="residual"):
        cs.settle(state, max_steps=10)


# ---------------------------------------------------------------- energy


@pytest.mark.parametrize("k", [10.0, 46.0])
def test_energy_non_increasing_under_damping(k):
    state = cs._hold_rows(cs.make_cloth(CFG.rows, CFG.cols, CFG.spacing, PhysicalParams(k, 2.51)))
    energies = [cs.total_energy(state, CFG.gravity)]
    for _ in range(1500):
        state = cs.step(state, CFG.dt, CFG.gravity, CFG.damping)
        energies.append(cs.total_energy(state, CFG.gravity))
    e = np.array(energies)
    assert np.all(np.diff(e) <= 1e-12 * np.abs(e[:-1]).max())
    assert e[-1] < e[0]


# ---------------------------------------------------------------- determinism and backends


def test_simulation_deterministic():
    a = cs.run_bandage(MID, 1.0, CFG)[2]
    b = cs.run_bandage(MID, 1.0, CFG)[2]
    assert a.positions.tobytes() == b.positions.tobytes()


@pytest.mark.skipif(_kernels.numba_impl is None, reason="numba missing")
def test_numba_and_numpy_integrators_agree():
    state = cs._hold_rows(cs.make_cloth(6, 6, 0.05, MID))
    state.sphere = cs.Sphere(np.array([0.12, 0.12, 0.05]), np.zeros(3), 0.06, 0.02, 5e3)
    p = cs._pack(state, cs.Obstacles(cylinder=(0.1, -0.05, 0.06, 2e3), table=(-0.01, 5e3)), -9.81)
    out = {}
    for impl in (_kernels.numpy_impl, _kernels.numba_impl):
        x, v = p["x"].copy(), p["v"].copy()
        vel = np.zeros_like(x)
        vel[:6, 2] = 0.05
        res = impl.simulate(x, v, p["x"], vel, 0, state.spring_i, state.spring_j, state.rest,
                            state.spring_constants(), p["mass"], p["ext"], p["gravity"], p["cyl"], p["table"],
                            p["sphere"], p["free"], 1e-3, 0.02, 300, 1e-9, 20)
        out[impl.name] = (x, res)
    assert np.max(np.abs(out["numpy"][0] - out["numba"][0])) < 1e-12
    assert out["numpy"][1][0] == out["numba"][1][0]


# ---------------------------------------------------------------- Savitzky-Golay


def _savgol_oracle(y, window, order):
    """Per-sample normal-equations least-squares fit, evaluated at the sample."""
    n, h = len(y), window // 2
    out = np.empty(n)
    for i in range(n):
        lo, hi = max(0, i - h), min(n, i + h + 1)
        t = np.arange(lo, hi) - i
        A = np.stack([t ** p for p in range(order + 1)], axis=1).astype(float)
        coef = np.linalg.solve(A.T @ A, A.T @ y[lo:hi])
        out[i] = coef[0]
    return out


def test_savgol_exact_on_cubic():
    t = np.linspace(-2.0, 2.0, 60)
    y = t ** 3 - 2.0 * t
    assert np.max(np.abs(cs.savgol_smooth(y, 21, 3) - y)) < 1e-9


def test_savgol_constant_unchanged():
    y = np.full(40, 3.25)
    assert np.max(np.abs(cs.savgol_smooth(y) - y)) < 1e-12


def test_savgol_matches_least_squares_oracle():
    y = np.random.default_rng(0).normal(size=80)
    got = cs.savgol_smooth(y, 21, 3)
    assert np.max(np.abs(got - _savgol_oracle(y, 21, 3))) < 1e-8


def test_savgol_argument_errors():
    with pytest.raises(ValueError, match="shorter"):
        cs.savgol_smooth(np.zeros(10), 21, 3)
    with pytest.raises(ValueError):
        cs.savgol_smooth(np.zeros(30), 20, 3)
    with pytest.raises(ValueError):
        cs.savgol_smooth(np.zeros(30), 5, 5)


# ---------------------------------------------------------------- pulling EA


def test_ea_observations_contract():
    obs = cs.run_pulling_ea(MID, raw_steps=40, T=5)
    ts = [o.t for o in obs]
    assert len(obs) == 5 and all(b > a for a, b in zip(ts, ts[1:])) and ts[-1] == 40
    for o in obs:
        assert o.graph.n_nodes == 64 and np.all(np.isfinite(o.force))
    with pytest.raises(ValueError):
        cs.run_pulling_ea(MID, raw_steps=10, T=5)


def test_subsample_indices():
    assert cs.subsample_indices(100, 5).tolist() == [19, 39, 59, 79, 99]
    assert cs.subsample_indices(100, 1).tolist() == [99]
    with pytest.raises(ValueError):
        cs.subsample_indices(10, 11)


def test_final_force_non_decreasing_in_stiffness():
    mags = [np.linalg.norm(cs.run_pulling_ea(PhysicalParams(k, 2.51), T=1)[0].force) for k in (10.0, 28.0, 46.0)]
    assert mags[0] <= mags[1] <= mags[2]


def test_zero_pull_is_quiet():
    obs = cs.run_pulling_ea(MID, raw_steps=30, T=3, pull=0.0)
    settled = cs.downsample_cloth(cs.hanging_cloth(MID, CFG))
    # settle leaves up to settle_tol of unbalanced force on each free node;
    # the gripper row can pick up at most their sum while the rest relaxes
    n_free = int(np.sum(~settled.gripper_mask))
    for o in obs:
        assert np.max(np.abs(o.force)) < n_free * CFG.settle_tol
        assert np.max(np.abs(o.graph.positions - settled.positions)) < 1e-4


# ---------------------------------------------------------------- bandage


@pytest.fixture(scope="module")
def soft_bandage():
    params = PhysicalParams(10.0, 0.01)
    before = cs.bandage_initial(params, CFG)
    return params, before


def test_bandage_zero_action_is_identity(soft_bandage):
    params, before = soft_bandage
    g0, g1, _ = cs.run_bandage(params, 0.0, CFG, before)
    assert np.array_equal(g0.positions, g1.positions)


def test_bandage_no_penetration_over_action_grid(soft_bandage):
    params, before = soft_bandage
    r = CFG.arm_radius
    worst = 0.0
    for a in CFG.action_grid("bandage"):
        after = cs.run_bandage(params, a, CFG, before)[2]
        dist = np.linalg.norm(after.positions[:, 1:], axis=1)
        worst = max(worst, r - dist.min())
    assert worst < 0.01 * r


def test_bandage_displacement_monotone_in_action(soft_bandage):
    params, before = soft_bandage
    grid = CFG.action_grid("bandage")
    disp = [np.linalg.norm(cs.run_bandage(params, a, CFG, before)[2].positions - before.positions)
            for a in (grid[5], grid[15], grid[29])]
    assert disp[0] <= disp[1] <= disp[2]


def test_bandage_action_range_checked(soft_bandage):
    params, before = soft_bandage
    with pytest.raises(ValueError):
        cs.run_bandage(params, CFG.f_max * 1.01, CFG, before)


# ---------------------------------------------------------------- lifting


def _dimple(params, a):
    after = cs.run_lifting(params, a, CFG)[2]
    return after.positions[after.gripper_mask, 2].mean() - after.positions[:, 2].min()


def test_lifting_zero_action_is_identity():
    g0, g1, _ = cs.run_lifting(MID, 0.0, CFG)
    assert np.array_equal(g0.positions, g1.positions)


def test_lifting_grippers_rise_by_action():
    before = cs.lifting_initial(MID, CFG)
    a = CFG.action_grid("lifting")[12]
    after = cs.run_lifting(MID, a, CFG, before)[2]
    g = before.gripper_mask
    assert abs(after.positions[g, 2].mean() - before.positions[g, 2].mean() - a) < 1e-9


def test_lifting_dimple_decreases_with_bending():
    a = CFG.action_grid("lifting")[15]
    d = [_dimple(PhysicalParams(28.0, b), a) for b in (0.01, 2.51, 5.01)]
    assert d[0] > d[1] > d[2]
