import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from edonet import clothsim as cs
from edonet.graphrep import (ExtractionError, GraphError, GraphState, ZeroVarianceError, downsample_cloth,
                             fit_norm_stats, grid_graph, neighbor_table, pointcloud_to_graph)


def _hop_distances(n, edges):
    """All-pairs shortest paths by Floyd-Warshall (independent of the BFS)."""
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for i, j in edges:
        d[i, j] = d[j, i] = 1.0
    for k in range(n):
        d = np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :])
    return d


# ---------------------------------------------------------------- grid_graph


def test_grid_edge_counts():
    assert len(grid_graph(8, 8).edges) == 112
    assert len(grid_graph(2, 2).edges) == 4


def test_grid_gripper_rows_and_undirected():
    g = grid_graph(8, 8)
    assert g.gripper_mask.sum() == 16
    assert g.gripper_mask[:8].all() and g.gripper_mask[-8:].all()
    key = {tuple(sorted(e)) for e in g.edges.tolist()}
    assert len(key) == len(g.edges)
    reversed_graph = GraphState(g.positions, g.edges[:, ::-1], g.gripper_mask)
    a, b = neighbor_table(g), neighbor_table(reversed_graph)
    assert all(np.array_equal(x, y) for x, y in zip(a.hop1 + a.hop2, b.hop1 + b.hop2))


def test_graph_rejects_malformed_edges():
    with pytest.raises(GraphError):
        GraphState(np.zeros((3, 3)), [[0, 0]], np.zeros(3, bool))
    with pytest.raises(GraphError):
        GraphState(np.zeros((3, 3)), [[0, 1], [1, 0]], np.zeros(3, bool))
    with pytest.raises(GraphError):
        grid_graph(1, 4)


# ---------------------------------------------------------------- neighbor_table


def test_neighbor_counts_8x8():
    nt = neighbor_table(grid_graph(8, 8))
    assert (len(nt.hop1[0]), len(nt.hop2[0])) == (2, 3)
    v = 3 * 8 + 3
    assert (len(nt.hop1[v]), len(nt.hop2[v])) == (4, 8)


def test_path_graph_middle_has_no_second_hop():
    g = GraphState(np.zeros((3, 3)), [[0, 1], [1, 2]], np.zeros(3, bool))
    nt = neighbor_table(g)
    assert len(nt.hop2[1]) == 0
    assert nt.hop2[0].tolist() == [2]


def test_disconnected_graph_rejected():
    g = GraphState(np.zeros((4, 3)), [[0, 1], [2, 3]], np.zeros(4, bool))
    with pytest.raises(GraphError, match="disconnected"):
        neighbor_table(g)


@pytest.mark.parametrize("rows,cols", [(r, c) for r in range(2, 9) for c in range(2, 9)])
def test_neighbor_table_invariants_exhaustive(rows, cols):
    g = grid_graph(rows, cols)
    nt = neighbor_table(g)
    d = _hop_distances(g.n_nodes, g.edges)
    for v in range(g.n_nodes):
        n1, n2 = set(nt.hop1[v].tolist()), set(nt.hop2[v].tolist())
        assert n1 == set(np.flatnonzero(d[v] == 1).tolist())
        assert n2 == set(np.flatnonzero(d[v] == 2).tolist())
        assert v not in n1 | n2 and not n1 & n2
        assert all(v in set(nt.hop1[u].tolist()) for u in n1)
        assert all(v in set(nt.hop2[u].tolist()) for u in n2)
    assert len(nt.dst) == sum(len(h) for h in nt.hop1 + nt.hop2)


# ---------------------------------------------------------------- downsample


def test_downsample_identity():
    state = cs.make_cloth(8, 8, 0.05, cs.PhysicalParams(10.0, 1.0))
    g = downsample_cloth(state)
    assert np.array_equal(g.positions, state.positions)
    assert np.array_equal(g.gripper_mask, state.gripper_mask)


def test_downsample_stride_two_keeps_corners():
    state = cs.make_cloth(15, 15, 0.025, cs.PhysicalParams(10.0, 1.0))
    g = downsample_cloth(state)
    idx = (np.arange(8)[:, None] * 2 * 15 + np.arange(8)[None, :] * 2).ravel()
    assert np.array_equal(g.positions, state.positions[idx])
    for corner_src, corner_dst in ((0, 0), (14, 7), (210, 56), (224, 63)):
        assert np.array_equal(g.positions[corner_dst], state.positions[corner_src])
    assert g.gripper_mask.sum() == 2 * 8


def test_downsample_non_divisible_rejected():
    state = cs.make_cloth(16, 16, 0.025, cs.PhysicalParams(10.0, 1.0))
    with pytest.raises(GraphError):
        downsample_cloth(state)


# ---------------------------------------------------------------- normalisation


def test_norm_stats_moments_and_round_trip():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 5.0, size=(200, 3))
    stats = fit_norm_stats({"x": x})
    z = stats.apply("x", x)
    assert np.max(np.abs(z.mean(axis=0))) < 1e-10
    assert np.max(np.abs(z.var(axis=0) - 1.0)) < 1e-10
    assert np.max(np.abs(stats.invert("x", z) - x)) < 1e-12


def test_norm_stats_shift_invariant():
    x = np.random.default_rng(1).normal(size=(50, 2))
    a = fit_norm_stats({"x": x})
    b = fit_norm_stats({"x": x + 7.5})
    assert np.max(np.abs(a.apply("x", x) - b.apply("x", x + 7.5))) < 1e-12


def test_norm_stats_frozen_from_train():
    rng = np.random.default_rng(2)
    stats = fit_norm_stats({"x": rng.normal(size=(100, 1))})
    test = stats.apply("x", rng.normal(2.0, 1.0, size=(20, 1)))
    assert abs(test.mean()) > 0.5


def test_zero_variance_names_feature():
    x = np.ones((10, 2))
    x[:, 0] = np.arange(10)
    with pytest.raises(ZeroVarianceError, match=r"force\[1\]"):
        fit_norm_stats({"force": x})


def test_norm_stats_serialisation_round_trip():
    stats = fit_norm_stats({"a": np.random.default_rng(3).normal(size=(30, 4))})
    back = type(stats).from_dict(stats.to_dict())
    assert back.mean["a"].tobytes() == stats.mean["a"].tobytes()
    assert back.std["a"].tobytes() == stats.std["a"].tobytes()


# ---------------------------------------------------------------- point clouds


def _sheet(rows=8, cols=8, spacing=0.05, density=6):
    """Dense exact samples of a flat rectangle plus its true 8x8 grid."""
    xs = np.linspace(0, (cols - 1) * spacing, (cols - 1) * density + 1)
    ys = np.linspace(0, (rows - 1) * spacing, (rows - 1) * density + 1)
    X, Y = np.meshgrid(xs, ys)
    cloud = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    truth = grid_graph(rows, cols, spacing).positions
    return cloud, truth


def test_flat_sheet_recovered():
    cloud, truth = _sheet()
    g = pointcloud_to_graph(cloud, truth[:8], truth[-8:])
    assert g.n_nodes == 64 and len(g.edges) == 112
    assert np.max(np.linalg.norm(g.positions - truth, axis=1)) < 0.05 / 4


def _sim_cloud_error(stiffness):
    cfg = cs.SimConfig(rows=22, cols=22, spacing=0.05 / 3)
    state = cs.hanging_cloth(cs.PhysicalParams(stiffness, 2.51), cfg)
    truth = downsample_cloth(state).positions
    mids = 0.5 * (state.positions[state.spring_i] + state.positions[state.spring_j])[state.kind == cs.STRUCTURAL]
    rng = np.random.default_rng(0)
    cloud = np.concatenate([state.positions, mids + rng.normal(0.0, 1e-3, size=mids.shape)])
    g = pointcloud_to_graph(cloud, truth[:8], truth[-8:])
    return np.mean(np.linalg.norm(g.positions - truth, axis=1))


def test_simulated_cloud_recovered():
    # taut cloth: strain is near uniform along each slice, so equidistant nodes are the truth
    assert _sim_cloud_error(300.0) < 5e-3


def test_simulated_cloud_error_grows_with_sag():
    # soft cloth stretches most near the grippers, which equidistant placement cannot see
    errs = [_sim_cloud_error(k) for k in (300.0, 46.0, 10.0)]
    assert errs[0] < errs[1] < errs[2]


def test_empty_slice_is_error():
    cloud, truth = _sheet()
    keep = np.abs(cloud[:, 0] - truth[3, 0]) > 0.03
    with pytest.raises(ExtractionError, match="slice 3"):
        pointcloud_to_graph(cloud[keep], truth[:8], truth[-8:])


def test_small_cloud_is_error():
    cloud, truth = _sheet(density=1)
    with pytest.raises(ExtractionError):
        pointcloud_to_graph(cloud[:100], truth[:8], truth[-8:])


@settings(max_examples=10, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(0.02, 0.1))
def test_extraction_always_well_formed(tilt, spacing):
    cloud, truth = _sheet(spacing=spacing)
    lift = tilt * cloud[:, 1]
    cloud[:, 2] = lift
    truth = truth.copy()
    truth[:, 2] = tilt * truth[:, 1]
    g = pointcloud_to_graph(cloud, truth[:8], truth[-8:])
    assert g.positions.shape == (64, 3) and len(g.edges) == 112
    assert np.all(np.isfinite(g.positions))
