
import numpy as np
import pytest
from hypothesis import given, strategies as st

from isograd.graph import SbmParams, generate_sbm
from isograd.partition import (
    HALO_1, INDUCED_CORE, ChunkAssignment, SweepSchedule, build_partition, load_partition,
    load_schedule, make_chunks, pair_coverage, read_chunks_csv, save_partition, save_schedule,
    sweep_schedule, whole_graph_partition, write_chunks_csv,
)

from conftest import make_graph


def singleton_chunks(n):
    return ChunkAssignment(n, np.arange(n))


def test_random_chunks_balanced():
    g = make_graph(6, [])
    ch = make_chunks(g, 3, "random", seed=0)
    assert sorted(ch.sizes().tolist()) == [2, 2, 2]


def test_chunks_equal_nodes_gives_singletons():
    g = make_graph(5, [(0, 1)])
    ch = make_chunks(g, 5, "random", seed=1)
    assert sorted(ch.owner.tolist()) == [0, 1, 2, 3, 4]


def test_too_many_chunks():
    with pytest.raises(ValueError):
        make_chunks(make_graph(3, []), 4)


def test_bfs_grow_separates_disjoint_triangles():
    g = make_graph(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)])
    for seed in range(5):
        ch = make_chunks(g, 2, "bfs-grow", seed)
        groups = {frozenset(ch.members(c).tolist()) for c in range(2)}
        assert groups == {frozenset({0, 1, 2}), frozenset({3, 4, 5})}


def test_bfs_grow_balance_and_determinism():
    g = generate_sbm(SbmParams(4, 50, 0.2, 0.01, seed=3))
    a = make_chunks(g, 4, "bfs-grow", 11)
    b = make_chunks(g, 4, "bfs-grow", 11)
    np.testing.assert_array_equal(a.owner, b.owner)
    sizes = a.sizes()
    assert sizes.min() >= 0.9 * 50 and sizes.max() <= 1.1 * 50


def test_whole_graph_pair_has_full_coverage():
    g = make_graph(4, [(0, 1), (1, 2), (2, 3)])
    ch = ChunkAssignment(2, np.array([0, 0, 1, 1]))
    for mode in (INDUCED_CORE, HALO_1):
        p = build_partition(g, ch, 0, 1, mode)
        np.testing.assert_array_equal(p.d_local[:p.num_core], p.d_global[:p.num_core])


def test_triangle_induced_core(triangle):
    p = build_partition(triangle, singleton_chunks(3), 0, 1, INDUCED_CORE)
    assert p.core.tolist() == [0, 1] and p.halo.size == 0
    assert p.d_local[0] == 1 and p.d_global[0] == 2


def test_triangle_halo(triangle):
    p = build_partition(triangle, singleton_chunks(3), 0, 1, HALO_1)
    assert p.halo.tolist() == [2]
    assert p.d_local[0] == 2
    assert p.neighbors(2).size == 0 and p.d_local[2] == 0


def test_equal_chunk_ids_rejected(triangle):
    with pytest.raises(ValueError):
        build_partition(triangle, singleton_chunks(3), 1, 1)


def test_schedule_c3_w3():
    s = sweep_schedule(3, 3)
    assert s.assignments[0] == ((0, 1), (1, 2), (2, 0))
    assert s.assignments[1] == ((0, 2), (1, 0), (2, 1))
    assert s.cycle_length == 2
    assert pair_coverage(s).missing == ()


def test_schedule_c2_w2():
    s = sweep_schedule(2, 2)
    assert s.cycle_length == 1
    assert {frozenset(p) for p in s.assignments[0]} == {frozenset({0, 1})}
    rep = pair_coverage(s)
    assert rep.first_covered == {(0, 1): 1}


def test_schedule_c4_w2():
    s = sweep_schedule(4, 2)
    assert s.cycle_length == 3
    assert pair_coverage(s).complete


def test_schedule_errors():
    with pytest.raises(ValueError):
        sweep_schedule(3, 4)
    with pytest.raises(ValueError):
        sweep_schedule(1, 1)


def test_hand_built_schedule_reports_missing_pair():
    s = SweepSchedule(4, 2, (((0, 1), (2, 3)), ((0, 2), (1, 2)), ((0, 3), (0, 1))))
    assert pair_coverage(s).missing == ((1, 3),)


@pytest.mark.parametrize("C", range(2, 9))
def test_schedule_formula_and_length(C):
    for W in range(1, C + 1):
        s = sweep_schedule(C, W)
        expected = C - 1 if W == C else -(-C * (C - 1) // (2 * W))
        assert s.cycle_length == expected
        for round_ in s.assignments:
            assert len(round_) == W
            assert all(b != sw for b, sw in round_)
        assert pair_coverage(s).complete


graphs = st.integers(4, 14).flatmap(lambda n: st.tuples(
    st.just(n),
    st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=35),
    st.integers(2, min(n, 4)), st.integers(0, 2**16)))


@given(graphs, st.sampled_from([INDUCED_CORE, HALO_1]))
def test_partition_invariants(case, mode):
    n, edges, C, seed = case
    g = make_graph(n, edges)
    ch = make_chunks(g, C, "random", seed)
    p = build_partition(g, ch, 0, 1, mode)
    core = set(p.core.tolist())
    assert core.isdisjoint(p.halo.tolist())
    assert core == set(np.flatnonzero(ch.owner <= 1).tolist())
    assert np.all(p.d_local <= p.d_global)
    np.testing.assert_array_equal(p.d_global, g.degrees()[p.global_of])
    for a, b in p.local_edge_set():
        assert a in core or b in core
    if mode == HALO_1:
        expect = {u for v in core for u in g.neighbors(v).tolist()} - core
        assert set(p.halo.tolist()) == expect
        assert all(p.neighbors(i).size == 0 for i in range(p.num_core, p.num_local))
    else:
        assert p.halo.size == 0
        induced = {(a, b) for a, b in map(tuple, g.edge_array().tolist()) if a in core and b in core}
        assert p.local_edge_set() == induced
    dl, dg = p.d_local[:p.num_core].sum(), p.d_global[:p.num_core].sum()
    visible = core | set(p.halo.tolist())
    closed = all(set(g.neighbors(v).tolist()) <= visible for v in core)
    assert (dl == dg) == closed
    assert build_partition(g, ch, 0, 1, mode) == p


@given(graphs, st.sampled_from([INDUCED_CORE, HALO_1]))
def test_cycle_union_covers_every_edge(case, mode):
    n, edges, C, seed = case
    g = make_graph(n, edges)
    ch = make_chunks(g, C, "random", seed)
    for W in range(1, C + 1):
        s = sweep_schedule(C, W)
        union = set()
        for round_ in s.assignments:
            for b, sw in round_:
                union |= build_partition(g, ch, b, sw, mode).local_edge_set()
        assert union == set(map(tuple, g.edge_array().tolist()))


def test_whole_graph_partition_matches_graph(small_sbm):
    p = whole_graph_partition(small_sbm)
    np.testing.assert_array_equal(p.d_local, p.d_global)
    assert p.num_core == small_sbm.num_nodes


def test_snapshots_round_trip(tmp_path, small_sbm):
    ch = make_chunks(small_sbm, 3, "random", 0)
    write_chunks_csv(tmp_path / "c.csv", ch)
    back = read_chunks_csv(tmp_path / "c.csv")
    np.testing.assert_array_equal(back.owner, ch.owner)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "node,chunk"
    for mode in (INDUCED_CORE, HALO_1):
        p = build_partition(small_sbm, ch, 2, 0, mode)
        save_partition(tmp_path / "p.snap", p)
        assert load_partition(tmp_path / "p.snap") == p
    s = sweep_schedule(5, 3)
    save_schedule(tmp_path / "s.snap", s)
    assert load_schedule(tmp_path / "s.snap") == s


def test_snapshot_kind_checked(tmp_path):
    from isograd.errors import MalformedInputError
    save_schedule(tmp_path / "s.snap", sweep_schedule(3, 2))
    with pytest.raises(MalformedInputError):
        load_partition(tmp_path / "s.snap")
