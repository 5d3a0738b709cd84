import numpy as np
import pytest

from gpmorse.grid import CubicalGrid, StateBox
from gpmorse.morse import (
    ESCAPED,
    UNCERTAIN,
    condense,
    morse_graph,
    regions_of_attraction,
    roa_for_goal,
    save_morse_dot,
    save_raster,
    load_raster,
)
from gpmorse.mvmap import MultivaluedMap, build_true_map
from gpmorse.systems import ArctanMap


def make_map(n, edges, escaped=()):
    """Multivalued map on a synthetic 1-D grid of n cells."""
    grid = CubicalGrid(StateBox([0.0], [float(n)]), [n])
    succ = [np.array(sorted({b for a, b in edges if a == c}), dtype=np.int64) for c in range(n)]
    esc = np.zeros(n, dtype=bool)
    esc[list(escaped)] = True
    for c in escaped:
        succ[c] = np.empty(0, dtype=np.int64)
    return MultivaluedMap(grid, succ, esc, "true_dynamics")


def brute_force_analysis(n, succ):
    """Reference Morse analysis from transitive closure alone."""
    reach = np.zeros((n, n), dtype=bool)
    for a in range(n):
        for b in succ[a]:
            reach[a, b] = True
    for k in range(n):  # Floyd-Warshall closure
        reach |= reach[:, k][:, None] & reach[k, :][None, :]
    # SCC partition: mutual reachability (or same node)
    scc_of = [-1] * n
    sccs = []
    for a in range(n):
        if scc_of[a] != -1:
            continue
        comp = [b for b in range(n) if b == a or (reach[a, b] and reach[b, a])]
        for b in comp:
            scc_of[b] = len(sccs)
        sccs.append(sorted(comp))
    # recurrent: any internal edge
    edge_set = {(a, int(b)) for a in range(n) for b in succ[a]}
    recurrent = []
    for comp in sccs:
        cs = set(comp)
        if any((a, b) in edge_set for a in comp for b in comp):
            recurrent.append(tuple(comp))
    morse_nodes = sorted(recurrent)
    # reachability between morse nodes through any path
    node_reach = {}
    for i, mi in enumerate(morse_nodes):
        downstream = set()
        for j, mj in enumerate(morse_nodes):
            if i == j:
                continue
            if any(reach[a, b] for a in mi for b in mj):
                downstream.add(j)
        node_reach[i] = downstream
    attractors = sorted(i for i in range(len(morse_nodes)) if not node_reach[i])
    # reduced edges: j in reach(i) with no intermediate morse node
    edges = set()
    for i, down in node_reach.items():
        for j in down:
            if not any(j in node_reach[k] for k in down if k != j):
                edges.add((i, j))
    # per-cell labels
    labels = []
    attr_cells = {i: set(morse_nodes[i]) for i in attractors}
    for c in range(n):
        hits = [
            i
            for i in attractors
            if c in attr_cells[i] or any(reach[c, b] for b in attr_cells[i])
        ]
        if len(hits) == 0:
            labels.append(ESCAPED)
        elif len(hits) == 1:
            labels.append(hits[0])
        else:
            labels.append(UNCERTAIN)
    return (
        [tuple(sorted(c)) for c in sccs],
        [tuple(m) for m in morse_nodes],
        sorted(edges),
        attractors,
        labels,
    )


def analyze(mv):
    cond = condense(mv)
    res = morse_graph(cond)
    regions_of_attraction(res)
    return cond, res


def random_mvmap(rng):
    n = int(rng.integers(2, 13))
    density = rng.uniform(0.05, 0.35)
    edges = set()
    for a in range(n):
        for b in range(n):
            if rng.random() < density:
                edges.add((a, b))
    return make_map(n, edges), n


class TestCondense:
    def test_arctan_figure(self):
        grid = CubicalGrid(StateBox([-3.0], [3.0]), [5])
        mv = build_true_map(grid, ArctanMap())
        cond = condense(mv)
        assert sorted(s.tolist() for s in cond.sccs) == [[0], [1], [2], [3], [4]]
        # condensation edges: a->b, b->c, d->c, e->d
        edge_pairs = set()
        for s, targets in enumerate(cond.successors):
            for t in targets:
                edge_pairs.add((cond.sccs[s][0], cond.sccs[t][0]))
        assert edge_pairs == {(0, 1), (1, 2), (3, 2), (4, 3)}

    def test_no_edges(self):
        mv = make_map(4, set())
        cond = condense(mv)
        assert cond.n_components == 4
        assert all(len(t) == 0 for t in cond.successors)

    def test_emission_order_is_reverse_topological(self):
        mv = make_map(4, {(0, 1), (1, 2), (2, 3)})
        cond = condense(mv)
        for s, targets in enumerate(cond.successors):
            assert np.all(targets < s)

    def test_random_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            mv, n = random_mvmap(rng)
            cond = condense(mv)
            got = sorted(tuple(s.tolist()) for s in cond.sccs)
            want, _, _, _, _ = brute_force_analysis(n, mv.successors)
            assert got == sorted(want)


class TestMorseGraph:
    def test_arctan_nodes_and_edges(self):
        grid = CubicalGrid(StateBox([-3.0], [3.0]), [5])
        mv = build_true_map(grid, ArctanMap())
        _, res = analyze(mv)
        nodes = sorted(m.tolist()[0] for m in res.morse_nodes)
        assert nodes == [1, 2, 3]  # cells b, c, d
        named = {tuple(m.tolist()): i for i, m in enumerate(res.morse_nodes)}
        b, c, d = named[(1,)], named[(2,)], named[(3,)]
        assert sorted(res.edges) == sorted([(b, c), (d, c)])
        assert res.attractor_nodes.tolist() == [c]

    def test_self_loops_make_singleton_nodes(self):
        mv = make_map(3, {(0, 0), (1, 1), (2, 2)})
        _, res = analyze(mv)
        assert res.n_nodes == 3 and res.edges == []
        assert sorted(res.attractor_nodes.tolist()) == [0, 1, 2]

    def test_single_node_without_self_loop_excluded(self):
        mv = make_map(3, {(0, 1), (1, 2), (2, 2)})
        _, res = analyze(mv)
        assert res.n_nodes == 1
        assert res.morse_nodes[0].tolist() == [2]

    def test_transitive_reduction(self):
        # chain of three recurrent nodes plus a shortcut edge
        mv = make_map(
            3, {(0, 0), (1, 1), (2, 2), (0, 1), (1, 2), (0, 2)}
        )
        _, res = analyze(mv)
        named = {tuple(m.tolist()): i for i, m in enumerate(res.morse_nodes)}
        a, b, c = named[(0,)], named[(1,)], named[(2,)]
        assert sorted(res.edges) == sorted([(a, b), (b, c)])


class TestRegionsOfAttraction:
    def test_arctan_all_cells_reach_sink(self):
        grid = CubicalGrid(StateBox([-3.0], [3.0]), [5])
        mv = build_true_map(grid, ArctanMap())
        _, res = analyze(mv)
        sink = res.attractor_nodes[0]
        assert np.all(res.roa == sink)

    def test_two_disjoint_sinks_partition(self):
        mv = make_map(6, {(0, 0), (1, 0), (2, 0), (3, 3), (4, 3), (5, 3)})
        _, res = analyze(mv)
        assert len(res.attractor_nodes) == 2
        labels = set(res.roa.tolist())
        assert labels == set(res.attractor_nodes.tolist())
        assert len(set(res.roa[:3])) == 1 and len(set(res.roa[3:])) == 1
        assert res.roa[0] != res.roa[3]

    def test_cell_reaching_both_sinks_uncertain(self):
        mv = make_map(3, {(0, 0), (2, 2), (1, 0), (1, 2)})
        _, res = analyze(mv)
        assert res.roa[1] == UNCERTAIN

    def test_escaped_cells_labeled(self):
        mv = make_map(3, {(0, 0), (1, 0)}, escaped=(2,))
        _, res = analyze(mv)
        assert res.roa[2] == ESCAPED

    def test_cells_draining_only_to_escapes_labeled_escaped(self):
        mv = make_map(3, {(0, 1)}, escaped=(1,))
        _, res = analyze(mv)
        assert res.roa[0] == ESCAPED and res.roa[1] == ESCAPED

    def test_partition_covers_every_cell(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            mv, n = random_mvmap(rng)
            _, res = analyze(mv)
            valid = set(res.attractor_nodes.tolist()) | {UNCERTAIN, ESCAPED}
            assert set(res.roa.tolist()) <= valid

    def test_forward_invariance_witness(self):
        # successors of an assigned cell are assigned to the same attractor
        # or drain out entirely
        rng = np.random.default_rng(4)
        for _ in range(50):
            mv, n = random_mvmap(rng)
            _, res = analyze(mv)
            for c in range(n):
                if res.roa[c] < 0:
                    continue
                for t in mv.successors[c]:
                    assert res.roa[t] == res.roa[c] or res.roa[t] == ESCAPED

    def test_dag_property(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            mv, n = random_mvmap(rng)
            cond = condense(mv)
            # successors strictly decrease in emission order: acyclic
            for s, targets in enumerate(cond.successors):
                assert np.all(targets < s)
            res = morse_graph(cond)
            for i, j in res.edges:
                assert i != j

    def test_random_full_oracle_equivalence(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            mv, n = random_mvmap(rng)
            cond, res = analyze(mv)
            sccs, nodes, edges, attractors, labels = brute_force_analysis(
                n, mv.successors
            )
            assert sorted(tuple(s.tolist()) for s in cond.sccs) == sorted(sccs)
            got_nodes = [tuple(m.tolist()) for m in res.morse_nodes]
            assert sorted(got_nodes) == sorted(nodes)
            remap = {i: nodes.index(m) for i, m in enumerate(got_nodes)}
            got_edges = sorted((remap[i], remap[j]) for i, j in res.edges)
            assert got_edges == edges
            assert sorted(remap[i] for i in res.attractor_nodes) == attractors
            got_labels = [
                remap[v] if v >= 0 else v for v in res.roa.tolist()
            ]
            assert got_labels == labels


class TestRoaForGoal:
    def test_goal_selects_attractor(self):
        grid = CubicalGrid(StateBox([-3.0], [3.0]), [5])
        mv = build_true_map(grid, ArctanMap())
        _, res = analyze(mv)
        nodes, cells = roa_for_goal(res, StateBox([-0.1], [0.1]))
        assert nodes.tolist() == [res.attractor_nodes[0]]
        assert cells.tolist() == [0, 1, 2, 3, 4]

    def test_goal_covering_domain_selects_all(self):
        mv = make_map(6, {(0, 0), (1, 0), (2, 0), (3, 3), (4, 3), (5, 3)})
        _, res = analyze(mv)
        nodes, cells = roa_for_goal(res, mv.grid.bounds)
        assert sorted(nodes.tolist()) == sorted(res.attractor_nodes.tolist())
        assert len(cells) == 6

    def test_goal_missing_all_attractors(self):
        # cells 4,5 drain away; the goal over them touches no attractor
        mv = make_map(6, {(0, 0), (1, 0), (2, 0), (3, 0), (4, 0), (5, 4)})
        _, res = analyze(mv)
        nodes, cells = roa_for_goal(res, StateBox([4.2], [4.8]))
        assert len(nodes) == 0 and len(cells) == 0

    def test_goal_outside_grid(self):
        mv = make_map(3, {(0, 0)})
        _, res = analyze(mv)
        with pytest.raises(ValueError):
            roa_for_goal(res, StateBox([7.0], [8.0]))


class TestExports:
    def test_dot_format(self, tmp_path):
        grid = CubicalGrid(StateBox([-3.0], [3.0]), [5])
        mv = build_true_map(grid, ArctanMap())
        _, res = analyze(mv)
        p = tmp_path / "morse.dot"
        save_morse_dot(res, p)
        text = p.read_text()
        assert text.startswith("digraph morse {")
        assert "attractor" in text
        assert text.count("->") == len(res.edges)

    def test_raster_roundtrip(self, tmp_path):
        grid = CubicalGrid(
            StateBox([-np.pi, -2.0], [np.pi, 2.0]), [8, 4], [True, False]
        )
        labels = np.arange(grid.ncells) % 3 - 1
        p = tmp_path / "roa.raster"
        save_raster(grid, labels, p, legend="test")
        header, back = load_raster(p)
        assert header["dims"] == 2
        assert header["dim"][0]["cells"] == 8 and header["dim"][0]["periodic"]
        assert np.array_equal(back, labels)
