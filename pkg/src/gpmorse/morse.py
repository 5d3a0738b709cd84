"""Condensation of a multivalued map into its Morse graph and RoA labels.

The strongly connected components of the cell digraph are collapsed into a
condensation DAG.  Recurrent components (any component with at least one
internal edge, including a single cell with a self-loop) become Morse nodes;
reachability between them, transitively reduced, forms the Morse graph.
Attractor nodes are Morse nodes from which no other Morse node is reachable.

Each cell is then labeled with the attractor node it drains to: cells that
can reach exactly one attractor get that node's index, cells reaching
several are ``UNCERTAIN``, and cells that reach none (their every path exits
the analyzed region) are ``ESCAPED``.
"""

from __future__ import annotations

import numpy as np

from .grid import StateBox
from .mvmap import MultivaluedMap

#: Cell labels in the region-of-attraction assignment.
UNCERTAIN = -1
ESCAPED = -2


class Condensation:
    """SCC partition of a multivalued map.

    ``sccs`` are emitted in reverse topological order (sinks first), the
    natural order of Tarjan's algorithm; ``successors`` holds the deduplicated
    component-level adjacency without self-edges.
    """

    def __init__(self, mvmap: MultivaluedMap):
        self.mvmap = mvmap
        adj = mvmap.successors
        n = mvmap.ncells
        scc_id = np.full(n, -1, dtype=np.int64)
        self_loop = np.zeros(n, dtype=bool)
        for c in range(n):
            if np.any(adj[c] == c):
                self_loop[c] = True
        # iterative Tarjan (explicit stack; grids easily exceed the recursion limit)
        index = np.full(n, -1, dtype=np.int64)
        low = np.zeros(n, dtype=np.int64)
        on_stack = np.zeros(n, dtype=bool)
        stack: list[int] = []
        sccs: list[np.ndarray] = []
        counter = 0
        for root in range(n):
            if index[root] != -1:
                continue
            work = [(root, 0)]
            while work:
                v, pi = work[-1]
                if pi == 0:
                    index[v] = low[v] = counter
                    counter += 1
                    stack.append(v)
                    on_stack[v] = True
                advanced = False
                succ = adj[v]
                while pi < len(succ):
                    w = int(succ[pi])
                    pi += 1
                    if index[w] == -1:
                        work[-1] = (v, pi)
                        work.append((w, 0))
                        advanced = True
                        break
                    if on_stack[w]:
                        low[v] = min(low[v], index[w])
                if advanced:
                    continue
                work.pop()
                if low[v] == index[v]:
                    comp = []
                    while True:
                        w = stack.pop()
                        on_stack[w] = False
                        scc_id[w] = len(sccs)
                        comp.append(w)
                        if w == v:
                            break
                    sccs.append(np.array(sorted(comp), dtype=np.int64))
                if work:
                    parent = work[-1][0]
                    low[parent] = min(low[parent], low[v])
        self.scc_id = scc_id
        self.sccs = sccs
        # component-level adjacency (dedup, drop self)
        successors: list[np.ndarray] = []
        for s, comp in enumerate(sccs):
            if len(comp) == 1:
                t = np.unique(scc_id[adj[comp[0]]])
            else:
                t = np.unique(scc_id[np.concatenate([adj[c] for c in comp])])
            successors.append(t[t != s])
        self.successors = successors
        self.recurrent = np.array(
            [len(comp) > 1 or self_loop[comp[0]] for comp in sccs], dtype=bool
        )

    @property
    def n_components(self) -> int:
        return len(self.sccs)

    def topological_order(self) -> np.ndarray:
        """Component ids ordered sources first."""
        return np.arange(len(self.sccs))[::-1]


class MorseGraphResult:
    """Morse nodes, their poset, attractors, and per-cell RoA labels."""

    def __init__(self, condensation: Condensation):
        self.condensation = condensation
        cond = condensation
        self.morse_nodes: list[np.ndarray] = [
            cond.sccs[s] for s in np.nonzero(cond.recurrent)[0]
        ]
        self._morse_scc = np.nonzero(cond.recurrent)[0]
        node_of_scc = {int(s): i for i, s in enumerate(self._morse_scc)}
        # does a strictly-later Morse node lie downstream of each component?
        nscc = cond.n_components
        reaches_other = np.zeros(nscc, dtype=bool)
        for s in range(nscc):  # sinks first
            for t in cond.successors[s]:
                if cond.recurrent[t] or reaches_other[t]:
                    reaches_other[s] = True
                    break
        self.attractor_nodes = np.array(
            [i for i, s in enumerate(self._morse_scc) if not reaches_other[s]],
            dtype=np.int64,
        )
        self._node_of_scc = node_of_scc
        self._edges: list[tuple[int, int]] | None = None
        self.roa: np.ndarray | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.morse_nodes)

    @property
    def edges(self) -> list[tuple[int, int]]:
        """Morse edges, reachability-induced and transitively reduced."""
        if self._edges is None:
            cond = self.condensation
            nscc = cond.n_components
            # bitmask over Morse node ids reachable strictly downstream
            reach = [0] * nscc
            for s in range(nscc):  # sinks first
                m = 0
                for t in cond.successors[s]:
                    m |= reach[t]
                    if cond.recurrent[t]:
                        m |= 1 << self._node_of_scc[int(t)]
                reach[s] = m
            full = [reach[s] for s in self._morse_scc]
            edges = []
            for i in range(self.n_nodes):
                succ = [j for j in range(self.n_nodes) if (full[i] >> j) & 1]
                for j in succ:
                    # reduced edge: j not reachable through another successor
                    if not any((full[k] >> j) & 1 for k in succ if k != j):
                        edges.append((i, j))
            self._edges = sorted(edges)
        return self._edges

    def node_sizes(self) -> list[int]:
        return [len(m) for m in self.morse_nodes]


def condense(mvmap: MultivaluedMap) -> Condensation:
    """Strongly connected components and the condensation DAG."""
    return Condensation(mvmap)


def morse_graph(condensation: Condensation) -> MorseGraphResult:
    """Recurrent sets of the condensation and their poset."""
    return MorseGraphResult(condensation)


def regions_of_attraction(result: MorseGraphResult) -> np.ndarray:
    """Per-cell RoA labels; also stored on ``result.roa``.

    A cell gets attractor node index ``i`` when ``i`` is the only attractor
    reachable from it, ``UNCERTAIN`` when several are, and ``ESCAPED`` when
    none is (every path leaves the analyzed region).
    """
    cond = result.condensation
    nscc = cond.n_components
    attr_bit = {}
    for a, node_idx in enumerate(result.attractor_nodes):
        attr_bit[int(result._morse_scc[node_idx])] = a
    masks = [0] * nscc
    for s in range(nscc):  # sinks first
        m = 0
        if s in attr_bit:
            m |= 1 << attr_bit[s]
        for t in cond.successors[s]:
            m |= masks[t]
        masks[s] = m
    roa = np.full(cond.mvmap.ncells, ESCAPED, dtype=np.int64)
    attr_node = list(result.attractor_nodes)
    for s, comp in enumerate(cond.sccs):
        m = masks[s]
        if m == 0:
            label = ESCAPED
        elif m & (m - 1) == 0:
            label = int(attr_node[m.bit_length() - 1])
        else:
            label = UNCERTAIN
        roa[comp] = label
    result.roa = roa
    return roa


def roa_for_goal(result: MorseGraphResult, goal: StateBox):
    """Attractor nodes intersecting a goal box and the union of their RoAs.

    Returns ``(node_indices, cell_ids)``; both empty when no attractor
    touches the goal.  Raises when the goal misses the grid entirely.
    """
    if result.roa is None:
        regions_of_attraction(result)
    grid = result.condensation.mvmap.grid
    goal_cells, _ = grid.cells_intersecting(goal)
    if len(goal_cells) == 0:
        raise ValueError("goal box does not intersect the grid")
    goal_set = set(goal_cells.tolist())
    hit = [
        i
        for i in result.attractor_nodes
        if goal_set.intersection(result.morse_nodes[i].tolist())
    ]
    if not hit:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    cells = np.nonzero(np.isin(result.roa, hit))[0]
    return np.array(hit, dtype=np.int64), cells


def save_morse_dot(result: MorseGraphResult, path):
    """Morse graph in DOT format: label = node index, cell count, attractor flag."""
    att = set(result.attractor_nodes.tolist())
    with open(path, "w") as fh:
        fh.write("digraph morse {\n")
        for i, cells in enumerate(result.morse_nodes):
            flag = ", attractor" if i in att else ""
            shape = ' peripheries=2' if i in att else ""
            fh.write(f'  {i} [label="{i}: {len(cells)} cells{flag}"{shape}];\n')
        for i, j in result.edges:
            fh.write(f"  {i} -> {j};\n")
        fh.write("}\n")


def save_raster(grid, labels: np.ndarray, path, legend: str = ""):
    """Dense per-cell integer raster with a grid header.

    Values are written in cell-id order (dimension 0 fastest), one line per
    row of dimension 0.
    """
    labels = np.asarray(labels)
    with open(path, "w") as fh:
        fh.write("# gpmorse-raster 1\n")
        fh.write(f"# dims {grid.dim}\n")
        for d in range(grid.dim):
            fh.write(
                f"# dim {d} lower {grid.lower[d]:.17g} upper {grid.upper[d]:.17g} "
                f"cells {grid.cells[d]} periodic {int(grid.periodic[d])}\n"
            )
        if legend:
            fh.write(f"# labels {legend}\n")
        per_line = int(grid.cells[0])
        flat = labels.ravel()
        for start in range(0, len(flat), per_line):
            fh.write(" ".join(str(int(v)) for v in flat[start : start + per_line]) + "\n")


def load_raster(path):
    """Read a raster written by :func:`save_raster`; returns (header, labels)."""
    header: dict = {"dims": None, "dim": []}
    values: list[int] = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[:1] == ["dims"]:
                    header["dims"] = int(parts[1])
                elif parts[:1] == ["dim"]:
                    header["dim"].append(
                        {
                            "lower": float(parts[3]),
                            "upper": float(parts[5]),
                            "cells": int(parts[7]),
                            "periodic": bool(int(parts[9])),
                        }
                    )
            else:
                values.extend(int(v) for v in line.split())
    return header, np.array(values, dtype=np.int64)
