"""Combinatorial multivalued maps over a cubical grid.

A multivalued map sends each grid cell to the set of cells its image can
touch after one flow step.  Two constructions are provided: the
true-dynamics map evaluates the flow at every deduplicated grid corner and
takes per-cell bounding boxes of the corner images; the surrogate map uses
the GP posterior mean at corners plus a confidence hypercube at the cell
center, so each cell's image carries a pointwise confidence level.

Cells whose image box leaves the non-periodic bounds are *escaped*: they get
no successors and are excluded from recurrence analysis (claiming anything
about orbits that leave the analyzed region would be unsound).
"""

from __future__ import annotations

import numpy as np

from .dynamics import FlowMap
from .gp import GpSurrogate, confidence_z
from .grid import CubicalGrid


class MultivaluedMap:
    """Directed graph on grid cells: ``successors[c]`` is a sorted id array."""

    def __init__(
        self,
        grid: CubicalGrid,
        successors: list[np.ndarray],
        escaped: np.ndarray,
        mode: str,
        params: dict | None = None,
    ):
        self.grid = grid
        self.successors = successors
        self.escaped = escaped
        self.mode = mode
        self.params = params or {}
        #: per-cell-center predictive std, set by the surrogate builder
        self.center_sigma: np.ndarray | None = None

    @property
    def ncells(self) -> int:
        return self.grid.ncells

    def n_edges(self) -> int:
        return int(sum(len(s) for s in self.successors))

    def escaped_cells(self) -> np.ndarray:
        return np.nonzero(self.escaped)[0]

    def save_edges(self, path):
        """Edge list ``cell -> cell`` with a header describing the map."""
        g = self.grid
        with open(path, "w") as fh:
            fh.write("# gpmorse-mvmap 1\n")
            fh.write(
                "# grid cells=%s periodic=%s lower=%s upper=%s\n"
                % (
                    ",".join(str(c) for c in g.cells),
                    ",".join("1" if p else "0" for p in g.periodic),
                    ",".join(f"{v:.17g}" for v in g.lower),
                    ",".join(f"{v:.17g}" for v in g.upper),
                )
            )
            pstr = " ".join(f"{k}={v}" for k, v in sorted(self.params.items()))
            fh.write(f"# mode {self.mode} {pstr}\n".rstrip() + "\n")
            fh.write("# escaped " + " ".join(str(c) for c in self.escaped_cells()) + "\n")
            for c, succ in enumerate(self.successors):
                for t in succ:
                    fh.write(f"{c} -> {t}\n")


def _assemble(grid, lo, hi, escaped, mode, params) -> MultivaluedMap:
    """Intersect per-cell image boxes with the grid; clipped boxes escape."""
    ok = ~escaped
    successors: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * grid.ncells
    if np.any(ok):
        idx = np.nonzero(ok)[0]
        ids, clipped = grid.cells_intersecting_batch(lo[idx], hi[idx])
        for k, cell in enumerate(idx):
            if clipped[k]:
                escaped[cell] = True
            else:
                successors[cell] = ids[k]
    return MultivaluedMap(grid, successors, escaped, mode, params)


def build_true_map(
    grid: CubicalGrid, flow_map: FlowMap, epsilon=0.0
) -> MultivaluedMap:
    """Outer approximation of the flow from corner images.

    Evaluates the flow once per deduplicated corner (the propagation count
    grows by exactly the corner-lattice size), bounds each cell's corner
    images with an axis-aligned box inflated by ``epsilon`` per dimension,
    and connects the cell to every grid cell that box touches.
    """
    if flow_map.dim != grid.dim:
        raise ValueError("grid and flow map dimensions differ")
    eps = np.broadcast_to(np.asarray(epsilon, dtype=float), (grid.dim,))
    if np.any(eps < 0):
        raise ValueError("epsilon must be non-negative")
    lat = grid.corner_lattice()
    images = flow_map.flow_batch(lat.points)
    lo, hi = grid.cell_corner_images(images)
    escaped = ~np.all(np.isfinite(lo) & np.isfinite(hi), axis=1)
    lo = lo - eps
    hi = hi + eps
    return _assemble(
        grid, lo, hi, escaped, "true_dynamics", {"epsilon": eps.tolist()}
    )


def build_gp_map(grid: CubicalGrid, model: GpSurrogate, delta: float) -> MultivaluedMap:
    """Pointwise-confidence map from a fitted surrogate.

    Per cell, the image region is the union of the smallest box containing
    the posterior means of the cell's corners and the confidence hypercube
    at the cell center (joint per-point confidence ``1 - delta``).  Consumes
    no true-dynamics propagations.  The center-point predictive deviations
    are kept on the returned map (``center_sigma``) for refinement logic.
    """
    if model.dim != grid.dim:
        raise ValueError("grid and model dimensions differ")
    z = confidence_z(delta, model.dim)
    lat = grid.corner_lattice()
    mu_corners, _ = model.predict(lat.points, with_std=False)
    centers = grid.all_centers()
    mu_c, sd_c = model.predict(centers)
    r_lo, r_hi = grid.cell_corner_images(mu_corners)
    e_lo = mu_c - z * sd_c
    e_hi = mu_c + z * sd_c
    # the image region is the union of the two boxes, not their hull: query
    # them separately and merge successor sets per cell
    escaped = ~(
        np.all(np.isfinite(r_lo) & np.isfinite(r_hi), axis=1)
        & np.all(np.isfinite(e_lo) & np.isfinite(e_hi), axis=1)
    )
    successors: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * grid.ncells
    ok = np.nonzero(~escaped)[0]
    if len(ok):
        ids_r, clip_r = grid.cells_intersecting_batch(r_lo[ok], r_hi[ok])
        ids_e, clip_e = grid.cells_intersecting_batch(e_lo[ok], e_hi[ok])
        for k, cell in enumerate(ok):
            if clip_r[k] or clip_e[k]:
                escaped[cell] = True
            else:
                successors[cell] = np.union1d(ids_r[k], ids_e[k])
    mv = MultivaluedMap(grid, successors, escaped, "gp_confidence", {"delta": delta})
    mv.center_sigma = sd_c
    return mv
