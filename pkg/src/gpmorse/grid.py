"""Cubical decomposition of a state-space orthotope.

The state space is an axis-aligned box split into a uniform grid of cells,
optionally with periodic (wrap-around) dimensions.  Cells are addressed by a
single integer id; the id is the mixed-radix encoding of the per-dimension
multi-index with dimension 0 varying fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Marker returned by :meth:`CubicalGrid.locate` for points outside the
#: non-periodic bounds.
OUTSIDE = -1


@dataclass(frozen=True)
class StateBox:
    """Closed axis-aligned box ``prod_i [lower[i], upper[i]]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-D arrays of equal length")
        # degenerate (zero-width) boxes are allowed: confidence boxes collapse
        # to a point when the predictive deviation vanishes
        if not np.all(lo <= hi):
            raise ValueError(f"need lower <= upper per dimension, got {lo} / {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x, atol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - atol) and np.all(x <= self.upper + atol))

    def volume(self) -> float:
        return float(np.prod(self.widths))


class CornerLattice:
    """Deduplicated corner points of a grid.

    For a non-periodic dimension with ``n`` cells there are ``n + 1`` distinct
    corner coordinates; for a periodic dimension the face at ``upper`` is
    identified with the face at ``lower``, leaving ``n``.
    """

    def __init__(self, grid: "CubicalGrid"):
        self.grid = grid
        self.shape = np.where(grid.periodic, grid.cells, grid.cells + 1)
        self.strides = _strides(self.shape)
        self.size = int(np.prod(self.shape))
        # coordinates use the same construction formula as cell boxes so that
        # shared corners are bit-identical
        axes = [
            grid.lower[d] + np.arange(self.shape[d]) * grid.cell_widths[d]
            for d in range(grid.dim)
        ]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel(order="F") for m in mesh], axis=-1)
        self.points = pts  # (size, dim), dimension 0 fastest

    def flat_id(self, multi: np.ndarray) -> np.ndarray:
        """Mixed-radix id of lattice multi-indices (dimension 0 fastest)."""
        return np.asarray(multi) @ self.strides


def _strides(counts: np.ndarray) -> np.ndarray:
    s = np.ones(len(counts), dtype=np.int64)
    for d in range(1, len(counts)):
        s[d] = s[d - 1] * counts[d - 1]
    return s


class CubicalGrid:
    """Uniform cell decomposition of a :class:`StateBox`.

    Parameters
    ----------
    bounds:
        The state-space box being decomposed.
    cells:
        Number of cells per dimension (any positive integers; use
        :meth:`from_subdivisions` for the power-of-two convention).
    periodic:
        Per-dimension wrap flags.  On a periodic dimension, points and query
        boxes are wrapped modulo the box width before cell lookup.
    """

    def __init__(self, bounds: StateBox, cells, periodic=None):
        if not np.all(bounds.lower < bounds.upper):
            raise ValueError("grid bounds must have positive width per dimension")
        self.bounds = bounds
        n = np.atleast_1d(np.asarray(cells, dtype=np.int64))
        if n.size != bounds.dim:
            raise ValueError("cells must give one count per dimension")
        if np.any(n < 1):
            raise ValueError("cell counts must be >= 1")
        self.cells = n
        if periodic is None:
            periodic = [False] * bounds.dim
        per = np.atleast_1d(np.asarray(periodic, dtype=bool))
        if per.size != bounds.dim:
            raise ValueError("periodic must give one flag per dimension")
        self.periodic = per
        self.lower = bounds.lower
        self.upper = bounds.upper
        self.periods = bounds.widths
        self.cell_widths = bounds.widths / n
        self.strides = _strides(n)
        self.ncells = int(np.prod(n))
        self._lattice: CornerLattice | None = None

    @classmethod
    def from_subdivisions(cls, bounds: StateBox, exponents, periodic=None) -> "CubicalGrid":
        """Grid with ``2**k`` cells along each dimension."""
        k = np.atleast_1d(np.asarray(exponents, dtype=np.int64))
        if np.any(k < 0):
            raise ValueError("subdivision exponents must be >= 0")
        return cls(bounds, 2 ** k, periodic)

    @property
    def dim(self) -> int:
        return self.bounds.dim

    def cell_volume(self) -> float:
        return float(np.prod(self.cell_widths))

    # -- indexing ---------------------------------------------------------

    def multi_index(self, cell_id) -> np.ndarray:
        """Per-dimension indices of a cell id (vectorized over ids)."""
        cid = np.asarray(cell_id, dtype=np.int64)
        out = np.empty(cid.shape + (self.dim,), dtype=np.int64)
        rem = cid
        for d in range(self.dim):
            out[..., d] = rem % self.cells[d]
            rem = rem // self.cells[d]
        return out

    def cell_id(self, multi) -> np.ndarray:
        m = np.asarray(multi, dtype=np.int64)
        return m @ self.strides

    def all_multi_indices(self) -> np.ndarray:
        return self.multi_index(np.arange(self.ncells))

    # -- geometry ---------------------------------------------------------

    def wrap_point(self, x: np.ndarray) -> np.ndarray:
        """Wrap periodic coordinates into ``[lower, upper)``; others untouched."""
        x = np.array(x, dtype=float, copy=True)
        p = self.periodic
        if np.any(p):
            x[..., p] = self.lower[p] + np.mod(x[..., p] - self.lower[p], self.periods[p])
        return x

    def locate(self, x) -> int:
        """Cell containing a point, or :data:`OUTSIDE`.

        Ties on shared faces go to the lower-index cell; the lower corner of
        the whole box belongs to cell 0.
        """
        ids = self.locate_batch(np.asarray(x, dtype=float)[None, :])
        return int(ids[0])

    def locate_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}")
        xw = self.wrap_point(x)
        outside = np.zeros(len(xw), dtype=bool)
        for d in np.nonzero(~self.periodic)[0]:
            outside |= (xw[:, d] < self.lower[d]) | (xw[:, d] > self.upper[d])
        ids = np.zeros(len(xw), dtype=np.int64)
        for d in range(self.dim):
            t = (xw[:, d] - self.lower[d]) / self.cell_widths[d]
            i = np.ceil(t).astype(np.int64) - 1
            np.clip(i, 0, self.cells[d] - 1, out=i)
            # guarantee containment in the chosen cell despite rounding
            lo_face = self.lower[d] + i * self.cell_widths[d]
            hi_face = self.lower[d] + (i + 1) * self.cell_widths[d]
            i = np.where((xw[:, d] > hi_face) & (i < self.cells[d] - 1), i + 1, i)
            i = np.where((xw[:, d] < lo_face) & (i > 0), i - 1, i)
            ids += i * self.strides[d]
        ids[outside] = OUTSIDE
        return ids

    def cell_box(self, cell_id: int) -> StateBox:
        m = self.multi_index(cell_id)
        lo = self.lower + m * self.cell_widths
        return StateBox(lo, lo + self.cell_widths)

    def corners(self, cell_id: int) -> np.ndarray:
        """The ``2**dim`` geometric corners of a cell, shape ``(2**dim, dim)``."""
        m = self.multi_index(cell_id)
        offs = _corner_offsets(self.dim)
        return self.lower + (m + offs) * self.cell_widths

    def center(self, cell_id) -> np.ndarray:
        m = self.multi_index(cell_id)
        return self.lower + (m + 0.5) * self.cell_widths

    def all_centers(self) -> np.ndarray:
        return self.center(np.arange(self.ncells))

    # -- corner lattice ----------------------------------------------------

    def corner_lattice(self) -> CornerLattice:
        if self._lattice is None:
            self._lattice = CornerLattice(self)
        return self._lattice

    def cell_corner_images(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell min/max over corner values given per-lattice-point values.

        ``values`` has shape ``(lattice.size, dim)`` and holds an image point
        for every deduplicated corner.  For periodic dimensions the image of
        the corner on the seam is shifted by one period so that the bounding
        box is formed on the unwrapped covering space (a box straddling the
        seam must not blow up to the whole period).

        Returns ``(lo, hi)`` arrays of shape ``(ncells, dim)``; rows touching a
        non-finite corner image are non-finite.
        """
        lat = self.corner_lattice()
        mi = self.all_multi_indices()  # (ncells, dim)
        lo = np.full((self.ncells, self.dim), np.inf)
        hi = np.full((self.ncells, self.dim), -np.inf)
        for off in _corner_offsets(self.dim):
            idx = mi + off  # raw corner index per dim
            flat = np.zeros(self.ncells, dtype=np.int64)
            shift = np.zeros((self.ncells, self.dim))
            for d in range(self.dim):
                if self.periodic[d]:
                    wrapped = idx[:, d] % self.cells[d]
                    shift[:, d] = np.where(idx[:, d] == self.cells[d], self.periods[d], 0.0)
                    flat += wrapped * lat.strides[d]
                else:
                    flat += idx[:, d] * lat.strides[d]
            img = values[flat] + shift
            np.minimum(lo, img, out=lo)
            np.maximum(hi, img, out=hi)
        return lo, hi

    # -- box queries -------------------------------------------------------

    def cells_intersecting(self, box: StateBox) -> tuple[np.ndarray, bool]:
        """All cells whose closed box intersects the closed query box.

        Periodic dimensions wrap; portions of the query outside non-periodic
        bounds are clipped and reported through the returned flag.  Returns
        ``(sorted cell ids, clipped)``.
        """
        ids, clipped = self.cells_intersecting_batch(
            box.lower[None, :], box.upper[None, :]
        )
        return ids[0], bool(clipped[0])

    def cells_intersecting_batch(
        self, qlo: np.ndarray, qhi: np.ndarray
    ) -> tuple[list[np.ndarray], np.ndarray]:
        """Vectorized :meth:`cells_intersecting` over ``B`` query boxes.

        ``qlo``/``qhi`` have shape ``(B, dim)`` with ``qlo <= qhi`` (boxes may
        be given in unwrapped coordinates on periodic dimensions).  Returns a
        list of ``B`` sorted id arrays plus a boolean clipped array.
        """
        qlo = np.asarray(qlo, dtype=float)
        qhi = np.asarray(qhi, dtype=float)
        B = qlo.shape[0]
        clipped = np.zeros(B, dtype=bool)
        empty = np.zeros(B, dtype=bool)
        # per-dim list of (i0, i1) index-range pairs; a periodic dim tests
        # three period-shifted copies of the query interval so closed-box
        # touches across the seam are kept
        ranges: list[list[tuple[np.ndarray, np.ndarray]]] = []
        for d in range(self.dim):
            lo_d, hi_d = self.lower[d], self.upper[d]
            w, n = self.cell_widths[d], int(self.cells[d])
            a, b = qlo[:, d], qhi[:, d]
            segs: list[tuple[np.ndarray, np.ndarray]] = []
            if self.periodic[d]:
                P = self.periods[d]
                full = (b - a) >= P
                aw = lo_d + np.mod(a - lo_d, P)
                bw = aw + (b - a)
                for s in (-P, 0.0, P):
                    live = ~full & (bw + s >= lo_d) & (aw + s <= hi_d)
                    i0 = _first_cell(np.maximum(aw + s, lo_d), lo_d, w, n)
                    i1 = _last_cell(np.minimum(bw + s, hi_d), lo_d, w, n)
                    segs.append((np.where(live, i0, 0), np.where(live, i1, -1)))
                segs.append((np.zeros(B, dtype=np.int64), np.where(full, n - 1, -1)))
            else:
                clipped |= (a < lo_d) | (b > hi_d)
                empty |= (b < lo_d) | (a > hi_d)
                i0 = _first_cell(np.maximum(a, lo_d), lo_d, w, n)
                i1 = _last_cell(np.minimum(b, hi_d), lo_d, w, n)
                segs.append((i0, i1))
            ranges.append(segs)
        out: list[np.ndarray] = []
        for k in range(B):
            if empty[k]:
                out.append(np.empty(0, dtype=np.int64))
                continue
            axis_ids = []
            ok = True
            for d in range(self.dim):
                segs = ranges[d]
                if len(segs) == 1:
                    i0, i1 = segs[0]
                    idx = np.arange(i0[k], i1[k] + 1)
                else:
                    parts = [np.arange(i0[k], i1[k] + 1) for i0, i1 in segs]
                    idx = np.unique(np.concatenate(parts))
                if idx.size == 0:
                    ok = False
                    break
                axis_ids.append(idx * self.strides[d])
            if not ok:
                out.append(np.empty(0, dtype=np.int64))
                continue
            acc = axis_ids[0]
            for more in axis_ids[1:]:
                acc = (acc[:, None] + more[None, :]).ravel()
            acc.sort()
            out.append(acc)
        return out, clipped

    def neighbor_shell(self, cell_ids) -> np.ndarray:
        """Cells at Chebyshev distance 1 from the given set, excluding it."""
        cell_ids = np.asarray(cell_ids, dtype=np.int64)
        mi = self.multi_index(cell_ids)
        found = set(cell_ids.tolist())
        shell: set[int] = set()
        for off in _neighbor_offsets(self.dim):
            idx = mi + off
            valid = np.ones(len(idx), dtype=bool)
            for d in range(self.dim):
                if self.periodic[d]:
                    idx[:, d] %= self.cells[d]
                else:
                    valid &= (idx[:, d] >= 0) & (idx[:, d] < self.cells[d])
            ids = self.cell_id(idx[valid])
            shell.update(ids.tolist())
        shell -= found
        return np.array(sorted(shell), dtype=np.int64)

    def __repr__(self):
        per = "".join("p" if p else "-" for p in self.periodic)
        return (
            f"CubicalGrid(cells={self.cells.tolist()}, periodic={per}, "
            f"bounds=[{self.lower.tolist()}, {self.upper.tolist()}])"
        )


def _corner_offsets(dim: int) -> np.ndarray:
    return np.indices((2,) * dim).reshape(dim, -1).T


def _neighbor_offsets(dim: int) -> list[np.ndarray]:
    grids = np.indices((3,) * dim).reshape(dim, -1).T - 1
    return [g for g in grids if np.any(g != 0)]


def _first_cell(q: np.ndarray, lo: float, w: float, n: int) -> np.ndarray:
    """Smallest cell index whose closed box reaches coordinate ``q``."""
    i = np.floor((q - lo) / w).astype(np.int64) - 1
    np.clip(i, 0, n - 1, out=i)
    for _ in range(2):
        bump = (lo + (i + 1) * w < q) & (i < n - 1)
        i = np.where(bump, i + 1, i)
    return i


def _last_cell(q: np.ndarray, lo: float, w: float, n: int) -> np.ndarray:
    """Largest cell index whose closed box reaches coordinate ``q``."""
    i = np.floor((q - lo) / w).astype(np.int64) + 1
    np.clip(i, 0, n - 1, out=i)
    for _ in range(2):
        drop = (lo + i * w > q) & (i > 0)
        i = np.where(drop, i - 1, i)
    return i
