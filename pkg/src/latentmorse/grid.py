"""Cubical decompositions of a box.

Cells are products of half-open intervals ``[a, b)``; the last interval on
each axis is closed so every point of the box lies in exactly one cell.
Cells are numbered in C order (last axis varies fastest).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OUT_OF_BOX = -1


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CubicalGrid:
    breaks: tuple  # per-axis increasing breakpoint arrays
    valid: np.ndarray | None = None
    k: tuple | None = None  # subdivision exponents, uniform grids only

    def __post_init__(self):
        breaks = tuple(np.asarray(b, dtype=float) for b in self.breaks)
        for i, b in enumerate(breaks):
            if b.ndim != 1 or len(b) < 2 or not np.all(np.diff(b) > 0):
                raise GridError(f"axis {i}: breakpoints must be strictly increasing")
            if not np.all(np.isfinite(b)):
                raise GridError(f"axis {i}: breakpoints must be finite")
        object.__setattr__(self, "breaks", breaks)
        if self.valid is not None:
            mask = np.asarray(self.valid, dtype=bool)
            if mask.shape != (self.n_cells,):
                raise GridError("valid mask has wrong size")
            object.__setattr__(self, "valid", mask)

    @classmethod
    def uniform(cls, lower, upper, k) -> "CubicalGrid":
        """``2**k[i]`` equal intervals on axis ``i`` of the box ``[lower, upper]``."""
        lower = np.asarray(lower, dtype=float).ravel()
        upper = np.asarray(upper, dtype=float).ravel()
        k = tuple(int(v) for v in np.atleast_1d(k))
        if not (len(lower) == len(upper) == len(k)):
            raise GridError("lower, upper and k must have the same length")
        if np.any(lower >= upper):
            raise GridError("box must satisfy lower < upper on every axis")
        if any(v < 0 for v in k):
            raise GridError("subdivision exponents must be >= 0")
        breaks = tuple(np.linspace(lo, hi, 2**ki + 1) for lo, hi, ki in zip(lower, upper, k))
        return cls(breaks, None, k)

    @classmethod
    def latent(cls, dim: int, k) -> "CubicalGrid":
        k = np.broadcast_to(np.atleast_1d(k), (dim,))
        return cls.uniform(-np.ones(dim), np.ones(dim), k)

    # geometry

    @property
    def dim(self) -> int:
        return len(self.breaks)

    @property
    def shape(self) -> tuple:
        return tuple(len(b) - 1 for b in self.breaks)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.shape))

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.breaks])

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[-1] for b in self.breaks])

    @property
    def diameter(self) -> float:
        """Largest Euclidean cell diagonal."""
        widths = [np.max(np.diff(b)) for b in self.breaks]
        return float(np.sqrt(np.sum(np.square(widths))))

    @property
    def valid_mask(self) -> np.ndarray:
        return np.ones(self.n_cells, bool) if self.valid is None else self.valid

    def with_valid(self, mask) -> "CubicalGrid":
        return CubicalGrid(self.breaks, mask, self.k)

    def coords(self, index) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(index), self.shape), axis=-1)

    def linear(self, coords) -> np.ndarray:
        coords = np.asarray(coords)
        return np.ravel_multi_index(tuple(coords[..., i] for i in range(self.dim)), self.shape)

    def cell_bounds(self, index) -> tuple[np.ndarray, np.ndarray]:
        c = self.coords(index)
        lo = np.stack([self.breaks[i][c[..., i]] for i in range(self.dim)], axis=-1)
        hi = np.stack([self.breaks[i][c[..., i] + 1] for i in range(self.dim)], axis=-1)
        return lo, hi

    def contains(self, index, points) -> np.ndarray:
        """Half-open membership test of ``points`` in cells ``index``."""
        lo, hi = self.cell_bounds(index)
        points = np.asarray(points, dtype=float)
        c = self.coords(index)
        top = np.stack([c[..., i] == self.shape[i] - 1 for i in range(self.dim)], axis=-1)
        upper_ok = np.where(top, points <= hi, points < hi)
        return np.all((points >= lo) & upper_ok, axis=-1)

    def locate(self, points) -> np.ndarray:
        """Cell index of each point, or ``OUT_OF_BOX`` (-1)."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        if pts.shape[-1] != self.dim:
            raise GridError(f"points have dimension {pts.shape[-1]}, grid has {self.dim}")
        inside = np.all(np.isfinite(pts), axis=1)
        coords = np.empty(pts.shape, dtype=np.int64)
        for i, b in enumerate(self.breaks):
            p = pts[:, i]
            inside &= (p >= b[0]) & (p <= b[-1])
            c = np.searchsorted(b, p, side="right") - 1
            coords[:, i] = np.clip(c, 0, len(b) - 2)
        out = np.full(len(pts), OUT_OF_BOX, dtype=np.int64)
        if inside.any():
            out[inside] = self.linear(coords[inside])
        return out[0] if single else out

    def corners(self, index) -> np.ndarray:
        """The ``2**dim`` vertices of a cell's closed box."""
        lo, hi = self.cell_bounds(int(index))
        return np.array([[hi[i] if bit else lo[i] for i, bit in enumerate(bits)]
                         for bits in itertools.product((0, 1), repeat=self.dim)])

    # corner lattice V(Z)

    @property
    def lattice_shape(self) -> tuple:
        return tuple(len(b) for b in self.breaks)

    def lattice_points(self) -> np.ndarray:
        mesh = np.meshgrid(*self.breaks, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_corner_ids(self, cells) -> np.ndarray:
        """Lattice indices of the corners of each cell, shape ``(n, 2**dim)``."""
        c = self.coords(np.asarray(cells))
        offs = np.array(list(itertools.product((0, 1), repeat=self.dim)))
        lat = c[:, None, :] + offs[None, :, :]
        return np.ravel_multi_index(tuple(lat[..., i] for i in range(self.dim)), self.lattice_shape)

    # queries

    def cells_in_box(self, lo, hi) -> np.ndarray:
        """Cells whose closed box meets the closed box ``[lo, hi]``."""
        ranges = []
        for i, b in enumerate(self.breaks):
            a = max(int(np.searchsorted(b, lo[i], side="left")) - 1, 0)
            z = min(int(np.searchsorted(b, hi[i], side="right")) - 1, len(b) - 2)
            if lo[i] > b[-1] or hi[i] < b[0] or a > z:
                return np.empty(0, dtype=np.int64)
            ranges.append(np.arange(a, z + 1))
        mesh = np.meshgrid(*ranges, indexing="ij")
        return np.sort(self.linear(np.stack([m.ravel() for m in mesh], axis=-1)).ravel())

    def cells_in_ball(self, center, radius) -> np.ndarray:
        """Cells whose closed box meets the closed Euclidean ball."""
        center = np.asarray(center, dtype=float)
        cand, sq = [], []
        for i, b in enumerate(self.breaks):
            lo, hi = b[:-1], b[1:]
            gap = np.maximum(np.maximum(lo - center[i], center[i] - hi), 0.0)
            keep = np.flatnonzero(gap <= radius)
            if keep.size == 0:
                return np.empty(0, dtype=np.int64)
            cand.append(keep)
            sq.append(gap[keep] ** 2)
        total = sq[0]
        for s in sq[1:]:
            total = total[..., None] + s
        hit = np.argwhere(total <= radius * radius)
        coords = np.stack([cand[i][hit[:, i]] for i in range(self.dim)], axis=-1)
        return np.sort(self.linear(coords))

    def validate(self, points) -> "CubicalGrid":
        """Grid whose valid cells are those holding a point, plus their neighbours.

        Raises ``GridError`` when no point falls inside the box.
        """
        idx = self.locate(np.atleast_2d(points))
        idx = idx[idx != OUT_OF_BOX]
        if idx.size == 0:
            raise GridError("degenerate validation: no sample point lies in the box")
        occupied = np.zeros(self.shape, bool)
        occupied[np.unravel_index(idx, self.shape)] = True
        valid = occupied.copy()
        padded = np.pad(occupied, 1)
        for off in itertools.product((0, 1, 2), repeat=self.dim):
            sl = tuple(slice(o, o + s) for o, s in zip(off, self.shape))
            valid |= padded[sl]
        return self.with_valid(valid.ravel())

    # export

    def header(self) -> str:
        k = ",".join(str(v) for v in self.k) if self.k is not None else "explicit"
        lo = ",".join(format(v, ".17g") for v in self.lower)
        hi = ",".join(format(v, ".17g") for v in self.upper)
        return f"# dim={self.dim} k={k} lower={lo} upper={hi}"

    def write_valid(self, path) -> None:
        ids = np.flatnonzero(self.valid_mask)
        Path(path).write_text(self.header() + "\n" + "".join(f"{i}\n" for i in ids))


def parse_header(line: str) -> CubicalGrid:
    """Rebuild a uniform grid from a :meth:`CubicalGrid.header` line."""
    fields = dict(tok.split("=", 1) for tok in line.lstrip("#").split())
    try:
        k = [int(v) for v in fields["k"].split(",")]
        lo = [float(v) for v in fields["lower"].split(",")]
        hi = [float(v) for v in fields["upper"].split(",")]
    except (KeyError, ValueError) as exc:
        raise GridError(f"bad grid header {line!r}") from exc
    return CubicalGrid.uniform(lo, hi, k)


def read_valid(path) -> CubicalGrid:
    lines = Path(path).read_text().splitlines()
    grid = parse_header(lines[0])
    mask = np.zeros(grid.n_cells, bool)
    mask[[int(v) for v in lines[1:] if v.strip()]] = True
    return grid.with_valid(mask)
