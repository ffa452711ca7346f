"""SVG picture of a 2-dim latent grid colored by RoA label."""

from __future__ import annotations

from xml.sax.saxutils import quoteattr

import numpy as np

from .grid import CubicalGrid
from .morse import G, INVALID, ROA_G, ROA_U, U, UNDECIDED

COLORS = {
    G: "#1b5e20",  # dark green
    ROA_G: "#a5d6a7",  # light green
    U: "#4a148c",  # dark purple
    ROA_U: "#ce93d8",  # light purple
    UNDECIDED: "#fff176",  # yellow
    INVALID: "#ffffff",
}


class UnsupportedDimension(ValueError):
    pass


def render_roa(grid: CubicalGrid, labels, overlays=(), size: int = 512) -> bytes:
    """One rectangle per cell plus optional polylines of latent trajectories.

    Latent axis 0 runs left to right, axis 1 bottom to top. Output bytes are a
    pure function of the inputs.
    """
    if grid.dim != 2:
        raise UnsupportedDimension(f"can only render 2-dim grids, got {grid.dim}")
    nx, ny = grid.shape
    px = max(1, size // max(nx, ny))
    width, height = nx * px, ny * px
    labels = np.asarray(labels, dtype=object)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" shape-rendering="crispEdges">',
        '<g stroke="none">',
    ]
    for idx in range(grid.n_cells):
        i, j = np.unravel_index(idx, grid.shape)
        color = COLORS[labels[idx]]
        out.append(f'<rect x="{i * px}" y="{(ny - 1 - j) * px}" width="{px}" height="{px}" '
                   f'fill="{color}"/>')
    out.append("</g>")
    lo, hi = grid.lower, grid.upper
    for k, path in enumerate(overlays):
        path = np.asarray(path, dtype=float)
        if len(path) < 2:
            continue
        xs = (path[:, 0] - lo[0]) / (hi[0] - lo[0]) * width
        ys = (1.0 - (path[:, 1] - lo[1]) / (hi[1] - lo[1])) * height
        pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points={quoteattr(pts)} fill="none" stroke="#000000" '
                   f'stroke-width="1" stroke-opacity="0.5"/>')
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode("utf-8")
