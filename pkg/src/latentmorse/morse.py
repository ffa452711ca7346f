"""Combinatorial dynamics on a cubical grid.

Pipeline: ``build_map`` (outer approximation F of a map on grid cells) ->
``condense`` (SCCs, condensation DAG, Morse graph) -> ``regions_of_attraction``
-> ``retract`` (success / failure / undecided three-node graph).

Graph vertices are the valid cells in increasing cell order, followed by one
absorbing OutOfDomain vertex when any edge reaches it.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .grid import OUT_OF_BOX, CubicalGrid, GridError, parse_header

log = logging.getLogger(__name__)

QUERY_CHUNK = 512
LIPSCHITZ_SAFETY = 1.2

# cell labels
ROA_G, G, ROA_U, U, UNDECIDED, INVALID = "ROA_G", "G", "ROA_U", "U", "UNDECIDED", "INVALID"
LABELS = (ROA_G, G, ROA_U, U, UNDECIDED, INVALID)
SUCCESS_LABELS = (ROA_G, G)


class DesiredAttractorNotFound(RuntimeError):
    """No minimal Morse node contains an encoded successful final state."""


@dataclass
class Digraph:
    """Directed graph in compressed sparse row form with sorted targets."""

    indptr: np.ndarray
    indices: np.ndarray

    @classmethod
    def from_lists(cls, adjacency: Sequence[Sequence[int]]) -> "Digraph":
        indptr = np.zeros(len(adjacency) + 1, dtype=np.int64)
        chunks = []
        for i, targets in enumerate(adjacency):
            t = np.unique(np.asarray(targets, dtype=np.int64))
            chunks.append(t)
            indptr[i + 1] = indptr[i] + len(t)
        indices = np.concatenate(chunks) if chunks else np.empty(0, np.int64)
        return cls(indptr, indices.astype(np.int64))

    @classmethod
    def from_edges(cls, n: int, edges) -> "Digraph":
        adj = [[] for _ in range(n)]
        for a, b in edges:
            adj[a].append(b)
        return cls.from_lists(adj)

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    def successors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def edges(self):
        for v in range(self.n):
            for w in self.successors(v):
                yield v, int(w)

    def n_edges(self) -> int:
        return int(self.indptr[-1])


def tarjan_scc(graph: Digraph) -> tuple[np.ndarray, int]:
    """Strongly connected components, iterative Tarjan.

    Returns ``(comp, n_comp)``. Components are numbered in the order Tarjan
    completes them, which is a reverse topological order: every edge between
    different components goes from a higher to a lower number.
    """
    n = graph.n
    indptr, indices = graph.indptr, graph.indices
    index = np.full(n, -1, dtype=np.int64)
    low = np.zeros(n, dtype=np.int64)
    on_stack = np.zeros(n, dtype=bool)
    comp = np.full(n, -1, dtype=np.int64)
    stack: list[int] = []
    counter = 0
    n_comp = 0
    for root in range(n):
        if index[root] >= 0:
            continue
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack[root] = True
        work = [(root, indptr[root])]
        while work:
            v, pos = work[-1]
            end = indptr[v + 1]
            descended = False
            while pos < end:
                w = indices[pos]
                pos += 1
                if index[w] < 0:
                    work[-1] = (v, pos)
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack[w] = True
                    work.append((w, indptr[w]))
                    descended = True
                    break
                if on_stack[w] and index[w] < low[v]:
                    low[v] = index[w]
            if descended:
                continue
            work.pop()
            if low[v] == index[v]:
                while True:
                    w = stack.pop()
                    on_stack[w] = False
                    comp[w] = n_comp
                    if w == v:
                        break
                n_comp += 1
            if work:
                u = work[-1][0]
                if low[v] < low[u]:
                    low[u] = low[v]
    return comp, n_comp


@dataclass
class MultivaluedMap:
    grid: CubicalGrid
    graph: Digraph
    cells: np.ndarray  # cell index per vertex, -1 for OutOfDomain
    lipschitz: float
    compositions: int
    method: str = "ball"

    @property
    def ood_vertex(self) -> int | None:
        return self.graph.n - 1 if len(self.cells) and self.cells[-1] < 0 else None

    def vertex_of_cell(self) -> np.ndarray:
        """Cell index -> vertex, -1 for invalid cells."""
        out = np.full(self.grid.n_cells, -1, dtype=np.int64)
        real = self.cells >= 0
        out[self.cells[real]] = np.flatnonzero(real)
        return out

    def images(self, cell: int) -> np.ndarray:
        """Target cells of a cell, ``-1`` standing for OutOfDomain."""
        v = self.vertex_of_cell()[cell]
        if v < 0:
            raise GridError(f"cell {cell} is not valid")
        return self.cells[self.graph.successors(v)]


def _compose(phi: Callable, m: int) -> Callable:
    def mapped(points):
        for _ in range(m):
            points = phi(points)
        return points
    return mapped


def _chunked(fn, items, workers):
    chunks = [items[i:i + QUERY_CHUNK] for i in range(0, len(items), QUERY_CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return [x for part in parts for x in part]


def build_map(
    grid: CubicalGrid,
    phi: Callable,
    lipschitz: float = 1.0,
    compositions: int = 1,
    method: str = "ball",
    pad: float = 0.0,
    workers: int = 1,
) -> MultivaluedMap:
    """Outer approximation of ``phi**compositions`` on the valid cells of ``grid``.

    ``method="ball"``: a cell maps to every valid cell meeting the closed ball
    of radius ``lipschitz * d / 2`` around the image of one of its corners
    (``d`` the cell diameter). Corner images outside the box, in an invalid
    cell, or non-finite add an edge to OutOfDomain.

    ``method="box"``: a cell maps to every valid cell meeting the bounding box
    of its corner images, widened by ``pad``. This is an exact enclosure for
    maps that are monotone in each coordinate separately. A box leaving the
    grid or touching an invalid cell adds an edge to OutOfDomain.
    """
    if method not in ("ball", "box"):
        raise ValueError(f"unknown method {method!r}")
    if method == "ball" and not lipschitz > 0:
        raise ValueError("Lipschitz bound must be positive")
    if compositions < 1:
        raise ValueError("compositions must be >= 1")
    valid = grid.valid_mask
    valid_cells = np.flatnonzero(valid)
    corner_ids = grid.cell_corner_ids(valid_cells)
    used = np.unique(corner_ids)
    lattice = grid.lattice_points()[used]
    images = np.asarray(_compose(phi, compositions)(lattice), dtype=float)
    if images.shape != lattice.shape:
        raise ValueError(f"map returned shape {images.shape}, expected {lattice.shape}")
    slot = np.full(int(np.prod(grid.lattice_shape)), -1, dtype=np.int64)
    slot[used] = np.arange(len(used))
    finite = np.all(np.isfinite(images), axis=1)
    if not finite.all():
        log.warning("%d corner images are not finite; routed to OutOfDomain", int((~finite).sum()))
    OOD = -1

    if method == "ball":
        radius = lipschitz * grid.diameter / 2.0
        home = grid.locate(np.where(finite[:, None], images, np.inf))
        escapes = (home == OUT_OF_BOX) | ~valid[np.maximum(home, 0)]

        def query(rows):
            out = []
            for r in rows:
                if not finite[r]:
                    out.append(np.array([OOD]))
                    continue
                hit = grid.cells_in_ball(images[r], radius)
                hit = hit[valid[hit]]
                out.append(np.append(hit, OOD) if escapes[r] else hit)
            return out

        per_point = _chunked(query, np.arange(len(used)), workers)
        targets = [np.unique(np.concatenate([per_point[slot[c]] for c in corners]))
                   for corners in corner_ids]
    else:
        lo_box, hi_box = grid.lower, grid.upper

        def query(rows):
            out = []
            for r in rows:
                pts = images[slot[corner_ids[r]]]
                if not np.all(np.isfinite(pts)):
                    out.append(np.array([OOD]))
                    continue
                lo, hi = pts.min(axis=0) - pad, pts.max(axis=0) + pad
                hit = grid.cells_in_box(lo, hi)
                leaves = np.any(lo < lo_box) or np.any(hi > hi_box) or not valid[hit].all()
                hit = hit[valid[hit]]
                out.append(np.append(hit, OOD) if leaves else hit)
            return out

        targets = [np.unique(t) for t in _chunked(query, np.arange(len(valid_cells)), workers)]

    vertex = np.full(grid.n_cells, -1, dtype=np.int64)
    vertex[valid_cells] = np.arange(len(valid_cells))
    n_valid = len(valid_cells)
    has_ood = any(t.size and t[0] == OOD for t in targets)
    adjacency = []
    for t in targets:
        real = t[t >= 0]
        v = vertex[real]
        adjacency.append(np.append(v, n_valid) if (t.size and t[0] == OOD) else v)
    cells = valid_cells
    if has_ood:
        adjacency.append([n_valid])
        cells = np.append(valid_cells, -1)
    return MultivaluedMap(grid, Digraph.from_lists(adjacency), cells.astype(np.int64),
                          float(lipschitz), compositions, method)


def estimate_lipschitz(
    phi: Callable,
    grid: CubicalGrid,
    samples_per_cell: int = 4,
    seed: int = 0,
    compositions: int = 1,
) -> float:
    """Largest difference quotient of ``phi**compositions`` over point pairs
    sharing a valid cell, times a 1.2 safety factor."""
    if samples_per_cell < 2:
        raise ValueError("need at least 2 samples per cell")
    rng = np.random.default_rng(seed)
    cells = np.flatnonzero(grid.valid_mask)
    lo, hi = grid.cell_bounds(cells)
    u = rng.random((len(cells), samples_per_cell, grid.dim))
    pts = lo[:, None, :] + u * (hi - lo)[:, None, :]
    img = np.asarray(_compose(phi, compositions)(pts.reshape(-1, grid.dim)))
    img = img.reshape(pts.shape)
    best = 0.0
    for a in range(samples_per_cell):
        for b in range(a + 1, samples_per_cell):
            dz = np.linalg.norm(pts[:, a] - pts[:, b], axis=1)
            dphi = np.linalg.norm(img[:, a] - img[:, b], axis=1)
            ok = (dz > 1e-12) & np.isfinite(dphi)
            if ok.any():
                best = max(best, float(np.max(dphi[ok] / dz[ok])))
    return LIPSCHITZ_SAFETY * best


@dataclass
class MorseDecomposition:
    mvmap: MultivaluedMap
    scc: np.ndarray  # component per vertex
    n_scc: int
    condensation: Digraph  # edges between distinct components
    morse_sccs: np.ndarray  # component id of each Morse node
    morse_edges: list  # transitively reduced (a, b): a reaches b
    reach: list  # per Morse node, set of Morse nodes strictly below

    @property
    def n_morse(self) -> int:
        return len(self.morse_sccs)

    @property
    def minimal(self) -> list[int]:
        return [a for a in range(self.n_morse) if not self.reach[a]]

    def morse_node_of_scc(self) -> np.ndarray:
        out = np.full(self.n_scc, -1, dtype=np.int64)
        out[self.morse_sccs] = np.arange(self.n_morse)
        return out

    def vertices_of(self, node: int) -> np.ndarray:
        return np.flatnonzero(self.scc == self.morse_sccs[node])

    def cells_of(self, node: int) -> np.ndarray:
        c = self.mvmap.cells[self.vertices_of(node)]
        return c[c >= 0]

    def is_ood_node(self, node: int) -> bool:
        ood = self.mvmap.ood_vertex
        return ood is not None and self.scc[ood] == self.morse_sccs[node]

    @property
    def n_attractors(self) -> int:
        """Minimal Morse nodes that are not the OutOfDomain sink."""
        return sum(1 for a in self.minimal if not self.is_ood_node(a))


def _bits(mask: int):
    i = 0
    while mask:
        if mask & 1:
            yield i
        mask >>= 1
        i += 1


def condense_graph(graph: Digraph):
    """SCCs, condensation DAG, recurrent components and Morse-graph reachability."""
    comp, n_comp = tarjan_scc(graph)
    src = np.repeat(np.arange(graph.n), np.diff(graph.indptr))
    dst = graph.indices
    a, b = comp[src], comp[dst]
    self_loop = np.zeros(n_comp, bool)
    self_loop[a[a == b]] = True
    cross = np.unique(np.stack([a[a != b], b[a != b]], axis=1), axis=0) if len(a) else \
        np.empty((0, 2), np.int64)
    cond = Digraph.from_edges(n_comp, cross)
    # Morse nodes: components containing an edge, numbered sinks-first
    morse_sccs = np.flatnonzero(self_loop)
    node_of = np.full(n_comp, -1, dtype=np.int64)
    node_of[morse_sccs] = np.arange(len(morse_sccs))
    # reach[c]: bitmask of Morse nodes reachable from component c (excluding itself)
    reach = [0] * n_comp
    for c in range(n_comp):  # successors always have smaller ids
        acc = 0
        for d in cond.successors(c):
            acc |= reach[d]
            if node_of[d] >= 0:
                acc |= 1 << int(node_of[d])
        reach[c] = acc
    morse_reach = [reach[c] for c in morse_sccs]
    edges = []
    for i, r in enumerate(morse_reach):
        indirect = 0
        for j in _bits(r):
            indirect |= morse_reach[j]
        for j in _bits(r & ~indirect):
            edges.append((i, j))
    return comp, n_comp, cond, morse_sccs, edges, [set(_bits(r)) for r in morse_reach]


def condense(mvmap: MultivaluedMap) -> MorseDecomposition:
    comp, n_comp, cond, morse_sccs, edges, reach = condense_graph(mvmap.graph)
    return MorseDecomposition(mvmap, comp, n_comp, cond, morse_sccs, edges, reach)


def reachable_minimal(scc: np.ndarray, n_scc: int, condensation: Digraph, morse_sccs) -> list[int]:
    """Per component, bitmask of minimal Morse nodes reachable from it."""
    node_of = np.full(n_scc, -1, dtype=np.int64)
    node_of[morse_sccs] = np.arange(len(morse_sccs))
    below = [0] * n_scc  # any Morse node reachable, for minimality
    for c in range(n_scc):
        acc = 0
        for d in condensation.successors(c):
            acc |= below[d] | ((1 << int(node_of[d])) if node_of[d] >= 0 else 0)
        below[c] = acc
    minimal = {int(node_of[c]) for c in morse_sccs if below[c] == 0}
    out = [0] * n_scc
    for c in range(n_scc):
        acc = (1 << int(node_of[c])) if int(node_of[c]) in minimal else 0
        for d in condensation.successors(c):
            acc |= out[d]
        out[c] = acc
    return out


def regions_of_attraction(decomp: MorseDecomposition) -> np.ndarray:
    """Per vertex: the minimal Morse node it is attracted to, or -1.

    A vertex belongs to the region of attraction of minimal node ``A`` when
    ``A`` is the only minimal Morse node reachable from it; otherwise -1.
    """
    if not decomp.minimal:
        raise RuntimeError("Morse graph has no minimal node")
    masks = reachable_minimal(decomp.scc, decomp.n_scc, decomp.condensation, decomp.morse_sccs)
    per_scc = np.array([m.bit_length() - 1 if m and not m & (m - 1) else -1 for m in masks])
    return per_scc[decomp.scc]


@dataclass
class BistableGraph:
    decomposition: MorseDecomposition
    good: list[int]
    unsafe: list[int]
    rest: list[int]
    cell_labels: np.ndarray  # label string per grid cell

    def node_class(self, node: int) -> str:
        if node in self.good:
            return "G"
        if node in self.unsafe:
            return "U"
        return "R"

    def retraction(self) -> dict[int, str]:
        return {a: self.node_class(a) for a in range(self.decomposition.n_morse)}


# order of the three-node poset: G and U below R
RETRACT_RANK = {"G": 0, "U": 0, "R": 1}


def retract_nodes(decomp: MorseDecomposition, good: Sequence[int]):
    """``(G, U, R)``: R holds the Morse nodes above some node of ``G``."""
    good = sorted(set(int(g) for g in good))
    rest = sorted(a for a in range(decomp.n_morse) if a not in good
                  and any(g in decomp.reach[a] for g in good))
    unsafe = sorted(a for a in range(decomp.n_morse) if a not in good and a not in rest)
    return good, unsafe, rest


def label_cells(decomp: MorseDecomposition, good, unsafe) -> np.ndarray:
    """Label every grid cell from the retraction ``(G, U, R)``.

    Cells of G nodes are ``G``; cells of minimal U nodes are ``U``. Other
    cells are ``ROA_G`` (``ROA_U``) when every minimal node they can reach is
    in G (in U), otherwise ``UNDECIDED``.
    """
    mv = decomp.mvmap
    labels = np.full(mv.grid.n_cells, INVALID, dtype=object)
    masks = reachable_minimal(decomp.scc, decomp.n_scc, decomp.condensation, decomp.morse_sccs)
    good_bits = sum(1 << g for g in good)
    unsafe_bits = sum(1 << u for u in unsafe)
    node_of = decomp.morse_node_of_scc()
    minimal = set(decomp.minimal)
    for v, cell in enumerate(mv.cells):
        if cell < 0:
            continue
        c = decomp.scc[v]
        node = int(node_of[c])
        m = masks[c]
        if node in good:
            labels[cell] = G
        elif node in unsafe and node in minimal:
            labels[cell] = U
        elif m and not m & ~good_bits:
            labels[cell] = ROA_G
        elif m and not m & ~unsafe_bits:
            labels[cell] = ROA_U
        else:
            labels[cell] = UNDECIDED
    return labels


def retract(decomp: MorseDecomposition, success_points) -> BistableGraph:
    """Collapse the Morse graph onto ``{G, U, R}``.

    ``G`` is the set of minimal Morse nodes whose cells hold at least one of
    ``success_points`` (encoded successful final states).
    """
    pts = np.atleast_2d(np.asarray(success_points, dtype=float))
    if pts.size == 0:
        raise DesiredAttractorNotFound("no successful final states given")
    mv = decomp.mvmap
    cells = mv.grid.locate(pts)
    vert = mv.vertex_of_cell()[cells[cells >= 0]]
    vert = vert[vert >= 0]
    node_of = decomp.morse_node_of_scc()
    minimal = set(decomp.minimal)
    good = sorted({int(node_of[decomp.scc[v]]) for v in vert} & minimal - {-1})
    good = [g for g in good if not decomp.is_ood_node(g)]
    if not good:
        raise DesiredAttractorNotFound("desired attractor not found: no minimal Morse node "
                                       "contains an encoded successful final state")
    good, unsafe, rest = retract_nodes(decomp, good)
    return BistableGraph(decomp, good, unsafe, rest, label_cells(decomp, good, unsafe))


def is_order_preserving(decomp: MorseDecomposition, bistable: BistableGraph) -> bool:
    """Every Morse-graph edge ``a -> b`` satisfies ``rho(a) >= rho(b)`` in ``{G,U,R}``."""
    rho = bistable.retraction()
    for a, b in decomp.morse_edges:
        ra, rb = rho[a], rho[b]
        if not (ra == rb or (ra == "R" and rb in ("G", "U"))):
            return False
    return True


@dataclass
class RoaClassifier:
    """Success prediction from cell labels of a latent grid."""

    grid: CubicalGrid
    labels: np.ndarray

    def cell_success(self) -> np.ndarray:
        return np.isin(self.labels, SUCCESS_LABELS)

    def predict_latent(self, z) -> np.ndarray:
        idx = self.grid.locate(np.atleast_2d(z))
        ok = idx >= 0
        out = np.zeros(len(idx), bool)
        out[ok] = self.cell_success()[idx[ok]]
        return out

    def predict(self, model, x) -> np.ndarray:
        return self.predict_latent(model.encode(np.atleast_2d(x)))


def classify_point(model, classifier: RoaClassifier, x) -> bool:
    """True (predict success) iff the encoded state lies in a G or RoA(G) cell."""
    return bool(classifier.predict(model, np.asarray(x).reshape(1, -1))[0])


# exports

def write_edges(path, edges, header: str) -> None:
    lines = [f"# {header}", "src dst"] + [f"{a} {b}" for a, b in edges]
    Path(path).write_text("\n".join(lines) + "\n")


def map_edges(mvmap: MultivaluedMap):
    """Edges of F as cell indices, OutOfDomain written as ``-1``."""
    for v, w in mvmap.graph.edges():
        yield int(mvmap.cells[v]), int(mvmap.cells[w])


def write_cell_labels(path, grid: CubicalGrid, labels) -> None:
    lines = [grid.header(), "linear_index,label"] + [f"{i},{lab}" for i, lab in enumerate(labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cell_labels(path) -> RoaClassifier:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2 or not lines[0].startswith("#") or lines[1] != "linear_index,label":
        raise ValueError(f"{path}: not a cell-label file")
    grid = parse_header(lines[0])
    labels = np.full(grid.n_cells, INVALID, dtype=object)
    for line in lines[2:]:
        if not line.strip():
            continue
        i, lab = line.split(",")
        if lab not in LABELS:
            raise ValueError(f"{path}: unknown label {lab!r}")
        labels[int(i)] = lab
    valid = labels != INVALID
    return RoaClassifier(grid.with_valid(valid), labels)


def summary(decomp: MorseDecomposition, bistable: BistableGraph | None = None) -> dict:
    out = {
        "cells": decomp.mvmap.grid.n_cells,
        "valid_cells": int(decomp.mvmap.grid.valid_mask.sum()),
        "map_edges": decomp.mvmap.graph.n_edges(),
        "lipschitz": decomp.mvmap.lipschitz,
        "morse_nodes": decomp.n_morse,
        "morse_edges": [list(e) for e in decomp.morse_edges],
        "minimal_nodes": decomp.minimal,
        "attractors": decomp.n_attractors,
    }
    if bistable is not None:
        out.update(G=bistable.good, U=bistable.unsafe, R=bistable.rest,
                   label_counts={lab: int(np.sum(bistable.cell_labels == lab)) for lab in LABELS})
    return out
