"""Geometry of the boxes ``{-N+1, ..., N}^d``, their bond sets and boundary slabs."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .model import CouplingKernel


@dataclass(frozen=True, eq=False)
class Box:
    """The box ``{-N+1, ..., N}^d``; sites are indexed row-major (lexicographic)."""

    N: int
    d: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N!r}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"d must be a positive integer, got {self.d!r}")

    @property
    def lo(self) -> int:
        return -self.N + 1

    @property
    def hi(self) -> int:
        return self.N

    @property
    def side(self) -> int:
        return 2 * self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    @property
    def size(self) -> int:
        return self.side**self.d

    def __len__(self):
        return self.size

    def __iter__(self):
        return (tuple(int(c) for c in x) for x in self.sites)

    @cached_property
    def sites(self) -> np.ndarray:
        grids = np.indices(self.shape).reshape(self.d, -1).T
        out = grids.astype(np.int64) + self.lo
        out.setflags(write=False)
        return out

    def contains(self, coords) -> np.ndarray | bool:
        c = np.asarray(coords)
        inside = np.all((c >= self.lo) & (c <= self.hi), axis=-1)
        return bool(inside) if np.ndim(inside) == 0 else inside

    def index(self, coords) -> np.ndarray | int:
        """Row-major index of sites; ``-1`` for sites outside the box."""
        c = np.asarray(coords, dtype=np.int64)
        shifted = c - self.lo
        inside = np.all((shifted >= 0) & (shifted < self.side), axis=-1)
        idx = np.zeros(shifted.shape[:-1], dtype=np.int64)
        for a in range(self.d):
            idx = idx * self.side + shifted[..., a]
        idx = np.where(inside, idx, -1)
        return int(idx) if idx.ndim == 0 else idx

    def coords(self, index) -> np.ndarray:
        return self.sites[np.asarray(index)]

    @property
    def origin(self) -> int:
        return self.index(np.zeros(self.d, dtype=np.int64))

    def inner_boundary(self, kernel: CouplingKernel) -> np.ndarray:
        """Indices of sites of the box with at least one kernel neighbour outside."""
        mask = np.zeros(self.size, dtype=bool)
        for v in kernel.displacements:
            mask |= ~self.contains(self.sites + v)
        return np.flatnonzero(mask)


def build_box(N: int, d: int) -> Box:
    return Box(N, d)


def _lexsort_rows(a: np.ndarray) -> np.ndarray:
    """Permutation sorting the rows of a 2-D integer array lexicographically."""
    return np.lexsort(a.T[::-1]) if a.shape[0] else np.arange(0)


@dataclass(frozen=True, eq=False)
class BondSets:
    """Interior bonds ``E^f`` and the boundary bonds ``E^w \\ E^f`` of a box.

    Interior bond ``b`` joins sites ``u[b] < v[b]`` (row-major indices) and is
    numbered lexicographically on (min endpoint, max endpoint). Boundary bond
    ``c`` joins box site ``inner[c]`` to the exterior site ``outer[c]``; boundary
    bonds have their own lexicographic numbering.
    """

    box: Box
    kernel: CouplingKernel
    u: np.ndarray
    v: np.ndarray
    J: np.ndarray
    inner: np.ndarray
    outer: np.ndarray
    J_boundary: np.ndarray

    @property
    def n_interior(self) -> int:
        return int(self.u.size)

    @property
    def n_boundary(self) -> int:
        return int(self.inner.size)

    def interior_coords(self) -> np.ndarray:
        s = self.box.sites
        return np.stack([s[self.u], s[self.v]], axis=1)

    def boundary_coords(self) -> np.ndarray:
        """Boundary bonds as (min endpoint, max endpoint) coordinate pairs."""
        a = self.box.sites[self.inner]
        b = self.outer
        a_first = _row_less(a, b)
        lo = np.where(a_first[:, None], a, b)
        hi = np.where(a_first[:, None], b, a)
        return np.stack([lo, hi], axis=1)

    def closure_coords(self) -> np.ndarray:
        """All bonds of ``E^w`` as coordinate pairs in canonical order."""
        allb = np.concatenate([self.interior_coords(), self.boundary_coords()], axis=0)
        order = _lexsort_rows(allb.reshape(allb.shape[0], -1))
        return allb[order]

    @cached_property
    def _interior_lookup(self) -> dict:
        return {(int(a), int(b)): i for i, (a, b) in enumerate(zip(self.u, self.v))}

    def bond_index(self, x, y) -> int:
        """Canonical interior index of the bond joining sites ``x`` and ``y``."""
        a, b = self.box.index(np.asarray(x)), self.box.index(np.asarray(y))
        if a < 0 or b < 0:
            raise KeyError("both endpoints must lie in the box")
        try:
            return self._interior_lookup[(min(a, b), max(a, b))]
        except KeyError:
            raise KeyError(f"no interior bond between {tuple(x)} and {tuple(y)}") from None

    def bond(self, index: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
        s = self.box.sites
        return tuple(map(int, s[self.u[index]])), tuple(map(int, s[self.v[index]]))


def _row_less(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise lexicographic ``a < b`` for rows of two (n, d) arrays."""
    diff = a != b
    first = np.argmax(diff, axis=1)
    rows = np.arange(a.shape[0])
    return diff.any(axis=1) & (a[rows, first] < b[rows, first])


def enumerate_bonds(box: Box, kernel: CouplingKernel) -> BondSets:
    if kernel.d != box.d:
        raise ValueError(f"kernel dimension {kernel.d} does not match box dimension {box.d}")
    sites = box.sites
    us, vs, js = [], [], []
    for disp, j in zip(*kernel.positive_half()):
        other = box.index(sites + disp)
        ok = other >= 0
        us.append(np.flatnonzero(ok))
        vs.append(other[ok])
        js.append(np.full(int(ok.sum()), j))
    u = np.concatenate(us) if us else np.zeros(0, np.int64)
    v = np.concatenate(vs) if vs else np.zeros(0, np.int64)
    J = np.concatenate(js) if js else np.zeros(0)
    order = np.lexsort((v, u))
    u, v, J = u[order], v[order], J[order]

    inner, outer, jb = [], [], []
    for disp, j in zip(kernel.displacements, kernel.values):
        target = sites + disp
        out = ~box.contains(target)
        inner.append(np.flatnonzero(out))
        outer.append(target[out])
        jb.append(np.full(int(out.sum()), j))
    inner = np.concatenate(inner)
    outer = np.concatenate(outer).reshape(-1, box.d)
    jb = np.concatenate(jb)
    a = sites[inner]
    a_first = _row_less(a, outer)
    lo = np.where(a_first[:, None], a, outer)
    hi = np.where(a_first[:, None], outer, a)
    order = _lexsort_rows(np.concatenate([lo, hi], axis=1))
    arrays = [u, v, J, inner[order], outer[order], jb[order]]
    for arr in arrays:
        arr.setflags(write=False)
    return BondSets(box, kernel, *arrays)


def boundary_sites(box: Box, kernel: CouplingKernel) -> np.ndarray:
    """Sites outside the box interacting with some site inside, sorted lexicographically."""
    if kernel.d != box.d:
        raise ValueError("kernel dimension does not match box")
    cand = (box.sites[:, None, :] + kernel.displacements[None, :, :]).reshape(-1, box.d)
    cand = cand[~box.contains(cand)]
    return np.unique(cand, axis=0)


@dataclass(frozen=True, eq=False)
class SlabPartition:
    """Disjoint cover of the boundary of a box by slabs, ordered by centre.

    ``centers[k]`` is the k-th slab centre in lexicographic order, ``slabs[k]``
    its sites and ``normals[k]`` the outward unit normal of the face it tiles.
    """

    box: Box
    kernel: CouplingKernel
    L: int
    centers: np.ndarray
    slabs: tuple
    normals: np.ndarray

    @property
    def M(self) -> int:
        return int(self.centers.shape[0])

    def __len__(self):
        return self.M

    @cached_property
    def _lookup(self) -> dict:
        return {tuple(int(c) for c in x): k for k, s in enumerate(self.slabs) for x in s}

    def slab_of(self, coords) -> np.ndarray | int:
        """Slab index of boundary sites (``-1`` for sites not on the boundary)."""
        c = np.asarray(coords, dtype=np.int64)
        if c.ndim == 1:
            return self._lookup.get(tuple(int(x) for x in c), -1)
        return np.array([self._lookup.get(tuple(int(x) for x in row), -1) for row in c], dtype=np.int64)

    def sites_of(self, ks) -> np.ndarray:
        ks = list(ks)
        if not ks:
            return np.zeros((0, self.box.d), dtype=np.int64)
        return np.concatenate([self.slabs[k] for k in ks], axis=0)


def slab_partition(box: Box, kernel: CouplingKernel, L: int) -> SlabPartition:
    """Tile each face of the boundary by translated copies of the slab template.

    Faces are tiled independently; boundary sites outside every face (only
    possible for range > 1) join the lexicographically smallest slab holding
    one of their sup-norm neighbours.
    """
    d, N = box.d, box.N
    if int(L) != L or L < 1:
        raise ValueError(f"slab width must be a positive integer, got {L!r}")
    if (2 * N) % L:
        raise ValueError(f"slab width L={L} must divide 2N={2 * N}")
    if d >= 2 and L % 2:
        raise ValueError(f"slab width L={L} must be even in dimension {d} (centred tiles)")
    if kernel.d != d:
        raise ValueError("kernel dimension does not match box")

    bsites = boundary_sites(box, kernel)
    lo, hi = box.lo, box.hi
    in_range = (bsites >= lo) & (bsites <= hi)
    n_out = (~in_range).sum(axis=1)

    groups: dict[tuple, list] = {}
    normals: dict[tuple, np.ndarray] = {}
    for a in range(d):
        for sign in (-1, 1):
            on_face = (n_out == 1) & ((bsites[:, a] < lo) if sign < 0 else (bsites[:, a] > hi))
            face = bsites[on_face]
            if face.size == 0:
                continue
            tang = [b for b in range(d) if b != a]
            tiles = (face[:, tang] - lo) // L if tang else np.zeros((face.shape[0], 0), np.int64)
            for tile in np.unique(tiles, axis=0):
                members = face[np.all(tiles == tile, axis=1)]
                center = np.zeros(d, dtype=np.int64)
                center[a] = hi + 1 if sign > 0 else lo - 1
                for t, b in zip(tile, tang):
                    center[b] = lo + t * L + L // 2 - 1
                key = tuple(int(c) for c in center)
                groups[key] = [members]
                n = np.zeros(d, dtype=np.int64)
                n[a] = sign
                normals[key] = n

    corners = bsites[n_out >= 2]
    if corners.shape[0]:
        owner = {}
        for key, mem in groups.items():
            for x in mem[0]:
                owner[tuple(int(c) for c in x)] = key
        pending = [tuple(int(c) for c in x) for x in corners]
        while pending:
            progressed, rest = False, []
            for x in pending:
                cands = [
                    owner[y]
                    for y in (tuple(int(c) for c in np.add(x, off)) for off in _sup_offsets(d))
                    if y in owner
                ]
                if cands:
                    key = min(cands)
                    groups[key].append(np.array([x], dtype=np.int64))
                    owner[x] = key
                    progressed = True
                else:
                    rest.append(x)
            if not progressed:
                raise ValueError("corner rule cannot attach every boundary site to a slab")
            pending = rest

    keys = sorted(groups)
    slabs = []
    for key in keys:
        s = np.concatenate(groups[key], axis=0)
        s = s[_lexsort_rows(s)]
        s.setflags(write=False)
        slabs.append(s)
    total = sum(s.shape[0] for s in slabs)
    if total != bsites.shape[0] or np.unique(np.concatenate(slabs), axis=0).shape[0] != total:
        raise ValueError("slabs do not form a disjoint cover of the boundary")
    centers = np.array(keys, dtype=np.int64).reshape(-1, d)
    norms = np.array([normals[k] for k in keys], dtype=np.int64).reshape(-1, d)
    return SlabPartition(box, kernel, int(L), centers, tuple(slabs), norms)


def _sup_offsets(d: int) -> np.ndarray:
    offs = np.indices((3,) * d).reshape(d, -1).T - 1
    return offs[np.any(offs != 0, axis=1)]
