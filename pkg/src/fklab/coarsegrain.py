"""K-block coarse graining: good-block classifier, gluing check, contours, Peierls estimator.

Blocks are ``B_K(x) = x + {-K/2+1, ..., K/2}^d`` with ``x`` in ``K Z^d``. A
block is good when

1. one open cluster inside the block touches all ``2d`` faces (``C*``),
2. every other open cluster inside the block has sup-norm diameter at most
   ``sqrt(K)/10``,
3. each face sub-block ``B_sqrt(K)(x +- K/2 e_i)`` holds an open cluster joining
   its two faces orthogonal to ``e_i``,
4. the core ``B_k(x)``, ``k = floor(K^(1/2d))``, contains a closed bond.

Clusters in 1-3 use only bonds with both ends in the (sub-)block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from . import kernels
from .fkcore import BoundaryCondition, FKGraph
from .lattice import Box, enumerate_bonds
from .model import CouplingKernel, IntensityTable
from .sampler import SamplerState, iter_sweeps


def core_side(K: int, d: int) -> int:
    """``floor(K^(1/2d))`` computed in integers."""
    k = int(round(K ** (1.0 / (2 * d))))
    while k ** (2 * d) > K:
        k -= 1
    while (k + 1) ** (2 * d) <= K:
        k += 1
    return k


def check_block_size(K: int, d: int) -> int:
    """Validate ``K`` and return ``sqrt(K)``."""
    if int(K) != K or K < 2 or K % 2:
        raise ValueError(f"K must be a positive even integer, got {K!r}")
    r = math.isqrt(int(K))
    if r * r != K:
        raise ValueError(f"K={K} is not a perfect square")
    if r < 4:
        raise ValueError(f"sqrt(K) must be at least 4, got {r}")
    if core_side(K, d) < 2:
        raise ValueError(f"floor(K^(1/2d)) must be at least 2 for K={K}, d={d}")
    return r


def _csr(region_of_site, n_regions, u, v):
    sites = np.flatnonzero(region_of_site >= 0)
    order = np.argsort(region_of_site[sites], kind="stable")
    sites = sites[order]
    site_ptr = np.zeros(n_regions + 1, dtype=np.int64)
    np.cumsum(np.bincount(region_of_site[sites], minlength=n_regions), out=site_ptr[1:])
    ru = region_of_site[u]
    e = np.flatnonzero((ru >= 0) & (ru == region_of_site[v]))
    order = np.argsort(ru[e], kind="stable")
    e = e[order]
    edge_ptr = np.zeros(n_regions + 1, dtype=np.int64)
    np.cumsum(np.bincount(ru[e], minlength=n_regions), out=edge_ptr[1:])
    return site_ptr, sites.astype(np.int64), edge_ptr, e.astype(np.int64)


@dataclass(frozen=True, eq=False)
class BlockWindow:
    """A ``g^d`` grid of K-blocks (``g`` odd) centred at the origin.

    The grid covers ``Lambda_G`` with ``G = gK/2``; configurations live on the
    slightly larger box ``Lambda_{G + sqrt(K)/2}`` so that the face sub-blocks
    of boundary blocks are complete.
    """

    K: int
    d: int
    g: int
    kernel: CouplingKernel | None = None

    def __post_init__(self):
        check_block_size(self.K, self.d)
        if self.g < 1 or self.g % 2 == 0:
            raise ValueError(f"blocks per side must be odd, got {self.g}")
        if self.kernel is None:
            object.__setattr__(self, "kernel", CouplingKernel.nearest_neighbor(self.d))

    @classmethod
    def around(cls, N: int, K: int, d: int, rings: int = 2, kernel=None) -> "BlockWindow":
        """Window for a box ``Lambda_N`` (``N = nK/2``, ``n`` even): the grid
        reaches ``rings`` block rings beyond ``Lambda_{N+3K/2}``."""
        n = window_n(N, K)
        if rings < 2:
            raise ValueError("the window needs at least 2 block rings beyond Lambda_{N+3K/2}")
        return cls(K, d, n + 3 + 2 * rings, kernel)

    @property
    def root(self) -> int:
        return math.isqrt(self.K)

    @property
    def core(self) -> int:
        return core_side(self.K, self.d)

    @property
    def half(self) -> int:
        return (self.g - 1) // 2

    @property
    def G(self) -> int:
        return self.g * self.K // 2

    @property
    def n_blocks(self) -> int:
        return self.g**self.d

    @cached_property
    def box(self) -> Box:
        return Box(self.G + self.root // 2, self.d)

    @cached_property
    def bonds(self):
        return enumerate_bonds(self.box, self.kernel)

    @cached_property
    def block_index(self) -> np.ndarray:
        """Multi-indices ``j`` (centre ``jK``) of all blocks, lexicographic."""
        j = np.indices((self.g,) * self.d).reshape(self.d, -1).T - self.half
        return j.astype(np.int64)

    @property
    def centers(self) -> np.ndarray:
        return self.block_index * self.K

    def block_id(self, j) -> int | np.ndarray:
        j = np.asarray(j, dtype=np.int64) + self.half
        flat = np.zeros(j.shape[:-1], dtype=np.int64)
        for a in range(self.d):
            flat = flat * self.g + j[..., a]
        return int(flat) if flat.ndim == 0 else flat

    def block_of_point(self, x) -> np.ndarray:
        """Multi-index of the block containing site ``x``."""
        x = np.asarray(x, dtype=np.int64)
        return np.floor_divide(x + self.K // 2 - 1, self.K)

    def in_grid(self, j) -> bool:
        return bool(np.all(np.abs(np.asarray(j)) <= self.half))

    @cached_property
    def _block_regions(self):
        K, c = self.K, self.box.sites
        j = self.block_of_point(c)
        inside = np.all(np.abs(j) <= self.half, axis=1)
        region = np.where(inside, self.block_id(np.clip(j, -self.half, self.half)), -1)
        csr = _csr(region, self.n_blocks, self.bonds.u, self.bonds.v)
        s = csr[1]
        rel = c[s] - self.block_of_point(c[s]) * K
        bits = np.zeros(s.size, dtype=np.int64)
        for a in range(self.d):
            bits |= (rel[:, a] == -K // 2 + 1).astype(np.int64) << (2 * a)
            bits |= (rel[:, a] == K // 2).astype(np.int64) << (2 * a + 1)
        return csr, bits

    @cached_property
    def _sub_regions(self):
        """Face sub-blocks, identified by (axis a, lower block index j)."""
        K, r, d, g, h = self.K, self.root, self.d, self.g, self.half
        c = self.box.sites
        per_axis = (g + 1) * g ** (d - 1)
        region = np.full(c.shape[0], -1, dtype=np.int64)
        axis_of = np.full(c.shape[0], -1, dtype=np.int64)
        rel_of = np.zeros(c.shape[0], dtype=np.int64)
        for a in range(d):
            ok = np.ones(c.shape[0], dtype=bool)
            flat = np.zeros(c.shape[0], dtype=np.int64)
            for b in range(d):
                if b == a:
                    jb = np.floor_divide(c[:, b] - K // 2 + r // 2 - 1, K)
                    rel = c[:, b] - (jb * K + K // 2)
                    ok &= (jb >= -h - 1) & (jb <= h)
                    flat = flat * (g + 1) + (jb + h + 1)
                    rel_a = rel
                else:
                    jb = np.floor_divide(c[:, b] + r // 2 - 1, K)
                    rel = c[:, b] - jb * K
                    ok &= (jb >= -h) & (jb <= h)
                    flat = flat * g + (jb + h)
                ok &= (rel > -r // 2) & (rel <= r // 2)
            if np.any(ok & (region >= 0)):
                raise AssertionError("face sub-blocks overlap")
            region[ok] = a * per_axis + flat[ok]
            axis_of[ok] = a
            rel_of[ok] = rel_a[ok]
        csr = _csr(region, d * per_axis, self.bonds.u, self.bonds.v)
        s = csr[1]
        bits = (rel_of[s] == -r // 2 + 1).astype(np.int64) | ((rel_of[s] == r // 2).astype(np.int64) << 1)
        return csr, bits

    def sub_block_ids(self) -> np.ndarray:
        """``(n_blocks, d, 2)`` ids of the lower/upper face sub-block per axis."""
        d, g, h = self.d, self.g, self.half
        per_axis = (g + 1) * g ** (d - 1)
        out = np.empty((self.n_blocks, d, 2), dtype=np.int64)
        for a in range(d):
            for side, shift in ((0, -1), (1, 0)):
                jl = self.block_index.copy()
                jl[:, a] += shift
                flat = np.zeros(self.n_blocks, dtype=np.int64)
                for b in range(d):
                    flat = flat * (g + 1 if b == a else g) + (jl[:, b] + (h + 1 if b == a else h))
                out[:, a, side] = a * per_axis + flat
        return out

    @cached_property
    def _core_edges(self):
        c = self.box.sites
        k = self.core
        j = self.block_of_point(c)
        rel = c - j * self.K
        inside = np.all(np.abs(j) <= self.half, axis=1) & np.all((rel >= -((k + 1) // 2) + 1) & (rel <= k // 2), axis=1)
        region = np.where(inside, self.block_id(np.clip(j, -self.half, self.half)), -1)
        _, _, edge_ptr, edges = _csr(region, self.n_blocks, self.bonds.u, self.bonds.v)
        return edge_ptr, edges

    def outside(self, E: int) -> np.ndarray:
        """Blocks lying entirely outside ``Lambda_E``."""
        lo = self.block_index * self.K - self.K // 2 + 1
        hi = self.block_index * self.K + self.K // 2
        inside_axis = (hi >= -E + 1) & (lo <= E)
        return ~np.all(inside_axis, axis=1)

    @cached_property
    def frame(self) -> np.ndarray:
        return np.any(np.abs(self.block_index) == self.half, axis=1)

    def graph(self, beta: float, bc: BoundaryCondition | None = None) -> FKGraph:
        it = IntensityTable.from_couplings(self.bonds.J, beta)
        return FKGraph.from_box(self.box, self.kernel, BoundaryCondition.free() if bc is None else bc, it, bonds=self.bonds)


def window_n(N: int, K: int) -> int:
    if (2 * N) % K:
        raise ValueError(f"N={N} is not of the form nK/2 for K={K}")
    n = 2 * N // K
    if n % 2:
        raise ValueError(f"N = nK/2 needs n even so that Lambda_N is a union of blocks shifted by K/2 (n={n})")
    return n


@dataclass(frozen=True)
class BlockVerdict:
    good: bool
    conditions: tuple

    @property
    def failed(self) -> tuple:
        return tuple(i + 1 for i, ok in enumerate(self.conditions) if not ok)


@dataclass(eq=False)
class BlockGrid:
    """Per-block condition flags; ``good`` is the coarse variable ``u_K``."""

    window: BlockWindow
    conditions: np.ndarray
    cstar: np.ndarray

    @property
    def good(self) -> np.ndarray:
        return self.conditions.all(axis=1)

    @property
    def K(self) -> int:
        return self.window.K

    def state(self) -> np.ndarray:
        """``u_K`` as a ``(g,)*d`` array indexed by ``j + half``."""
        return self.good.reshape((self.window.g,) * self.window.d).astype(np.uint8)

    def verdict(self, j) -> BlockVerdict:
        b = self.window.block_id(j)
        cond = tuple(bool(c) for c in self.conditions[b])
        return BlockVerdict(all(cond), cond)

    def good_fraction(self) -> float:
        return float(self.good.mean())

    def to_text(self) -> str:
        """One character per block (``G``/``B``), one line per last-axis row."""
        u = self.state().reshape(-1, self.window.g)
        return "\n".join("".join("G" if x else "B" for x in row) for row in u) + "\n"


def grid_from_text(window: BlockWindow, text: str) -> BlockGrid:
    """Synthetic grid from a G/B dump (all conditions set to the block state)."""
    rows = [r for r in text.strip().splitlines()]
    good = np.array([[ch == "G" for ch in r] for r in rows], dtype=bool).ravel()
    if good.size != window.n_blocks:
        raise ValueError("text grid does not match the window")
    cond = np.repeat(good[:, None], 4, axis=1)
    return BlockGrid(window, cond, np.full(window.n_blocks, -1, dtype=np.int64))


def classify_grid(omega, window: BlockWindow) -> BlockGrid:
    """Classify every block of the window from interior bonds ``omega``."""
    omega = np.asarray(omega, dtype=bool)
    bonds = window.bonds
    if omega.shape != (bonds.n_interior,):
        raise ValueError("configuration does not match the window's bond set")
    coords = window.box.sites
    n_total = window.box.size
    d = window.d
    (sp, s, ep, e), bits = window._block_regions
    n_cross, cstar, maxd = kernels.region_stats(sp, s, bits, ep, e, bonds.u, bonds.v, omega, coords, (1 << 2 * d) - 1, n_total)
    (sp2, s2, ep2, e2), bits2 = window._sub_regions
    sub_cross, _, _ = kernels.region_stats(sp2, s2, bits2, ep2, e2, bonds.u, bonds.v, omega, coords, 3, n_total)
    cep, ce = window._core_edges
    closed = np.add.reduceat(~omega[ce], cep[:-1]) if ce.size else np.zeros(window.n_blocks, int)
    closed = np.where(np.diff(cep) > 0, closed, 0)
    cond = np.empty((window.n_blocks, 4), dtype=bool)
    cond[:, 0] = n_cross >= 1
    cond[:, 1] = 10 * maxd <= window.root
    cond[:, 2] = (sub_cross[window.sub_block_ids()] >= 1).all(axis=(1, 2))
    cond[:, 3] = closed > 0
    return BlockGrid(window, cond, np.where(cond[:, 0], cstar, -1))


def classify_block(omega, window: BlockWindow, x) -> BlockVerdict:
    """Verdict for the block with centre ``x`` (a point of ``K Z^d``)."""
    x = np.asarray(x, dtype=np.int64)
    if np.any(x % window.K):
        raise ValueError(f"block centres lie in {window.K}Z^d, got {tuple(x)}")
    j = x // window.K
    if not window.in_grid(j):
        raise ValueError("block is outside the window")
    return classify_grid(omega, window).verdict(j)


def face_pairs(window: BlockWindow):
    """Pairs of face-adjacent block ids ``(a, b)`` with ``b = a + e_i``."""
    ja = window.block_index
    out = []
    for a in range(window.d):
        jb = ja.copy()
        jb[:, a] += 1
        ok = jb[:, a] <= window.half
        out.append(np.stack([window.block_id(ja[ok]), window.block_id(jb[ok])], axis=1))
    return np.concatenate(out, axis=0)


def adjacency_gluing_check(omega, grid: BlockGrid, conditions=(1, 2, 3, 4)) -> int:
    """Count face-adjacent pairs of qualifying blocks whose crossing clusters
    are not connected in ``omega`` (over the whole sampled box)."""
    w = grid.window
    omega = np.asarray(omega, dtype=bool)
    empty = np.zeros(0, dtype=np.int64)
    labels = kernels.label_components(w.box.size, w.bonds.u, w.bonds.v, omega, empty, empty)
    idx = [c - 1 for c in conditions]
    ok = grid.conditions[:, idx].all(axis=1)
    pairs = face_pairs(w)
    pairs = pairs[ok[pairs[:, 0]] & ok[pairs[:, 1]]]
    ca, cb = grid.cstar[pairs[:, 0]], grid.cstar[pairs[:, 1]]
    return int(np.count_nonzero(labels[ca] != labels[cb]))


def sample_configs(window: BlockWindow, beta: float, n_samples: int, thin: int = 1, burn_in: int = 200, seed: int = 0, chain: int = 0):
    """Yield ``n_samples`` interior configurations of the free window measure,
    one every ``thin`` sweeps after ``burn_in``."""
    state = SamplerState.create(window.graph(beta), seed, chain)
    for _ in iter_sweeps(state, burn_in):
        pass
    t = 0
    for _, omegas in iter_sweeps(state, n_samples * thin, record_omega=True):
        for row in omegas:
            t += 1
            if t % thin == 0:
                yield row.copy()


def sample_grids(window: BlockWindow, beta: float, n_samples: int, thin: int = 1, burn_in: int = 200, seed: int = 0, chain: int = 0):
    """Yield ``(omega, grid)`` pairs from the free window measure."""
    for omega in sample_configs(window, beta, n_samples, thin, burn_in, seed, chain):
        yield omega, classify_grid(omega, window)


# ---------------------------------------------------------------------------
# contours


@dataclass(frozen=True, eq=False)
class Contour:
    """Star-connected bad blocks ``gamma`` with their good star-neighbours."""

    gamma: np.ndarray
    boundary: np.ndarray

    @property
    def size(self) -> int:
        return int(self.gamma.shape[0])

    def to_json(self) -> dict:
        return {"size": self.size, "gamma": self.gamma.tolist(), "boundary": self.boundary.tolist()}


@dataclass(frozen=True, eq=False)
class ContourReport:
    connected: bool
    component: np.ndarray
    contours: tuple = ()

    def to_json(self) -> str:
        return json.dumps({"connected": self.connected, "contours": [c.to_json() for c in self.contours]}, sort_keys=True)


def _star_structure(d):
    return np.ones((3,) * d, dtype=bool)


def _face_structure(d):
    return ndimage.generate_binary_structure(d, 1)


def extract_contours(grid: BlockGrid, exclusion: int | None, anchor) -> ContourReport:
    """Contours cutting the anchor block from the window frame.

    ``exclusion`` is the half-side ``E`` of ``Lambda_E``; blocks meeting it are
    not used (except the anchor). ``anchor`` is a block multi-index.
    """
    w = grid.window
    shape = (w.g,) * w.d
    anchor = np.asarray(anchor, dtype=np.int64)
    if not w.in_grid(anchor):
        raise ValueError("anchor block outside the window")
    a_id = w.block_id(anchor)
    allowed = np.ones(w.n_blocks, dtype=bool) if exclusion is None else w.outside(exclusion)
    allowed[a_id] = True
    good = grid.good & allowed
    comp = np.zeros(w.n_blocks, dtype=bool)
    if good[a_id]:
        lab, _ = ndimage.label(good.reshape(shape), structure=_face_structure(w.d))
        lab = lab.ravel()
        comp = lab == lab[a_id]
        if np.any(comp & w.frame):
            return ContourReport(True, comp)
    bad = ~grid.good & allowed
    star = _star_structure(w.d)
    if not comp.any():
        gammas = [np.array([a_id])]
    else:
        grown = ndimage.binary_dilation(comp.reshape(shape), structure=_face_structure(w.d)).ravel()
        rim = grown & ~comp & bad
        lab, _ = ndimage.label(bad.reshape(shape), structure=star)
        lab = lab.ravel()
        gammas = [np.flatnonzero(lab == r) for r in np.unique(lab[rim])]
    contours = []
    for gam in gammas:
        mask = np.zeros(w.n_blocks, dtype=bool)
        mask[gam] = True
        ring = ndimage.binary_dilation(mask.reshape(shape), structure=star).ravel() & ~mask & grid.good
        contours.append(Contour(w.block_index[gam], w.block_index[np.flatnonzero(ring)]))
    return ContourReport(False, comp, tuple(contours))


def separates(grid: BlockGrid, report: ContourReport, anchor, exclusion: int | None = None) -> bool:
    """Flood fill from the anchor over allowed blocks outside every gamma;
    True when the frame is not reached."""
    w = grid.window
    blocked = np.zeros(w.n_blocks, dtype=bool)
    for c in report.contours:
        blocked[w.block_id(c.gamma)] = True
    allowed = np.ones(w.n_blocks, dtype=bool) if exclusion is None else w.outside(exclusion)
    a_id = w.block_id(np.asarray(anchor))
    allowed[a_id] = True
    free = allowed & ~blocked
    if not free[a_id]:
        return True
    lab, _ = ndimage.label(free.reshape((w.g,) * w.d), structure=_face_structure(w.d))
    lab = lab.ravel()
    return not np.any((lab == lab[a_id]) & w.frame)


# ---------------------------------------------------------------------------
# Peierls estimator


def neighbor_offsets(d: int, kind: str = "face") -> np.ndarray:
    if kind == "face":
        eye = np.eye(d, dtype=np.int64)
        return np.concatenate([-eye, eye])
    if kind == "star":
        offs = np.indices((3,) * d).reshape(d, -1).T - 1
        return offs[np.any(offs != 0, axis=1)]
    raise ValueError(f"unknown neighbourhood {kind!r}")


@dataclass(frozen=True)
class PatternEstimate:
    pattern: str
    n: int
    bad: int
    p: float
    stderr: float
    upper: float


@dataclass(frozen=True, eq=False)
class PeierlsReport:
    patterns: tuple
    max_p: float
    max_stderr: float
    max_pattern: str | None
    insufficient: bool
    n_samples: int
    min_count: int

    def to_json(self) -> dict:
        return {
            "max_p": self.max_p,
            "max_stderr": self.max_stderr,
            "max_pattern": self.max_pattern,
            "insufficient": self.insufficient,
            "n_samples": self.n_samples,
            "min_count": self.min_count,
            "patterns": [p.__dict__ for p in self.patterns],
        }


def peierls_estimate(goods, window: BlockWindow, x=None, kind: str = "face", min_count: int = 100, confidence: float = 0.95) -> PeierlsReport:
    """Empirical ``P(u_K(x) = 0 | neighbours = eta)``.

    ``goods`` is a ``(samples, n_blocks)`` array of block states (or a list of
    grids). ``x`` lists block multi-indices to pool; by default every block
    whose neighbourhood fits inside the grid and avoids the frame. Errors are
    computed treating each sample as one cluster of correlated outcomes.
    """
    G = np.asarray([g.good if isinstance(g, BlockGrid) else g for g in goods], dtype=bool)
    S = G.shape[0]
    offs = neighbor_offsets(window.d, kind)
    if x is None:
        inner = np.all(np.abs(window.block_index) <= window.half - 2, axis=1)
        xs = window.block_index[inner]
    else:
        xs = np.asarray(x, dtype=np.int64).reshape(-1, window.d)
    nb = xs[:, None, :] + offs[None, :, :]
    if np.any(np.abs(nb) > window.half):
        raise ValueError("neighbourhood leaves the grid")
    centre = G[:, window.block_id(xs)]
    neigh = G[:, window.block_id(nb)]
    weights = 1 << np.arange(offs.shape[0])
    code = (neigh.astype(np.int64) * weights).sum(axis=2)
    out = []
    z = norm.ppf(confidence)
    for c in np.unique(code):
        hit = code == c
        t = hit.sum(axis=1)
        b = (hit & ~centre).sum(axis=1)
        n, bad = int(t.sum()), int(b.sum())
        if n < min_count:
            continue
        p = bad / n
        if S > 1:
            resid = b - p * t
            se = math.sqrt(S / (S - 1) * float((resid**2).sum())) / n
        else:
            se = math.sqrt(p * (1 - p) / n)
        upper = 1.0 - (1.0 - confidence) ** (1.0 / n) if bad == 0 else min(1.0, p + z * se)
        pat = "".join("G" if (int(c) >> i) & 1 else "B" for i in range(offs.shape[0]))
        out.append(PatternEstimate(pat, n, bad, p, se, upper))
    if not out:
        return PeierlsReport((), math.nan, math.nan, None, True, S, min_count)
    best = max(out, key=lambda e: (e.p, -e.n))
    return PeierlsReport(tuple(out), best.p, best.stderr, best.pattern, False, S, min_count)


def peierls_decrease(small: PeierlsReport, large: PeierlsReport, confidence: float = 0.95):
    """One-sided test that the max-over-patterns estimate drops; returns ``(z, passed)``."""
    se = math.hypot(small.max_stderr, large.max_stderr)
    diff = small.max_p - large.max_p
    if se == 0:
        return (math.inf if diff > 0 else 0.0), diff > 0
    zval = diff / se
    return zval, bool(zval > norm.ppf(confidence))
