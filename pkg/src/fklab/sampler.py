"""Swendsen-Wang sampling of FK measures, batch-means estimates, spin-space oracles.

Every sweep consumes one row of ``n_vertices + n_dynamic`` uniforms: the
first ``n_vertices`` give cluster spins (indexed by cluster root), the rest
decide bond openings. Rows are drawn in chunks from a per-chain generator, so
trajectories do not depend on chunk size, backend or thread count, and two
chains on graphs of the same shape with the same seed use common random
numbers.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .fkcore import (
    BoundaryCondition,
    Connected,
    Event,
    FKGraph,
    origin_to_boundary,
    read_checkpoint,
    rng_from_blob,
    rng_state_blob,
    write_checkpoint,
)
from .lattice import Box, SlabPartition, enumerate_bonds
from .model import CouplingKernel, IntensityTable

N_BATCHES = 32
MIN_BATCHES = 16
BURN_IN_FRACTION = 0.2
CONVERGENCE_SIGMAS = 5.0
CHUNK_BUDGET = 1 << 21


def chain_rng(seed: int, chain: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(chain),))))


@dataclass(eq=False)
class SamplerState:
    """One Markov chain: current dynamic bonds, generator, sweep counter."""

    graph: FKGraph
    omega: np.ndarray
    rng: np.random.Generator
    sweeps: int = 0
    seed: int = 0
    chain: int = 0

    @classmethod
    def create(cls, graph: FKGraph, seed: int = 0, chain: int = 0, start: str = "closed"):
        if start == "closed":
            omega = np.zeros(graph.n_dynamic, dtype=bool)
        elif start == "open":
            omega = np.ones(graph.n_dynamic, dtype=bool)
        else:
            raise ValueError(f"unknown start {start!r}")
        return cls(graph, omega, chain_rng(seed, chain), 0, seed, chain)

    def partition(self):
        return self.graph.partition(self.omega)

    def checkpoint(self) -> bytes:
        buf = io.BytesIO()
        box = self.graph.box
        write_checkpoint(buf, self.omega, 0 if box is None else box.d, 0 if box is None else box.N, rng_state_blob(self.rng))
        return buf.getvalue()

    @classmethod
    def restore(cls, graph: FKGraph, blob: bytes, seed: int = 0, chain: int = 0, sweeps: int = 0):
        bits, _, _, rng_blob = read_checkpoint(io.BytesIO(blob))
        if bits.size != graph.n_dynamic:
            raise ValueError("checkpoint does not match the graph")
        return cls(graph, bits.copy(), rng_from_blob(rng_blob), sweeps, seed, chain)


def _chunk_size(graph: FKGraph) -> int:
    return max(1, CHUNK_BUDGET // (graph.n_vertices + graph.n_dynamic))


def _run(state: SamplerState, n: int, record_omega: bool):
    g = state.graph
    U = state.rng.random((n, g.n_vertices + g.n_dynamic))
    labels = np.empty((n, g.n_vertices), dtype=np.int64)
    omegas = np.empty((n, g.n_dynamic) if record_omega else (0, 0), dtype=np.bool_)
    kernels.sw_chunk(g.n_vertices, g.eu, g.ev, g.prob, g.fu, g.fv, state.omega, U, labels, omegas, record_omega)
    state.sweeps += n
    return labels, omegas


def sw_step(state: SamplerState) -> SamplerState:
    """One Edwards-Sokal alternation (in place; the state is returned)."""
    _run(state, 1, False)
    return state


def iter_sweeps(state: SamplerState, n: int, record_omega: bool = False, chunk: int | None = None):
    """Yield ``(labels, omegas)`` blocks covering the next ``n`` sweeps.

    Row ``t`` describes the configuration *before* sweep ``t``.
    """
    chunk = _chunk_size(state.graph) if chunk is None else int(chunk)
    done = 0
    while done < n:
        c = min(chunk, n - done)
        yield _run(state, c, record_omega)
        done += c


@dataclass(frozen=True)
class Estimate:
    """Batch-means estimate of a stationary mean."""

    mean: float
    stderr: float
    n: int
    n_eff: float
    converged: bool = True
    n_batches: int = 0

    @classmethod
    def exact(cls, value: float) -> "Estimate":
        return cls(float(value), 0.0, 0, math.inf, True, 0)

    @classmethod
    def from_series(cls, x, n_batches: int = N_BATCHES) -> "Estimate":
        x = np.asarray(x, dtype=float).ravel()
        n = x.size
        nb = min(n_batches, n // 2)
        if nb < MIN_BATCHES:
            raise ValueError(f"need at least {2 * MIN_BATCHES} samples for {MIN_BATCHES} batches, got {n}")
        size = n // nb
        means = x[: nb * size].reshape(nb, size).mean(axis=1)
        mean = float(x.mean())
        se = float(means.std(ddof=1) / math.sqrt(nb))
        var = float(x.var())
        n_eff = float(n) if se == 0.0 else min(float(n), var / se**2)
        h = nb // 2
        a, b = means[:h], means[h : 2 * h]
        sa, sb = a.std(ddof=1) / math.sqrt(h), b.std(ddof=1) / math.sqrt(h)
        gap = abs(a.mean() - b.mean())
        spread = math.hypot(sa, sb)
        converged = bool(gap <= CONVERGENCE_SIGMAS * spread) if spread > 0 else bool(gap == 0)
        return cls(mean, se, n, n_eff, converged, nb)

    @classmethod
    def difference(cls, x, y, n_batches: int = N_BATCHES) -> "Estimate":
        """Paired estimate of ``E[x - y]`` from two synchronised series."""
        return cls.from_series(np.asarray(x, float) - np.asarray(y, float), n_batches)

    def merge(self, other: "Estimate") -> "Estimate":
        if self.n == 0:
            return other
        if other.n == 0:
            return self
        n = self.n + other.n
        mean = (self.n * self.mean + other.n * other.mean) / n
        se = math.sqrt((self.n * self.stderr) ** 2 + (other.n * other.stderr) ** 2) / n
        return Estimate(mean, se, n, self.n_eff + other.n_eff, self.converged and other.converged, self.n_batches + other.n_batches)

    def z_against(self, target: float, other_se: float = 0.0) -> float:
        se = math.hypot(self.stderr, other_se)
        if se == 0.0:
            return 0.0 if abs(self.mean - target) <= 1e-12 else math.copysign(math.inf, self.mean - target)
        return (self.mean - target) / se

    def as_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n_samples": self.n, "n_eff": self.n_eff, "converged": self.converged}


def merge_all(estimates) -> Estimate:
    out = Estimate(0.0, 0.0, 0, 0.0, True, 0)
    for e in estimates:
        out = out.merge(e)
    return out


def _burn(sweeps: int, burn_in: int | None) -> int:
    return int(round(BURN_IN_FRACTION * sweeps)) if burn_in is None else int(burn_in)


def event_series(graph: FKGraph, events, sweeps: int, burn_in: int | None = None, seed: int = 0, chain: int = 0, start: str = "closed") -> np.ndarray:
    """Indicator series ``(len(events), sweeps - burn_in)`` from one chain."""
    events = list(events)
    burn = _burn(sweeps, burn_in)
    if not 0 <= burn < sweeps:
        raise ValueError("burn-in must be smaller than the number of sweeps")
    state = SamplerState.create(graph, seed, chain, start)
    for _ in iter_sweeps(state, burn):
        pass
    need_omega = any(e.needs_omega for e in events)
    out = np.empty((len(events), sweeps - burn), dtype=bool)
    pos = 0
    for labels, omegas in iter_sweeps(state, sweeps - burn, need_omega):
        c = labels.shape[0]
        for i, ev in enumerate(events):
            out[i, pos : pos + c] = ev(labels, omegas if need_omega else None)
        pos += c
    return out


def _map_chains(fn, chains: int, threads: int | None):
    threads = 1 if threads is None else max(1, int(threads))
    if threads == 1 or chains == 1:
        return [fn(c) for c in range(chains)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(chains)))


def estimate_events(graph: FKGraph, events, sweeps: int, burn_in: int | None = None, chains: int = 1, seed: int = 0, threads: int | None = None, start: str = "closed"):
    """Estimates for several events from the same chains; merged in chain order."""
    events = list(events)
    per_chain = _map_chains(lambda c: event_series(graph, events, sweeps, burn_in, seed, c, start), chains, threads)
    out = []
    for i in range(len(events)):
        out.append(merge_all(Estimate.from_series(s[i]) for s in per_chain))
    return out


def estimate_event(graph: FKGraph, event: Event, sweeps: int, burn_in: int | None = None, chains: int = 1, seed: int = 0, threads: int | None = None, start: str = "closed") -> Estimate:
    return estimate_events(graph, [event], sweeps, burn_in, chains, seed, threads, start)[0]


# ---------------------------------------------------------------------------
# box-level conveniences


def box_graph(N: int, d: int, beta: float, bc: BoundaryCondition, kernel: CouplingKernel | None = None, h: float | None = None) -> FKGraph:
    box = Box(N, d)
    kernel = CouplingKernel.nearest_neighbor(d) if kernel is None else kernel
    bonds = enumerate_bonds(box, kernel)
    it = IntensityTable.from_couplings(bonds.J, beta, bonds.J_boundary if h is not None else None, h)
    return FKGraph.from_box(box, kernel, bc, it, bonds=bonds)


def estimate_theta(N: int, d: int, beta: float, bc: BoundaryCondition, sweeps: int, kernel=None, **kw) -> Estimate:
    """``P(0 <-> exterior)``: the ghost, or for free parts a site next to the exterior."""
    g = box_graph(N, d, beta, bc, kernel)
    return estimate_event(g, origin_to_boundary(g), sweeps, **kw)


def estimate_psi(partition: SlabPartition, Z, beta: float, sweeps: int, **kw) -> Estimate:
    """``P(0 <-> wired slabs)`` under the mixed condition built from ``Z``."""
    Z = np.asarray(Z).astype(bool)
    if not Z.any():
        return Estimate.exact(0.0)
    box = partition.box
    g = box_graph(box.N, box.d, beta, BoundaryCondition.mixed(partition, Z), partition.kernel)
    return estimate_event(g, Connected(g.origin, g.ghost), sweeps, **kw)


def field_graph(N: int, d: int, beta: float, h: float, kernel: CouplingKernel | None = None) -> FKGraph:
    if not h > 0:
        raise ValueError("the boundary field h must be strictly positive")
    return box_graph(N, d, beta, BoundaryCondition.wired(), kernel, h)


def sample_with_boundary_field(beta: float, h: float, N: int, sweeps: int, d: int = 2, kernel=None, **kw) -> Estimate:
    """``P(0 <-> ghost)`` when boundary bonds carry intensity ``1 - exp(-2 h J)``.

    Equals the magnetisation of the origin under the boundary field ``h``.
    """
    g = field_graph(N, d, beta, h, kernel)
    return estimate_event(g, Connected(g.origin, g.ghost), sweeps, **kw)


# ---------------------------------------------------------------------------
# spin-space oracles


def _spin_couplings(box: Box, kernel: CouplingKernel):
    bonds = enumerate_bonds(box, kernel)
    n = box.size
    u = np.concatenate([bonds.u, bonds.v])
    v = np.concatenate([bonds.v, bonds.u])
    w = np.concatenate([bonds.J, bonds.J])
    order = np.argsort(u, kind="stable")
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(u, minlength=n), out=ptr[1:])
    ext = np.bincount(bonds.inner, weights=bonds.J_boundary, minlength=n).astype(float)
    return ptr, v[order].astype(np.int64), w[order].astype(float), ext, bonds


def glauber_spin_oracle(beta: float, N: int, d: int, sweeps: int, h: float | None = None, boundary: str | None = None, kernel=None, seed: int = 0, burn_in: int | None = None) -> Estimate:
    """Heat-bath estimate of ``<sigma_0>``.

    ``h`` is the field on boundary bonds (weight ``exp(h J sigma_i)``);
    ``boundary='plus'`` is the same with ``h = beta``, ``'free'`` drops it.
    """
    box = Box(N, d)
    kernel = CouplingKernel.nearest_neighbor(d) if kernel is None else kernel
    ptr, idx, w, ext, _ = _spin_couplings(box, kernel)
    if boundary == "plus":
        h = beta
    elif boundary == "free":
        h = 0.0
    elif h is None:
        raise ValueError("give either h or boundary")
    ext = float(h) * ext
    rng = chain_rng(seed, 0)
    spins = np.ones(box.size, dtype=np.int64)
    burn = _burn(sweeps, burn_in)
    out = np.empty(sweeps, dtype=np.int64)
    chunk = max(1, CHUNK_BUDGET // box.size)
    for s in range(0, sweeps, chunk):
        c = min(chunk, sweeps - s)
        U = rng.random((c, box.size))
        kernels.heat_bath_chunk(spins, ptr, idx, w, ext, float(beta), U, box.origin, out[s : s + c])
    return Estimate.from_series(out[burn:])


def exact_spin_magnetization(beta: float, h: float, N: int, d: int, kernel=None) -> float:
    """``<sigma_0>`` by summing over all spin states (at most 20 sites)."""
    box = Box(N, d)
    kernel = CouplingKernel.nearest_neighbor(d) if kernel is None else kernel
    n = box.size
    if n > 20:
        raise ValueError("too many sites for exact spin enumeration")
    _, _, _, ext, bonds = _spin_couplings(box, kernel)
    s = 1 - 2 * ((np.arange(1 << n)[:, None] >> np.arange(n)) & 1)
    energy = beta * (bonds.J * s[:, bonds.u] * s[:, bonds.v]).sum(axis=1) + h * (s * ext).sum(axis=1)
    w = np.exp(energy - energy.max())
    return float((w * s[:, box.origin]).sum() / w.sum())


def single_bond_metropolis(graph: FKGraph, sweeps: int, seed: int = 0, burn_in: int | None = None) -> np.ndarray:
    """Bond-flip Metropolis chain for tiny graphs; returns the kept configurations.

    The change in the finite-cluster count when bond ``e`` flips is read off
    the connectivity of its endpoints with ``e`` removed.
    """
    rng = chain_rng(seed, 0)
    m = graph.n_dynamic
    omega = np.zeros(m, dtype=bool)
    burn = _burn(sweeps, burn_in)
    kept = np.empty((sweeps - burn, m), dtype=bool)
    for t in range(sweeps):
        for e in range(m):
            p = graph.prob[e]
            cur = bool(omega[e])
            omega[e] = False
            lab = graph.labels(omega)
            joined = lab[graph.eu[e]] == lab[graph.ev[e]]
            # weight(open) / weight(closed)
            ratio = p / (1.0 - p) if joined else p / (2.0 * (1.0 - p))
            r = 1.0 / ratio if cur else ratio
            omega[e] = (not cur) if rng.random() < min(1.0, r) else cur
        if t >= burn:
            kept[t - burn] = omega
    return kept
