"""Bond configurations, boundary conditions, cluster analysis and FK weights.

A box with a boundary condition is turned into an :class:`FKGraph`: the box
sites, optional explicit exterior sites, and one ghost vertex standing for
the wired (infinite) exterior cluster. Dynamic edges carry the random bonds,
fixed edges are the bonds frozen open by the boundary condition.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .lattice import Box, BondSets, SlabPartition, enumerate_bonds
from .model import CouplingKernel, IntensityTable

GHOST = -1
ENUMERATION_GUARD = 24


@dataclass(frozen=True, eq=False)
class BoundaryCondition:
    """Frozen exterior configuration.

    kinds: ``free`` (all exterior bonds closed), ``wired`` (all open),
    ``mixed`` (bonds from wired slabs open, others closed, wired beyond) and
    ``explicit`` (one bit per boundary bond, wired or free beyond).
    """

    kind: str
    wired_slabs: tuple = ()
    partition: SlabPartition | None = None
    exterior: np.ndarray | None = None
    wired_beyond: bool = True

    @classmethod
    def free(cls):
        return cls("free")

    @classmethod
    def wired(cls):
        return cls("wired")

    @classmethod
    def mixed(cls, partition: SlabPartition, Z):
        """Wired on slabs with ``Z[k] == 1``, free elsewhere."""
        Z = np.asarray(Z).astype(bool)
        if Z.shape != (partition.M,):
            raise ValueError(f"slab pattern must have length M={partition.M}")
        return cls("mixed", tuple(int(k) for k in np.flatnonzero(Z)), partition)

    @classmethod
    def explicit(cls, bits, wired_beyond=True):
        bits = np.asarray(bits).astype(bool)
        bits.setflags(write=False)
        return cls("explicit", exterior=bits, wired_beyond=bool(wired_beyond))

    def __post_init__(self):
        if self.kind not in ("free", "wired", "mixed", "explicit"):
            raise ValueError(f"unknown boundary condition {self.kind!r}")
        if self.kind == "mixed" and self.partition is None:
            raise ValueError("mixed boundary condition needs a slab partition")
        if self.kind == "explicit" and self.exterior is None:
            raise ValueError("explicit boundary condition needs exterior bits")

    @property
    def pattern(self) -> np.ndarray | None:
        if self.kind != "mixed":
            return None
        Z = np.zeros(self.partition.M, dtype=np.int8)
        Z[list(self.wired_slabs)] = 1
        return Z

    def label(self) -> str:
        if self.kind == "mixed":
            return "mixed:" + "".join(map(str, self.pattern))
        return self.kind

    def open_boundary(self, bonds: BondSets) -> np.ndarray:
        """Which boundary bonds this condition freezes open."""
        nb = bonds.n_boundary
        if self.kind == "free":
            return np.zeros(nb, dtype=bool)
        if self.kind == "wired":
            return np.ones(nb, dtype=bool)
        if self.kind == "explicit":
            if self.exterior.shape != (nb,):
                raise ValueError(f"explicit boundary needs {nb} bits, got {self.exterior.shape}")
            return np.array(self.exterior, dtype=bool)
        p = self.partition
        if p.box.N != bonds.box.N or p.box.d != bonds.box.d:
            raise ValueError("slab partition belongs to a different box")
        slab = p.slab_of(bonds.outer) if nb else np.zeros(0, np.int64)
        if np.any(slab < 0):
            raise ValueError("boundary bond leaves the slab partition (kernel mismatch)")
        return np.isin(slab, np.array(self.wired_slabs, dtype=np.int64))

    def wired_sites(self) -> np.ndarray:
        """Exterior sites identified with the ghost under a mixed condition."""
        if self.kind != "mixed":
            raise ValueError("only defined for mixed boundary conditions")
        return self.partition.sites_of(self.wired_slabs)


@dataclass(frozen=True, eq=False)
class FKGraph:
    """Quotient graph on which the random-cluster measure is sampled.

    Vertices ``0 .. n_region-1`` are the box sites; then explicit exterior
    vertices (if any); the ghost is always the last vertex. The first
    ``n_interior`` dynamic edges are the interior bonds in canonical order.
    """

    n_vertices: int
    eu: np.ndarray
    ev: np.ndarray
    prob: np.ndarray
    fu: np.ndarray
    fv: np.ndarray
    n_region: int
    n_interior: int
    box: Box | None = None
    bonds: BondSets | None = None
    bc: BoundaryCondition | None = None
    intensities: IntensityTable | None = None
    dyn_boundary: np.ndarray | None = None

    @property
    def ghost(self) -> int:
        return self.n_vertices - 1

    @property
    def n_dynamic(self) -> int:
        return int(self.eu.size)

    @classmethod
    def from_edges(cls, n_sites, edges, probs=None, fixed=(), ghost_links=(), ghost_edges=(), ghost_probs=None):
        """Build a bare graph.

        ``edges`` are dynamic site pairs; ``fixed`` site pairs frozen open;
        ``ghost_links`` sites tied to the ghost by frozen-open bonds;
        ``ghost_edges`` sites with a *dynamic* bond to the ghost.
        """
        ghost = n_sites
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        ge = np.asarray(ghost_edges, dtype=np.int64).reshape(-1)
        eu = np.concatenate([e[:, 0], ge])
        ev = np.concatenate([e[:, 1], np.full(ge.size, ghost)])
        p = np.zeros(e.shape[0]) if probs is None else np.broadcast_to(np.asarray(probs, float), (e.shape[0],))
        gp = np.zeros(ge.size) if ghost_probs is None else np.broadcast_to(np.asarray(ghost_probs, float), (ge.size,))
        f = np.asarray(fixed, dtype=np.int64).reshape(-1, 2)
        gl = np.asarray(ghost_links, dtype=np.int64).reshape(-1)
        fu = np.concatenate([f[:, 0], gl])
        fv = np.concatenate([f[:, 1], np.full(gl.size, ghost)])
        return cls(n_sites + 1, eu, ev, np.concatenate([p, gp]).astype(float), fu, fv, n_sites, int(e.shape[0]))

    @classmethod
    def from_box(cls, box: Box, kernel: CouplingKernel, bc: BoundaryCondition, intensities: IntensityTable | None = None, bonds: BondSets | None = None):
        bonds = enumerate_bonds(box, kernel) if bonds is None else bonds
        n = box.size
        prob = np.zeros(bonds.n_interior) if intensities is None else np.asarray(intensities.p, float)
        if prob.shape != (bonds.n_interior,):
            raise ValueError("intensity table does not match the interior bond set")
        field_mode = intensities is not None and intensities.s is not None
        if field_mode:
            if bc.kind != "wired":
                raise ValueError("a boundary field is only defined on top of the wired condition")
            if intensities.s.shape != (bonds.n_boundary,):
                raise ValueError("boundary intensities do not match the boundary bond set")
            ghost = n
            eu = np.concatenate([bonds.u, bonds.inner])
            ev = np.concatenate([bonds.v, np.full(bonds.n_boundary, ghost)])
            prob = np.concatenate([prob, intensities.s])
            empty = np.zeros(0, np.int64)
            return cls(n + 1, eu, ev, prob, empty, empty, n, bonds.n_interior, box, bonds, bc, intensities, np.arange(bonds.n_boundary))

        open_b = bc.open_boundary(bonds)
        if bc.kind == "explicit" and not bc.wired_beyond:
            outer = bonds.outer[open_b]
            uniq, inv = np.unique(outer, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
            n_extra = uniq.shape[0]
            fu = bonds.inner[open_b]
            fv = n + inv
            n_vertices = n + n_extra + 1
        else:
            fu = bonds.inner[open_b]
            fv = np.full(fu.size, n, dtype=np.int64)
            n_vertices = n + 1
        return cls(n_vertices, bonds.u, bonds.v, prob, fu.astype(np.int64), fv.astype(np.int64), n, bonds.n_interior, box, bonds, bc, intensities)

    def with_probabilities(self, prob) -> "FKGraph":
        prob = np.asarray(prob, float)
        if prob.shape != self.prob.shape:
            raise ValueError("probability vector has the wrong length")
        return FKGraph(self.n_vertices, self.eu, self.ev, prob, self.fu, self.fv, self.n_region, self.n_interior, self.box, self.bonds, self.bc, self.intensities, self.dyn_boundary)

    def labels(self, omega) -> np.ndarray:
        omega = np.asarray(omega, dtype=bool)
        if omega.shape != (self.n_dynamic,):
            raise ValueError(f"configuration must have {self.n_dynamic} bonds")
        return kernels.label_components(self.n_vertices, self.eu, self.ev, omega, self.fu, self.fv)

    def partition(self, omega) -> "ClusterPartition":
        coords = None if self.box is None else self.box.sites
        return ClusterPartition(self.labels(omega), self.ghost, self.n_region, coords)

    def log_weight(self, omega) -> float:
        omega = np.asarray(omega, dtype=bool)
        part = self.partition(omega)
        with np.errstate(divide="ignore"):
            lw = np.where(omega, np.log(self.prob), np.log1p(-self.prob)).sum()
        return float(lw + part.finite_cluster_count(np.arange(self.n_region)) * kernels.LN2)

    @cached_property
    def origin(self) -> int:
        if self.box is None:
            return 0
        return self.box.origin

    @cached_property
    def inner_boundary(self) -> np.ndarray:
        return self.box.inner_boundary(self.bonds.kernel)


@dataclass(frozen=True, eq=False)
class BondConfig:
    """Open/closed flags of the interior bonds of a box (plus boundary bonds
    when the boundary carries a field)."""

    box: Box
    kernel: CouplingKernel
    bits: np.ndarray
    boundary_bits: np.ndarray | None = None

    def __post_init__(self):
        b = np.asarray(self.bits).astype(bool)
        object.__setattr__(self, "bits", b)
        if self.boundary_bits is not None:
            object.__setattr__(self, "boundary_bits", np.asarray(self.boundary_bits).astype(bool))

    @cached_property
    def bonds(self) -> BondSets:
        return enumerate_bonds(self.box, self.kernel)

    @classmethod
    def closed(cls, box, kernel):
        return cls(box, kernel, np.zeros(enumerate_bonds(box, kernel).n_interior, dtype=bool))

    @classmethod
    def open(cls, box, kernel):
        return cls(box, kernel, np.ones(enumerate_bonds(box, kernel).n_interior, dtype=bool))

    @property
    def dynamic(self) -> np.ndarray:
        if self.boundary_bits is None:
            return self.bits
        return np.concatenate([self.bits, self.boundary_bits])

    def to_bytes(self) -> bytes:
        return np.packbits(self.dynamic, bitorder="little").tobytes()


@dataclass(eq=False)
class ClusterPartition:
    """Open clusters of ``omega`` joined with the boundary condition.

    ``labels[v]`` is the root (smallest vertex) of the cluster of ``v``; the
    ghost vertex represents the wired exterior component.
    """

    labels: np.ndarray
    ghost: int
    n_region: int
    coords: np.ndarray | None = None

    def find(self, v) -> int:
        return int(self.labels[v])

    @property
    def ghost_root(self) -> int:
        return int(self.labels[self.ghost])

    def connected(self, a, b) -> bool:
        return bool(self.labels[a] == self.labels[b])

    def connected_to_ghost(self, v) -> bool:
        return bool(self.labels[v] == self.labels[self.ghost])

    def finite_cluster_count(self, B) -> int:
        """Distinct clusters meeting ``B`` (region sites), the ghost cluster excluded."""
        roots = np.unique(self.labels[np.asarray(B, dtype=np.int64)])
        return int(np.count_nonzero(roots != self.ghost_root))

    def clusters(self) -> dict[int, np.ndarray]:
        """Region sites grouped by root (includes the ghost cluster's region sites)."""
        lab = self.labels[: self.n_region]
        order = np.argsort(lab, kind="stable")
        roots, starts = np.unique(lab[order], return_index=True)
        return {int(r): s for r, s in zip(roots, np.split(order, starts[1:]))}

    def sizes(self) -> dict[int, int]:
        return {r: int(s.size) for r, s in self.clusters().items()}

    def bounding_boxes(self) -> dict[int, tuple[np.ndarray, np.ndarray]]:
        if self.coords is None:
            raise ValueError("partition carries no coordinates")
        return {r: (self.coords[s].min(axis=0), self.coords[s].max(axis=0)) for r, s in self.clusters().items()}


def _graph_for(omega: BondConfig, bc: BoundaryCondition) -> FKGraph:
    return FKGraph.from_box(omega.box, omega.kernel, bc, bonds=omega.bonds)


def build_clusters(omega: BondConfig, bc: BoundaryCondition) -> ClusterPartition:
    if omega.boundary_bits is not None:
        raise ValueError("boundary bits present: use FKGraph.partition on the field graph")
    return _graph_for(omega, bc).partition(omega.bits)


def finite_cluster_count(omega: BondConfig, bc: BoundaryCondition, B) -> int:
    return build_clusters(omega, bc).finite_cluster_count(B)


def fk_weight(omega: BondConfig, bc: BoundaryCondition, intensities: IntensityTable) -> tuple[float, float]:
    """Unnormalised FK weight; returns ``(log_weight, weight)``."""
    graph = FKGraph.from_box(omega.box, omega.kernel, bc, intensities, bonds=omega.bonds)
    lw = graph.log_weight(omega.dynamic)
    return lw, float(np.exp(lw))


# ---------------------------------------------------------------------------
# events: predicates on (labels, omega), vectorised over leading axes


class Event:
    needs_omega = False

    def __call__(self, labels, omega=None):
        raise NotImplementedError

    def on_partition(self, part: ClusterPartition, omega=None) -> bool:
        return bool(self(part.labels, omega))


@dataclass(frozen=True)
class Connected(Event):
    """``a <-> b``; ``GHOST`` (-1) stands for the ghost vertex."""

    a: int
    b: int

    def __call__(self, labels, omega=None):
        return labels[..., self.a] == labels[..., self.b]


@dataclass(frozen=True, eq=False)
class ConnectedToAny(Event):
    a: int
    targets: np.ndarray

    def __call__(self, labels, omega=None):
        t = np.asarray(self.targets, dtype=np.int64)
        return (labels[..., t] == labels[..., self.a, None]).any(axis=-1)


@dataclass(frozen=True)
class BondOpen(Event):
    e: int
    needs_omega = True

    def __call__(self, labels, omega=None):
        return np.asarray(omega)[..., self.e].astype(bool)


def origin_to_boundary(graph: FKGraph) -> Event:
    """The origin reaches the exterior: the ghost, or (for free or partly free
    boundaries) a box site with a neighbour outside."""
    targets = np.concatenate([graph.inner_boundary, [graph.ghost]])
    return ConnectedToAny(graph.origin, targets)


# ---------------------------------------------------------------------------
# exact enumeration oracle


@dataclass(eq=False)
class ExactDistribution:
    """Full probability table of an FK measure over ``{0,1}^{dynamic bonds}``.

    Configuration ``c`` has bond ``e`` open iff bit ``e`` of ``c`` is set.
    """

    graph: FKGraph
    log_weights: np.ndarray

    @cached_property
    def log_partition(self) -> float:
        return float(logsumexp(self.log_weights))

    @cached_property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_weights - self.log_partition)

    @property
    def n_bonds(self) -> int:
        return self.graph.n_dynamic

    def configuration(self, c: int) -> np.ndarray:
        return ((int(c) >> np.arange(self.n_bonds)) & 1).astype(bool)

    def marginal(self, e: int) -> float:
        c = np.arange(self.probabilities.size, dtype=np.int64)
        return float(self.probabilities[((c >> e) & 1).astype(bool)].sum())

    def marginals(self) -> np.ndarray:
        return np.array([self.marginal(e) for e in range(self.n_bonds)])

    def event_probability(self, event: Event, chunk: int = 1 << 15) -> float:
        g = self.graph
        n = self.probabilities.size
        total = 0.0
        for start in range(0, n, chunk):
            count = min(chunk, n - start)
            lab = kernels.enumerate_labels(g.n_vertices, g.eu, g.ev, g.fu, g.fv, start, count)
            omega = None
            if event.needs_omega:
                c = np.arange(start, start + count, dtype=np.int64)
                omega = ((c[:, None] >> np.arange(self.n_bonds)) & 1).astype(bool)
            hit = np.asarray(event(lab, omega), dtype=bool)
            total += float(self.probabilities[start : start + count][hit].sum())
        return total


def exact_distribution_graph(graph: FKGraph) -> ExactDistribution:
    if graph.n_dynamic > ENUMERATION_GUARD:
        raise ValueError(f"{graph.n_dynamic} bonds exceed the enumeration guard of {ENUMERATION_GUARD}")
    with np.errstate(divide="ignore"):
        logp = np.log(graph.prob)
        log1mp = np.log1p(-graph.prob)
    lw = kernels.enumerate_log_weights(graph.n_vertices, graph.eu, graph.ev, logp, log1mp, graph.fu, graph.fv, graph.n_region)
    return ExactDistribution(graph, lw)


def exact_distribution(box: Box, bc: BoundaryCondition, intensities: IntensityTable, kernel: CouplingKernel | None = None) -> ExactDistribution:
    kernel = CouplingKernel.nearest_neighbor(box.d) if kernel is None else kernel
    return exact_distribution_graph(FKGraph.from_box(box, kernel, bc, intensities))


def intensities_for(bonds: BondSets, beta: float, h: float | None = None) -> IntensityTable:
    return IntensityTable.from_couplings(bonds.J, beta, bonds.J_boundary if h is not None else None, h)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"FKLB"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHHIQ")


def write_checkpoint(fh, bits, d: int, N: int, rng_state: bytes = b"") -> None:
    """Serialise a bond configuration and an RNG state blob.

    Layout (little endian): magic ``FKLB``, version u16, d u16, N u32,
    bond count u64, bit-packed bonds (bit i = bond i), blob length u64, blob.
    """
    bits = np.asarray(bits, dtype=bool)
    fh.write(_HEADER.pack(MAGIC, CHECKPOINT_VERSION, d, N, bits.size))
    fh.write(np.packbits(bits, bitorder="little").tobytes())
    fh.write(struct.pack("<Q", len(rng_state)))
    fh.write(rng_state)


def read_checkpoint(fh):
    """Inverse of :func:`write_checkpoint`; returns ``(bits, d, N, rng_state)``."""
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ValueError("truncated checkpoint header")
    magic, version, d, N, count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ValueError("not an FKLB checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    nbytes = (count + 7) // 8
    raw = fh.read(nbytes)
    if len(raw) != nbytes:
        raise ValueError("truncated bond payload")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little", count=count).astype(bool)
    (blen,) = struct.unpack("<Q", fh.read(8))
    blob = fh.read(blen)
    if len(blob) != blen:
        raise ValueError("truncated RNG state")
    return bits, d, N, blob


def rng_state_blob(rng: np.random.Generator) -> bytes:
    return json.dumps(rng.bit_generator.state, sort_keys=True).encode()


def rng_from_blob(blob: bytes) -> np.random.Generator:
    state = json.loads(blob.decode())
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def checkpoint_bytes(bits, d, N, rng=None) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, bits, d, N, b"" if rng is None else rng_state_blob(rng))
    return buf.getvalue()
