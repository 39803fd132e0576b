"""Boundary slab events, the induced mixed boundary conditions, and the
recursive monotone coupling of two bit chains.

``Z_k`` is read from a free-measure configuration on a block window around
``Lambda_N``; ``Zhat_k`` from the boundary bonds of the boundary-field
measure. ``couple`` draws ``(Z, Zhat)`` jointly from two conditional oracles
with ``Z >= Zhat`` coordinatewise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage
from scipy.stats import beta as beta_dist

from .coarsegrain import BlockGrid, BlockWindow, classify_grid, sample_configs, window_n
from .fkcore import BoundaryCondition, Connected
from .lattice import Box, SlabPartition, enumerate_bonds, slab_partition
from .model import CouplingKernel, boundary_intensity, field_from_intensity
from .sampler import Estimate, SamplerState, box_graph, chain_rng, event_series, field_graph, iter_sweeps


class DominationViolation(RuntimeError):
    """Raised when the dominating chain's conditional probability drops below
    the dominated one's."""


class PreconditionFailure(RuntimeError):
    """The empirical alpha does not exceed ``R L^(d-1) s_h``."""

    def __init__(self, alpha, bound, message=None):
        self.alpha = alpha
        self.bound = bound
        super().__init__(message or f"empirical alpha {alpha:.4g} does not exceed R L^(d-1) s_h = {bound:.4g}")

    def to_json(self) -> dict:
        return {"status": "precondition-failed", "alpha": self.alpha, "bound": self.bound, "message": str(self)}


@dataclass(frozen=True, eq=False)
class SlabEventVector:
    bits: np.ndarray
    flavor: str
    partition: SlabPartition

    def __post_init__(self):
        b = np.asarray(self.bits).astype(bool)
        if b.shape != (self.partition.M,):
            raise ValueError(f"need {self.partition.M} slab bits, got shape {b.shape}")
        if self.flavor not in ("Z", "Zhat"):
            raise ValueError("flavor must be 'Z' or 'Zhat'")
        object.__setattr__(self, "bits", b)

    def key(self) -> bytes:
        return np.packbits(self.bits).tobytes()


def build_pi_Z(Z) -> BoundaryCondition:
    """Mixed boundary condition: slabs with bit 1 wired to the ghost, the rest deleted."""
    if isinstance(Z, SlabEventVector):
        return BoundaryCondition.mixed(Z.partition, Z.bits)
    raise TypeError("build_pi_Z expects a SlabEventVector")


# ---------------------------------------------------------------------------
# geometry of the detectors


@dataclass(frozen=True, eq=False)
class DominationSetup:
    """Box ``Lambda_N``, its slab partition, and the block window used for ``Z``."""

    N: int
    d: int
    K: int
    L: int
    rings: int = 2
    kernel: CouplingKernel | None = None

    def __post_init__(self):
        if self.kernel is None:
            object.__setattr__(self, "kernel", CouplingKernel.nearest_neighbor(self.d))
        window_n(self.N, self.K)

    @cached_property
    def box(self) -> Box:
        return Box(self.N, self.d)

    @cached_property
    def partition(self) -> SlabPartition:
        return slab_partition(self.box, self.kernel, self.L)

    @cached_property
    def window(self) -> BlockWindow:
        return BlockWindow.around(self.N, self.K, self.d, self.rings, self.kernel)

    @property
    def M(self) -> int:
        return self.partition.M

    @property
    def exclusion(self) -> int:
        return self.N + 3 * self.K // 2

    @property
    def path_length(self) -> int:
        return (3 * self.K) // 4

    @property
    def bound_factor(self) -> float:
        """``R L^(d-1)``."""
        return float(self.kernel.R * self.L ** (self.d - 1))

    @cached_property
    def _x_bonds(self):
        """Per slab: window bond indices that must be open for ``X_k``."""
        wb = self.window.bonds
        wbox = self.window.box
        site_slab = np.full(wbox.size, -1, dtype=np.int64)
        for k, s in enumerate(self.partition.slabs):
            site_slab[wbox.index(s)] = k
        su, sv = site_slab[wb.u], site_slab[wb.v]
        touching = [np.flatnonzero((su == k) | (sv == k)) for k in range(self.M)]
        paths = []
        for x, n in zip(self.partition.centers, self.partition.normals):
            idx = []
            for i in range(self.path_length + 1):
                a, b = x + i * n, x + (i + 1) * n
                ia, ib = wbox.index(a), wbox.index(b)
                if ia < 0 or ib < 0:
                    raise ValueError("window too small for the normal path")
                idx.append(wb._interior_lookup[(min(ia, ib), max(ia, ib))])
            paths.append(np.array(idx, dtype=np.int64))
        return touching, paths

    @cached_property
    def anchors(self) -> np.ndarray:
        """Block multi-index of ``y_k``, the block containing ``x_k + K n``."""
        w = self.window
        y = self.partition.centers + self.K * self.partition.normals
        j = w.block_of_point(y)
        if not all(w.in_grid(r) for r in j):
            raise ValueError("window too small for the anchor blocks")
        return j

    @cached_property
    def _boundary_slab(self) -> np.ndarray:
        bonds = enumerate_bonds(self.box, self.kernel)
        return np.asarray(self.partition.slab_of(bonds.outer), dtype=np.int64)

    def describe(self) -> dict:
        return {
            "N": self.N,
            "d": self.d,
            "K": self.K,
            "L": self.L,
            "M": self.M,
            "rings": self.rings,
            "window_blocks": self.window.g,
            "window_box_N": self.window.box.N,
            "exclusion": self.exclusion,
            "path_edges": self.path_length + 1,
        }


@dataclass(frozen=True)
class ZDetection:
    X: np.ndarray
    Y: np.ndarray

    @property
    def Z(self) -> np.ndarray:
        return self.X & self.Y


def detect_all_Z(omega, setup: DominationSetup, grid: BlockGrid | None = None) -> ZDetection:
    """``X_k`` and ``Y_k`` for every slab from a window configuration."""
    omega = np.asarray(omega, dtype=bool)
    w = setup.window
    grid = classify_grid(omega, w) if grid is None else grid
    touching, paths = setup._x_bonds
    good = grid.good
    yid = w.block_id(setup.anchors)
    X = np.array([omega[t].all() and omega[p].all() for t, p in zip(touching, paths)], dtype=bool) & good[yid]
    allowed = w.outside(setup.exclusion)
    shape = (w.g,) * w.d
    face = ndimage.generate_binary_structure(w.d, 1)
    lab, _ = ndimage.label((good & allowed).reshape(shape), structure=face)
    lab = lab.ravel()
    framed = np.unique(lab[w.frame & (lab > 0)])
    reach = np.isin(lab, framed) & (lab > 0)
    Y = np.zeros(setup.M, dtype=bool)
    offs = np.concatenate([np.eye(w.d, dtype=np.int64), -np.eye(w.d, dtype=np.int64)])
    for k, j in enumerate(setup.anchors):
        if not good[yid[k]]:
            continue
        if reach[yid[k]]:
            Y[k] = True
            continue
        for o in offs:
            nb = j + o
            if w.in_grid(nb) and reach[w.block_id(nb)]:
                Y[k] = True
                break
    return ZDetection(X, Y)


def detect_Z(omega, k: int, setup: DominationSetup, grid: BlockGrid | None = None) -> tuple[int, int, int]:
    """``(Z_k, X_k, Y_k)`` for slab ``k``."""
    det = detect_all_Z(omega, setup, grid)
    return int(det.Z[k]), int(det.X[k]), int(det.Y[k])


def detect_all_Zhat(ext_bits, setup: DominationSetup) -> np.ndarray:
    """``Zhat_k`` = some boundary bond from slab ``k`` into the box is open."""
    ext_bits = np.asarray(ext_bits, dtype=bool)
    slab = setup._boundary_slab
    if ext_bits.shape != slab.shape:
        raise ValueError("exterior configuration does not match the boundary bond set")
    return np.bincount(slab[ext_bits], minlength=setup.M) > 0


def detect_Zhat(ext_bits, k: int, setup: DominationSetup) -> int:
    return int(detect_all_Zhat(ext_bits, setup)[k])


# ---------------------------------------------------------------------------
# sampling the patterns


def sample_Z(setup: DominationSetup, beta: float, n: int, thin: int = 2, burn_in: int = 200, seed: int = 0, chain: int = 0):
    """``(n, M)`` array of ``Z`` patterns (and ``X``, ``Y``) under the free window measure."""
    Zs = np.zeros((n, setup.M), dtype=bool)
    Xs = np.zeros_like(Zs)
    Ys = np.zeros_like(Zs)
    for i, omega in enumerate(sample_configs(setup.window, beta, n, thin, burn_in, seed, chain)):
        det = detect_all_Z(omega, setup)
        Xs[i], Ys[i] = det.X, det.Y
        Zs[i] = det.Z
    return Zs, Xs, Ys


def sample_Zhat(setup: DominationSetup, beta: float, h: float, n: int, thin: int = 1, burn_in: int = 200, seed: int = 0, chain: int = 0):
    """``Zhat`` patterns and the ``0 <-> ghost`` indicator under the boundary-field measure."""
    g = field_graph(setup.N, setup.d, beta, h, setup.kernel)
    state = SamplerState.create(g, seed, chain)
    for _ in iter_sweeps(state, burn_in):
        pass
    Zh = np.zeros((n, setup.M), dtype=bool)
    hit = np.zeros(n, dtype=bool)
    t = i = 0
    for labels, omegas in iter_sweeps(state, n * thin, record_omega=True):
        for lab, om in zip(labels, omegas):
            t += 1
            if t % thin == 0:
                Zh[i] = detect_all_Zhat(om[g.n_interior :], setup)
                hit[i] = lab[g.origin] == lab[g.ghost]
                i += 1
    return Zh, hit


# ---------------------------------------------------------------------------
# conditional oracles


class ConditionalOracle:
    """Conditional law of the next bit given the history, queried in batches.

    ``cursor(n)`` follows ``n`` chains in parallel: ``probs(k)`` returns
    ``P(bit_k = 1 | bits_0..k-1)`` per chain, ``push(bits)`` records bit ``k``.
    A declared ``lower``/``upper`` bound is checked on every query.
    """

    lower: float | None = None
    upper: float | None = None

    def __init__(self, lower=None, upper=None):
        self.lower, self.upper = lower, upper
        self.violations = 0
        self.queries = 0

    def _check(self, q):
        q = np.asarray(q, dtype=float)
        if np.any((q < 0) | (q > 1)):
            raise ValueError("oracle returned a value outside [0, 1]")
        self.queries += q.size
        if self.lower is not None:
            self.violations += int(np.count_nonzero(q < self.lower))
        if self.upper is not None:
            self.violations += int(np.count_nonzero(q > self.upper))
        return q

    def cursor(self, n: int):
        return _HistoryCursor(self, n)

    def conditional(self, k: int, history) -> np.ndarray:
        raise NotImplementedError


class _HistoryCursor:
    def __init__(self, oracle, n):
        self.oracle = oracle
        self.hist = np.zeros((n, 0), dtype=bool)

    def probs(self, k):
        return self.oracle._check(self.oracle.conditional(k, self.hist))

    def push(self, bits):
        self.hist = np.concatenate([self.hist, np.asarray(bits, bool)[:, None]], axis=1)


class ConstantOracle(ConditionalOracle):
    def __init__(self, q, lower=None, upper=None):
        super().__init__(lower, upper)
        if not 0 <= q <= 1:
            raise ValueError("q must lie in [0, 1]")
        self.q = float(q)

    def conditional(self, k, history):
        return np.full(np.asarray(history).shape[0], self.q)


class FunctionOracle(ConditionalOracle):
    """Wraps ``fn(k, history_row) -> q``; ``vectorized=True`` passes the whole batch."""

    def __init__(self, fn, lower=None, upper=None, vectorized=False):
        super().__init__(lower, upper)
        self.fn = fn
        self.vectorized = vectorized

    def conditional(self, k, history):
        history = np.asarray(history, dtype=bool)
        if self.vectorized:
            return np.broadcast_to(np.asarray(self.fn(k, history), float), (history.shape[0],)).copy()
        return np.array([self.fn(k, row) for row in history], dtype=float)


class EmpiricalOracle(ConditionalOracle):
    """Conditional frequencies from sampled patterns.

    A history seen fewer than ``min_count`` times falls back to the
    unconditioned frequency of bit ``k``; fallbacks are counted.
    """

    def __init__(self, samples, min_count: int = 50, lower=None, upper=None):
        super().__init__(lower, upper)
        self.samples = np.asarray(samples, dtype=bool)
        self.min_count = int(min_count)
        self.marginal = self.samples.mean(axis=0) if self.samples.shape[0] else np.zeros(self.samples.shape[1])
        self.fallbacks = 0

    def cursor(self, n):
        return _EmpiricalCursor(self, n)

    def conditional(self, k, history):
        history = np.asarray(history, dtype=bool)
        cur = _EmpiricalCursor(self, history.shape[0])
        for j in range(k):
            cur.push(history[:, j])
        return cur._raw(k)


class _EmpiricalCursor:
    """Tracks prefix classes of samples and of the chains being drawn."""

    def __init__(self, oracle, n):
        self.oracle = oracle
        S = oracle.samples.shape[0]
        self.sid = np.zeros(S, dtype=np.int64)
        self.did = np.zeros(n, dtype=np.int64)
        self.k = 0

    def _raw(self, k):
        o = self.oracle
        col = o.samples[:, k]
        ncls = int(self.sid.max()) + 1 if self.sid.size else 1
        cnt = np.bincount(self.sid, minlength=ncls)
        ones = np.bincount(self.sid, weights=col, minlength=ncls)
        known = self.did >= 0
        c = np.where(known, cnt[np.where(known, self.did, 0)], 0)
        q = np.where(c >= o.min_count, ones[np.where(known, self.did, 0)] / np.maximum(c, 1), o.marginal[k])
        o.fallbacks += int(np.count_nonzero(c < o.min_count))
        return q

    def probs(self, k):
        return self.oracle._check(self._raw(k))

    def push(self, bits):
        o = self.oracle
        col = o.samples[:, self.k]
        skey = self.sid * 2 + col
        uniq, self.sid = np.unique(skey, return_inverse=True)
        self.sid = self.sid.reshape(-1)
        dkey = self.did * 2 + np.asarray(bits, dtype=np.int64)
        pos = np.searchsorted(uniq, dkey)
        pos_c = np.minimum(pos, max(uniq.size - 1, 0))
        found = (self.did >= 0) & (uniq.size > 0) & (uniq[pos_c] == dkey) if uniq.size else np.zeros(dkey.size, bool)
        self.did = np.where(found, pos_c, -1)
        self.k += 1


# ---------------------------------------------------------------------------
# coupling


@dataclass(frozen=True, eq=False)
class JointSample:
    Z: np.ndarray
    Zhat: np.ndarray

    @property
    def ordered(self) -> bool:
        return bool(np.all(self.Z >= self.Zhat))

    def cell_counts(self) -> dict:
        """Counts of ``(Z, Zhat)`` over all draws and positions."""
        z, zh = self.Z.ravel(), self.Zhat.ravel()
        return {
            (0, 0): int(np.count_nonzero(~z & ~zh)),
            (0, 1): int(np.count_nonzero(~z & zh)),
            (1, 0): int(np.count_nonzero(z & ~zh)),
            (1, 1): int(np.count_nonzero(z & zh)),
        }


def couple(oracle_Q: ConditionalOracle, oracle_Qhat: ConditionalOracle, M: int, rng: np.random.Generator, n: int = 1, tol: float = 1e-12) -> JointSample:
    """Draw ``n`` coupled pairs of ``M``-bit chains.

    At step ``k`` with ``q = Q(1 | Z history)`` and ``qh = Qhat(1 | Zhat history)``
    a single uniform ``U`` sets ``Z_k = [U < q]`` and ``Zhat_k = [U < qh]``, so
    ``(1,0)``, ``(1,1)`` and ``(0,0)`` have probabilities ``q - qh``, ``qh`` and
    ``1 - q``.
    """
    cz, ch = oracle_Q.cursor(n), oracle_Qhat.cursor(n)
    Z = np.zeros((n, M), dtype=bool)
    Zh = np.zeros((n, M), dtype=bool)
    for k in range(M):
        q = cz.probs(k)
        qh = ch.probs(k)
        bad = qh > q + tol
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise DominationViolation(f"step {k}: q={q[i]:.6g} < qhat={qh[i]:.6g}")
        U = rng.random(n)
        Z[:, k] = U < q
        Zh[:, k] = U < qh
        cz.push(Z[:, k])
        ch.push(Zh[:, k])
    return JointSample(Z, Zh)


# ---------------------------------------------------------------------------
# estimators


@dataclass(frozen=True, eq=False)
class HistoryCell:
    k: int
    history: str
    n: int
    ones: int

    @property
    def p(self) -> float:
        return self.ones / self.n

    @property
    def stderr(self) -> float:
        return math.sqrt(self.p * (1 - self.p) / self.n)


def history_cells(samples, max_history: int | None = None):
    """All observed ``(k, history)`` cells with their counts.

    Histories longer than ``max_history`` bits are truncated to the most recent ones.
    """
    S, M = samples.shape
    cells = []
    for k in range(M):
        lo = 0 if max_history is None else max(0, k - max_history)
        hist = samples[:, lo:k]
        if hist.shape[1]:
            keys, inv = np.unique(hist, axis=0, return_inverse=True)
            inv = inv.reshape(-1)
        else:
            keys, inv = np.zeros((1, 0), dtype=bool), np.zeros(S, dtype=np.int64)
        cnt = np.bincount(inv, minlength=keys.shape[0])
        ones = np.bincount(inv, weights=samples[:, k], minlength=keys.shape[0])
        for r in range(keys.shape[0]):
            cells.append(HistoryCell(k, "".join("1" if b else "0" for b in keys[r]), int(cnt[r]), int(ones[r])))
    return cells


@dataclass(frozen=True, eq=False)
class AlphaReport:
    marginals: np.ndarray
    marginal_stderr: np.ndarray
    alpha: float
    alpha_lower: float
    argmin: tuple | None
    n_samples: int
    n_cells: int
    n_covered: int
    covered_fraction: float
    insufficient: bool
    min_count: int

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "alpha_lower": self.alpha_lower,
            "argmin": self.argmin,
            "marginals": self.marginals.tolist(),
            "marginal_stderr": self.marginal_stderr.tolist(),
            "n_samples": self.n_samples,
            "n_cells": self.n_cells,
            "n_covered": self.n_covered,
            "covered_fraction": self.covered_fraction,
            "insufficient": self.insufficient,
            "min_count": self.min_count,
        }


def alpha_from_samples(Zs, min_count: int = 50, confidence: float = 0.95) -> AlphaReport:
    """Minimum over observed histories (with at least ``min_count`` visits) of
    the conditional frequency of ``Z_k = 1``."""
    Zs = np.asarray(Zs, dtype=bool)
    S, M = Zs.shape
    marg = Zs.mean(axis=0)
    se = np.sqrt(marg * (1 - marg) / max(S, 1))
    cells = history_cells(Zs)
    covered = [c for c in cells if c.n >= min_count]
    frac = sum(c.n for c in covered) / float(S * M) if S else 0.0
    if not covered:
        return AlphaReport(marg, se, math.nan, math.nan, None, S, len(cells), 0, frac, True, min_count)
    worst = min(covered, key=lambda c: (c.p, -c.n))
    lower = float(beta_dist.ppf(1 - confidence, worst.ones, worst.n - worst.ones + 1)) if worst.ones > 0 else 0.0
    return AlphaReport(marg, se, worst.p, lower, (worst.k, worst.history), S, len(cells), len(covered), frac, frac < 0.5, min_count)


def estimate_alpha(setup: DominationSetup, beta: float, n_samples: int, thin: int = 2, burn_in: int = 200, seed: int = 0, min_count: int = 50):
    Zs, _, _ = sample_Z(setup, beta, n_samples, thin, burn_in, seed)
    return alpha_from_samples(Zs, min_count), Zs


@dataclass(frozen=True, eq=False)
class ZhatBoundReport:
    bound: float
    s_h: float
    cells: tuple
    worst_excess: float
    passed: bool

    def to_json(self) -> dict:
        return {
            "bound": self.bound,
            "s_h": self.s_h,
            "passed": self.passed,
            "worst_excess_sigma": self.worst_excess,
            "cells": [{"k": c.k, "history": c.history, "n": c.n, "freq": c.p} for c in self.cells],
        }


def zhat_bound_check(Zh, setup: DominationSetup, s_h: float, min_count: int = 50, sigmas: float = 3.0, max_history: int | None = None) -> ZhatBoundReport:
    """Every conditional frequency of ``Zhat_k = 1`` must be at most
    ``R L^(d-1) s_h`` plus ``sigmas`` standard errors."""
    bound = setup.bound_factor * s_h
    cells = tuple(c for c in history_cells(np.asarray(Zh, bool), max_history) if c.n >= min_count)
    worst = -math.inf
    ok = True
    for c in cells:
        se = math.sqrt(max(bound * (1 - bound), c.p * (1 - c.p)) / c.n)
        excess = (c.p - bound) / se if se > 0 else (0.0 if c.p <= bound else math.inf)
        worst = max(worst, excess)
        ok &= c.p <= bound + sigmas * se
    return ZhatBoundReport(bound, s_h, cells, worst, bool(ok))


class PsiCache:
    """``Psi(Z) = P(0 <-> wired slabs)`` under ``pi^Z``, one inner chain per pattern.

    The inner chain seed depends only on ``(seed, pattern)``, so values are
    reproducible and independent of query order.
    """

    def __init__(self, setup: DominationSetup, beta: float, sweeps: int = 2000, seed: int = 0):
        self.setup, self.beta, self.sweeps, self.seed = setup, beta, int(sweeps), int(seed)
        self.values: dict[bytes, Estimate] = {}

    def __call__(self, Z) -> float:
        return self.estimate(Z).mean

    def estimate(self, Z) -> Estimate:
        bits = np.asarray(Z, dtype=bool)
        key = np.packbits(bits).tobytes()
        if key not in self.values:
            if not bits.any():
                self.values[key] = Estimate.exact(0.0)
            else:
                g = box_graph(self.setup.N, self.setup.d, self.beta, BoundaryCondition.mixed(self.setup.partition, bits), self.setup.kernel)
                sub = int.from_bytes(key, "little") % (1 << 62)
                series = event_series(g, [Connected(g.origin, g.ghost)], self.sweeps, seed=self.seed, chain=sub)
                self.values[key] = Estimate.from_series(series[0])
        return self.values[key]

    def many(self, patterns) -> np.ndarray:
        return np.array([self(p) for p in np.asarray(patterns, bool)])


@dataclass(frozen=True, eq=False)
class SandwichReport:
    a: Estimate
    b: Estimate
    c: Estimate
    b_direct: Estimate
    alpha: AlphaReport
    bound: float
    s_h: float
    h: float
    ab_z: float
    bc_z: float
    passed: bool
    coupled_ordered: bool
    n_patterns: int
    violations: int

    def to_json(self) -> dict:
        return {
            "a_free_window_psi": self.a.as_dict(),
            "b_coupled_psi_zhat": self.b.as_dict(),
            "c_field_connectivity": self.c.as_dict(),
            "b_direct_psi_zhat": self.b_direct.as_dict(),
            "alpha": self.alpha.alpha,
            "alpha_lower": self.alpha.alpha_lower,
            "bound": self.bound,
            "s_h": self.s_h,
            "h": self.h,
            "z_a_minus_b": self.ab_z,
            "z_b_minus_c": self.bc_z,
            "passed": self.passed,
            "coupled_ordered": self.coupled_ordered,
            "distinct_patterns": self.n_patterns,
            "oracle_violations": self.violations,
        }


def domination_chain_report(
    setup: DominationSetup,
    beta: float,
    h: float | None = None,
    n_window: int = 2000,
    n_field: int = 4000,
    n_coupled: int = 4000,
    psi_sweeps: int = 1000,
    thin: int = 2,
    seed: int = 0,
    min_count: int = 50,
    sigmas: float = 3.0,
    Zs=None,
) -> SandwichReport:
    """Finite-volume version of the three-term inequality chain.

    (a) mean of ``Psi(Z)`` over free-window samples; (b) mean of ``Psi(Zhat)``
    over coupled draws; (c) ``P(0 <-> ghost)`` under the boundary field. When
    ``h`` is None it is set so that ``R L^(d-1) s_h`` is half the empirical alpha.
    """
    if Zs is None:
        Zs, _, _ = sample_Z(setup, beta, n_window, thin, seed=seed, chain=0)
    alpha = alpha_from_samples(Zs, min_count)
    if h is None:
        if not alpha.alpha > 0:
            raise PreconditionFailure(alpha.alpha, 0.0, "empirical alpha is zero: no field can satisfy the precondition")
        h = float(field_from_intensity(alpha.alpha / (2.0 * setup.bound_factor)))
    s_h = float(boundary_intensity(h, float(np.max(setup.kernel.values))))
    bound = setup.bound_factor * s_h
    if not (alpha.alpha > bound):
        raise PreconditionFailure(alpha.alpha, bound)
    Zh, hit = sample_Zhat(setup, beta, h, n_field, thin=1, seed=seed, chain=1)
    psi = PsiCache(setup, beta, psi_sweeps, seed)
    a_series = psi.many(Zs)
    oq = EmpiricalOracle(Zs, min_count)
    oqh = EmpiricalOracle(Zh, min_count)
    joint = couple(oq, oqh, setup.M, chain_rng(seed, 2), n_coupled)
    b_vals = psi.many(joint.Zhat)
    a = Estimate.from_series(a_series)
    b = Estimate.from_series(b_vals)
    c = Estimate.from_series(hit)
    b_direct = Estimate.from_series(psi.many(Zh))
    ab = a.mean - b.mean
    bc = b.mean - c.mean
    ab_se = math.hypot(a.stderr, b.stderr)
    bc_se = math.hypot(b.stderr, c.stderr)
    ab_z = ab / ab_se if ab_se > 0 else (0.0 if ab >= 0 else -math.inf)
    bc_z = bc / bc_se if bc_se > 0 else (0.0 if bc >= 0 else -math.inf)
    passed = ab_z >= -sigmas and bc_z >= -sigmas
    return SandwichReport(a, b, c, b_direct, alpha, bound, s_h, h, ab_z, bc_z, bool(passed), joint.ordered, len(psi.values), oq.violations + oqh.violations)


def report_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, default=float)
