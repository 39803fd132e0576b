"""Ferromagnetic coupling kernels and the intensity maps of the q=2 random-cluster model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

Q = 2
# largest double below 1: keeps intensities in [0, 1) when exp(-2 beta J) underflows
_BELOW_ONE = float(np.nextafter(1.0, 0.0))


def _check_nonneg(name, value):
    if not np.all(np.isfinite(value)) or np.any(np.asarray(value) < 0):
        raise ValueError(f"{name} must be finite and non-negative, got {value!r}")


def bond_intensity(beta, J):
    """Open-bond probability ``1 - exp(-2 beta J)`` of a bulk bond.

    Works elementwise on arrays. The result is strictly below 1 for every
    finite input.
    """
    _check_nonneg("beta", beta)
    _check_nonneg("J", J)
    return np.minimum(-np.expm1(-2.0 * np.asarray(beta, dtype=float) * np.asarray(J, dtype=float)), _BELOW_ONE)


def boundary_intensity(h, J):
    """Intensity ``1 - exp(-2 h J)`` of a bond to the boundary under field ``h``."""
    _check_nonneg("h", h)
    _check_nonneg("J", J)
    return np.minimum(-np.expm1(-2.0 * np.asarray(h, dtype=float) * np.asarray(J, dtype=float)), _BELOW_ONE)


def field_from_intensity(s):
    """Inverse of :func:`boundary_intensity` at ``J = 1``: ``h = -log(1 - s) / 2``."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(~np.isfinite(s_arr)) or np.any(s_arr < 0) or np.any(s_arr >= 1):
        raise ValueError(f"intensity must lie in [0, 1), got {s!r}")
    return -0.5 * np.log1p(-s_arr)


def _lex_positive(v):
    nz = np.flatnonzero(v)
    return nz.size > 0 and v[nz[0]] > 0


@dataclass(frozen=True, eq=False)
class CouplingKernel:
    """Finite-range ferromagnetic interaction ``J(v)`` on ``Z^d``.

    ``displacements`` holds every ``v`` with ``J(v) > 0`` (closed under
    ``v -> -v``), sorted lexicographically; ``values`` the matching couplings.
    """

    displacements: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        disp = np.asarray(self.displacements, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        if disp.ndim != 2 or disp.shape[0] != vals.shape[0] or disp.shape[0] == 0:
            raise ValueError("kernel needs a non-empty (m, d) displacement array and m values")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("couplings must be ferromagnetic (J >= 0)")
        keep = vals > 0
        disp, vals = disp[keep], vals[keep]
        if disp.shape[0] == 0:
            raise ValueError("kernel has no positive coupling")
        if np.any(np.all(disp == 0, axis=1)):
            raise ValueError("J(0) must be 0")
        table = {}
        for v, j in zip(map(tuple, disp), vals):
            if v in table and table[v] != j:
                raise ValueError(f"conflicting couplings for displacement {v}")
            table[v] = float(j)
        for v, j in list(table.items()):
            mv = tuple(-c for c in v)
            if mv in table and table[mv] != j:
                raise ValueError(f"J({v}) != J({mv}): kernel must be symmetric")
            table[mv] = j
        keys = sorted(table)
        object.__setattr__(self, "displacements", np.array(keys, dtype=np.int64))
        object.__setattr__(self, "values", np.array([table[k] for k in keys], dtype=float))
        self.displacements.setflags(write=False)
        self.values.setflags(write=False)

    @classmethod
    def nearest_neighbor(cls, d: int, J: float = 1.0) -> "CouplingKernel":
        if d < 1:
            raise ValueError("dimension must be >= 1")
        eye = np.eye(d, dtype=np.int64)
        return cls(np.vstack([eye, -eye]), np.full(2 * d, float(J)))

    @classmethod
    def from_pairs(cls, pairs) -> "CouplingKernel":
        """Build from ``[(displacement, J), ...]``; mirror images are added."""
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty kernel specification")
        disp = np.array([np.atleast_1d(p[0]) for p in pairs], dtype=np.int64)
        vals = np.array([p[1] for p in pairs], dtype=float)
        return cls(disp, vals)

    @property
    def d(self) -> int:
        return int(self.displacements.shape[1])

    @property
    def R(self) -> int:
        """Interaction range: largest sup-norm of a displacement with ``J > 0``."""
        return int(np.abs(self.displacements).max())

    @property
    def is_nearest_neighbor(self) -> bool:
        return self.displacements.shape[0] == 2 * self.d and self.R == 1 and np.all(
            np.abs(self.displacements).sum(axis=1) == 1
        )

    def positive_half(self):
        """Lexicographically positive displacements and their couplings."""
        mask = np.array([_lex_positive(v) for v in self.displacements])
        return self.displacements[mask], self.values[mask]

    def J(self, v) -> float:
        v = np.asarray(v, dtype=np.int64)
        hit = np.all(self.displacements == v, axis=1)
        return float(self.values[hit][0]) if hit.any() else 0.0

    def has_unit_vectors(self) -> bool:
        eye = np.eye(self.d, dtype=np.int64)
        return all(self.J(e) > 0 for e in eye)

    def describe(self) -> str:
        if self.is_nearest_neighbor and np.all(self.values == self.values[0]):
            return f"nearest-neighbor(d={self.d}, J={self.values[0]:g})"
        parts = [f"{tuple(int(c) for c in v)}:{j:g}" for v, j in zip(*self.positive_half())]
        return "pairs(" + ",".join(parts) + ")"


@dataclass(frozen=True, eq=False)
class IntensityTable:
    """Per-bond open probabilities for one inverse temperature.

    ``p`` is indexed by canonical interior bond; ``s``, when present, by
    canonical boundary bond and overrides the wired boundary with a field.
    """

    p: np.ndarray
    beta: float
    s: np.ndarray | None = None
    h: float | None = None

    @classmethod
    def from_couplings(cls, J_interior, beta, J_boundary=None, h=None) -> "IntensityTable":
        p = bond_intensity(beta, J_interior)
        s = None
        if h is not None:
            if J_boundary is None:
                raise ValueError("a boundary field needs the boundary couplings")
            s = boundary_intensity(h, J_boundary)
        return cls(np.atleast_1d(p), float(beta), None if s is None else np.atleast_1d(s), h)

    @property
    def s_h(self) -> float:
        """Largest boundary intensity (0 without a field)."""
        return 0.0 if self.s is None or self.s.size == 0 else float(self.s.max())


def onsager_beta_c() -> float:
    """Critical point of the 2d nearest-neighbour model (external reference value)."""
    return 0.5 * math.log(1.0 + math.sqrt(2.0))
