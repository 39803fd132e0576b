"""Hot loops: cluster labelling, Swendsen-Wang sweeps, enumeration, block statistics.

Every kernel exists twice, a numba version (``nb_*``) and a numpy/scipy
version (``np_*``). Both consume the same pre-drawn uniforms and return the
same canonical cluster labels (the smallest vertex index of each cluster),
so trajectories agree bit for bit between backends. The public names
(``label_components``, ``sw_chunk``, ...) point at the active backend.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ._accel import HAVE_NUMBA, jit

LN2 = math.log(2.0)

# ---------------------------------------------------------------------------
# numba kernels


@jit
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@jit
def _union(parent, a, b):
    ra = _find(parent, a)
    rb = _find(parent, b)
    if ra < rb:
        parent[rb] = ra
    elif rb < ra:
        parent[ra] = rb


@jit
def nb_label_components(nv, eu, ev, open_, fu, fv):
    parent = np.arange(nv)
    for e in range(fu.shape[0]):
        _union(parent, fu[e], fv[e])
    for e in range(eu.shape[0]):
        if open_[e]:
            _union(parent, eu[e], ev[e])
    labels = np.empty(nv, np.int64)
    for i in range(nv):
        labels[i] = _find(parent, i)
    return labels


@jit
def nb_sw_chunk(nv, eu, ev, prob, fu, fv, omega, U, labels_out, omega_out, record_omega):
    nd = eu.shape[0]
    ghost = nv - 1
    parent = np.empty(nv, np.int64)
    plus = np.empty(nv, np.bool_)
    for t in range(U.shape[0]):
        for i in range(nv):
            parent[i] = i
        for e in range(fu.shape[0]):
            _union(parent, fu[e], fv[e])
        for e in range(nd):
            if omega[e]:
                _union(parent, eu[e], ev[e])
        for i in range(nv):
            labels_out[t, i] = _find(parent, i)
        if record_omega:
            for e in range(nd):
                omega_out[t, e] = omega[e]
        g = labels_out[t, ghost]
        for i in range(nv):
            r = labels_out[t, i]
            plus[i] = True if r == g else U[t, r] < 0.5
        for e in range(nd):
            omega[e] = (plus[eu[e]] == plus[ev[e]]) and (U[t, nv + e] < prob[e])


@jit
def nb_enumerate_log_weights(nv, eu, ev, logp, log1mp, fu, fv, n_region):
    m = eu.shape[0]
    n = 1 << m
    ghost = nv - 1
    out = np.empty(n)
    parent = np.empty(nv, np.int64)
    stamp = np.zeros(nv, np.int64)
    for c in range(n):
        for i in range(nv):
            parent[i] = i
        for e in range(fu.shape[0]):
            _union(parent, fu[e], fv[e])
        lw = 0.0
        for e in range(m):
            if (c >> e) & 1:
                _union(parent, eu[e], ev[e])
                lw += logp[e]
            else:
                lw += log1mp[e]
        gr = _find(parent, ghost)
        cnt = 0
        for i in range(n_region):
            r = _find(parent, i)
            if r != gr and stamp[r] != c + 1:
                stamp[r] = c + 1
                cnt += 1
        out[c] = lw + cnt * 0.6931471805599453
    return out


@jit
def nb_enumerate_labels(nv, eu, ev, fu, fv, start, count):
    m = eu.shape[0]
    out = np.empty((count, nv), np.int64)
    parent = np.empty(nv, np.int64)
    for k in range(count):
        c = start + k
        for i in range(nv):
            parent[i] = i
        for e in range(fu.shape[0]):
            _union(parent, fu[e], fv[e])
        for e in range(m):
            if (c >> e) & 1:
                _union(parent, eu[e], ev[e])
        for i in range(nv):
            out[k, i] = _find(parent, i)
    return out


@jit
def nb_region_stats(site_ptr, sites, site_bits, edge_ptr, edges, eu, ev, open_, coords, full_mask, n_total):
    nreg = site_ptr.shape[0] - 1
    d = coords.shape[1]
    loc = np.full(n_total, -1, np.int64)
    n_cross = np.zeros(nreg, np.int64)
    cstar = np.full(nreg, -1, np.int64)
    maxd = np.zeros(nreg, np.int64)
    maxn = 0
    for r in range(nreg):
        maxn = max(maxn, site_ptr[r + 1] - site_ptr[r])
    parent = np.empty(maxn, np.int64)
    bits = np.empty(maxn, np.int64)
    size = np.empty(maxn, np.int64)
    mn = np.empty((maxn, d), np.int64)
    mx = np.empty((maxn, d), np.int64)
    for r in range(nreg):
        s0 = site_ptr[r]
        n = site_ptr[r + 1] - s0
        for i in range(n):
            loc[sites[s0 + i]] = i
            parent[i] = i
            bits[i] = 0
            size[i] = 0
            for a in range(d):
                mn[i, a] = 1 << 60
                mx[i, a] = -(1 << 60)
        for k in range(edge_ptr[r], edge_ptr[r + 1]):
            e = edges[k]
            if open_[e]:
                _union(parent, loc[eu[e]], loc[ev[e]])
        for i in range(n):
            root = _find(parent, i)
            bits[root] |= site_bits[s0 + i]
            size[root] += 1
            g = sites[s0 + i]
            for a in range(d):
                c = coords[g, a]
                if c < mn[root, a]:
                    mn[root, a] = c
                if c > mx[root, a]:
                    mx[root, a] = c
        best = -1
        best_size = -1
        nc = 0
        for i in range(n):
            if parent[i] == i and (bits[i] & full_mask) == full_mask:
                nc += 1
                if size[i] > best_size:
                    best_size = size[i]
                    best = i
        n_cross[r] = nc
        if best >= 0:
            cstar[r] = sites[s0 + best]
        md = 0
        for i in range(n):
            if parent[i] == i and i != best:
                for a in range(d):
                    if mx[i, a] - mn[i, a] > md:
                        md = mx[i, a] - mn[i, a]
        maxd[r] = md
        for i in range(n):
            loc[sites[s0 + i]] = -1
    return n_cross, cstar, maxd


@jit
def nb_heat_bath_chunk(spins, ptr, idx, w, ext, beta, U, site, out):
    n = spins.shape[0]
    for t in range(U.shape[0]):
        for i in range(n):
            f = ext[i]
            for k in range(ptr[i], ptr[i + 1]):
                f += beta * w[k] * spins[idx[k]]
            p = 1.0 / (1.0 + math.exp(-2.0 * f))
            spins[i] = 1 if U[t, i] < p else -1
        out[t] = spins[site]


# ---------------------------------------------------------------------------
# numpy / scipy reference implementations


def np_label_components(nv, eu, ev, open_, fu, fv):
    a = np.concatenate([fu, eu[open_]])
    b = np.concatenate([fv, ev[open_]])
    graph = coo_matrix((np.ones(a.size, dtype=np.int8), (a, b)), shape=(nv, nv))
    _, comp = connected_components(graph, directed=False)
    mins = np.full(comp.max() + 1, nv, dtype=np.int64)
    np.minimum.at(mins, comp, np.arange(nv))
    return mins[comp]


def np_sw_chunk(nv, eu, ev, prob, fu, fv, omega, U, labels_out, omega_out, record_omega):
    ghost = nv - 1
    for t in range(U.shape[0]):
        labels = np_label_components(nv, eu, ev, omega, fu, fv)
        labels_out[t] = labels
        if record_omega:
            omega_out[t] = omega
        plus = np.where(labels == labels[ghost], True, U[t, labels] < 0.5)
        omega[:] = (plus[eu] == plus[ev]) & (U[t, nv:] < prob)


def _np_propagate(nv, eu, ev, bits, fu, fv):
    """Min-label propagation for a batch of configurations (rows of ``bits``)."""
    B = bits.shape[0]
    labels = np.tile(np.arange(nv, dtype=np.int64), (B, 1))
    all_u = np.concatenate([fu, eu])
    all_v = np.concatenate([fv, ev])
    mask = np.concatenate([np.ones((B, fu.size), dtype=bool), bits], axis=1)
    while True:
        lu, lv = labels[:, all_u], labels[:, all_v]
        low = np.minimum(lu, lv)
        new = labels.copy()
        for k in range(all_u.size):
            m = mask[:, k]
            np.minimum(new[:, all_u[k]], np.where(m, low[:, k], nv), out=new[:, all_u[k]])
            np.minimum(new[:, all_v[k]], np.where(m, low[:, k], nv), out=new[:, all_v[k]])
        # pointer jump: a label is itself a vertex index
        new = np.minimum(new, np.take_along_axis(new, new, axis=1))
        if np.array_equal(new, labels):
            return labels
        labels = new


def _config_bits(start, count, m):
    c = np.arange(start, start + count, dtype=np.int64)
    return ((c[:, None] >> np.arange(m)) & 1).astype(bool)


def np_enumerate_log_weights(nv, eu, ev, logp, log1mp, fu, fv, n_region, chunk=1 << 14):
    m = eu.size
    n = 1 << m
    out = np.empty(n)
    ghost = nv - 1
    for start in range(0, n, chunk):
        count = min(chunk, n - start)
        bits = _config_bits(start, count, m)
        labels = _np_propagate(nv, eu, ev, bits, fu, fv)
        reg = labels[:, :n_region]
        srt = np.sort(reg, axis=1)
        distinct = 1 + (np.diff(srt, axis=1) != 0).sum(axis=1) if n_region else np.zeros(count, np.int64)
        has_ghost = (reg == labels[:, ghost : ghost + 1]).any(axis=1)
        cnt = distinct - has_ghost
        with np.errstate(invalid="ignore"):
            lw = np.where(bits, logp, log1mp).sum(axis=1)
        out[start : start + count] = lw + cnt * LN2
    return out


def np_enumerate_labels(nv, eu, ev, fu, fv, start, count):
    return _np_propagate(nv, eu, ev, _config_bits(start, count, eu.size), fu, fv)


def np_region_stats(site_ptr, sites, site_bits, edge_ptr, edges, eu, ev, open_, coords, full_mask, n_total):
    nreg = site_ptr.size - 1
    n_cross = np.zeros(nreg, np.int64)
    cstar = np.full(nreg, -1, np.int64)
    maxd = np.zeros(nreg, np.int64)
    loc = np.full(n_total, -1, np.int64)
    for r in range(nreg):
        rs = sites[site_ptr[r] : site_ptr[r + 1]]
        n = rs.size
        loc[rs] = np.arange(n)
        es = edges[edge_ptr[r] : edge_ptr[r + 1]]
        es = es[open_[es]]
        lab = np_label_components(n, loc[eu[es]], loc[ev[es]], np.ones(es.size, bool), np.zeros(0, np.int64), np.zeros(0, np.int64))
        bits = np.zeros(n, np.int64)
        np.bitwise_or.at(bits, lab, site_bits[site_ptr[r] : site_ptr[r + 1]])
        size = np.bincount(lab, minlength=n)
        c = coords[rs]
        mn = np.full((n, c.shape[1]), 1 << 60, np.int64)
        mx = np.full((n, c.shape[1]), -(1 << 60), np.int64)
        np.minimum.at(mn, lab, c)
        np.maximum.at(mx, lab, c)
        roots = np.flatnonzero(size > 0)
        crossing = roots[(bits[roots] & full_mask) == full_mask]
        n_cross[r] = crossing.size
        best = -1
        if crossing.size:
            # largest size, ties to the smallest root
            best = int(crossing[np.argmax(size[crossing])])
            cstar[r] = rs[best]
        others = roots[roots != best]
        if others.size:
            maxd[r] = int((mx[others] - mn[others]).max())
        loc[rs] = -1
    return n_cross, cstar, maxd


def np_heat_bath_chunk(spins, ptr, idx, w, ext, beta, U, site, out):
    n = spins.size
    for t in range(U.shape[0]):
        for i in range(n):
            f = ext[i] + beta * float(np.dot(w[ptr[i] : ptr[i + 1]], spins[idx[ptr[i] : ptr[i + 1]]]))
            p = 1.0 / (1.0 + math.exp(-2.0 * f))
            spins[i] = 1 if U[t, i] < p else -1
        out[t] = spins[site]


class _Backend:
    def __init__(self, name, prefix):
        self.name = name
        g = globals()
        for fn in ("label_components", "sw_chunk", "enumerate_log_weights", "enumerate_labels", "region_stats", "heat_bath_chunk"):
            setattr(self, fn, g[prefix + fn])


numpy_impl = _Backend("numpy", "np_")
numba_impl = _Backend("numba", "nb_") if HAVE_NUMBA else None
active = numba_impl if HAVE_NUMBA else numpy_impl
BACKEND = active.name

label_components = active.label_components
sw_chunk = active.sw_chunk
enumerate_log_weights = active.enumerate_log_weights
enumerate_labels = active.enumerate_labels
region_stats = active.region_stats
heat_bath_chunk = active.heat_bath_chunk
