import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fklab import kernels
from fklab.coarsegrain import BlockWindow, classify_grid, sample_configs
from fklab.fkcore import BoundaryCondition
from fklab.sampler import _spin_couplings, box_graph
from fklab.lattice import Box
from fklab.model import CouplingKernel

pytestmark = pytest.mark.skipif(kernels.numba_impl is None, reason="numba not available")
NB, NP = kernels.numba_impl, kernels.numpy_impl


def _graph(n, edges, fixed):
    e = np.array(edges, dtype=np.int64).reshape(-1, 2)
    f = np.array(fixed, dtype=np.int64).reshape(-1, 2)
    return e[:, 0].copy(), e[:, 1].copy(), f[:, 0].copy(), f[:, 1].copy()


small_graphs = st.integers(2, 9).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda e: e[0] != e[1]), min_size=1, max_size=12),
        st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=3),
        st.integers(0, 2**31),
    )
)


@given(small_graphs)
def test_label_components_agree(case):
    n, edges, fixed, seed = case
    eu, ev, fu, fv = _graph(n, edges, fixed)
    open_ = np.random.default_rng(seed).random(eu.size) < 0.5
    assert np.array_equal(NB.label_components(n, eu, ev, open_, fu, fv), NP.label_components(n, eu, ev, open_, fu, fv))


@given(small_graphs)
def test_sw_chunk_agree(case):
    n, edges, fixed, seed = case
    eu, ev, fu, fv = _graph(n, edges, fixed)
    rng = np.random.default_rng(seed)
    prob = rng.random(eu.size)
    U = rng.random((6, n + eu.size))
    outs = []
    for b in (NB, NP):
        omega = np.zeros(eu.size, bool)
        lab = np.empty((6, n), np.int64)
        om = np.empty((6, eu.size), bool)
        b.sw_chunk(n, eu, ev, prob, fu, fv, omega, U, lab, om, True)
        outs.append((lab, om, omega))
    for x, y in zip(*outs):
        assert np.array_equal(x, y)


@given(st.integers(2, 7).flatmap(lambda n: st.tuples(st.just(n), st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)).filter(lambda e: e[0] != e[1]), min_size=1, max_size=10), st.floats(0.05, 0.95))))
def test_enumeration_agree(case):
    n, edges, p = case
    eu, ev, fu, fv = _graph(n + 1, edges, [(0, n)])
    logp, log1mp = np.full(eu.size, np.log(p)), np.full(eu.size, np.log1p(-p))
    a = NB.enumerate_log_weights(n + 1, eu, ev, logp, log1mp, fu, fv, n)
    b = NP.enumerate_log_weights(n + 1, eu, ev, logp, log1mp, fu, fv, n)
    assert np.allclose(a, b, atol=1e-12, rtol=0)
    m = 1 << eu.size
    assert np.array_equal(NB.enumerate_labels(n + 1, eu, ev, fu, fv, 0, m), NP.enumerate_labels(n + 1, eu, ev, fu, fv, 0, m))


def test_region_stats_agree():
    w = BlockWindow(16, 2, 3)
    saved = kernels.region_stats
    for seed in range(3):
        omega = next(iter(sample_configs(w, 0.8, 1, burn_in=20, seed=seed)))
        grids = []
        for b in (NB, NP):
            kernels.region_stats = b.region_stats
            try:
                grids.append(classify_grid(omega, w))
            finally:
                kernels.region_stats = saved
        assert np.array_equal(grids[0].conditions, grids[1].conditions)
        assert np.array_equal(grids[0].cstar, grids[1].cstar)


def test_heat_bath_agree():
    box = Box(3, 2)
    ptr, idx, w, ext, _ = _spin_couplings(box, CouplingKernel.nearest_neighbor(2))
    U = np.random.default_rng(0).random((20, box.size))
    res = []
    for b in (NB, NP):
        spins = np.ones(box.size, np.int64)
        out = np.empty(20, np.int64)
        b.heat_bath_chunk(spins, ptr, idx, w, 0.5 * ext, 0.5, U, box.origin, out)
        res.append((spins, out))
    assert np.array_equal(res[0][0], res[1][0]) and np.array_equal(res[0][1], res[1][1])


def test_disable_switch_gives_numpy_backend_and_same_chain():
    code = (
        "import numpy as np, sys\n"
        "from fklab import kernels\n"
        "from fklab.fkcore import BoundaryCondition, origin_to_boundary\n"
        "from fklab.sampler import box_graph, event_series\n"
        "g = box_graph(5, 2, 0.6, BoundaryCondition.free())\n"
        "s = event_series(g, [origin_to_boundary(g)], 300, seed=4)[0]\n"
        "sys.stdout.write(kernels.BACKEND + ' ' + ''.join('1' if x else '0' for x in s))\n"
    )
    env = dict(os.environ, FKLAB_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    backend, bits = out.split()
    assert backend == "numpy"
    g = box_graph(5, 2, 0.6, BoundaryCondition.free())
    from fklab.fkcore import origin_to_boundary
    from fklab.sampler import event_series

    ref = event_series(g, [origin_to_boundary(g)], 300, seed=4)[0]
    assert bits == "".join("1" if x else "0" for x in ref)
    assert kernels.BACKEND == "numba"
