import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from fklab.coarsegrain import (
    BlockGrid,
    BlockWindow,
    adjacency_gluing_check,
    check_block_size,
    classify_block,
    classify_grid,
    core_side,
    extract_contours,
    grid_from_text,
    peierls_decrease,
    peierls_estimate,
    sample_grids,
    separates,
    window_n,
)


@pytest.fixture(scope="module")
def w16():
    return BlockWindow(16, 2, 3)


def test_block_size_rules():
    assert check_block_size(16, 2) == 4 and check_block_size(36, 2) == 6
    for bad in (9, 12, 4, 15):
        with pytest.raises(ValueError):
            check_block_size(bad, 2)
    assert core_side(16, 2) == 2 and core_side(36, 2) == 2 and core_side(81 * 81, 2) == 9
    with pytest.raises(ValueError):
        check_block_size(16, 3)  # floor(16^(1/6)) = 1


def test_window_n():
    assert window_n(16, 16) == 2
    with pytest.raises(ValueError):
        window_n(8, 16)
    with pytest.raises(ValueError):
        window_n(10, 16)


def test_blocks_partition_grid(w16):
    (sp, s, _, _), _ = w16._block_regions
    counts = np.diff(sp)
    assert np.all(counts == 16**2)
    assert np.unique(s).size == s.size == w16.n_blocks * 16**2
    inside = np.all((w16.box.sites >= -w16.G + 1) & (w16.box.sites <= w16.G), axis=1)
    assert set(s.tolist()) == set(np.flatnonzero(inside).tolist())


def test_all_open_fails_only_condition_four(w16):
    g = classify_grid(np.ones(w16.bonds.n_interior, bool), w16)
    assert g.conditions[:, :3].all() and not g.conditions[:, 3].any()
    assert not g.good.any()


def test_all_closed_is_bad(w16):
    g = classify_grid(np.zeros(w16.bonds.n_interior, bool), w16)
    assert not g.conditions[:, 0].any() and not g.good.any()
    assert g.good_fraction() == 0.0


def _close_core_bond(omega, w, centre):
    b = w.bonds.bond_index(centre, (centre[0], centre[1] + 1))
    omega[b] = False


def test_hand_built_two_blocks(w16):
    omega = np.ones(w16.bonds.n_interior, bool)
    _close_core_bond(omega, w16, (0, 0))
    # an isolated two-site cluster inside the core of block (1, 0)
    a, b = (16, 0), (17, 0)
    for x in (a, b):
        for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            y = (x[0] + dx, x[1] + dy)
            if {x, y} != {a, b}:
                omega[w16.bonds.bond_index(x, y)] = False
    v0 = classify_block(omega, w16, (0, 0))
    v1 = classify_block(omega, w16, (16, 0))
    assert v0.good and v0.failed == ()
    assert not v1.good and v1.failed == (2,)
    with pytest.raises(ValueError):
        classify_block(omega, w16, (3, 0))


def test_gluing_fully_open_pair(w16):
    omega = np.ones(w16.bonds.n_interior, bool)
    g = classify_grid(omega, w16)
    assert adjacency_gluing_check(omega, g, conditions=(1, 2, 3)) == 0


def test_gluing_counts_disconnected_pairs(w16):
    omega = np.zeros(w16.bonds.n_interior, bool)
    n = w16.n_blocks
    cstar = np.array([w16.box.index(c) for c in w16.centers])
    grid = BlockGrid(w16, np.ones((n, 4), bool), cstar)
    # every face-adjacent pair of the 3x3 grid: 2 * 3 * 2 = 12
    assert adjacency_gluing_check(omega, grid) == 12
    cond = np.zeros((n, 4), bool)
    assert adjacency_gluing_check(omega, BlockGrid(w16, cond, cstar)) == 0


def test_classifier_deterministic(w16):
    omega = next(iter(sample_grids(w16, 0.8, 1, burn_in=20, seed=3)))[0]
    a, b = classify_grid(omega, w16), classify_grid(omega.copy(), w16)
    assert np.array_equal(a.conditions, b.conditions) and np.array_equal(a.cstar, b.cstar)


def test_text_round_trip(w16):
    g = grid_from_text(w16, "GBG\nBBG\nGGG\n")
    assert g.to_text() == "GBG\nBBG\nGGG\n"
    with pytest.raises(ValueError):
        grid_from_text(w16, "GG\nGG\n")


def test_peierls_all_good():
    w = BlockWindow(16, 2, 5)
    goods = np.ones((200, w.n_blocks), bool)
    rep = peierls_estimate(goods, w, min_count=10)
    assert rep.max_p == 0.0 and len(rep.patterns) == 1
    assert rep.patterns[0].upper == pytest.approx(1 - 0.05 ** (1 / rep.patterns[0].n))


def test_peierls_insufficient_and_decrease():
    w = BlockWindow(16, 2, 5)
    rng = np.random.default_rng(0)
    hi = peierls_estimate(rng.random((400, w.n_blocks)) < 0.5, w, min_count=5)
    lo = peierls_estimate(rng.random((400, w.n_blocks)) < 0.95, w, min_count=5)
    z, passed = peierls_decrease(hi, lo)
    assert passed and z > 0
    assert peierls_estimate(np.ones((2, w.n_blocks), bool), w, min_count=1000).insufficient


def test_contour_all_good():
    w = BlockWindow(16, 2, 7)
    rep = extract_contours(grid_from_text(w, "\n".join(["G" * 7] * 7)), None, (0, 0))
    assert rep.connected and rep.contours == ()


def test_contour_all_bad():
    w = BlockWindow(16, 2, 7)
    rep = extract_contours(grid_from_text(w, "\n".join(["B" * 7] * 7)), None, (0, 0))
    assert not rep.connected and len(rep.contours) == 1
    c = rep.contours[0]
    assert c.gamma.tolist() == [[0, 0]] and c.size == 1 and c.boundary.shape[0] == 0


def test_contour_ring():
    w = BlockWindow(16, 2, 7)
    rows = ["GGGGGGG", "GGGGGGG", "GGBBBGG", "GGBGBGG", "GGBBBGG", "GGGGGGG", "GGGGGGG"]
    grid = grid_from_text(w, "\n".join(rows))
    rep = extract_contours(grid, None, (0, 0))
    assert not rep.connected and len(rep.contours) == 1
    gamma = {tuple(x) for x in rep.contours[0].gamma.tolist()}
    assert gamma == {(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1)} - {(0, 0)}
    assert rep.contours[0].size == 8
    assert separates(grid, rep, (0, 0))
    json.loads(rep.to_json())


@given(st.lists(st.booleans(), min_size=49, max_size=49), st.integers(-2, 2), st.integers(-2, 2))
def test_contour_well_formed(bits, ax, ay):
    w = BlockWindow(16, 2, 7)
    text = "\n".join("".join("G" if b else "B" for b in bits[7 * r : 7 * r + 7]) for r in range(7))
    grid = grid_from_text(w, text)
    anchor = (ax, ay)
    rep = extract_contours(grid, None, anchor)
    if rep.connected:
        return
    for c in rep.contours:
        ids = w.block_id(c.gamma)
        assert not grid.good[ids].any()
        mask = np.zeros((7, 7), bool)
        mask[tuple((c.gamma + 3).T)] = True
        _, k = ndimage.label(mask, structure=np.ones((3, 3), bool))
        assert k == 1
        if c.boundary.size:
            assert grid.good[w.block_id(c.boundary)].all()
            assert not ({tuple(x) for x in c.boundary.tolist()} & {tuple(x) for x in c.gamma.tolist()})
    assert separates(grid, rep, anchor)


def test_good_fraction_pilot_reported():
    w = BlockWindow(16, 2, 5)
    fr = [g.good_fraction() for _, g in sample_grids(w, 0.8, 64, thin=2, seed=5)]
    from fklab.sampler import Estimate

    e = Estimate.from_series(fr)
    assert 0.0 < e.mean < 1.0 and e.stderr > 0


@pytest.mark.xfail(strict=True, reason="pilot threshold >0.9 not reached under the literal four-condition definition at K=16 (observed about 0.45); see decisions ledger")
def test_good_frequency_pilot_threshold():
    w = BlockWindow(16, 2, 5)
    fr = [g.good_fraction() for _, g in sample_grids(w, 0.8, 64, thin=2, seed=6)]
    assert np.mean(fr) > 0.9
