"""Command-line experiment runner.

Configuration is an INI file (sections ``model``, ``box``, ``run``,
``coupling``, ``output``); command-line flags override single keys. Every
emitted CSV row and JSON line carries the hash of the resolved configuration,
which is also written to ``manifest.json`` next to the outputs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import chisquare

from . import __version__
from .coarsegrain import (
    BlockWindow,
    adjacency_gluing_check,
    check_block_size,
    extract_contours,
    peierls_decrease,
    peierls_estimate,
    sample_grids,
)
from .domination import (
    ConstantOracle,
    DominationSetup,
    PreconditionFailure,
    alpha_from_samples,
    couple,
    domination_chain_report,
    sample_Z,
    sample_Zhat,
    zhat_bound_check,
)
from .fkcore import BondOpen, BoundaryCondition, Connected, FKGraph, exact_distribution_graph, origin_to_boundary
from .lattice import Box, enumerate_bonds, slab_partition
from .model import Q, CouplingKernel, IntensityTable, bond_intensity, boundary_intensity, field_from_intensity
from .sampler import Estimate, SamplerState, box_graph, chain_rng, estimate_events, event_series, iter_sweeps

CSV_COLUMNS = ["beta", "h", "N", "L", "K", "bc", "observable", "mean", "stderr", "n_samples", "seed", "manifest"]
CSV_VERSION = 1


class ConfigError(ValueError):
    pass


def _floats(text):
    text = str(text).strip()
    if not text:
        return []
    if ":" in text and "," not in text:
        lo, hi, step = (float(x) for x in text.split(":"))
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + i * step, 12) for i in range(n)]
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in _floats(text)]


def parse_kernel(spec: str, d: int, J: float = 1.0) -> CouplingKernel:
    """``nearest-neighbor`` or ``"dx,dy:J; dx,dy:J"`` pairs."""
    spec = spec.strip()
    if spec in ("nearest-neighbor", "nn"):
        return CouplingKernel.nearest_neighbor(d, J)
    pairs = []
    for item in spec.split(";"):
        if not item.strip():
            continue
        disp, val = item.split(":")
        pairs.append(([int(c) for c in disp.split(",")], float(val)))
    k = CouplingKernel.from_pairs(pairs)
    if k.d != d:
        raise ConfigError(f"kernel dimension {k.d} does not match d={d}")
    return k


@dataclass
class ExperimentConfig:
    d: int = 2
    q: int = 2
    kernel: str = "nearest-neighbor"
    J: float = 1.0
    N: int = 16
    N_grid: list = field(default_factory=list)
    L: int = 2
    K: int | None = None
    K_grid: list = field(default_factory=list)
    window_rings: int = 2
    window_blocks: int = 5
    betas: list = field(default_factory=lambda: [0.6])
    h: float | None = None
    s: float | None = None
    s_grid: list = field(default_factory=list)
    bc: str = "wired"
    pattern: str = ""
    sweeps: int = 10000
    burn_in: int | None = None
    chains: int = 1
    seed: int = 0
    samples: int = 500
    thin: int = 2
    min_count: int = 100
    psi_sweeps: int = 1000
    field_samples: int = 20000
    coupled_draws: int = 20000
    coupling_q: float = 0.5
    coupling_qhat: float = 0.3
    coupling_M: int = 4
    output_dir: str = "fklab-out"

    def coupling_kernel(self) -> CouplingKernel:
        return parse_kernel(self.kernel, self.d, self.J)

    def canonical(self) -> dict:
        out = asdict(self)
        out.pop("output_dir")
        return out

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {
    "model": ["d", "q", "kernel", "J"],
    "box": ["N", "N_grid", "L", "K", "K_grid", "window_rings", "window_blocks"],
    "run": ["betas", "h", "s", "s_grid", "bc", "pattern", "sweeps", "burn_in", "chains", "seed", "samples", "thin", "min_count", "psi_sweeps", "field_samples"],
    "coupling": ["coupled_draws", "coupling_q", "coupling_qhat", "coupling_M"],
    "output": ["output_dir"],
}
_LISTS = {"N_grid": _ints, "K_grid": _ints, "betas": _floats, "s_grid": _floats}


def _convert(name, raw):
    raw = str(raw).strip()
    if name in _LISTS:
        return _LISTS[name](raw)
    kind = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    if raw == "" or raw.lower() == "none":
        if "None" in str(kind):
            return None
        raise ConfigError(f"{name} needs a value")
    if "int" in str(kind):
        return int(float(raw))
    if "float" in str(kind):
        return float(raw)
    return raw


def load_config(path=None, text=None, overrides=None) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh)
    if text is not None:
        cp.read_string(text)
    values = {}
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in cp.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _convert(key, raw)
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = _convert(key, raw) if isinstance(raw, str) else raw
    cfg = ExperimentConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.q != Q:
        raise ConfigError(f"q = {cfg.q} not supported: only q = 2 (Ising) is implemented")
    if cfg.d < 1:
        raise ConfigError("d >= 1 violated")
    cfg.coupling_kernel()
    for N in [cfg.N] + list(cfg.N_grid):
        if N < 1:
            raise ConfigError(f"N >= 1 violated: N={N}")
    if cfg.N_grid and list(cfg.N_grid) != sorted(cfg.N_grid):
        raise ConfigError("N grid must be ascending")
    if cfg.L < 1 or (2 * cfg.N) % cfg.L:
        raise ConfigError(f"L | 2N violated: L={cfg.L} does not divide 2N={2 * cfg.N}")
    if cfg.d >= 2 and cfg.L % 2:
        raise ConfigError(f"L even violated: slabs need an even width in d={cfg.d}, got L={cfg.L}")
    for K in ([cfg.K] if cfg.K is not None else []) + list(cfg.K_grid):
        try:
            check_block_size(K, cfg.d)
        except ValueError as exc:
            raise ConfigError(f"K constraint violated: {exc}") from None
    if cfg.K is not None:
        if (2 * cfg.N) % cfg.K:
            raise ConfigError(f"N = nK/2 violated: N={cfg.N}, K={cfg.K}")
        if (2 * cfg.N // cfg.K) % 2:
            raise ConfigError(f"N = nK/2 with n even violated: n={2 * cfg.N // cfg.K}")
        if cfg.window_rings < 2:
            raise ConfigError("window >= Lambda_{N+3K/2} + 2 block rings violated")
    if cfg.window_blocks < 3 or cfg.window_blocks % 2 == 0:
        raise ConfigError("window_blocks must be odd and >= 3")
    for b in cfg.betas:
        if b < 0:
            raise ConfigError(f"beta >= 0 violated: {b}")
    if cfg.h is not None and cfg.h < 0:
        raise ConfigError("h >= 0 violated")
    for s in ([cfg.s] if cfg.s is not None else []) + list(cfg.s_grid):
        if not 0 <= s < 1:
            raise ConfigError(f"s in [0, 1) violated: {s}")
    if cfg.bc not in ("free", "wired", "mixed", "field"):
        raise ConfigError(f"unknown boundary condition {cfg.bc!r}")
    if cfg.sweeps < 2 * 16 or cfg.chains < 1:
        raise ConfigError("sweeps must allow 16 batches of 2 and chains >= 1")
    if cfg.burn_in is not None and not 0 <= cfg.burn_in < cfg.sweeps:
        raise ConfigError("0 <= burn_in < sweeps violated")
    if not 0 <= cfg.coupling_qhat <= cfg.coupling_q <= 1:
        raise ConfigError("0 <= qhat <= q <= 1 violated")


# ---------------------------------------------------------------------------
# output


def threads_from_env() -> int:
    try:
        return max(1, int(os.environ.get("FKLAB_THREADS", "1")))
    except ValueError:
        return 1


class Output:
    """Collects CSV rows and JSON lines for one run; writes them with a manifest."""

    def __init__(self, cfg: ExperimentConfig, command: str, directory=None):
        self.cfg = cfg
        self.command = command
        self.hash = cfg.hash()
        self.dir = Path(directory or os.environ.get("FKLAB_OUTPUT_DIR") or cfg.output_dir)
        self.rows: list[dict] = []
        self.lines: list[dict] = []
        self.extra: dict[str, str] = {}
        self.binary: dict[str, bytes] = {}
        self.t0 = time.perf_counter()

    def row(self, observable, est: Estimate | None = None, *, mean=None, stderr=None, n=None, beta="", h="", N="", L="", K="", bc=""):
        if est is not None:
            mean, stderr, n = est.mean, est.stderr, est.n
        self.rows.append(
            {
                "beta": _fmt(beta),
                "h": _fmt(h),
                "N": _fmt(N),
                "L": _fmt(L),
                "K": _fmt(K),
                "bc": bc,
                "observable": observable,
                "mean": _fmt(mean),
                "stderr": _fmt(stderr),
                "n_samples": _fmt(n),
                "seed": self.cfg.seed,
                "manifest": self.hash,
            }
        )

    def line(self, obj: dict):
        obj = dict(obj)
        obj["manifest"] = self.hash
        self.lines.append(obj)

    def text(self, name, content):
        self.extra[name] = content

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def jsonl_text(self) -> str:
        return "".join(json.dumps(o, sort_keys=True, default=_json_default) + "\n" for o in self.lines)

    def write(self) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        files = {}
        stem = self.command.replace("-", "_")
        if self.rows:
            files[f"{stem}.csv"] = self.csv_text()
        if self.lines:
            files[f"{stem}.jsonl"] = self.jsonl_text()
        files.update(self.extra)
        for name, content in files.items():
            (self.dir / name).write_text(content)
        for name, blob in self.binary.items():
            (self.dir / name).write_bytes(blob)
        manifest = {
            "manifest": self.hash,
            "command": self.command,
            "code_version": __version__,
            "csv_version": CSV_VERSION,
            "config": self.cfg.canonical(),
            "seeds": {"seed": self.cfg.seed, "chains": list(range(self.cfg.chains))},
            "outputs": sorted([*files, *self.binary]),
        }
        (self.dir / f"{stem}.manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1, default=_json_default) + "\n")
        # wall time varies between runs, so it lives outside the manifest
        (self.dir / f"{stem}.timing.json").write_text(json.dumps({"manifest": self.hash, "wall_seconds": time.perf_counter() - self.t0}) + "\n")
        return self.dir


def _fmt(x):
    if x is None or x == "":
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    return str(o)


# ---------------------------------------------------------------------------
# commands


def _bc_for(cfg, box, kernel, kind=None, pattern=None):
    kind = kind or cfg.bc
    if kind == "free":
        return BoundaryCondition.free()
    if kind == "wired":
        return BoundaryCondition.wired()
    if kind == "mixed":
        part = slab_partition(box, kernel, cfg.L if (2 * box.N) % cfg.L == 0 else 2 * box.N)
        pat = pattern if pattern is not None else cfg.pattern
        if not pat:
            pat = "".join("1" if k % 2 == 0 else "0" for k in range(part.M))
        bits = np.array([c == "1" for c in pat])
        if bits.size != part.M:
            raise ConfigError(f"pattern needs {part.M} bits, got {bits.size}")
        return BoundaryCondition.mixed(part, bits)
    raise ConfigError(f"boundary condition {kind!r} not usable here")


def exact_cases(cfg: ExperimentConfig):
    """Enumerable graphs and their observables: ``(name, graph, [(label, event)])``."""
    cases = []
    kernel2 = CouplingKernel.nearest_neighbor(2)
    p_half = 0.5
    g = FKGraph.from_edges(2, [(0, 1)], p_half)
    cases.append(("single-bond", "free", "", g, [("P(open)", BondOpen(0))]))
    for beta in cfg.betas:
        p = float(bond_intensity(beta, 1.0))
        for bc, links in (("free", []), ("wired", [0, 1]), ("mixed", [0])):
            g = FKGraph.from_edges(2, [(0, 1)], p, ghost_links=links)
            cases.append(("single-bond", bc, beta, g, [("P(open)", BondOpen(0))]))
        box = Box(1, 2)
        bonds = enumerate_bonds(box, kernel2)
        it = IntensityTable.from_couplings(bonds.J, beta)
        for bc in ("free", "wired", "mixed"):
            pat = "1000" if bc == "mixed" else None
            cond = _bc_for(replace(cfg, L=2), box, kernel2, bc, pat)
            g = FKGraph.from_box(box, kernel2, cond, it, bonds=bonds)
            diag = box.index((1, 1))
            obs = [(f"P(open e{e})", BondOpen(e)) for e in range(bonds.n_interior)]
            obs.append(("P(0<->diag)", Connected(box.origin, diag)))
            cases.append(("box2x2", bc, beta, g, obs))
    return cases


def cmd_exact_check(cfg: ExperimentConfig, out: Output | None = None, z_fail: float = 4.0):
    """Sampler against enumeration; returns ``(passed, records)``."""
    out = out or Output(cfg, "exact-check")
    records = []
    threads = threads_from_env()
    for i, (name, bc, beta, g, obs) in enumerate(exact_cases(cfg)):
        ed = exact_distribution_graph(g)
        est = estimate_events(g, [e for _, e in obs], cfg.sweeps, cfg.burn_in, cfg.chains, cfg.seed + i, threads)
        for (label, ev), e in zip(obs, est):
            exact = ed.event_probability(ev)
            z = e.z_against(exact)
            rec = {"graph": name, "bc": bc, "beta": beta, "p": float(g.prob[0]), "observable": label, "exact": exact, "mean": e.mean, "stderr": e.stderr, "z": z, "converged": e.converged}
            records.append(rec)
            out.row(f"{name}:{label}", e, beta=beta, N=1 if name == "box2x2" else "", bc=bc)
            out.line(rec)
    passed = all(abs(r["z"]) <= z_fail for r in records)
    out.line({"summary": "exact-check", "passed": passed, "max_abs_z": max(abs(r["z"]) for r in records), "n_cases": len(records)})
    return passed, records, out


def theta_pair(N, d, beta, sweeps, seed, kernel=None, burn_in=None, chains=1, threads=1):
    """Free and wired ``P(0 <-> exterior)`` from chains with common random numbers.

    Returns ``(free, wired, gap)`` estimates; the gap uses the paired series.
    """
    gf = box_graph(N, d, beta, BoundaryCondition.free(), kernel)
    gw = box_graph(N, d, beta, BoundaryCondition.wired(), kernel)
    ev_f, ev_w = origin_to_boundary(gf), origin_to_boundary(gw)

    def one(c):
        sf = event_series(gf, [ev_f], sweeps, burn_in, seed, c)[0]
        sw = event_series(gw, [ev_w], sweeps, burn_in, seed, c)[0]
        return Estimate.from_series(sf), Estimate.from_series(sw), Estimate.difference(sw, sf)

    from .sampler import _map_chains, merge_all

    res = _map_chains(one, chains, threads)
    return tuple(merge_all(r[i] for r in res) for i in range(3))


def cmd_theta_compare(cfg: ExperimentConfig, out: Output | None = None):
    out = out or Output(cfg, "theta-compare")
    kernel = cfg.coupling_kernel()
    grid = cfg.N_grid or [cfg.N]
    table = {}
    for beta in cfg.betas:
        gaps = []
        for N in grid:
            f, w, gap = theta_pair(N, cfg.d, beta, cfg.sweeps, cfg.seed, kernel, cfg.burn_in, cfg.chains, threads_from_env())
            table[(beta, N)] = (f, w, gap)
            out.row("theta_f", f, beta=beta, N=N, bc="free")
            out.row("theta_w", w, beta=beta, N=N, bc="wired")
            out.row("gap", gap, beta=beta, N=N, bc="wired-free")
            gaps.append(gap)
        mono = all(gaps[i + 1].mean <= gaps[i].mean + 3 * math.hypot(gaps[i].stderr, gaps[i + 1].stderr) for i in range(len(gaps) - 1))
        out.line({"beta": beta, "N": grid, "gap": [g.mean for g in gaps], "gap_stderr": [g.stderr for g in gaps], "gap_nonincreasing": mono})
    return table, out


def cmd_magnetization_curve(cfg: ExperimentConfig, out: Output | None = None):
    """Wired ``P(0 <-> boundary)`` over the beta grid with common random numbers."""
    out = out or Output(cfg, "magnetization-curve")
    kernel = cfg.coupling_kernel()
    series, ests = [], []
    for beta in cfg.betas:
        g = box_graph(cfg.N, cfg.d, beta, BoundaryCondition.wired(), kernel)
        s = np.concatenate([event_series(g, [Connected(g.origin, g.ghost)], cfg.sweeps, cfg.burn_in, cfg.seed, c)[0] for c in range(cfg.chains)])
        series.append(s)
        e = Estimate.from_series(s)
        ests.append(e)
        out.row("m", e, beta=beta, N=cfg.N, bc="wired")
    diffs = []
    for i in range(len(ests) - 1):
        paired = Estimate.difference(series[i + 1], series[i])
        combined = math.hypot(ests[i].stderr, ests[i + 1].stderr)
        diffs.append({"beta_lo": cfg.betas[i], "beta_hi": cfg.betas[i + 1], "diff": ests[i + 1].mean - ests[i].mean, "paired_stderr": paired.stderr, "combined_sigma": combined})
        out.row("m_diff", paired, beta=cfg.betas[i + 1], N=cfg.N, bc="wired")
    monotone = all(d["diff"] >= -3 * d["paired_stderr"] for d in diffs)
    max_ratio = max((abs(d["diff"]) / d["combined_sigma"] if d["combined_sigma"] > 0 else (0.0 if d["diff"] == 0 else math.inf)) for d in diffs) if diffs else 0.0
    summary = {"summary": "magnetization-curve", "monotone": monotone, "max_diff_over_sigma": max_ratio, "continuity_ok": max_ratio < 5.0, "diffs": diffs}
    out.line(summary)
    return ests, summary, out


def _window_for(cfg, K):
    return BlockWindow(K, cfg.d, cfg.window_blocks, cfg.coupling_kernel())


def cmd_coarse_report(cfg: ExperimentConfig, out: Output | None = None, dumps: int = 3):
    out = out or Output(cfg, "coarse-report")
    K = cfg.K if cfg.K is not None else 16
    w = _window_for(cfg, K)
    res = {}
    for beta in cfg.betas:
        frac, conds, viol = [], [], []
        for i, (om, grid) in enumerate(sample_grids(w, beta, cfg.samples, cfg.thin, seed=cfg.seed)):
            frac.append(grid.good_fraction())
            conds.append(grid.conditions.mean(axis=0))
            viol.append(adjacency_gluing_check(om, grid))
            if i < dumps:
                out.text(f"grid_beta{beta:g}_K{K}_{i}.txt", grid.to_text())
                rep = extract_contours(grid, None, np.zeros(cfg.d, dtype=np.int64))
                out.line({"beta": beta, "K": K, "sample": i, "contours": json.loads(rep.to_json())})
        e = Estimate.from_series(np.asarray(frac), n_batches=min(32, len(frac) // 2)) if len(frac) >= 32 else Estimate(float(np.mean(frac)), float(np.std(frac) / math.sqrt(max(len(frac), 1))), len(frac), float(len(frac)))
        out.row("good_fraction", e, beta=beta, K=K, bc="free")
        c = np.mean(conds, axis=0)
        for j in range(4):
            out.row(f"condition{j + 1}", mean=float(c[j]), n=len(frac), beta=beta, K=K, bc="free")
        out.row("gluing_violations", mean=int(np.sum(viol)), n=len(viol), beta=beta, K=K, bc="free")
        res[beta] = {"good": e, "conditions": c, "violations": viol}
    return res, out


def peierls_run(cfg, K, beta, chain=0):
    w = _window_for(cfg, K)
    goods, viol = [], []
    for om, grid in sample_grids(w, beta, cfg.samples, cfg.thin, seed=cfg.seed, chain=chain):
        goods.append(grid.good)
        viol.append(adjacency_gluing_check(om, grid))
    return peierls_estimate(goods, w, min_count=cfg.min_count), viol


def cmd_peierls(cfg: ExperimentConfig, out: Output | None = None):
    out = out or Output(cfg, "peierls")
    Ks = cfg.K_grid or [cfg.K or 16]
    result = {}
    for beta in cfg.betas:
        reps = []
        for K in Ks:
            rep, viol = peierls_run(cfg, K, beta)
            reps.append(rep)
            out.row("max_bad_given_neighbours", mean=rep.max_p, stderr=rep.max_stderr, n=rep.n_samples, beta=beta, K=K, bc="free")
            out.row("gluing_violations", mean=int(sum(viol)), n=len(viol), beta=beta, K=K, bc="free")
            out.line({"beta": beta, "K": K, **rep.to_json(), "gluing_violations": int(sum(viol))})
        trend = [peierls_decrease(reps[i], reps[i + 1]) for i in range(len(reps) - 1)]
        out.line({"beta": beta, "K": Ks, "decrease_z": [t[0] for t in trend], "decreases": [t[1] for t in trend]})
        result[beta] = (reps, trend)
    return result, out


def cmd_domination(cfg: ExperimentConfig, out: Output | None = None):
    out = out or Output(cfg, "domination")
    K = cfg.K if cfg.K is not None else 16
    setup = DominationSetup(cfg.N, cfg.d, K, cfg.L, cfg.window_rings, cfg.coupling_kernel())
    beta = cfg.betas[0]
    out.line({"setup": setup.describe(), "beta": beta})
    Zs, Xs, Ys = sample_Z(setup, beta, cfg.samples, cfg.thin, seed=cfg.seed)
    alpha = alpha_from_samples(Zs, cfg.min_count)
    out.line({"alpha": alpha.to_json(), "X_freq": Xs.mean(axis=0), "Y_freq": Ys.mean(axis=0), "Z_freq": Zs.mean(axis=0)})
    out.row("alpha", mean=alpha.alpha, n=alpha.n_samples, beta=beta, N=cfg.N, L=cfg.L, K=K, bc="free")
    h = cfg.h
    if h is None and cfg.s is not None:
        h = float(field_from_intensity(cfg.s))
    try:
        rep = domination_chain_report(setup, beta, h, cfg.samples, cfg.field_samples, cfg.coupled_draws, cfg.psi_sweeps, cfg.thin, cfg.seed, cfg.min_count, Zs=Zs)
    except PreconditionFailure as exc:
        out.line(exc.to_json())
        return {"status": "precondition-failed", "alpha": alpha, "error": exc}, out
    for name, e in (("a_psi_Z_free", rep.a), ("b_psi_Zhat_coupled", rep.b), ("c_field_connectivity", rep.c), ("b_psi_Zhat_direct", rep.b_direct)):
        out.row(name, e, beta=beta, h=rep.h, N=cfg.N, L=cfg.L, K=K, bc="sandwich")
    out.line({"sandwich": rep.to_json()})
    return {"status": "ok", "alpha": alpha, "report": rep}, out


def coupling_gof(chain: np.ndarray, q: float) -> float:
    """Chi-square p-value of the ``2^M`` pattern counts against iid Bernoulli(q)."""
    n, M = chain.shape
    codes = (chain.astype(np.int64) << np.arange(M)).sum(axis=1)
    obs = np.bincount(codes, minlength=1 << M)
    ones = np.array([bin(c).count("1") for c in range(1 << M)])
    exp = n * q**ones * (1 - q) ** (M - ones)
    return float(chisquare(obs, exp).pvalue)


def cmd_coupling_demo(cfg: ExperimentConfig, out: Output | None = None):
    out = out or Output(cfg, "coupling-demo")
    q, qh, M, n = cfg.coupling_q, cfg.coupling_qhat, cfg.coupling_M, cfg.coupled_draws
    oq, oqh = ConstantOracle(q, lower=q), ConstantOracle(qh, upper=qh)
    joint = couple(oq, oqh, M, chain_rng(cfg.seed, 0), n)
    cells = joint.cell_counts()
    total = n * M
    expected = {(1, 0): q - qh, (1, 1): qh, (0, 0): 1 - q, (0, 1): 0.0}
    z = {}
    for key, p in expected.items():
        f = cells[key] / total
        se = math.sqrt(p * (1 - p) / total) if 0 < p < 1 else 0.0
        z[key] = (f - p) / se if se > 0 else (0.0 if f == p else math.inf)
        out.row(f"cell{key[0]}{key[1]}", mean=f, stderr=se, n=total, bc="coupling")
    p_z, p_zh = coupling_gof(joint.Z, q), coupling_gof(joint.Zhat, qh)
    summary = {
        "cells": {f"{a}{b}": c for (a, b), c in cells.items()},
        "z": {f"{a}{b}": v for (a, b), v in z.items()},
        "gof_p_Z": p_z,
        "gof_p_Zhat": p_zh,
        "ordered": joint.ordered,
        "oracle_violations": oq.violations + oqh.violations,
    }
    out.line(summary)
    return summary, out


def cmd_zhat_bound(cfg: ExperimentConfig, out: Output | None = None):
    out = out or Output(cfg, "zhat-bound")
    K = cfg.K if cfg.K is not None else 16
    setup = DominationSetup(cfg.N, cfg.d, K, cfg.L, cfg.window_rings, cfg.coupling_kernel())
    beta = cfg.betas[0]
    reports = []
    for s in cfg.s_grid or [cfg.s if cfg.s is not None else 0.01]:
        h = float(field_from_intensity(s))
        Zh, _ = sample_Zhat(setup, beta, h, cfg.field_samples, cfg.thin, seed=cfg.seed)
        rep = zhat_bound_check(Zh, setup, s, cfg.min_count)
        reports.append(rep)
        out.row("zhat_worst_excess_sigma", mean=rep.worst_excess, n=cfg.field_samples, beta=beta, h=h, N=cfg.N, L=cfg.L, bc="field")
        out.line(rep.to_json())
    return reports, out


def cmd_sample(cfg: ExperimentConfig, out: Output | None = None):
    """Raw sampling run with per-chain checkpoints."""
    out = out or Output(cfg, "sample")
    kernel = cfg.coupling_kernel()
    box = Box(cfg.N, cfg.d)
    for beta in cfg.betas:
        if cfg.bc == "field":
            h = cfg.h if cfg.h is not None else float(field_from_intensity(cfg.s))
            g = box_graph(cfg.N, cfg.d, beta, BoundaryCondition.wired(), kernel, h)
        else:
            h = ""
            it = IntensityTable.from_couplings(enumerate_bonds(box, kernel).J, beta)
            g = FKGraph.from_box(box, kernel, _bc_for(cfg, box, kernel), it)
        ev = origin_to_boundary(g)
        ests = []
        for c in range(cfg.chains):
            state = SamplerState.create(g, cfg.seed, c)
            burn = int(round(0.2 * cfg.sweeps)) if cfg.burn_in is None else cfg.burn_in
            for _ in iter_sweeps(state, burn):
                pass
            xs = [ev(lab) for lab, _ in iter_sweeps(state, cfg.sweeps - burn)]
            ests.append(Estimate.from_series(np.concatenate(xs)))
            out.binary[f"checkpoint_beta{beta:g}_chain{c}.fklb"] = state.checkpoint()
        from .sampler import merge_all

        out.row("P(0<->boundary)", merge_all(ests), beta=beta, h=h, N=cfg.N, L=cfg.L, bc=cfg.bc)
    return out


COMMANDS = {
    "exact-check": cmd_exact_check,
    "theta-compare": cmd_theta_compare,
    "magnetization-curve": cmd_magnetization_curve,
    "coarse-report": cmd_coarse_report,
    "peierls": cmd_peierls,
    "domination": cmd_domination,
    "zhat-bound": cmd_zhat_bound,
    "coupling-demo": cmd_coupling_demo,
    "sample": cmd_sample,
}

_FLAG_KEYS = [f.name for f in fields(ExperimentConfig)]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fklab", description="Finite-volume random-cluster (q=2) experiments.")
    p.add_argument("--version", action="version", version=f"fklab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--out", help="output directory (overrides config and FKLAB_OUTPUT_DIR)")
        for key in _FLAG_KEYS:
            if key == "output_dir":
                continue
            sp.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="VALUE")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: getattr(args, k) for k in _FLAG_KEYS if k != "output_dir" and getattr(args, k, None) is not None}
    try:
        cfg = load_config(args.config, overrides=overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Output(cfg, args.command, args.out)
    result = COMMANDS[args.command](cfg, out)
    path = out.write()
    status = 0
    if args.command == "exact-check":
        status = 0 if result[0] else 1
    elif args.command == "domination" and result[0]["status"] != "ok":
        status = 3
    print(f"{args.command}: wrote {path} (manifest {out.hash})")
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
