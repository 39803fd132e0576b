import csv
import json
import os
import re
import subprocess
import sys

import pytest

from fklab.cli import ConfigError, ExperimentConfig, load_config, main, parse_kernel, validate
from fklab.fkcore import BoundaryCondition
from fklab.sampler import SamplerState, box_graph


@pytest.mark.parametrize(
    "overrides, needle",
    [
        ({"q": 3}, "q = 3"),
        ({"N": 16, "L": 5}, "L | 2N"),
        ({"N": 15, "L": 5}, "L even"),
        ({"N": 16, "K": 6}, "K constraint"),
        ({"N": 20, "K": 16}, "N = nK/2"),
        ({"N": 24, "K": 16}, "n even"),
        ({"betas": "-0.1"}, "beta >= 0"),
        ({"s": "1.0"}, "s in [0, 1)"),
        ({"bc": "periodic"}, "boundary condition"),
        ({"coupling_q": 0.2, "coupling_qhat": 0.3}, "qhat <= q"),
    ],
)
def test_validation_names_violated_relation(overrides, needle):
    with pytest.raises(ConfigError, match=re.escape(needle)):
        load_config(overrides=overrides)


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[model]\nd = 2\n[box]\nN = 16\nK = 16\n[run]\nbetas = 0.5:0.6:0.05\nseed = 7\n")
    cfg = load_config(path, overrides={"seed": "9"})
    assert cfg.betas == pytest.approx([0.5, 0.55, 0.6]) and cfg.seed == 9 and cfg.K == 16
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(text="[run]\nbogus = 1\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        load_config(text="[extra]\n")


def test_hash_ignores_output_dir():
    a, b = ExperimentConfig(output_dir="x"), ExperimentConfig(output_dir="y")
    assert a.hash() == b.hash() and a.hash() != ExperimentConfig(seed=1).hash()
    validate(a)


def test_kernel_parsing():
    k = parse_kernel("1,0:1; 0,1:1; 2,0:0.5", 2)
    assert k.R == 2
    with pytest.raises(ConfigError):
        parse_kernel("1,0,0:1", 2)


def _read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_every_row_carries_manifest(tmp_path):
    code = main(["coupling-demo", "--coupled-draws", "2000", "--out", str(tmp_path)])
    assert code == 0
    manifest = json.loads((tmp_path / "coupling_demo.manifest.json").read_text())
    rows = _read_csv(tmp_path / "coupling_demo.csv")
    assert rows and all(r["manifest"] == manifest["manifest"] for r in rows)
    for line in (tmp_path / "coupling_demo.jsonl").read_text().splitlines():
        assert json.loads(line)["manifest"] == manifest["manifest"]
    assert manifest["config"]["coupled_draws"] == 2000 and "wall_seconds" not in json.dumps(manifest)


def test_exact_check_exit_code(tmp_path):
    assert main(["exact-check", "--sweeps", "4000", "--betas", "0.6", "--out", str(tmp_path)]) == 0
    assert main(["exact-check", "--q", "3", "--out", str(tmp_path)]) == 2


def test_domination_precondition_exit(tmp_path, capsys):
    args = ["domination", "--N", "16", "--K", "16", "--betas", "0.8", "--samples", "100", "--min-count", "5", "--s", "0.01", "--out", str(tmp_path)]
    assert main(args) == 3
    lines = [json.loads(x) for x in (tmp_path / "domination.jsonl").read_text().splitlines()]
    assert lines[-1]["status"] == "precondition-failed"


def test_coarse_report_beta_zero(tmp_path):
    assert main(["coarse-report", "--K", "16", "--N", "16", "--betas", "0", "--samples", "40", "--out", str(tmp_path)]) == 0
    rows = {r["observable"]: r for r in _read_csv(tmp_path / "coarse_report.csv")}
    assert float(rows["good_fraction"]["mean"]) == 0.0
    assert float(rows["gluing_violations"]["mean"]) == 0


def test_sample_checkpoints_restore(tmp_path):
    assert main(["sample", "--N", "4", "--betas", "0.6", "--sweeps", "64", "--chains", "2", "--out", str(tmp_path)]) == 0
    blob = (tmp_path / "checkpoint_beta0.6_chain1.fklb").read_bytes()
    g = box_graph(4, 2, 0.6, BoundaryCondition.wired())
    state = SamplerState.restore(g, blob, seed=0, chain=1)
    assert state.graph.n_vertices == g.n_vertices
    manifest = json.loads((tmp_path / "sample.manifest.json").read_text())
    assert "checkpoint_beta0.6_chain1.fklb" in manifest["outputs"]


def run_cli(args, out, threads):
    env = dict(os.environ, FKLAB_THREADS=str(threads))
    subprocess.run([sys.executable, "-m", "fklab.cli", *args, "--out", str(out)], check=True, env=env, capture_output=True)
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if not p.name.endswith(".timing.json")}


def test_outputs_identical_across_thread_counts(tmp_path):
    args = ["theta-compare", "--N-grid", "4,6", "--betas", "0.6", "--sweeps", "400", "--chains", "3", "--seed", "5"]
    a = run_cli(args, tmp_path / "a", 1)
    b = run_cli(args, tmp_path / "b", 3)
    assert a.keys() == b.keys() and a == b
