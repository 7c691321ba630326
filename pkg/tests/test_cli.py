import json
import subprocess
import sys

import numpy as np
import pytest

from cfnrecon.cli import main
from cfnrecon.model import read_leaf_csv
from cfnrecon.tree import parse_newick


@pytest.fixture
def workdir(tmp_path):
    tree = tmp_path / "t.nwk"
    assert main(["-q", "gen-tree", "--kind", "complete", "--depth", "2", "--seed", "1", "-o", str(tree)]) == 0
    data = tmp_path / "d.csv"
    assert main(["-q", "simulate", "-t", str(tree), "--samples", "300", "--seed", "2", "-o", str(data)]) == 0
    return tmp_path, tree, data


def test_gen_tree_formats(tmp_path, capsys):
    assert main(["-q", "gen-tree", "--kind", "complete", "--depth", "3"]) == 0
    tree, theta = parse_newick(capsys.readouterr().out.strip())
    # the fused root edge carries the product of two draws
    assert tree.n_leaves == 8 and np.all((theta >= 0.81 - 1e-9) & (theta <= 0.95 + 1e-9))
    for kind in ("caterpillar", "balanced", "random"):
        out = tmp_path / f"{kind}.json"
        assert main(["-q", "gen-tree", "--kind", kind, "--leaves", "7", "--format", "json", "-o", str(out)]) == 0
        assert len(json.loads(out.read_text())["theta"]) >= 11


def test_gen_tree_usage_errors():
    assert main(["-q", "gen-tree", "--kind", "random"]) == 2
    assert main(["-q", "gen-tree", "--box", "0.9"]) == 2
    assert main(["-q", "bogus"]) == 2


def test_simulate(workdir):
    tmp, tree, data = workdir
    t, _ = parse_newick(tree.read_text())
    spins = read_leaf_csv(data, t)
    assert spins.shape == (300, 4) and set(np.unique(spins)) <= {-1, 1}
    theta_out = tmp / "theta.json"
    assert main(["-q", "simulate", "-t", str(tree), "--box", "0.5:0.6", "--samples", "5",
                 "--theta-out", str(theta_out), "-o", str(tmp / "e.csv")]) == 0
    assert all(0.5 <= x <= 0.6 for x in json.loads(theta_out.read_text())["theta"])


def test_magnetize(workdir, capsys):
    tmp, tree, data = workdir
    assert main(["-q", "magnetize", "-t", str(tree), "-d", str(data)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "sample_index,z_u" and len(lines) == 301
    out = tmp / "m.csv"
    assert main(["-q", "magnetize", "-t", str(tree), "-d", str(data), "--sigma", "1", "-o", str(out)]) == 0
    assert main(["-q", "histogram", "-i", str(out), "--bins", "10", "-o", str(tmp / "h.csv")]) == 0
    assert len((tmp / "h.csv").read_text().splitlines()) == 11


def test_loglik_grad_fit(workdir, capsys):
    tmp, tree, data = workdir
    assert main(["-q", "loglik", "-t", str(tree), "-d", str(data), "-o", str(tmp / "ll.csv")]) == 0
    assert json.loads(capsys.readouterr().out)["samples"] == 300
    assert main(["-q", "grad", "-t", str(tree), "-d", str(data)]) == 0
    assert len(json.loads(capsys.readouterr().out)["gradient"]) == 5  # root fused on read
    nwk = tmp / "fit.nwk"
    assert main(["-q", "fit", "-t", str(tree), "-d", str(data), "--newick-out", str(nwk)]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["reason"] in ("converged", "boundary") and doc["loglik"][-1] >= doc["initial_loglik"]
    assert parse_newick(nwk.read_text())[0].n_leaves == 4


def test_theta_override(workdir, capsys):
    tmp, tree, data = workdir
    th = tmp / "th.json"
    th.write_text(json.dumps({"theta": [0.5] * 5}))
    assert main(["-q", "loglik", "-t", str(tree), "-d", str(data), "--theta", str(th)]) == 0
    assert json.loads(capsys.readouterr().out)["mean_log_likelihood"] < 0
    th.write_text(json.dumps({"theta": [0.5] * 4}))
    assert main(["-q", "loglik", "-t", str(tree), "-d", str(data), "--theta", str(th)]) == 1


def test_missing_file_exit_code(tmp_path):
    assert main(["-q", "loglik", "-t", str(tmp_path / "nope.nwk"), "-d", "x.csv"]) == 1


def test_experiment_tail(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("tree_size = 3\nsamples = 5000\ndeltas = [0.1, 0.05]\n")
    rc = main(["-q", "experiment", "tail", "--config", str(cfg), "--samples", "2000", "--csv", str(tmp_path / "t.csv"),
               "--histogram", str(tmp_path / "h.csv"), "--samples-out", str(tmp_path / "s.csv")])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["config"]["samples"] == 2000 and doc["config"]["tree_size"] == 3
    assert len((tmp_path / "s.csv").read_text().splitlines()) == 4001
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"smaples": 3}))
    assert main(["-q", "experiment", "tail", "--config", str(bad)]) == 1


def test_experiment_scaling_and_others(tmp_path, capsys):
    assert main(["-q", "experiment", "scaling", "--size", "3", "--samples", "3000", "--deltas", "0.16,0.08"]) == 1
    assert main(["-q", "experiment", "scaling", "--size", "3", "--samples", "20000",
                 "--deltas", "0.16,0.08,0.04"]) == 0
    assert json.loads(capsys.readouterr().out)["kind"] == "scaling"
    assert main(["-q", "experiment", "independence", "--size", "3", "--samples", "2000"]) == 0
    assert json.loads(capsys.readouterr().out)["kind"] == "independence"
    assert main(["-q", "experiment", "gradient", "--samples", "500", "--deltas", "0.1,0.05"]) == 0
    assert len(json.loads(capsys.readouterr().out)["reports"]) == 2
    assert main(["-q", "experiment", "init-sweep", "--leaves", "4", "--samples", "0", "--deltas", "0.1"]) == 0
    assert json.loads(capsys.readouterr().out)["mode"] == "population"


def test_help_and_entry_point():
    assert main(["--help"]) == 0
    assert main(["experiment", "tail", "--help"]) == 0
    out = subprocess.run([sys.executable, "-m", "cfnrecon.cli", "gen-tree", "--depth", "1"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip().endswith(";")
    assert "arguments:" in out.stderr
