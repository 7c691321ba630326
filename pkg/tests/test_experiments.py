import json

import numpy as np
import pytest

from cfnrecon.experiments import (
    ExperimentConfig,
    InsufficientEventsError,
    cluster_summary,
    emit_histogram,
    exact_population_gradient,
    gradient_delta_sweep,
    gradient_population_experiment,
    histogram_counts,
    independence_experiment,
    init_sweep_experiment,
    load_config_file,
    one_sweep_error,
    run_tail_point,
    scaling_experiment,
    scaling_slopes,
    sweep_tree,
    tail_experiment,
    wilson_interval,
)
from cfnrecon.likelihood import population_gradient_closed_form
from cfnrecon.model import ParameterBox
from cfnrecon.tree import complete_tree

SMALL = ExperimentConfig(tree_size=3, deltas=(0.16, 0.08, 0.04), samples=5000, seed=1)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(deltas=())
    with pytest.raises(ValueError):
        ExperimentConfig(deltas=(0.6,))
    with pytest.raises(ValueError):
        ExperimentConfig(samples=0)
    with pytest.raises(ValueError):
        ExperimentConfig(true_box=(0.5, 0.25))
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"samples": 10, "colour": "red"})


def test_config_roundtrip_and_overrides():
    cfg = ExperimentConfig.from_dict(json.loads(json.dumps(SMALL.to_dict())))
    assert cfg == SMALL
    assert SMALL.updated(samples=7, seed=None).samples == 7
    assert SMALL.updated(seed=None).seed == 1


def test_config_files(tmp_path):
    toml = tmp_path / "c.toml"
    toml.write_text('tree_kind = "caterpillar"\ntree_size = 12\ndeltas = [0.1, 0.05]\nsamples = 100\n')
    cfg = ExperimentConfig.from_dict(load_config_file(toml))
    assert cfg.tree_kind == "caterpillar" and cfg.deltas == (0.1, 0.05)
    js = tmp_path / "c.json"
    js.write_text(json.dumps({"samples": 50}))
    assert load_config_file(js) == {"samples": 50}


def test_default_tier_constants():
    c = ExperimentConfig().tier_constants()
    assert (c.C_rec, c.c_rec, c.c_anti, c.C_anti) == pytest.approx((80, 3.5, 2 / 3, 19.5))
    assert ExperimentConfig(constants={"C_rec": 1, "c_rec": 1, "c_anti": 0.5, "C_anti": 1, "delta0": 0.01}) \
        .tier_constants().C_rec == 1


def test_wilson_interval():
    lo, hi = wilson_interval(0, 100)
    assert lo == 0.0 and 0 < hi < 0.05
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi and hi - 0.5 == pytest.approx(0.5 - lo)


def test_tail_independent_of_threads():
    a = run_tail_point(SMALL, 0.08, 0, threads=1)
    b = run_tail_point(SMALL, 0.08, 0, threads=4)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    c = run_tail_point(SMALL.updated(seed=2), 0.08, 0)
    assert not np.array_equal(a[1], c[1])


def test_tail_report(tmp_path):
    rep = tail_experiment(SMALL, keep_samples=True)
    assert [r.delta for r in rep.rows] == list(SMALL.deltas)
    for r in rep.rows:
        assert sum(r.counts.values()) == SMALL.samples
        assert sum(r.frequencies.values()) == pytest.approx(1.0)
        assert r.regime == "extrapolated" and r.strict_check is None
        lo, hi = r.wilson95["good"]
        assert lo <= r.frequencies["good"] <= hi
    severe = [r.frequencies["severe"] for r in rep.rows]
    assert severe == sorted(severe, reverse=True)
    # at delta=0.16 the good threshold is below -1, so only severe outcomes fail
    assert rep.rows[0].counts["moderate"] == 0
    doc = json.loads(rep.to_json())
    assert doc["schema_version"] == 1 and doc["kind"] == "trichotomy"
    path = tmp_path / "t.csv"
    rep.write_csv(path)
    assert len(path.read_text().splitlines()) == 1 + 3 * len(SMALL.deltas)
    sigma, z = rep.samples[0.08]
    assert sigma.shape == z.shape == (SMALL.samples,)


def test_strict_regime_check():
    cfg = ExperimentConfig(tree_size=3, deltas=(1 / 1200,), samples=4096)
    row = tail_experiment(cfg).rows[0]
    assert row.regime == "strict"
    assert row.strict_check["passed"]
    assert row.counts["severe"] == 0


def test_scaling_needs_three_points():
    with pytest.raises(ValueError):
        scaling_experiment(SMALL.updated(deltas=(0.1, 0.05)))


def test_scaling_slopes_small():
    rep = scaling_experiment(SMALL.updated(samples=20000))
    assert rep.slopes["moderate"] is not None and 0.3 < rep.slopes["moderate"] < 2.0
    assert json.loads(rep.to_json())["kind"] == "scaling"


def test_scaling_insufficient_events():
    cfg = ExperimentConfig(tree_size=3, deltas=(0.004, 0.002, 0.001), samples=200)
    with pytest.raises(InsufficientEventsError):
        scaling_experiment(cfg)
    slopes, _, used, notes = scaling_slopes(tail_experiment(cfg))
    assert slopes["severe"] is None and used["severe"] == [] and notes


def test_histogram(tmp_path):
    sigma = np.array([1, -1, 1, 1])
    z = np.array([0.95, 0.5, -0.1, 1.0])
    counts, edges = histogram_counts(sigma, z, 4)
    assert counts.tolist() == [0, 2, 0, 2] and edges[0] == -1 and edges[-1] == 1
    path = tmp_path / "h.csv"
    emitted = emit_histogram(sigma, z, 4, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("bin_left") and len(lines) == 5
    assert emitted.sum() == 4
    with pytest.raises(ValueError):
        histogram_counts(sigma, z, 1)


def test_cluster_summary():
    sigma = np.ones(5)
    s = cluster_summary(sigma, np.array([0.95, 0.1, -0.1, -0.7, 0.99]))
    assert s["near_plus_one"] == pytest.approx(0.4)


def test_independence_small():
    rep = independence_experiment(complete_tree(3), ParameterBox(0.1), ParameterBox(0.1), 20000, seed=4)
    assert rep.passed and rep.bound == pytest.approx(4 / np.sqrt(20000))
    assert json.loads(rep.to_json())["passed"] is True
    same = independence_experiment(complete_tree(3), ParameterBox(0.1), ParameterBox(0.1), 20000, seed=4, threads=1)
    assert same.corr_uv == rep.corr_uv


def test_independence_explicit_pair_matches_default():
    tree = complete_tree(3)
    u, v = tree.neighbors(tree.root)
    a = independence_experiment(tree, ParameterBox(0.1), ParameterBox(0.1), 3000, 0)
    b = independence_experiment(tree, ParameterBox(0.1), ParameterBox(0.1), 3000, 0, u=u, v=v)
    assert (a.u, a.v, a.corr_uv) == (b.u, b.v, b.corr_uv)
    with pytest.raises(ValueError):
        independence_experiment(tree, ParameterBox(0.1), ParameterBox(0.1), 1, 0)


def test_exact_gradient_two_leaf(two_leaf):
    tree, _ = two_leaf
    ex = exact_population_gradient(tree, [0.8], [0.6])
    assert ex[0] == pytest.approx(population_gradient_closed_form(0.8, 0.6), abs=1e-14)


def test_gradient_experiment_fields(quartet):
    tree, _ = quartet
    th = np.full(tree.edge_count, 0.9)
    rep = gradient_population_experiment(tree, th, th - 0.02, 2000, seed=0, delta=0.05)
    assert len(rep.rows) == tree.edge_count
    r = rep.rows[0]
    assert r.exact is not None and r.stderr > 0 and r.ratio_to_delta == pytest.approx(r.difference / 0.05)
    with pytest.raises(ValueError):
        gradient_population_experiment(tree, th, th, 1, seed=0)
    sweep = gradient_delta_sweep(tree, [0.1, 0.05], 500, seed=1)
    assert [g.delta for g in sweep] == [0.1, 0.05]


def test_one_sweep_two_leaf_lands_on_truth(two_leaf):
    tree, _ = two_leaf
    assert one_sweep_error(tree, [0.85], [0.5]) < 1e-9


def test_init_sweep_population_and_sampled():
    tree = sweep_tree(4, 0)
    pop = init_sweep_experiment(tree, [0.1, 0.05], seed=0)
    assert pop.mode == "population" and pop.rows[0].error_se is None
    assert pop.rows[0].error > pop.rows[1].error
    samp = init_sweep_experiment(tree, [0.1], seed=0, samples=2000, replicates=2)
    assert samp.mode == "sampled" and samp.rows[0].replicates == 2 and samp.rows[0].error_se is not None
    assert json.loads(samp.to_json())["kind"] == "init-sweep"
