"""Command-line entry point: ``cfnrecon <subcommand> ...``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import experiments as ex
from .estimator import FitConfig, fit
from .likelihood import grad_all, gradient_report_json, log_likelihood, write_loglik_csv
from .magnetization import (
    default_constants,
    read_magnetization_csv,
    root_magnetization,
    write_magnetization_csv,
    classify_trichotomy,
)
from .model import ParameterBox, read_leaf_csv, sample_leaves, sample_parameters, write_leaf_csv
from .tree import (
    TreeTopology,
    descendant_subtree,
    experiment_tree,
    parse_newick,
    random_binary_tree,
    whole_tree_view,
    write_newick,
)

log = logging.getLogger("cfnrecon")


class UsageError(Exception):
    pass


def _interval(text: str):
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi, got {text!r}") from None
    if not 0 < lo <= hi <= 1:
        raise argparse.ArgumentTypeError("need 0 < lo <= hi <= 1")
    return lo, hi


def _floats(text: str):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _write(path, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        with open(path, "w") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")


def _read_tree(path):
    with open(path) as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        tree, theta = TreeTopology.from_json(text)
    else:
        tree, theta = parse_newick(text)
    return tree, theta


def _theta_override(path, tree):
    if path is None:
        return None
    with open(path) as fh:
        doc = json.load(fh)
    theta = np.asarray(doc["theta"] if isinstance(doc, dict) else doc, dtype=float)
    if theta.shape != (tree.edge_count,):
        raise ValueError(f"theta file has {theta.size} values, tree has {tree.edge_count} edges")
    return theta


def _box(interval) -> ParameterBox:
    lo, hi = interval
    if hi >= 1:
        raise ValueError("box upper end must be < 1")
    return ParameterBox.from_interval(lo, hi)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_tree(args):
    rng = np.random.default_rng(args.seed)
    if args.kind == "random":
        if args.leaves is None:
            raise UsageError("--kind random needs --leaves")
        tree = random_binary_tree(args.leaves, rng)
    else:
        size = args.depth if args.kind == "complete" else args.leaves
        if size is None:
            raise UsageError(f"--kind {args.kind} needs --{'depth' if args.kind == 'complete' else 'leaves'}")
        tree, _ = experiment_tree(args.kind, size)
    theta = sample_parameters(tree, _box(args.box), rng)
    log.info("generated %s tree: %d leaves, %d edges", args.kind, tree.n_leaves, tree.edge_count)
    _write(args.output, tree.to_json(theta) if args.format == "json" else write_newick(tree, theta))


def cmd_simulate(args):
    tree, theta = _read_tree(args.tree)
    if args.box is not None:
        theta = sample_parameters(tree, _box(args.box), np.random.default_rng([args.seed, 1]))
    if np.any(theta <= 0):
        raise ValueError("simulation needs every theta in (0, 1]")
    spins = sample_leaves(tree, theta, args.samples, args.seed)
    write_leaf_csv(args.output, tree, spins)
    if args.theta_out:
        _write(args.theta_out, json.dumps({"schema_version": 1, "theta": theta.tolist()}))
    log.info("wrote %d x %d leaf matrix to %s", *spins.shape, args.output)


def _view_for(tree, node, away):
    if node is None:
        if tree.root >= 0:
            return whole_tree_view(tree)
        return whole_tree_view(tree, int(np.flatnonzero(np.asarray(tree.degree) > 1)[0]))
    u = tree.resolve_node(node)
    if away is None:
        return whole_tree_view(tree, u)
    return descendant_subtree(tree, u, tree.resolve_node(away))


def cmd_magnetize(args):
    tree, theta = _read_tree(args.tree)
    theta = _theta_override(args.theta, tree) if args.theta else theta
    spins = read_leaf_csv(args.data, tree)
    view = _view_for(tree, args.node, args.away)
    z = np.atleast_1d(root_magnetization(view, theta, spins))
    if args.sigma is not None:
        sigma = np.full(len(z), args.sigma, dtype=np.int8)
        write_magnetization_csv(args.output, sigma, z, classify_trichotomy(sigma, z, args.delta, default_constants()))
    else:
        lines = ["sample_index,z_u"] + [f"{i},{v!r}" for i, v in enumerate(z.tolist())]
        _write(args.output, "\n".join(lines))


def cmd_loglik(args):
    tree, theta = _read_tree(args.tree)
    theta = _theta_override(args.theta, tree) if args.theta else theta
    spins = read_leaf_csv(args.data, tree)
    ll = np.atleast_1d(log_likelihood(tree, theta, spins))
    if args.output:
        write_loglik_csv(args.output, ll)
    print(json.dumps({"schema_version": 1, "samples": len(ll), "mean_log_likelihood": float(ll.mean())}))


def cmd_grad(args):
    tree, theta = _read_tree(args.tree)
    theta = _theta_override(args.theta, tree) if args.theta else theta
    spins = read_leaf_csv(args.data, tree)
    g = np.atleast_2d(grad_all(tree, theta, spins)).mean(axis=0)
    labels = [list(map(int, tree.edge_endpoints[e])) for e in range(tree.edge_count)]
    _write(args.output, gradient_report_json(g, labels))


def cmd_fit(args):
    tree, theta = _read_tree(args.tree)
    spins = read_leaf_csv(args.data, tree)
    init = _theta_override(args.init, tree) if args.init else theta
    kw = dict(tol=args.tol, max_sweeps=args.max_sweeps, threshold=args.threshold)
    config = FitConfig.full_range(**kw) if args.full_range else FitConfig(**kw)
    init = np.clip(init, config.theta_min, config.theta_max)
    result = fit(tree, spins, init, config)
    log.info("fit finished after %d sweeps (%s)", result.sweeps, result.reason)
    _write(args.output, result.to_json())
    if args.newick_out:
        _write(args.newick_out, write_newick(tree, result.theta))


# flag name -> ExperimentConfig field for the tail and scaling subcommands
_TAIL_FLAGS = {
    "kind": "tree_kind", "size": "tree_size", "deltas": "deltas", "samples": "samples", "seed": "seed",
    "fixed_pair": "fixed_pair", "bins": "bins", "output": "output", "histogram": "histogram",
}


def _experiment_config(args) -> ex.ExperimentConfig:
    doc = ex.load_config_file(args.config) if args.config else {}
    cfg = ex.ExperimentConfig.from_dict(doc)
    overrides = {field: getattr(args, flag) for flag, field in _TAIL_FLAGS.items()}
    if args.true_box is not None:
        overrides["true_box"] = args.true_box
    if args.hat_box is not None:
        overrides["hat_box"] = args.hat_box
    return cfg.updated(**overrides)


def cmd_exp_tail(args):
    cfg = _experiment_config(args)
    log.info("resolved config: %s", json.dumps(cfg.to_dict()))
    report = ex.tail_experiment(cfg, threads=args.threads, keep_samples=bool(cfg.histogram or args.samples_out))
    _write(cfg.output, report.to_json())
    if args.csv:
        report.write_csv(args.csv)
    if cfg.histogram or args.samples_out:
        sigma = np.concatenate([report.samples[d][0] for d in cfg.deltas])
        z = np.concatenate([report.samples[d][1] for d in cfg.deltas])
        if cfg.histogram:
            ex.emit_histogram(sigma, z, cfg.bins, cfg.histogram)
        if args.samples_out:
            tiers = np.concatenate([classify_trichotomy(*report.samples[d], d, cfg.tier_constants()) for d in cfg.deltas])
            write_magnetization_csv(args.samples_out, sigma, z, tiers)


def cmd_exp_scaling(args):
    cfg = _experiment_config(args)
    log.info("resolved config: %s", json.dumps(cfg.to_dict()))
    report = ex.scaling_experiment(cfg, threads=args.threads)
    _write(cfg.output, report.to_json())


def _merged(args, names, defaults):
    doc = ex.load_config_file(args.config) if args.config else {}
    unknown = set(doc) - set(names) - {"schema_version"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for name in names:
        flag = getattr(args, name)
        out[name] = flag if flag is not None else doc.get(name, defaults[name])
    log.info("resolved config: %s", json.dumps(out))
    return out


INDEPENDENCE_DEFAULTS = dict(kind="complete", size=5, delta=0.1, samples=100_000, seed=0, fresh=False, output=None)
GRADIENT_DEFAULTS = dict(leaves=4, deltas=[0.1, 0.05, 0.025], samples=200_000, seed=0, output=None)
INIT_DEFAULTS = dict(leaves=16, deltas=[0.1, 0.05, 0.025], samples=100_000, replicates=3, seed=0, output=None)


def cmd_exp_independence(args):
    c = _merged(args, list(INDEPENDENCE_DEFAULTS), INDEPENDENCE_DEFAULTS)
    tree, _ = experiment_tree(c["kind"], c["size"])
    box = ParameterBox(c["delta"])
    report = ex.independence_experiment(tree, box, box, c["samples"], c["seed"], fixed_pair=not c["fresh"],
                                        threads=args.threads)
    _write(c["output"], report.to_json())


def cmd_exp_gradient(args):
    c = _merged(args, list(GRADIENT_DEFAULTS), GRADIENT_DEFAULTS)
    tree = ex.sweep_tree(c["leaves"], c["seed"])
    reports = ex.gradient_delta_sweep(tree, c["deltas"], c["samples"], c["seed"])
    doc = {"schema_version": ex.SCHEMA_VERSION, "kind": "gradient-sweep", "n_leaves": tree.n_leaves,
           "reports": [r.to_dict() for r in reports]}
    _write(c["output"], json.dumps(doc, indent=2))


def cmd_exp_init_sweep(args):
    c = _merged(args, list(INIT_DEFAULTS), INIT_DEFAULTS)
    tree = ex.sweep_tree(c["leaves"], c["seed"])
    samples = c["samples"] or None  # 0 selects population mode
    report = ex.init_sweep_experiment(tree, c["deltas"], c["seed"], samples=samples, replicates=c["replicates"])
    _write(c["output"], report.to_json())


def cmd_histogram(args):
    sigma, z = read_magnetization_csv(args.input)
    counts = ex.emit_histogram(sigma, z, args.bins, args.output)
    log.info("histogram of %d samples over %d bins", int(counts.sum()), args.bins)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="cfnrecon", description=__doc__, formatter_class=fmt)
    p.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    s = sub.add_parser("gen-tree", help="generate a tree with edge parameters", formatter_class=fmt)
    s.add_argument("--kind", choices=["complete", "caterpillar", "balanced", "random"], default="complete")
    s.add_argument("--depth", type=int, help="depth for --kind complete")
    s.add_argument("--leaves", type=int, help="leaf count for the other kinds")
    s.add_argument("--box", type=_interval, default=(0.9, 0.95), help="theta interval lo:hi for edge parameters")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", choices=["newick", "json"], default="newick")
    s.add_argument("-o", "--output", default="-", help="output path ('-' for stdout)")
    s.set_defaults(func=cmd_gen_tree)

    s = sub.add_parser("simulate", help="sample leaf spins by broadcasting", formatter_class=fmt)
    s.add_argument("-t", "--tree", required=True, help="Newick or JSON tree; lengths give theta")
    s.add_argument("--box", type=_interval, help="redraw theta uniformly from lo:hi instead of the tree lengths")
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--theta-out", help="write the theta used as JSON")
    s.add_argument("-o", "--output", required=True, help="leaf CSV path")
    s.set_defaults(func=cmd_simulate)

    def data_cmd(name, helptext, func):
        s = sub.add_parser(name, help=helptext, formatter_class=fmt)
        s.add_argument("-t", "--tree", required=True, help="Newick or JSON tree; lengths give theta_hat")
        s.add_argument("-d", "--data", required=True, help="leaf CSV")
        s.add_argument("--theta", help="JSON file with theta_hat overriding the tree lengths")
        s.add_argument("-o", "--output", default="-")
        s.set_defaults(func=func)
        return s

    s = data_cmd("magnetize", "root magnetization for each sample", cmd_magnetize)
    s.add_argument("--node", help="label or id of u (default: tree root or first internal node)")
    s.add_argument("--away", help="neighbour of u excluded from the descendant subtree")
    s.add_argument("--sigma", type=int, choices=[-1, 1], help="known spin at u; adds tier columns")
    s.add_argument("--delta", type=float, default=0.1, help="delta for tier classification")
    s = data_cmd("loglik", "per-sample log-likelihood", cmd_loglik)
    s.set_defaults(output=None)
    data_cmd("grad", "mean per-edge gradient of the log-likelihood", cmd_grad)

    s = sub.add_parser("fit", help="fit edge parameters by coordinate maximization", formatter_class=fmt)
    s.add_argument("-t", "--tree", required=True, help="tree; lengths give the initial theta")
    s.add_argument("-d", "--data", required=True, help="leaf CSV")
    s.add_argument("--init", help="JSON file with the initial theta")
    s.add_argument("--tol", type=float, default=FitConfig.tol, help="bisection tolerance")
    s.add_argument("--max-sweeps", type=int, default=FitConfig.max_sweeps)
    s.add_argument("--threshold", type=float, default=FitConfig.threshold, help="stop when max change is below")
    s.add_argument("--full-range", action="store_true", help="search [-0.999, 0.999] instead of [0.01, 1-1e-9]")
    s.add_argument("--newick-out", help="also write the fitted tree as Newick")
    s.add_argument("-o", "--output", default="-")
    s.set_defaults(func=cmd_fit)

    e = sub.add_parser("experiment", help="Monte Carlo experiments", formatter_class=fmt)
    esub = e.add_subparsers(dest="experiment", required=True, metavar="EXPERIMENT")

    def exp_parser(name, helptext, func, defaults=None):
        s = esub.add_parser(name, help=helptext, formatter_class=fmt,
                            description=None if defaults is None else f"defaults: {json.dumps(defaults)}")
        s.add_argument("--config", help="JSON or TOML config; flags override it")
        s.add_argument("--threads", type=int, default=ex.default_threads(),
                       help=f"worker threads (env {ex.THREADS_ENV})")
        s.set_defaults(func=func)
        return s

    tail_defaults = ex.ExperimentConfig().to_dict()
    for name, func, helptext in (("tail", cmd_exp_tail, "trichotomy tier counts per delta"),
                                 ("scaling", cmd_exp_scaling, "log-log slopes of failure tiers")):
        s = exp_parser(name, helptext, func, tail_defaults)
        s.add_argument("--kind", choices=["complete", "caterpillar", "balanced"], help="tree kind")
        s.add_argument("--size", type=int, help="depth (complete) or leaf count")
        s.add_argument("--deltas", type=_floats, help="comma-separated delta grid")
        s.add_argument("--true-box", type=_floats, help="c_lo,c_hi of the true box")
        s.add_argument("--hat-box", type=_floats, help="c_lo,c_hi of the estimate box")
        s.add_argument("--samples", type=int, help="replicates per delta")
        s.add_argument("--seed", type=int)
        s.add_argument("--fixed-pair", action="store_const", const=True, help="one (theta*, theta_hat) draw per delta")
        s.add_argument("--bins", type=int, help="histogram bins")
        s.add_argument("-o", "--output", help="report JSON path (stdout if unset)")
        s.add_argument("--histogram", help="histogram CSV path")
        if name == "tail":
            s.add_argument("--csv", help="per-tier CSV path")
            s.add_argument("--samples-out", help="per-replicate magnetization CSV path")

    s = exp_parser("independence", "correlations of unsigned magnetizations", cmd_exp_independence,
                   INDEPENDENCE_DEFAULTS)
    s.add_argument("--kind", choices=["complete", "caterpillar", "balanced"])
    s.add_argument("--size", type=int)
    s.add_argument("--delta", type=float)
    s.add_argument("--samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--fresh", action="store_const", const=True, help="fresh parameter draws per replicate")
    s.add_argument("-o", "--output")

    s = exp_parser("gradient", "population gradient against the closed form", cmd_exp_gradient, GRADIENT_DEFAULTS)
    s.add_argument("--leaves", type=int)
    s.add_argument("--deltas", type=_floats)
    s.add_argument("--samples", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("-o", "--output")

    s = exp_parser("init-sweep", "one-sweep initialization error", cmd_exp_init_sweep, INIT_DEFAULTS)
    s.add_argument("--leaves", type=int)
    s.add_argument("--deltas", type=_floats)
    s.add_argument("--samples", type=int, help="leaf samples per replicate; 0 for population mode")
    s.add_argument("--replicates", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("-o", "--output")

    s = sub.add_parser("histogram", help="histogram of sigma*Z from a magnetization CSV", formatter_class=fmt)
    s.add_argument("-i", "--input", required=True)
    s.add_argument("--bins", type=int, default=200)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_histogram)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("arguments: %s", {k: v for k, v in vars(args).items() if k != "func"})
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"cfnrecon: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, OSError, KeyError) as exc:
        print(f"cfnrecon: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
