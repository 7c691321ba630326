"""
Monte Carlo harnesses for the reconstruction tails, independence of
unsigned magnetizations, the population gradient and the one-sweep
initialization bound.

All randomness is drawn per block of ``model.BLOCK`` replicates from
``default_rng([seed, stream, block])``, and blocks are reduced in index
order, so reports do not depend on the number of worker threads.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction

import numpy as np
from scipy import stats

from .estimator import FitConfig, coordinate_sweep
from .likelihood import grad_all, population_gradient_closed_form
from .magnetization import (
    MODERATE,
    SEVERE,
    TIER_NAMES,
    TrichotomyConstants,
    classify_trichotomy,
    constants_from_box,
    root_magnetization,
)
from .model import BLOCK, ParameterBox, block_rng, enumerate_leaf_distribution, propagate_from, sample_leaves
from .tree import TreeTopology, descendant_subtree, experiment_tree, random_binary_tree, whole_tree_view

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
THREADS_ENV = "CFNRECON_THREADS"
MIN_EVENTS = 10
# block index reserved for draws shared by all replicates (fixed-pair mode)
_SHARED_BLOCK = 2**31


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map_blocks(fn, n: int, threads: int | None):
    """``[fn(b, k) for each block]`` in block order, possibly on a thread pool."""
    jobs = [(b, min(BLOCK, n - b * BLOCK)) for b in range(-(-n // BLOCK))]
    threads = threads or default_threads()
    if threads <= 1 or len(jobs) <= 1:
        return [fn(b, k) for b, k in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings shared by the tail and scaling experiments.

    ``true_box`` and ``hat_box`` are ``(c_lo, c_hi)``; the box at ``delta``
    is ``[1 - 2 c_hi delta, 1 - 2 c_lo delta]``.  ``constants`` overrides the
    tier constants derived from the boxes.
    """

    tree_kind: str = "complete"
    tree_size: int = 6
    deltas: tuple = (0.16, 0.08, 0.04, 0.02)
    true_box: tuple = (0.25, 0.5)
    hat_box: tuple = (0.25, 0.5)
    samples: int = 400_000
    seed: int = 0
    fixed_pair: bool = False
    bins: int = 200
    output: str | None = None
    histogram: str | None = None
    constants: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        object.__setattr__(self, "true_box", tuple(float(c) for c in self.true_box))
        object.__setattr__(self, "hat_box", tuple(float(c) for c in self.hat_box))
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not self.deltas:
            raise ValueError("delta grid is empty")
        c_hi = max(self.true_box[1], self.hat_box[1])
        for d in self.deltas:
            if not (0 < d < 0.5 and c_hi * d < 0.5):
                raise ValueError(f"delta {d} outside (0, 1/2) or c_hi*delta >= 1/2")
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        # validates the box constants
        self.boxes(self.deltas[0])

    def boxes(self, delta: float):
        return ParameterBox(delta, *self.true_box), ParameterBox(delta, *self.hat_box)

    def tier_constants(self) -> TrichotomyConstants:
        if self.constants is not None:
            return TrichotomyConstants(**{k: float(v) for k, v in self.constants.items()})
        frac = lambda x: Fraction(x).limit_denominator(10**6)  # noqa: E731
        return constants_from_box(frac(self.hat_box[0]), frac(self.hat_box[1]), frac(self.true_box[1])).as_float()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["deltas"] = list(self.deltas)
        d["true_box"] = list(self.true_box)
        d["hat_box"] = list(self.hat_box)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known - {"schema_version"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in doc.items() if k in known})

    def updated(self, **overrides) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def load_config_file(path) -> dict:
    """Parse a JSON or TOML file (chosen by extension) into a dict."""
    path = str(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def wilson_interval(k: int, n: int, level: float = 0.95):
    ci = stats.binomtest(int(k), int(n)).proportion_ci(confidence_level=level, method="wilson")
    return float(ci.low), float(ci.high)


# ---------------------------------------------------------------------------
# Reconstruction tails
# ---------------------------------------------------------------------------


@dataclass
class TierRow:
    delta: float
    counts: dict
    frequencies: dict
    wilson95: dict
    thresholds: dict
    bounds: dict
    regime: str
    strict_check: dict | None = None


@dataclass
class TrichotomyReport:
    config: dict
    constants: dict
    rows: list
    samples: dict = field(default_factory=dict, repr=False)  # delta -> (sigma, z)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "trichotomy",
            "config": self.config,
            "constants": self.constants,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["schema_version", "delta", "tier", "count", "frequency", "wilson_lo", "wilson_hi", "regime"])
            for r in self.rows:
                for name in TIER_NAMES:
                    lo, hi = r.wilson95[name]
                    w.writerow([SCHEMA_VERSION, r.delta, name, r.counts[name], r.frequencies[name], lo, hi, r.regime])


def _tail_block(tree, view, box_true, box_hat, seed, stream, block, k, fixed):
    rng = block_rng(seed, stream, block)
    E = tree.edge_count
    if fixed is None:
        theta_true = box_true.from_unit(rng.random((k, E)))
        theta_hat = box_hat.from_unit(rng.random((k, E)))
    else:
        theta_true, theta_hat = fixed
    root_spin = rng.choice(np.array([-1, 1], dtype=np.int8), size=k)
    full = propagate_from(tree, theta_true, view.root, root_spin, rng.random((k, E)))
    z = root_magnetization(view, theta_hat, full[:, list(tree.leaf_ids)])
    return full[:, view.root], z


def _fixed_pair(config, tree, box_true, box_hat, stream):
    rng = block_rng(config.seed, stream, _SHARED_BLOCK)
    return box_true.from_unit(rng.random(tree.edge_count)), box_hat.from_unit(rng.random(tree.edge_count))


def run_tail_point(config: ExperimentConfig, delta: float, stream: int, tree=None, view=None, threads=None):
    """``(sigma_root, Z_root)`` arrays for ``config.samples`` replicates at one ``delta``."""
    if tree is None:
        tree, view = experiment_tree(config.tree_kind, config.tree_size)
    box_true, box_hat = config.boxes(delta)
    fixed = _fixed_pair(config, tree, box_true, box_hat, stream) if config.fixed_pair else None

    def one(b, k):
        return _tail_block(tree, view, box_true, box_hat, config.seed, stream, b, k, fixed)

    parts = _map_blocks(one, config.samples, threads)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def tail_experiment(config: ExperimentConfig, threads: int | None = None, keep_samples: bool = False) -> TrichotomyReport:
    """Tier counts at every ``delta`` of the grid (stream ``i`` for the ``i``-th delta)."""
    consts = config.tier_constants()
    tree, view = experiment_tree(config.tree_kind, config.tree_size)
    matches_default = config.true_box == (0.25, 0.5) and config.hat_box == (0.25, 0.5)
    rows, kept = [], {}
    for i, delta in enumerate(config.deltas):
        sigma, z = run_tail_point(config, delta, i, tree, view, threads)
        tiers = classify_trichotomy(sigma, z, delta, consts)
        n = len(tiers)
        counts = np.bincount(tiers, minlength=3)
        strict = delta <= consts.delta0
        row = TierRow(
            delta=delta,
            counts={name: int(counts[t]) for t, name in enumerate(TIER_NAMES)},
            frequencies={name: float(counts[t] / n) for t, name in enumerate(TIER_NAMES)},
            wilson95={name: wilson_interval(counts[t], n) for t, name in enumerate(TIER_NAMES)},
            thresholds={"good_min": 1.0 - consts.C_rec * delta**2, "severe_max": -consts.c_anti},
            bounds={"not_good_max": consts.c_rec * delta, "severe_max": consts.C_anti * delta**2},
            regime="strict" if strict else "extrapolated",
        )
        if strict and matches_default:
            # the delta^2 severe bound is too rare to count here; only the order-delta bound is checked
            limit = consts.c_rec * delta + 4.0 * math.sqrt(consts.c_rec * delta / n)
            observed = float((counts[MODERATE] + counts[SEVERE]) / n)
            row.strict_check = {"not_good_frequency": observed, "limit": limit, "passed": observed <= limit}
        rows.append(row)
        if keep_samples:
            kept[delta] = (sigma, z)
        log.info("delta=%g counts=%s", delta, row.counts)
    return TrichotomyReport(config.to_dict(), consts.as_dict(), rows, kept)


@dataclass
class ScalingReport:
    deltas: list
    slopes: dict
    stderr: dict
    used: dict
    notes: list
    tails: TrichotomyReport

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": "scaling",
            "deltas": self.deltas,
            "slopes": self.slopes,
            "stderr": self.stderr,
            "used_deltas": self.used,
            "notes": self.notes,
            "tails": self.tails.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class InsufficientEventsError(ValueError):
    pass


def scaling_slopes(report: TrichotomyReport, min_events: int = MIN_EVENTS):
    """Log-log slope of failure frequency against delta for each failure tier."""
    slopes, errs, used, notes = {}, {}, {}, []
    for tier in ("moderate", "severe"):
        pts = [(r.delta, r.frequencies[tier]) for r in report.rows if r.counts[tier] >= min_events]
        skipped = [r.delta for r in report.rows if r.counts[tier] < min_events]
        if skipped:
            notes.append(f"{tier}: excluded delta {skipped} (< {min_events} events)")
        used[tier] = [d for d, _ in pts]
        if len(pts) < 2:
            slopes[tier] = errs[tier] = None
            notes.append(f"{tier}: insufficient events for a slope")
            continue
        x = np.log([d for d, _ in pts])
        y = np.log([f for _, f in pts])
        fit = stats.linregress(x, y)
        slopes[tier] = float(fit.slope)
        errs[tier] = float(fit.stderr) if len(pts) > 2 else None
    return slopes, errs, used, notes


def scaling_experiment(config: ExperimentConfig, threads: int | None = None) -> ScalingReport:
    if len(config.deltas) < 3:
        raise ValueError("scaling experiment needs at least 3 delta values")
    tails = tail_experiment(config, threads)
    slopes, errs, used, notes = scaling_slopes(tails)
    if all(s is None for s in slopes.values()):
        raise InsufficientEventsError("no failure tier has enough events on the grid")
    return ScalingReport(list(config.deltas), slopes, errs, used, notes, tails)


# ---------------------------------------------------------------------------
# Histogram
# ---------------------------------------------------------------------------


def histogram_counts(sigma, z, bins: int):
    """Counts of ``sigma*Z`` over ``bins`` equal bins of [-1, 1]."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    zeta = np.clip(np.asarray(sigma) * np.asarray(z, dtype=float), -1.0, 1.0)
    counts, edges = np.histogram(zeta, bins=bins, range=(-1.0, 1.0))
    return counts, edges


def emit_histogram(sigma, z, bins: int, path) -> np.ndarray:
    """Write ``bin_left, bin_right, count, frequency`` rows; returns the counts."""
    counts, edges = histogram_counts(sigma, z, bins)
    total = max(int(counts.sum()), 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_left", "bin_right", "count", "frequency"])
        for i, c in enumerate(counts):
            w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c), c / total])
    return counts


def cluster_summary(sigma, z) -> dict:
    """Mass of ``sigma*Z`` near +1, around +-0.1 and at or below -0.5."""
    zeta = np.asarray(sigma) * np.asarray(z, dtype=float)
    n = len(zeta)
    return {
        "near_plus_one": float(np.mean(zeta > 0.9)),
        "near_plus_0.1": int(np.sum((zeta > 0.0) & (zeta <= 0.2))),
        "near_minus_0.1": int(np.sum((zeta >= -0.2) & (zeta < 0.0))),
        "near_minus_one": int(np.sum(zeta <= -0.5)),
        "samples": n,
    }


# ---------------------------------------------------------------------------
# Independence of unsigned magnetizations
# ---------------------------------------------------------------------------


@dataclass
class IndependenceReport:
    samples: int
    u: int
    v: int
    corr_uv: float
    corr_u_sigma: float
    bound: float
    fixed_pair: bool

    @property
    def passed(self) -> bool:
        return abs(self.corr_uv) <= self.bound and abs(self.corr_u_sigma) <= self.bound

    def to_json(self) -> str:
        doc = {"schema_version": SCHEMA_VERSION, "kind": "independence", **asdict(self), "passed": self.passed}
        return json.dumps(doc, indent=2)


def independence_experiment(tree: TreeTopology, box_true: ParameterBox, box_hat: ParameterBox, samples: int,
                            seed: int, u=None, v=None, fixed_pair=True, threads=None) -> IndependenceReport:
    """Correlations of ``sigma_u Z_u`` with ``sigma_v Z_v`` and with ``sigma_u``.

    ``u`` and ``v`` default to the two children of the tree root (or the two
    endpoints of edge 0 on an unrooted tree), so their descendant subtrees
    are node-disjoint.
    """
    if samples < 2:
        raise ValueError("correlation needs at least 2 replicates")
    if u is None or v is None:
        if tree.root >= 0:
            kids = [w for w, _ in tree.adjacency[tree.root]]
            if len(kids) < 2:
                raise ValueError("root has fewer than two children")
            u, v = kids[0], kids[1]
            away_u = away_v = tree.root
        else:
            u, v = (int(x) for x in tree.edge_endpoints[0])
            away_u, away_v = v, u
    else:
        away_u = away_v = None
    view_u = descendant_subtree(tree, u, away_u if away_u is not None else _toward(tree, u, v))
    view_v = descendant_subtree(tree, v, away_v if away_v is not None else _toward(tree, v, u))
    if set(view_u.nodes) & set(view_v.nodes):
        raise ValueError("descendant subtrees of u and v overlap")
    anchor = tree.root if tree.root >= 0 else u
    E = tree.edge_count
    shared = None
    if fixed_pair:
        rng = block_rng(seed, 0, _SHARED_BLOCK)
        shared = (box_true.from_unit(rng.random(E)), box_hat.from_unit(rng.random(E)))

    def one(b, k):
        rng = block_rng(seed, 0, b)
        if shared is None:
            th_true = box_true.from_unit(rng.random((k, E)))
            th_hat = box_hat.from_unit(rng.random((k, E)))
        else:
            th_true, th_hat = shared
        root_spin = rng.choice(np.array([-1, 1], dtype=np.int8), size=k)
        full = propagate_from(tree, th_true, anchor, root_spin, rng.random((k, E)))
        leaves = full[:, list(tree.leaf_ids)]
        zu = root_magnetization(view_u, th_hat, leaves)
        zv = root_magnetization(view_v, th_hat, leaves)
        return full[:, u], zu, full[:, v], zv

    parts = _map_blocks(one, samples, threads)
    su, zu, sv, zv = (np.concatenate([p[i] for p in parts]) for i in range(4))
    a = su * zu
    b = sv * zv
    return IndependenceReport(
        samples=samples,
        u=int(u),
        v=int(v),
        corr_uv=float(np.corrcoef(a, b)[0, 1]),
        corr_u_sigma=float(np.corrcoef(a, su)[0, 1]),
        bound=4.0 / math.sqrt(samples),
        fixed_pair=fixed_pair,
    )


def _toward(tree, a, b):
    """Neighbour of ``a`` on the path to ``b``."""
    view = whole_tree_view(tree, b)
    return view.parent[a]


# ---------------------------------------------------------------------------
# Population gradient
# ---------------------------------------------------------------------------


@dataclass
class GradientRow:
    edge: int
    theta_true: float
    theta_hat: float
    estimate: float
    stderr: float
    closed_form: float
    difference: float
    ratio_to_delta: float | None
    exact: float | None = None
    exact_difference: float | None = None


@dataclass
class GradientReport:
    delta: float | None
    samples: int
    rows: list

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "kind": "gradient", "delta": self.delta,
                "samples": self.samples, "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def exact_population_gradient(tree, theta_true, theta_hat) -> np.ndarray:
    """``E_theta_true[d loglik / d theta_hat_e]`` for every edge by enumeration."""
    dist = enumerate_leaf_distribution(tree, theta_true)
    return dist.probs @ grad_all(tree, theta_hat, dist.configs)


def gradient_population_experiment(tree, theta_true, theta_hat, samples: int, seed: int, edges=None,
                                   delta: float | None = None, exact: bool | None = None) -> GradientReport:
    """Monte Carlo population gradient against the closed form ``(th* - th)/(1 - th^2)``.

    ``exact`` adds the enumeration value (default: trees with at most 12 leaves).
    """
    theta_true = np.asarray(theta_true, dtype=float)
    theta_hat = np.asarray(theta_hat, dtype=float)
    if samples < 2:
        raise ValueError("need at least 2 samples for a standard error")
    if np.any((theta_true <= 0) | (theta_true > 1)) or np.any(np.abs(theta_hat) >= 1):
        raise ValueError("need theta_true in (0, 1] and |theta_hat| < 1")
    edges = range(tree.edge_count) if edges is None else [int(e) for e in edges]
    data = sample_leaves(tree, theta_true, samples, seed)
    g = grad_all(tree, theta_hat, data)
    est = g.mean(axis=0)
    se = g.std(axis=0, ddof=1) / math.sqrt(samples)
    closed = population_gradient_closed_form(theta_true, theta_hat)
    if exact is None:
        exact = tree.n_leaves <= 12
    ex = exact_population_gradient(tree, theta_true, theta_hat) if exact else None
    rows = []
    for e in edges:
        diff = abs(est[e] - closed[e])
        rows.append(GradientRow(
            edge=e,
            theta_true=float(theta_true[e]),
            theta_hat=float(theta_hat[e]),
            estimate=float(est[e]),
            stderr=float(se[e]),
            closed_form=float(closed[e]),
            difference=float(diff),
            ratio_to_delta=None if delta is None else float(diff / delta),
            exact=None if ex is None else float(ex[e]),
            exact_difference=None if ex is None else float(abs(ex[e] - closed[e])),
        ))
    return GradientReport(delta, samples, rows)


def gradient_delta_sweep(tree, deltas, samples: int, seed: int, true_box=(0.25, 0.5), hat_box=(0.25, 0.5)):
    """Gradient reports along a delta grid with parameters held at fixed box positions.

    One pair of unit vectors is drawn from ``seed`` and mapped into each
    box, so only the scale changes across the grid.
    """
    rng = block_rng(seed, 0, _SHARED_BLOCK)
    u_true, u_hat = rng.random(tree.edge_count), rng.random(tree.edge_count)
    out = []
    for i, d in enumerate(deltas):
        bt, bh = ParameterBox(d, *true_box), ParameterBox(d, *hat_box)
        out.append(gradient_population_experiment(
            tree, bt.from_unit(u_true), bh.from_unit(u_hat), samples, seed + 7919 * (i + 1), delta=d))
    return out


# ---------------------------------------------------------------------------
# One-sweep initialization
# ---------------------------------------------------------------------------


@dataclass
class InitSweepRow:
    delta: float
    error: float
    ratio: float
    error_se: float | None
    ratio_se: float | None
    replicates: int


@dataclass
class InitSweepReport:
    mode: str
    n_leaves: int
    samples: int | None
    rows: list

    @property
    def ratio_spread(self) -> float:
        r = [row.ratio for row in self.rows]
        return max(r) / min(r) if min(r) > 0 else math.inf

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "kind": "init-sweep", "mode": self.mode,
                "n_leaves": self.n_leaves, "samples": self.samples,
                "rows": [asdict(r) for r in self.rows], "ratio_spread": self.ratio_spread}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)


def one_sweep_error(tree, theta_true, theta_init, data=None, weights=None, config=None) -> float:
    """``max_e |theta_1 - theta*|`` after one coordinate sweep from ``theta_init``."""
    config = config or FitConfig()
    if data is None:
        dist = enumerate_leaf_distribution(tree, theta_true)
        data, weights = dist.configs, dist.probs
    th1 = coordinate_sweep(tree, theta_init, data, config, weights=weights)
    return float(np.max(np.abs(th1 - np.asarray(theta_true))))


def init_sweep_experiment(tree, deltas, seed: int, samples: int | None = None, replicates: int = 1,
                          true_box=(0.25, 0.5), hat_box=(0.25, 0.5), config=None) -> InitSweepReport:
    """One-sweep error along a delta grid.

    ``samples=None`` is population mode: the leaf law is enumerated exactly
    and used as sample weights.  Otherwise each replicate simulates
    ``samples`` leaf observations and the report carries standard errors
    over replicates.  Parameters sit at fixed box positions across the grid.
    """
    rng = block_rng(seed, 0, _SHARED_BLOCK)
    u_true, u_hat = rng.random(tree.edge_count), rng.random(tree.edge_count)
    population = samples is None
    reps = 1 if population else int(replicates)
    rows = []
    for i, d in enumerate(deltas):
        th_true = ParameterBox(d, *true_box).from_unit(u_true)
        th_init = ParameterBox(d, *hat_box).from_unit(u_hat)
        errs = []
        for r in range(reps):
            if population:
                errs.append(one_sweep_error(tree, th_true, th_init, config=config))
            else:
                data = sample_leaves(tree, th_true, samples, seed, stream=1 + i * reps + r)
                errs.append(one_sweep_error(tree, th_true, th_init, data=data, config=config))
        errs = np.array(errs)
        se = float(errs.std(ddof=1) / math.sqrt(reps)) if reps > 1 else None
        rows.append(InitSweepRow(
            delta=float(d),
            error=float(errs.mean()),
            ratio=float(errs.mean() / d**2),
            error_se=se,
            ratio_se=None if se is None else se / d**2,
            replicates=reps,
        ))
    mode = "population" if population else "sampled"
    return InitSweepReport(mode, tree.n_leaves, samples, rows)


def sweep_tree(n_leaves: int, seed: int) -> TreeTopology:
    """Random unrooted tree used by the init-sweep and gradient harnesses."""
    return random_binary_tree(n_leaves, np.random.default_rng([seed, 0xC0FFEE]))
