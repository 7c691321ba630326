"""
Hot loops: spin propagation and magnetization message schedules.

Two interchangeable implementations live here.  The numba versions loop
slot by slot; the numpy versions process one dependency level at a time.
Both use slot-major ``(K, m)`` arrays (slots x samples) and give identical
results.

Set ``CFNRECON_BACKEND=numpy`` to force the pure-numpy path; the default is
numba when it imports, numpy otherwise.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

_requested = os.environ.get("CFNRECON_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"CFNRECON_BACKEND must be 'numba' or 'numpy', not {_requested!r}")
BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def propagate_numpy(root_spin, flip_sign, parent_slot, edge_of_slot, levels):
    """Spins ``(K, m)`` from root spins ``(m,)`` and per-edge signs ``(E, m)``."""
    K = len(parent_slot)
    spins = np.empty((K, root_spin.shape[0]), dtype=np.int8)
    spins[0] = root_spin
    for idx in levels:
        spins[idx] = spins[parent_slot[idx]] * flip_sign[edge_of_slot[idx]]
    return spins


def schedule_numpy(leaf_spins, theta, leaf_col, in1, e1, in2, e2, levels, want_log):
    """Evaluate a message schedule.

    ``leaf_spins`` is ``(L, m)``, ``theta`` is ``(E, m)``.  Slot ``k`` is a
    leaf copy when ``leaf_col[k] >= 0``; otherwise it is
    ``q(theta[e1]*v[in1], theta[e2]*v[in2])`` where a negative ``e*`` means a
    unit weight and a negative ``in2`` means a zero second input.  Returns
    slot values ``(K, m)`` and the per-sample sum of ``log(1 + a*b)``.
    """
    K = len(leaf_col)
    m = leaf_spins.shape[1]
    vals = np.zeros((K, m))
    logsum = np.zeros(m)
    is_leaf = leaf_col >= 0
    vals[is_leaf] = leaf_spins[leaf_col[is_leaf]]
    with np.errstate(divide="ignore", invalid="ignore"):
        for idx in levels:
            a = vals[in1[idx]]
            w = e1[idx] >= 0
            a[w] *= theta[e1[idx][w]]
            b = np.where((in2[idx] >= 0)[:, None], vals[np.maximum(in2[idx], 0)], 0.0)
            w = (e2[idx] >= 0) & (in2[idx] >= 0)
            b[w] *= theta[e2[idx][w]]
            ab = a * b
            vals[idx] = (a + b) / (1.0 + ab)
            if want_log:
                logsum += np.log1p(ab).sum(axis=0)
    return vals, logsum


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True, error_model="numpy")

    @_jit
    def propagate_numba(root_spin, flip_sign, parent_slot, edge_of_slot, levels_unused):
        K = parent_slot.shape[0]
        m = root_spin.shape[0]
        spins = np.empty((K, m), dtype=np.int8)
        for i in range(m):
            spins[0, i] = root_spin[i]
        for k in range(1, K):
            p = parent_slot[k]
            e = edge_of_slot[k]
            for i in range(m):
                spins[k, i] = spins[p, i] * flip_sign[e, i]
        return spins

    @_jit
    def _schedule_numba(leaf_spins, theta, leaf_col, in1, e1, in2, e2, order, want_log):
        K = leaf_col.shape[0]
        m = leaf_spins.shape[1]
        vals = np.zeros((K, m))
        logsum = np.zeros(m)
        for k in range(K):
            c = leaf_col[k]
            if c >= 0:
                for i in range(m):
                    vals[k, i] = leaf_spins[c, i]
        for k in order:
            j1 = in1[k]
            j2 = in2[k]
            f1 = e1[k]
            f2 = e2[k]
            for i in range(m):
                a = vals[j1, i]
                if f1 >= 0:
                    a *= theta[f1, i]
                b = 0.0
                if j2 >= 0:
                    b = vals[j2, i]
                    if f2 >= 0:
                        b *= theta[f2, i]
                ab = a * b
                vals[k, i] = (a + b) / (1.0 + ab)
                if want_log:
                    logsum[i] += np.log1p(ab)
        return vals, logsum

    def schedule_numba(leaf_spins, theta, leaf_col, in1, e1, in2, e2, levels, want_log):
        order = np.concatenate(levels) if levels else np.zeros(0, dtype=np.int64)
        return _schedule_numba(leaf_spins, theta, leaf_col, in1, e1, in2, e2, order, want_log)


def get_backend(name=None):
    """Return ``(propagate, schedule)`` for ``name`` (default: active backend)."""
    name = name or BACKEND
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not available")
        return propagate_numba, schedule_numba
    if name == "numpy":
        return propagate_numpy, schedule_numpy
    raise ValueError(f"unknown backend {name!r}")


def propagate(root_spin, flip_sign, parent_slot, edge_of_slot, levels, backend=None):
    fn = get_backend(backend)[0]
    return fn(root_spin, flip_sign, parent_slot, edge_of_slot, levels)


def run_schedule(leaf_spins, theta, sched, want_log=False, backend=None):
    """Run a :class:`~cfnrecon.schedule.Schedule` on ``(L, m)`` spins and ``(E, m)`` theta."""
    fn = get_backend(backend)[1]
    return fn(
        np.ascontiguousarray(leaf_spins, dtype=np.float64),
        np.ascontiguousarray(theta, dtype=np.float64),
        sched.leaf_col,
        sched.in1,
        sched.e1,
        sched.in2,
        sched.e2,
        sched.levels,
        want_log,
    )
