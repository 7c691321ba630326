"""Time the numba and numpy kernels on the same inputs.

    python3 benchmarks/bench_backends.py [--leaves 1000] [--samples 4096] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from cfnrecon import kernels
from cfnrecon.magnetization import all_messages, root_magnetization
from cfnrecon.model import propagate_from
from cfnrecon.tree import balanced_tree, whole_tree_view


def cases(leaves: int, samples: int):
    tree = balanced_tree(leaves)
    rng = np.random.default_rng(0)
    theta = rng.uniform(0.9, 0.95, tree.edge_count)
    root = rng.choice(np.array([-1, 1], dtype=np.int8), samples)
    uniforms = rng.random((samples, tree.edge_count))
    full = propagate_from(tree, theta, tree.root, root, uniforms)
    spins = full[:, list(tree.leaf_ids)]
    view = whole_tree_view(tree)
    return {
        "propagate": lambda b: propagate_from(tree, theta, tree.root, root, uniforms, backend=b),
        "root magnetization": lambda b: root_magnetization(view, theta, spins, backend=b),
        "all messages": lambda b: all_messages(tree, theta, spins, backend=b),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--leaves", type=int, default=1000)
    p.add_argument("--samples", type=int, default=4096)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    print(f"{args.leaves} leaves, {args.samples} samples, best of {args.repeat}")
    print(f"{'kernel':<20}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for name, fn in cases(args.leaves, args.samples).items():
        times = []
        for b in backends:
            fn(b)  # warm-up, includes JIT compilation
            times.append(min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)))
        row = f"{name:<20}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times)
        if len(times) == 2:
            row += f"{times[0] / times[1]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
