"""Compare one-pass and per-patch feature extraction on the reference configuration.

Prints a CSV row per patch count plus conv/fc MAC totals of both paths for the
largest image.  Same numbers as ``attrnet bench``, with the breakdown added.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from attrnet.interweave import benchmark_sharing, interweaved_forward, split_network, write_report_csv
from attrnet.layers import MacCounter, patch_forward_oracle
from attrnet.synthetic import REFERENCE_GRID, reference_image_side, reference_network


def breakdown(net, grid, side, seed):
    """Conv and fully connected MACs of both paths on one image."""
    image = np.random.default_rng(seed).uniform(0, 1, (net.input_shape[0], side, side)).astype(np.float32)
    rows = []
    for name, run in (("per-patch", patch_forward_oracle), ("one-pass", interweaved_forward)):
        total = MacCounter()
        run(image, net, grid, total)
        rows.append((name, total.conv, total.fc))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repetitions", type=int, default=5)
    ap.add_argument("--max-per-side", type=int, default=5)
    args = ap.parse_args(argv)
    net = reference_network(args.seed)
    grid = REFERENCE_GRID
    sizes = [reference_image_side(n) for n in range(1, args.max_per_side + 1)]
    reports = benchmark_sharing(sizes, net, grid, args.repetitions, args.seed)
    write_report_csv(reports, sys.stdout)
    split = split_network(net)
    print(f"# layers: {len(split.prefix)} shared-prefix, {len(split.suffix)} local, {len(split.head)} head", file=sys.stderr)
    for name, conv, fc in breakdown(net, grid, sizes[-1], args.seed):
        print(f"# {name}: conv MACs {conv}, fc MACs {fc}", file=sys.stderr)


if __name__ == "__main__":
    main()
