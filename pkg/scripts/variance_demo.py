#!/usr/bin/env python3
"""Compare minibatch variance of the contrastive and MINC repulsive terms.

Trains the reference GHA + target model, then estimates both terms on its
embeddings for a range of batch sizes.
"""

import argparse

from minclab import reference as ref
from minclab.probe import estimator_variance
from minclab.trainer import train


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batch-sizes", default="4,8,16,32,64")
    parser.add_argument("--trials", type=int, default=10_000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    joint, feats = ref.reference_graph()
    phi = train(ref.reference_config(args.seed), joint, feats).model(feats.features)
    print(f"{'batch':>5} {'var_contrastive':>16} {'var_minc':>12} {'ratio':>7} {'mean_c':>9} {'mean_m':>9}")
    for b in (int(s) for s in args.batch_sizes.split(",")):
        con = estimator_variance(joint, phi, b, args.trials, "contrastive_second_term", seed=0)
        mnc = estimator_variance(joint, phi, b, args.trials, "minc_second_term", seed=1)
        print(f"{b:5d} {con.variance:16.4e} {mnc.variance:12.4e} {con.variance / mnc.variance:7.2f} {con.mean:9.5f} {mnc.mean:9.5f}")


if __name__ == "__main__":
    main()
