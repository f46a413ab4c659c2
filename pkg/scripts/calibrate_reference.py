#!/usr/bin/env python3
"""Sweep the inner scale of the reference setup and report collapse metrics.

Used to pick ``minclab.reference.INNER_SCALE``: the chosen value must leave the
GHA + target variant spread out and let the unstabilized variant collapse
within the step budget, for every reference seed.
"""

import argparse

from minclab import reference as ref
from minclab.trainer import train

VARIANTS = {
    "gha+target": {},
    "target only": {"use_lt": False},
    "gha only": {"use_target": False},
    "neither": {"use_lt": False, "use_target": False},
}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--scales", default="0.01,0.03,0.1,0.3", help="comma-separated inner scales")
    parser.add_argument("--seeds", default=",".join(map(str, ref.SEEDS)))
    args = parser.parse_args()
    joint, feats = ref.reference_graph()
    seeds = [int(s) for s in args.seeds.split(",")]
    print(f"{'scale':>6} {'variant':>12} {'seed':>4} {'angle':>8} {'rank_ratio':>10}")
    for scale in (float(s) for s in args.scales.split(",")):
        for name, overrides in VARIANTS.items():
            for seed in seeds:
                res = train(ref.reference_config(seed, inner_scale=scale, **overrides), joint, feats)
                last = res.records[-1]
                tag = " (aborted)" if res.aborted else ""
                print(f"{scale:6.3f} {name:>12} {seed:4d} {last.principal_angle_max:8.4f} {last.embedding_rank_ratio:10.4f}{tag}")


if __name__ == "__main__":
    main()
