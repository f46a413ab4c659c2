"""Frozen reference setup used by the collapse / EMA experiments and their tests.

Calibrated once (scripts/calibrate_reference.py) and then committed. The
small inner scale is what makes the un-stabilized variant collapse within the
step budget; larger scales keep every variant spread out.
"""

from __future__ import annotations

from dataclasses import replace

from .dataset import make_block_graph
from .objectives import MincConfig
from .trainer import TrainConfig

GRAPH = dict(num_classes=4, points_per_class=8, intra_mass=0.97, noise=0.5, feature_dim=16, seed=0)
STEPS = 5000
BATCH = 32
EMBED_DIM = 8
INNER_SCALE = 0.03
LEARNING_RATE = 0.5
SEEDS = (0, 1, 2)

# acceptance thresholds
MAX_ANGLE_FULL = 0.35
MAX_RANK_RATIO_FULL = 0.6
MIN_RANK_RATIO_COLLAPSED = 0.9


def reference_graph():
    return make_block_graph(**GRAPH)


def reference_config(seed: int = 0, **minc_overrides) -> TrainConfig:
    minc = MincConfig(inner_scale=INNER_SCALE, beta=0.8, gamma=0.996)
    minc = replace(minc, **minc_overrides)
    return TrainConfig(
        minc=minc,
        batch_size=BATCH,
        steps=STEPS,
        learning_rate=LEARNING_RATE,
        momentum=0.9,
        seed=seed,
        eval_every=500,
        embed_dim=EMBED_DIM,
        align_dim=GRAPH["num_classes"],
    )
