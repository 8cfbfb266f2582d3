"""Shared toy configurations.

Value provenance tags used throughout the suite:
  [TRIVIAL]  asserted directly from the definition
  [DERIVED]  computed by an independent oracle (hand trace, brute force,
             finite differences) and frozen
  [REPORTED] published reference measurements for this architecture family
"""

import numpy as np
import pytest

from memvit.config import ModelSpec, StageSpec


def micro_spec(**overrides) -> ModelSpec:
    """Two-stage micro model: one plain layer, one memory layer.

    Token extents after cube embedding: (3, 5, 5).  With the default
    uniform-50% policy only layer 1 carries memory; its compressed slot
    extents are ceil((3,5,5)/(2,2,2)) = (2,3,3).  [DERIVED by hand]
    """
    base = dict(
        input_t=2,
        input_hw=8,
        cube_kernel=(2, 2, 2),
        cube_stride=(1, 2, 2),
        cube_channels=4,
        stages=(
            StageSpec(depth=1, channels=4, heads=1),
            StageSpec(depth=1, channels=8, heads=2, q_stride=(1, 2, 2)),
        ),
        kv_stride_initial=(1, 2, 2),
        memory_len=1,
        compression_factor=(2, 2, 2),
        aug_policy="uniform-50%",
        num_classes=3,
    )
    base.update(overrides)
    return ModelSpec(**base)


def random_clips(spec: ModelSpec, n: int, seed: int = 7) -> list:
    rng = np.random.default_rng(seed)
    return [
        rng.standard_normal(
            (spec.input_t, spec.input_hw, spec.input_hw, spec.in_channels)
        )
        for _ in range(n)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(0)
