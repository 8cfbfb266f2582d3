"""Closed-form cost model: parity with the instrumented engine, parameter
enumeration, scaling behaviour, CSV output."""

import numpy as np
import pytest

from memvit import analysis, costs
from memvit.analysis import cost_rows, count_costs, count_params, rows_to_csv
from memvit.config import ConfigError, memvit16_spec, mvit16_spec
from memvit.model import build_model, forward_clip, fresh_banks

from conftest import micro_spec, random_clips


def measured_clip_flops(spec, warm_clips: int) -> int:
    """FLOPs of one forward clip after ``warm_clips`` earlier clips, measured
    by the instrumented ops themselves (independent of the formulas)."""
    model = build_model(spec, seed=0)
    banks = fresh_banks(model)
    clips = random_clips(spec, warm_clips + 1)
    for ci in range(warm_clips):
        forward_clip(model, clips[ci], banks, clip_index=ci, video_id=0)
    with costs.COUNTER:
        forward_clip(model, clips[-1], banks, clip_index=warm_clips, video_id=0)
    return costs.COUNTER.total


class TestFlopParity:
    """The closed-form model must match the instrumented forward exactly."""

    def test_memory_model_warm_stream(self):
        spec = micro_spec(memory_len=2, aug_policy="all")
        assert measured_clip_flops(spec, warm_clips=2) == count_costs(spec).flops

    def test_baseline(self):
        spec = micro_spec(memory_len=0)
        assert measured_clip_flops(spec, warm_clips=0) == count_costs(
            spec, mode="baseline"
        ).flops

    def test_causal(self):
        spec = micro_spec(memory_len=1, causal=True)
        assert measured_clip_flops(spec, warm_clips=1) == count_costs(spec).flops

    def test_without_relative_positions(self):
        spec = micro_spec(memory_len=1, rel_pos=False)
        assert measured_clip_flops(spec, warm_clips=1) == count_costs(spec).flops


class TestParams:
    def test_micro_matches_built_model(self):
        for spec in (micro_spec(), micro_spec(memory_len=0), micro_spec(rel_pos=False)):
            assert build_model(spec, seed=0).param_count() == count_params(spec)

    def test_reference_counts_frozen(self):
        # [DERIVED] brute-force enumeration of the built reference models
        assert count_params(mvit16_spec()) == 34_707_760
        assert count_params(memvit16_spec(memory_len=2)) == 34_833_520

    def test_memory_adds_only_compression_and_tables(self):
        base = count_params(mvit16_spec())
        mem = count_params(memvit16_spec(memory_len=2))
        assert mem > base
        assert (mem - base) / base < 0.01  # under 1% extra parameters


class TestScaling:
    def test_flops_affine_in_memory_length(self):
        # each extra slot adds a constant number of attended keys per layer
        f = [
            count_costs(memvit16_spec(memory_len=m)).flops for m in range(1, 5)
        ]
        deltas = {b - a for a, b in zip(f, f[1:])}
        assert len(deltas) == 1

    def test_baseline_t_scaling_is_superlinear(self):
        f16 = count_costs(mvit16_spec(input_t=16), mode="baseline").flops
        f32 = count_costs(mvit16_spec(input_t=32), mode="baseline").flops
        f64 = count_costs(mvit16_spec(input_t=64), mode="baseline").flops
        assert f32 > 2 * f16
        assert f64 > 2 * f32

    def test_no_compress_increment_larger(self):
        spec = memvit16_spec(memory_len=4)
        comp = count_costs(spec, mode="memvit").flops
        raw = count_costs(spec, mode="memvit-no-compress").flops
        base = count_costs(mvit16_spec(), mode="baseline").flops
        assert (raw - base) > 10 * (comp - base)

    def test_temporal_support(self):
        # uniform-50% on 16 layers -> 8 augmented layers
        assert analysis.temporal_support_clips(memvit16_spec(memory_len=2)) == 17
        assert analysis.temporal_support_clips(memvit16_spec(memory_len=4)) == 33
        assert analysis.temporal_support_clips(mvit16_spec()) == 1
        # [TRIVIAL] 33 clips x 16 frames x stride 4 / 30 fps
        assert analysis.temporal_support(memvit16_spec(memory_len=4)) == pytest.approx(
            70.4, abs=1e-6
        )

    def test_cache_memory(self):
        rep_c = count_costs(memvit16_spec(memory_len=2))
        rep_r = count_costs(memvit16_spec(memory_len=2), mode="memvit-no-compress")
        assert 0 < rep_c.cache_mem < rep_r.cache_mem
        assert count_costs(mvit16_spec(), mode="baseline").cache_mem == 0

    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            count_costs(mvit16_spec(), mode="turbo")


class TestCostRows:
    def test_m_sweep_rows(self):
        rows = cost_rows(memvit16_spec(), ["baseline", "memvit"], m_sweep=[0, 2])
        assert [(r["mode"], r["M"]) for r in rows] == [
            ("baseline", 0), ("memvit", 0), ("memvit", 2)
        ]
        # an M=0 memory row degenerates to the baseline cost
        assert rows[1]["flops"] == rows[0]["flops"]

    def test_t_sweep_rows(self):
        rows = cost_rows(mvit16_spec(), ["baseline"], t_sweep=[16, 32])
        assert [r["T"] for r in rows] == [16, 32]
        assert rows[1]["flops"] > rows[0]["flops"]

    def test_csv_format(self):
        rows = cost_rows(memvit16_spec(), ["memvit"], m_sweep=[1])
        text = rows_to_csv(rows)
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(analysis.CSV_COLUMNS)
        assert len(lines) == 2
        assert lines[1].split(",")[0] == "memvit"

    def test_empty_sweep_gives_header_only(self):
        assert rows_to_csv(cost_rows(memvit16_spec(), ["memvit"], m_sweep=[])) == (
            ",".join(analysis.CSV_COLUMNS) + "\n"
        )


class TestReceptiveFieldTracer:
    def test_no_memory_reach_is_one(self):
        spec = micro_spec(memory_len=0)
        model = build_model(spec, seed=0)
        assert analysis.trace_receptive_field(model, probe_clip_count=3) == 1

    def test_single_layer_single_slot(self):
        from memvit.cli import rf_toy_spec

        model = build_model(rf_toy_spec(memory_len=1, aug_layers=1), seed=0)
        assert analysis.trace_receptive_field(model, probe_clip_count=4) == 2
