"""Closed-form compute/memory/receptive-field model plus the empirical
receptive-field tracer.

``count_costs`` enumerates exactly the operations the runtime engine
performs for one clip (validated op-for-op against the instrumented
forward pass on toy configurations), so the paper-scale numbers come out
of pure arithmetic without running the large model.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from math import prod

from . import costs
from .config import ConfigError, LayerPlan, ModelSpec, augmented_layers, layer_plan

MODES = ("baseline", "memvit", "memvit-no-compress")


@dataclass(frozen=True)
class CostReport:
    flops: int
    params: int
    activation_mem: int  # bytes, peak single-tensor estimate
    cache_mem: int  # bytes, steady-state memory banks
    temporal_support_s: float
    temporal_support_clips: int
    receptive_field_clips: int


def _mem_tokens(plan: LayerPlan, mode: str) -> int:
    """Steady-state extra key/value tokens contributed by the bank."""
    if mode == "baseline" or not plan.memory_enabled or plan.memory_len == 0:
        return 0
    if mode == "memvit":
        return plan.memory_len * plan.n_compressed
    if mode == "memvit-no-compress":
        return plan.memory_len * plan.n_kv
    raise ConfigError(f"unknown cost mode: {mode!r}")


def _block_flops(plan: LayerPlan, spec: ModelSpec, mode: str) -> int:
    d_in, d_out, heads = plan.d_in, plan.d_out, plan.heads
    n_in, n_q, n_kv = plan.n_in, plan.n_q, plan.n_kv
    mem = _mem_tokens(plan, mode)
    n_k = n_kv + mem
    f = 0

    f += costs.layernorm_flops(n_in * d_in)

    # learnable pooling of Q-bar / K-bar / V-bar (depthwise strided conv)
    if not plan.pool_q.is_identity:
        kq = prod(plan.pool_q.kernel)
        f += costs.conv_macs(n_q * d_in, kq) + costs.bias_flops(n_q * d_in)
    if not plan.pool_kv.is_identity:
        kk = prod(plan.pool_kv.kernel)
        f += 2 * (costs.conv_macs(n_kv * d_in, kk) + costs.bias_flops(n_kv * d_in))

    # pipelined compression of the newest cached slot
    if mode == "memvit" and plan.memory_enabled and plan.memory_len > 0:
        fp = prod(plan.compression_factor)
        n_c = plan.n_compressed
        f += 2 * (costs.conv_macs(n_c * d_in, fp) + costs.bias_flops(n_c * d_in))

    # linear projections (keys/values include the attached memory tokens)
    f += costs.matmul_macs(n_q, d_in, d_out) + costs.bias_flops(n_q * d_out)
    f += 2 * (costs.matmul_macs(n_k, d_in, d_out) + costs.bias_flops(n_k * d_out))

    # attention
    f += costs.scale_flops(n_q * d_out)  # q / sqrt(d_head)
    f += costs.attention_score_macs(n_q, n_k, d_out)
    if spec.rel_pos:
        f += costs.relpos_gather_flops(n_q, n_k, plan.d_head)
        f += costs.matmul_macs(n_q * n_k, plan.d_head, 1) * heads  # q . r per pair
        f += costs.add_flops(n_q * n_k * heads)  # bias added to scores
    if spec.causal:
        f += costs.add_flops(n_q * n_k * heads)  # additive mask
    f += costs.softmax_flops(n_q * n_k * heads)
    f += costs.attention_apply_macs(n_q, n_k, d_out)
    f += costs.matmul_macs(n_q, d_out, d_out) + costs.bias_flops(n_q * d_out)

    # shortcut path
    if not plan.pool_q.is_identity:
        kq = prod(plan.pool_q.stride)  # non-learnable mean pool, kernel = stride
        f += costs.meanpool_flops(n_q * d_in, kq)
    if d_in != d_out:
        f += costs.matmul_macs(n_q, d_in, d_out) + costs.bias_flops(n_q * d_out)
    f += costs.add_flops(n_q * d_out)

    # MLP
    hid = plan.mlp_hidden
    f += costs.layernorm_flops(n_q * d_out)
    f += costs.matmul_macs(n_q, d_out, hid) + costs.bias_flops(n_q * hid)
    f += costs.gelu_flops(n_q * hid)
    f += costs.matmul_macs(n_q, hid, d_out) + costs.bias_flops(n_q * d_out)
    f += costs.add_flops(n_q * d_out)
    return f


def _relpos_rows(plan: LayerPlan) -> tuple[int, int, int]:
    t_in, h_in, w_in = plan.in_extents
    t_max = (plan.memory_len + 1) * t_in
    return 2 * t_max - 1, 2 * h_in - 1, 2 * w_in - 1


def _block_params(plan: LayerPlan, spec: ModelSpec) -> int:
    d_in, d_out = plan.d_in, plan.d_out
    p = 2 * d_in  # ln1
    if not plan.pool_q.is_identity:
        p += prod(plan.pool_q.kernel) * d_in + d_in
    if not plan.pool_kv.is_identity:
        p += 2 * (prod(plan.pool_kv.kernel) * d_in + d_in)
    p += 3 * (d_in * d_out + d_out)  # q/k/v linears
    p += d_out * d_out + d_out  # output projection
    if d_in != d_out:
        p += d_in * d_out + d_out  # shortcut projection
    if plan.memory_enabled:
        p += 2 * (prod(plan.compression_factor) * d_in + d_in)  # f_K, f_V
    if spec.rel_pos:
        p += sum(_relpos_rows(plan)) * plan.d_head
    hid = plan.mlp_hidden
    p += 2 * d_out  # ln2
    p += d_out * hid + hid + hid * d_out + d_out
    return p


def count_params(spec: ModelSpec) -> int:
    """Exact parameter count; matches brute-force enumeration of a built model."""
    plans = layer_plan(spec)
    p = prod(spec.cube_kernel) * spec.in_channels * spec.cube_channels + spec.cube_channels
    for plan in plans:
        p += _block_params(plan, spec)
    d_last = plans[-1].d_out
    p += 2 * d_last  # final norm
    p += d_last * spec.num_classes + spec.num_classes  # head
    return p


def aug_layer_count(spec: ModelSpec) -> int:
    if spec.memory_len == 0:
        return 0
    return len(augmented_layers(spec.aug_policy, spec.stages))


def temporal_support_clips(spec: ModelSpec) -> int:
    return 1 + spec.memory_len * aug_layer_count(spec)


def temporal_support(spec: ModelSpec, fps: float = 30.0) -> float:
    """Seconds of video the current output can depend on."""
    return temporal_support_clips(spec) * spec.clip_span_seconds(fps)


def count_costs(spec: ModelSpec, fps: float = 30.0, mode: str = "memvit") -> CostReport:
    """Per-clip cost of a warm stream under the given scaling mode."""
    if mode not in MODES:
        raise ConfigError(f"unknown cost mode: {mode!r} (expected one of {MODES})")
    plans = layer_plan(spec)
    n0 = prod(spec.token_extents())

    flops = costs.conv_macs(
        n0 * spec.cube_channels, prod(spec.cube_kernel), spec.in_channels
    ) + costs.bias_flops(n0 * spec.cube_channels)
    for plan in plans:
        flops += _block_flops(plan, spec, mode)
    d_last = plans[-1].d_out
    n_last = plans[-1].n_q
    flops += costs.layernorm_flops(n_last * d_last)
    flops += costs.add_flops(n_last * d_last) + d_last  # token mean
    flops += costs.matmul_macs(1, d_last, spec.num_classes) + spec.num_classes

    cache = 0
    act_peak = n0 * spec.cube_channels
    for plan in plans:
        mem = _mem_tokens(plan, mode)
        if mem and mode == "memvit":
            slots = (plan.memory_len - 1) * plan.n_compressed + plan.n_kv
            cache += 2 * 4 * slots * plan.d_in  # K and V, f32
        elif mem:
            cache += 2 * 4 * plan.memory_len * plan.n_kv * plan.d_in
        act_peak = max(
            act_peak,
            plan.n_in * plan.d_in,
            plan.n_q * (plan.n_kv + mem) * plan.heads,
            plan.n_q * plan.mlp_hidden,
        )

    support_clips = temporal_support_clips(spec) if mode != "baseline" else 1
    return CostReport(
        flops=flops,
        params=count_params(spec),
        activation_mem=8 * act_peak,
        cache_mem=cache,
        temporal_support_s=support_clips * spec.clip_span_seconds(fps),
        temporal_support_clips=support_clips,
        receptive_field_clips=support_clips,
    )


def trace_receptive_field(model, probe_clip_count: int, seed: int = 0) -> int:
    """Empirical reach in clips: largest j such that perturbing clip t-j
    still changes some later output.

    Poisons one clip with NaN and watches which later logits turn NaN.
    NaN propagates through every dependent operation regardless of
    magnitude, so the trace is purely structural: parameter values cannot
    attenuate a reachable path below detection.
    """
    import numpy as np

    from .model import fresh_banks, forward_clip

    rng = np.random.default_rng(seed)
    spec = model.spec
    clips = [
        rng.standard_normal((spec.input_t, spec.input_hw, spec.input_hw, spec.in_channels))
        for _ in range(probe_clip_count)
    ]

    def run(all_clips):
        banks = fresh_banks(model)
        outs = []
        for ci, clip in enumerate(all_clips):
            out = forward_clip(model, clip, banks, training=False, clip_index=ci, video_id=0)
            outs.append(out.logits.data.copy())
        return outs

    clean = run(clips)
    if any(np.isnan(o).any() for o in clean):
        raise ValueError("clean stream produced NaN; cannot trace reach")
    reach = 1  # a clip always influences its own output
    for p in range(probe_clip_count - 1):
        perturbed = list(clips)
        perturbed[p] = np.full_like(clips[p], np.nan)
        dirty = run(perturbed)
        for t in range(p + 1, probe_clip_count):
            if np.isnan(dirty[t]).any():
                reach = max(reach, t - p + 1)
    return reach


CSV_COLUMNS = [
    "mode",
    "T",
    "M",
    "factor",
    "aug_policy",
    "flops",
    "params",
    "support_s",
    "rf_clips",
    "cache_bytes",
]


def cost_rows(
    spec: ModelSpec,
    modes: list[str],
    m_sweep: list[int] | None = None,
    t_sweep: list[int] | None = None,
    fps: float = 30.0,
) -> list[dict]:
    """One row per (mode, sweep point); the three-curve scaling comparison."""
    rows = []
    t_vals = t_sweep if t_sweep is not None else [spec.input_t]
    m_vals = m_sweep if m_sweep is not None else [spec.memory_len]
    for mode in modes:
        if mode == "baseline":
            for t in t_vals:
                s = ModelSpec(**{**_spec_dict(spec), "input_t": t, "memory_len": 0})
                rep = count_costs(s, fps=fps, mode="baseline")
                rows.append(_row(mode, t, 0, s, rep))
        else:
            for m in m_vals:
                s = ModelSpec(**{**_spec_dict(spec), "memory_len": m})
                rep = count_costs(s, fps=fps, mode=mode if m > 0 else "baseline")
                rows.append(_row(mode, spec.input_t, m, s, rep))
    return rows


def _spec_dict(spec: ModelSpec) -> dict:
    from dataclasses import asdict

    d = asdict(spec)
    d["stages"] = spec.stages
    return d


def _row(mode, t, m, spec, rep: CostReport) -> dict:
    return {
        "mode": mode,
        "T": t,
        "M": m,
        "factor": "x".join(str(c) for c in spec.compression_factor),
        "aug_policy": spec.aug_policy,
        "flops": rep.flops,
        "params": rep.params,
        "support_s": f"{rep.temporal_support_s:.4f}",
        "rf_clips": rep.receptive_field_clips,
        "cache_bytes": rep.cache_mem,
    }


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()
