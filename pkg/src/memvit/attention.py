"""Pooling attention with cached, compressed key/value memory.

One ``AttentionLayer`` is a full transformer block: pool-first multi-head
attention (tokens are pooled *before* the shared Q/K/V linears), decomposed
relative positional bias, a pooled shortcut, and an MLP.  Layers flagged
``memory_enabled`` additionally attend over a bounded bank of cached
keys/values from earlier clips, compressing exactly one cached slot per
forward (pipelined compression) and committing the current clip's pooled
keys/values back to the bank.

The forward pass is built strictly from the instrumented ops in
``autodiff`` so its measured FLOPs match the closed-form model in
``analysis`` operation for operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    add,
    concat,
    depthwise_conv3d,
    gather_rows,
    gelu,
    layernorm,
    matmul,
    mean_pool3d,
    mul,
    pad_grid,
    relpos_bias_scores,
    reshape,
    softmax_lastdim,
    transpose,
)
from .config import ConfigError, LayerPlan, PoolSpec
from .tokens import TokenTensor

MASK_VALUE = -1e9


def _conv_padding(spec: PoolSpec, causal: bool):
    """Per-axis (lo, hi) padding; causal mode shifts temporal padding left."""
    (pt, ph, pw) = spec.padding
    t_pad = (2 * pt, 0) if causal else (pt, pt)
    return (t_pad, (ph, ph), (pw, pw))


def pool(
    x: TokenTensor,
    spec: PoolSpec,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
    causal: bool = False,
) -> TokenTensor:
    """Per-axis spatiotemporal pooling of a token tensor.

    Learnable pooling is a per-channel strided convolution; the
    non-learnable variant is a window average (zero-padded when the spec
    pads).
    """
    if spec.is_identity:
        return x
    out_extents = spec.out_extents(x.extents)
    grid = x.grid()
    if spec.learnable:
        if weight is None or bias is None:
            raise ContractError("learnable pooling requires weight and bias")
        y = depthwise_conv3d(grid, weight, bias, spec.stride, _conv_padding(spec, causal))
    else:
        pad = _conv_padding(spec, causal)
        if any(p != (0, 0) for p in pad):
            grid = pad_grid(grid, pad)
        y = mean_pool3d(grid, spec.kernel, spec.stride)
    return x.with_data(reshape(y, (-1, x.channels)), out_extents)


def compress(
    kv: TokenTensor, weight: Tensor, bias: Tensor, factor: tuple[int, int, int]
) -> TokenTensor:
    """Learnable non-overlapping downsampling by ``factor`` per axis.

    Extents are zero-padded up to a multiple of the factor, so the output
    extent per axis is ceil(extent / factor); channel count is preserved.
    """
    if any(f < 1 for f in factor):
        raise ConfigError(f"compression factor components must be >= 1: {factor}")
    grid = kv.grid()
    pad = tuple((0, (-n) % f) for n, f in zip(kv.extents, factor))
    if any(hi for _, hi in pad):
        grid = pad_grid(grid, pad)
    y = depthwise_conv3d(grid, weight, bias, factor, ((0, 0), (0, 0), (0, 0)))
    out_extents = tuple(-(-n // f) for n, f in zip(kv.extents, factor))
    return kv.with_data(reshape(y, (-1, kv.channels)), out_extents)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """[N, d] -> [heads, N, d/heads], channels split contiguously."""
    n, d = x.shape
    if d % heads:
        raise DimensionError(f"channels {d} not divisible by heads {heads}")
    return transpose(reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, h * dh))


def attend(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    heads: int,
    bias: Tensor | None = None,
    mask: np.ndarray | None = None,
) -> Tensor:
    """softmax((QKᵀ + bias) / sqrt(d_head) + mask) V per head, heads
    concatenated.  ``bias``/``mask`` are [N_q, N_k]; masked entries use an
    additive large negative constant."""
    d_head = q.shape[-1] // heads
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scores = matmul(qh, transpose(kh, (0, 2, 1)))
    if bias is not None:
        scores = add(scores, bias if isinstance(bias, Tensor) else Tensor(bias))
    scores = mul(scores, 1.0 / math.sqrt(d_head))
    if mask is not None:
        _check_mask(mask)
        scores = add(scores, np.asarray(mask, dtype=np.float64))
    weights = softmax_lastdim(scores)
    return _merge_heads(matmul(weights, vh))


def _check_mask(mask: np.ndarray):
    if np.any((mask < 0).all(axis=-1)):
        raise ContractError("attention row with every key masked")


# -- relative positional bias ------------------------------------------------


@dataclass
class RelPosTable:
    """Axis-decomposed relative position embeddings, shared across heads."""

    r_t: Parameter  # [2*t_max - 1, d_head]
    r_h: Parameter  # [2*h_max - 1, d_head]
    r_w: Parameter  # [2*w_max - 1, d_head]

    @property
    def t_max(self) -> int:
        return (self.r_t.shape[0] + 1) // 2

    @property
    def h_max(self) -> int:
        return (self.r_h.shape[0] + 1) // 2

    @property
    def w_max(self) -> int:
        return (self.r_w.shape[0] + 1) // 2


def _axis_offsets(q_pos: np.ndarray, k_pos: np.ndarray, max_extent: int,
                  valid: np.ndarray | None = None) -> np.ndarray:
    """Index matrix into a [2*max_extent-1, d] table for all (q, k) pairs."""
    delta = q_pos[:, None] - k_pos[None, :]
    idx = delta + max_extent - 1
    in_range = (idx >= 0) & (idx <= 2 * max_extent - 2)
    if valid is None:
        bad = ~in_range
    else:
        bad = ~in_range & valid[None, :]
    if np.any(bad):
        raise ConfigError(
            f"relative offset {delta[bad].max()} outside table range "
            f"[-{max_extent - 1}, {max_extent - 1}]"
        )
    return np.clip(idx, 0, 2 * max_extent - 2)


def token_positions(
    extents: tuple[int, int, int],
    units: tuple[int, int, int] = (1, 1, 1),
    t_offset: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-token (t, h, w) positions of a row-major grid in input units."""
    t, h, w = extents
    ut, uh, uw = units
    tt, hh, ww = np.meshgrid(
        np.arange(t) * ut + t_offset, np.arange(h) * uh, np.arange(w) * uw,
        indexing="ij",
    )
    return tt.reshape(-1), hh.reshape(-1), ww.reshape(-1)


def rel_pos_sum(
    table: RelPosTable,
    q_pos: tuple[np.ndarray, np.ndarray, np.ndarray],
    k_pos: tuple[np.ndarray, np.ndarray, np.ndarray],
    key_valid: np.ndarray | None = None,
) -> Tensor:
    """r_t[dt] + r_h[dh] + r_w[dw] for all pairs -> [N_q, N_k, d_head]."""
    idx_t = _axis_offsets(q_pos[0], k_pos[0], table.t_max, key_valid)
    idx_h = _axis_offsets(q_pos[1], k_pos[1], table.h_max, key_valid)
    idx_w = _axis_offsets(q_pos[2], k_pos[2], table.w_max, key_valid)
    r = add(gather_rows(table.r_t, idx_t), gather_rows(table.r_h, idx_h))
    return add(r, gather_rows(table.r_w, idx_w))


def rel_pos_bias(
    q: TokenTensor,
    key_positions: list[tuple[int, int, int]],
    table: RelPosTable,
) -> Tensor:
    """bias[i, j] = Q_i . (r_t[dt] + r_h[dh] + r_w[dw]) -> [N_q, N_k].

    Query positions come from the query grid at unit spacing, offset by the
    clip's absolute start time, so memory keys at earlier absolute times get
    distinct temporal distances.
    """
    q_pos = token_positions(q.extents, t_offset=q.clip_index * q.t_extent)
    kp = np.asarray(key_positions, dtype=np.int64).reshape(-1, 3)
    r = rel_pos_sum(table, q_pos, (kp[:, 0], kp[:, 1], kp[:, 2]))
    qh = reshape(q.data, (1, q.n_tokens, q.channels))
    return reshape(relpos_bias_scores(qh, r), (q.n_tokens, kp.shape[0]))


# -- parameter construction --------------------------------------------------


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) clipped to two standard deviations."""
    return np.clip(rng.standard_normal(shape) * std, -2 * std, 2 * std)


def _linear_params(rng, d_in, d_out, prefix):
    w = Parameter(trunc_normal(rng, (d_in, d_out)), f"{prefix}.weight")
    b = Parameter(np.zeros(d_out), f"{prefix}.bias")
    return w, b


def _norm_params(d, prefix):
    return (
        Parameter(np.ones(d), f"{prefix}.weight"),
        Parameter(np.zeros(d), f"{prefix}.bias"),
    )


def _pool_params(kernel, channels, prefix):
    """Average-filter initialization so pooling starts as a mean filter."""
    kprod = kernel[0] * kernel[1] * kernel[2]
    w = Parameter(np.full((*kernel, channels), 1.0 / kprod), f"{prefix}.weight")
    b = Parameter(np.zeros(channels), f"{prefix}.bias")
    return w, b


class AttentionLayer:
    """One transformer block with optional cached key/value memory."""

    def __init__(self, plan: LayerPlan, rng: np.random.Generator,
                 causal: bool = False, rel_pos: bool = True, name: str = ""):
        self.plan = plan
        self.causal = causal
        self.rel_pos = rel_pos
        self.name = name or f"layers.{plan.index}"
        p = self.name
        d_in, d_out = plan.d_in, plan.d_out

        self.ln1_w, self.ln1_b = _norm_params(d_in, f"{p}.ln1")
        self.pool_q_w = self.pool_q_b = None
        if not plan.pool_q.is_identity:
            self.pool_q_w, self.pool_q_b = _pool_params(plan.pool_q.kernel, d_in, f"{p}.pool_q")
        self.pool_k_w = self.pool_k_b = self.pool_v_w = self.pool_v_b = None
        if not plan.pool_kv.is_identity:
            self.pool_k_w, self.pool_k_b = _pool_params(plan.pool_kv.kernel, d_in, f"{p}.pool_k")
            self.pool_v_w, self.pool_v_b = _pool_params(plan.pool_kv.kernel, d_in, f"{p}.pool_v")
        self.q_w, self.q_b = _linear_params(rng, d_in, d_out, f"{p}.lin_q")
        self.k_w, self.k_b = _linear_params(rng, d_in, d_out, f"{p}.lin_k")
        self.v_w, self.v_b = _linear_params(rng, d_in, d_out, f"{p}.lin_v")
        self.proj_w, self.proj_b = _linear_params(rng, d_out, d_out, f"{p}.proj")
        self.short_w = self.short_b = None
        if d_in != d_out:
            self.short_w, self.short_b = _linear_params(rng, d_in, d_out, f"{p}.shortcut")
        self.comp_k_w = self.comp_k_b = self.comp_v_w = self.comp_v_b = None
        if plan.memory_enabled:
            self.comp_k_w, self.comp_k_b = _pool_params(plan.compression_factor, d_in, f"{p}.comp_k")
            self.comp_v_w, self.comp_v_b = _pool_params(plan.compression_factor, d_in, f"{p}.comp_v")
        self.relpos: RelPosTable | None = None
        if rel_pos:
            t_in, h_in, w_in = plan.in_extents
            t_max = (plan.memory_len + 1) * t_in
            self.relpos = RelPosTable(
                Parameter(np.zeros((2 * t_max - 1, plan.d_head)), f"{p}.rel_t"),
                Parameter(np.zeros((2 * h_in - 1, plan.d_head)), f"{p}.rel_h"),
                Parameter(np.zeros((2 * w_in - 1, plan.d_head)), f"{p}.rel_w"),
            )
        self.ln2_w, self.ln2_b = _norm_params(d_out, f"{p}.ln2")
        self.fc1_w, self.fc1_b = _linear_params(rng, d_out, plan.mlp_hidden, f"{p}.mlp_fc1")
        self.fc2_w, self.fc2_b = _linear_params(rng, plan.mlp_hidden, d_out, f"{p}.mlp_fc2")

    def parameters(self) -> list[Parameter]:
        out = []
        for v in self.__dict__.values():
            if isinstance(v, Parameter):
                out.append(v)
            elif isinstance(v, RelPosTable):
                out.extend([v.r_t, v.r_h, v.r_w])
        return out

    # -- forward -------------------------------------------------------------

    def _units(self, out_extents) -> tuple[int, int, int]:
        return tuple(n // o for n, o in zip(self.plan.in_extents, out_extents))

    def _memory_kv(self, x: TokenTensor, bank):
        """Cached keys/values ready for attention, oldest first.

        Returns (k_parts, v_parts, positions per axis, per-key masked flags,
        fresh compressed key/value TokenTensors for the bank commit).
        """
        plan = self.plan
        t_in = plan.in_extents[0]
        units = self._units(plan.kv_extents)
        f = plan.compression_factor
        k_parts, v_parts, masked, pos_t, pos_h, pos_w = [], [], [], [], [], []
        fresh_ck = fresh_cv = None
        slots = bank.slots
        for i, slot in enumerate(slots):
            if i == len(slots) - 1:
                if slot.compressed:
                    raise ContractError("newest bank slot is already compressed")
                fresh_ck = compress(slot.key, self.comp_k_w, self.comp_k_b, f)
                fresh_cv = compress(slot.value, self.comp_v_w, self.comp_v_b, f)
                key, value = fresh_ck, fresh_cv
            else:
                if not slot.compressed:
                    raise ContractError(f"older bank slot {i} is uncompressed")
                key, value = slot.key, slot.value
            if key.extents != plan.compressed_extents:
                raise ContractError(
                    f"bank slot {i} extents {key.extents} != expected "
                    f"compressed extents {plan.compressed_extents}"
                )
            k_parts.append(key.data)
            v_parts.append(value.data)
            is_masked = slot.masked or slot.video_id != x.video_id
            masked.extend([is_masked] * key.n_tokens)
            grid_units = (units[0] * f[0], units[1] * f[1], units[2] * f[2])
            tp, hp, wp = token_positions(
                key.extents, grid_units, t_offset=slot.clip_index * t_in
            )
            pos_t.append(tp)
            pos_h.append(hp)
            pos_w.append(wp)
        return k_parts, v_parts, (pos_t, pos_h, pos_w), masked, fresh_ck, fresh_cv

    def forward(self, x: TokenTensor, bank=None, bank_view=None,
                ) -> tuple[TokenTensor, dict]:
        """Apply the block; reads memory from ``bank_view`` (or ``bank``)
        and commits this clip's keys/values to ``bank``."""
        plan = self.plan
        if x.extents != plan.in_extents or x.channels != plan.d_in:
            raise DimensionError(
                f"layer {plan.index} expects extents {plan.in_extents} x "
                f"{plan.d_in} channels, got {x.extents} x {x.channels}"
            )
        use_memory = plan.memory_enabled and bank is not None and plan.memory_len > 0
        if use_memory and bank.layer_id != plan.index:
            raise ContractError(
                f"bank for layer {bank.layer_id} passed to layer {plan.index}"
            )
        read_bank = bank_view if (use_memory and bank_view is not None) else bank
        t_in = plan.in_extents[0]

        h = layernorm(x.data, self.ln1_w, self.ln1_b)
        hx = x.with_data(h)
        qbar = pool(hx, plan.pool_q, self.pool_q_w, self.pool_q_b, self.causal)
        kbar = pool(hx, plan.pool_kv, self.pool_k_w, self.pool_k_b, self.causal)
        vbar = pool(hx, plan.pool_kv, self.pool_v_w, self.pool_v_b, self.causal)

        fresh_ck = fresh_cv = None
        mem_masked: list[bool] = []
        if use_memory and len(read_bank.slots) > 0:
            mk, mv, mpos, mem_masked, fresh_ck, fresh_cv = self._memory_kv(x, read_bank)
            k_pre = concat(mk + [kbar.data], axis=0)
            v_pre = concat(mv + [vbar.data], axis=0)
            kv_units = self._units(plan.kv_extents)
            cur_t, cur_h, cur_w = token_positions(
                plan.kv_extents, kv_units, t_offset=x.clip_index * t_in
            )
            key_t = np.concatenate(mpos[0] + [cur_t])
            key_h = np.concatenate(mpos[1] + [cur_h])
            key_w = np.concatenate(mpos[2] + [cur_w])
        else:
            k_pre, v_pre = kbar.data, vbar.data
            kv_units = self._units(plan.kv_extents)
            key_t, key_h, key_w = token_positions(
                plan.kv_extents, kv_units, t_offset=x.clip_index * t_in
            )

        q = add(matmul(qbar.data, self.q_w), self.q_b)
        k = add(matmul(k_pre, self.k_w), self.k_b)
        v = add(matmul(v_pre, self.v_w), self.v_b)

        q = mul(q, 1.0 / math.sqrt(plan.d_head))
        qh = _split_heads(q, plan.heads)
        kh = _split_heads(k, plan.heads)
        vh = _split_heads(v, plan.heads)
        scores = matmul(qh, transpose(kh, (0, 2, 1)))

        q_units = self._units(plan.q_extents)
        q_pos = token_positions(plan.q_extents, q_units, t_offset=x.clip_index * t_in)
        n_keys = k_pre.shape[0]
        key_mask = np.zeros(n_keys, dtype=bool)
        key_mask[: len(mem_masked)] = mem_masked

        if self.rel_pos:
            r = rel_pos_sum(
                self.relpos, q_pos, (key_t, key_h, key_w), key_valid=~key_mask
            )
            scores = add(scores, relpos_bias_scores(qh, r))

        mask = self._additive_mask(q_pos[0], key_t, key_mask)
        if mask is not None:
            scores = add(scores, mask)

        weights = softmax_lastdim(scores)
        attn = _merge_heads(matmul(weights, vh))
        attn = add(matmul(attn, self.proj_w), self.proj_b)

        short = self._shortcut(x)
        y = add(short, attn)

        m = layernorm(y, self.ln2_w, self.ln2_b)
        m = add(matmul(m, self.fc1_w), self.fc1_b)
        m = gelu(m)
        m = add(matmul(m, self.fc2_w), self.fc2_b)
        y = add(y, m)

        if use_memory:
            from .memory import bank_update

            bank_update(bank, kbar, vbar, fresh_ck, fresh_cv)

        info = {"attended_keys": n_keys, "bank_len": len(bank.slots) if use_memory else 0}
        return qbar.with_data(y), info

    def _additive_mask(self, q_t: np.ndarray, key_t: np.ndarray,
                       key_mask: np.ndarray) -> np.ndarray | None:
        """Combined causal/slot mask [N_q, N_k], or None when nothing is
        masked (so the unmasked forward adds no extra operation)."""
        need = self.causal or key_mask.any()
        if not need:
            return None
        mask = np.zeros((q_t.size, key_t.size))
        if self.causal:
            mask[q_t[:, None] < key_t[None, :]] = MASK_VALUE
        mask[:, key_mask] = MASK_VALUE
        _check_mask(mask)
        return mask

    def _shortcut(self, x: TokenTensor) -> Tensor:
        plan = self.plan
        s = x.data
        if not plan.pool_q.is_identity:
            stride = plan.pool_q.stride
            grid = x.grid()
            # Window-average with kernel = stride, zero-padded up so the
            # output extents equal the query extents exactly.
            pad = []
            for axis, (n, st, q_ext) in enumerate(
                zip(plan.in_extents, stride, plan.q_extents)
            ):
                total = q_ext * st - n
                if total < 0:
                    raise ConfigError(
                        f"shortcut pooling cannot reach extent {q_ext} "
                        f"from {n} with stride {st}"
                    )
                if axis == 0 and self.causal:
                    pad.append((total, 0))
                else:
                    pad.append((total // 2, total - total // 2))
            if any(p != (0, 0) for p in pad):
                grid = pad_grid(grid, pad)
            pooled = mean_pool3d(grid, stride, stride)
            s = reshape(pooled, (-1, plan.d_in))
        if self.short_w is not None:
            s = add(matmul(s, self.short_w), self.short_b)
        return s


def pooled_qkv(x: TokenTensor, layer: AttentionLayer):
    """Pool-then-project Q/K/V for one clip, without memory.

    Returns (Q, K, V, K_bar, V_bar): post-linear projections plus the
    pooled pre-linear keys/values that the memory bank caches.
    """
    plan = layer.plan
    h = x  # caller supplies already-normalized tokens for this contract op
    qbar = pool(h, plan.pool_q, layer.pool_q_w, layer.pool_q_b, layer.causal)
    kbar = pool(h, plan.pool_kv, layer.pool_k_w, layer.pool_k_b, layer.causal)
    vbar = pool(h, plan.pool_kv, layer.pool_v_w, layer.pool_v_b, layer.causal)
    q = qbar.with_data(add(matmul(qbar.data, layer.q_w), layer.q_b))
    k = kbar.with_data(add(matmul(kbar.data, layer.k_w), layer.k_b))
    v = vbar.with_data(add(matmul(vbar.data, layer.v_w), layer.v_b))
    return q, k, v, kbar, vbar
