"""Declarative model descriptions and the derived per-layer plan.

A ``ModelSpec`` is a JSON-compatible description of a streaming multiscale
transformer: cube embedding, stages with pooling attention, per-layer
key/value memory settings.  ``layer_plan`` resolves it into one
``LayerPlan`` per attention block with all extents and channel counts
worked out, which both the runtime model and the analytical cost model
consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence


class ConfigError(ValueError):
    """Raised for inconsistent or unsatisfiable model descriptions."""


def conv_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ConfigError(
            f"pooling output extent < 1 (size={size}, kernel={kernel}, "
            f"stride={stride}, padding={padding})"
        )
    return out


@dataclass(frozen=True)
class PoolSpec:
    """Spatiotemporal pooling: per-axis kernel/stride/padding."""

    kernel: tuple[int, int, int]
    stride: tuple[int, int, int]
    padding: tuple[int, int, int]
    learnable: bool = True

    def out_extents(self, extents: tuple[int, int, int]) -> tuple[int, int, int]:
        return tuple(
            conv_extent(n, k, s, p)
            for n, k, s, p in zip(extents, self.kernel, self.stride, self.padding)
        )

    @property
    def is_identity(self) -> bool:
        return (
            self.kernel == (1, 1, 1)
            and self.stride == (1, 1, 1)
            and self.padding == (0, 0, 0)
        )


def attention_pool_spec(stride: tuple[int, int, int]) -> PoolSpec:
    """Kernel-3 pooling used in attention blocks; identity when stride is 1.

    An all-ones stride resolves to a true no-op (kernel 1, no padding) so
    unpooled layers add no computation; any real stride uses kernel 3 with
    shape-preserving padding.
    """
    if stride == (1, 1, 1):
        return PoolSpec((1, 1, 1), (1, 1, 1), (0, 0, 0))
    return PoolSpec((3, 3, 3), tuple(stride), (1, 1, 1))


def compression_pool_spec(factor: tuple[int, int, int]) -> PoolSpec:
    """Non-overlapping learnable pooling: kernel equals stride, no padding."""
    if any(f < 1 for f in factor):
        raise ConfigError(f"compression factor components must be >= 1: {factor}")
    return PoolSpec(tuple(factor), tuple(factor), (0, 0, 0))


@dataclass(frozen=True)
class StageSpec:
    depth: int
    channels: int
    heads: int
    q_stride: tuple[int, int, int] = (1, 1, 1)  # applied at stage entry
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("stage depth must be >= 1")
        if self.channels % self.heads != 0:
            raise ConfigError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )


@dataclass(frozen=True)
class ModelSpec:
    """Full architecture description; JSON round-trippable."""

    input_t: int
    input_hw: int
    cube_kernel: tuple[int, int, int] = (3, 7, 7)
    cube_stride: tuple[int, int, int] = (2, 4, 4)
    cube_channels: int = 96
    stages: tuple[StageSpec, ...] = ()
    kv_stride_initial: tuple[int, int, int] = (1, 8, 8)
    memory_len: int = 0
    compression_factor: tuple[int, int, int] = (4, 2, 2)
    aug_policy: str = "uniform-50%"
    causal: bool = False
    rel_pos: bool = True
    num_classes: int = 400
    frame_stride: int = 4  # raw-video frames between sampled frames
    in_channels: int = 3

    @property
    def total_depth(self) -> int:
        return sum(s.depth for s in self.stages)

    @property
    def cube_padding(self) -> tuple[int, int, int]:
        return tuple(k // 2 for k in self.cube_kernel)

    def token_extents(self) -> tuple[int, int, int]:
        """Extents after cube embedding."""
        pads = self.cube_padding
        return tuple(
            conv_extent(n, k, s, p)
            for n, k, s, p in zip(
                (self.input_t, self.input_hw, self.input_hw),
                self.cube_kernel,
                self.cube_stride,
                pads,
            )
        )

    def clip_span_seconds(self, fps: float = 30.0) -> float:
        return self.input_t * self.frame_stride / fps

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "ModelSpec":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"spec is not valid JSON: {e}") from e
        return _spec_from_dict(raw)


def _as_triple(v, path: str) -> tuple[int, int, int]:
    if not (isinstance(v, (list, tuple)) and len(v) == 3):
        raise ConfigError(f"{path}: expected a 3-element list, got {v!r}")
    return tuple(int(x) for x in v)


def _spec_from_dict(raw: dict) -> ModelSpec:
    if not isinstance(raw, dict):
        raise ConfigError("spec root must be an object")
    try:
        stages = tuple(
            StageSpec(
                depth=int(s["depth"]),
                channels=int(s["channels"]),
                heads=int(s["heads"]),
                q_stride=_as_triple(s.get("q_stride", [1, 1, 1]), "stages[].q_stride"),
                mlp_ratio=float(s.get("mlp_ratio", 4.0)),
            )
            for s in raw["stages"]
        )
        kwargs = dict(
            input_t=int(raw["input_t"]),
            input_hw=int(raw["input_hw"]),
            stages=stages,
        )
        for key in (
            "cube_kernel",
            "cube_stride",
            "kv_stride_initial",
            "compression_factor",
        ):
            if key in raw:
                kwargs[key] = _as_triple(raw[key], key)
        for key in (
            "cube_channels",
            "memory_len",
            "num_classes",
            "frame_stride",
            "in_channels",
        ):
            if key in raw:
                kwargs[key] = int(raw[key])
        for key in ("causal", "rel_pos"):
            if key in raw:
                kwargs[key] = bool(raw[key])
        if "aug_policy" in raw:
            kwargs["aug_policy"] = str(raw["aug_policy"])
        return ModelSpec(**kwargs)
    except KeyError as e:
        raise ConfigError(f"spec missing required field {e.args[0]!r}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad spec field: {e}") from e


def load_spec(path: str) -> ModelSpec:
    with open(path) as f:
        return ModelSpec.from_json(f.read())


def augmented_layers(policy: str, stages: Sequence[StageSpec]) -> list[int]:
    """Resolve an augmentation policy into explicit global layer indices.

    ``uniform-k%`` places round(L*k/100) layers evenly, biased toward the
    end so 50% on 16 layers selects every other layer (1,3,...,15).
    ``early`` covers the first two stages, ``middle`` the next-to-last
    stage, ``late`` the last stage.
    """
    total = sum(s.depth for s in stages)
    if policy == "none":
        return []
    if policy == "all":
        return list(range(total))
    if policy.startswith("uniform-") and policy.endswith("%"):
        pct = float(policy[len("uniform-"):-1])
        if not 0 < pct <= 100:
            raise ConfigError(f"uniform policy percentage out of range: {policy}")
        count = max(1, round(total * pct / 100))
        picked = sorted({(i + 1) * total // count - 1 for i in range(count)})
        return picked
    bounds = []
    start = 0
    for s in stages:
        bounds.append((start, start + s.depth))
        start += s.depth
    if policy == "early":
        hi = bounds[min(1, len(bounds) - 1)][1]
        return list(range(0, hi))
    if policy == "middle":
        lo, hi = bounds[-2] if len(bounds) >= 2 else bounds[-1]
        return list(range(lo, hi))
    if policy == "late":
        lo, hi = bounds[-1]
        return list(range(lo, hi))
    raise ConfigError(f"unknown augmentation policy: {policy!r}")


@dataclass(frozen=True)
class LayerPlan:
    """One attention block with all derived shapes resolved."""

    index: int
    stage: int
    d_in: int
    d_out: int
    heads: int
    in_extents: tuple[int, int, int]
    q_extents: tuple[int, int, int]
    kv_extents: tuple[int, int, int]
    pool_q: PoolSpec
    pool_kv: PoolSpec
    mlp_hidden: int
    memory_enabled: bool
    memory_len: int
    compression_factor: tuple[int, int, int]
    compressed_extents: tuple[int, int, int]

    @property
    def n_in(self) -> int:
        t, h, w = self.in_extents
        return t * h * w

    @property
    def n_q(self) -> int:
        t, h, w = self.q_extents
        return t * h * w

    @property
    def n_kv(self) -> int:
        t, h, w = self.kv_extents
        return t * h * w

    @property
    def n_compressed(self) -> int:
        t, h, w = self.compressed_extents
        return t * h * w

    @property
    def d_head(self) -> int:
        return self.d_out // self.heads


def _kv_stride_for(extents, target) -> tuple[int, int, int]:
    stride = tuple(max(1, n // t) for n, t in zip(extents, target))
    return stride


def layer_plan(spec: ModelSpec) -> list[LayerPlan]:
    """Resolve the spec into per-block shapes.

    Channel counts change at stage entry (in the Q/K/V linears); K/V pooling
    strides shrink with resolution so pooled key/value extents stay constant
    across the network.
    """
    if not spec.stages:
        raise ConfigError("spec has no stages")
    extents = spec.token_extents()
    kv_target = attention_pool_spec(spec.kv_stride_initial).out_extents(extents)
    aug = set(augmented_layers(spec.aug_policy, spec.stages)) if spec.memory_len > 0 else set()
    comp_spec = compression_pool_spec(spec.compression_factor)

    plans: list[LayerPlan] = []
    d_prev = spec.cube_channels
    idx = 0
    for si, stage in enumerate(spec.stages):
        if si == 0 and stage.channels != spec.cube_channels:
            raise ConfigError(
                "first stage channels must match cube embedding channels"
            )
        for li in range(stage.depth):
            entry = li == 0
            q_stride = tuple(stage.q_stride) if (entry and si > 0) else (1, 1, 1)
            pool_q = attention_pool_spec(q_stride)
            q_extents = pool_q.out_extents(extents)
            kv_stride = _kv_stride_for(extents, kv_target)
            pool_kv = attention_pool_spec(kv_stride)
            kv_extents = pool_kv.out_extents(extents)
            mem_here = idx in aug
            comp_extents = comp_spec.out_extents(
                tuple(
                    -(-n // f) * f  # padded up to a multiple of the factor
                    for n, f in zip(kv_extents, spec.compression_factor)
                )
            ) if mem_here else kv_extents
            plans.append(
                LayerPlan(
                    index=idx,
                    stage=si,
                    d_in=d_prev,
                    d_out=stage.channels,
                    heads=stage.heads,
                    in_extents=extents,
                    q_extents=q_extents,
                    kv_extents=kv_extents,
                    pool_q=pool_q,
                    pool_kv=pool_kv,
                    mlp_hidden=int(stage.channels * stage.mlp_ratio),
                    memory_enabled=mem_here,
                    memory_len=spec.memory_len if mem_here else 0,
                    compression_factor=tuple(spec.compression_factor),
                    compressed_extents=comp_extents,
                )
            )
            extents = q_extents
            d_prev = stage.channels
            idx += 1
    return plans


def mvit16_spec(**overrides) -> ModelSpec:
    """16-layer, 16-frame reference configuration (224^2 input)."""
    base = dict(
        input_t=16,
        input_hw=224,
        stages=(
            StageSpec(depth=1, channels=96, heads=1),
            StageSpec(depth=2, channels=192, heads=2, q_stride=(1, 2, 2)),
            StageSpec(depth=11, channels=384, heads=4, q_stride=(1, 2, 2)),
            StageSpec(depth=2, channels=768, heads=8, q_stride=(1, 2, 2)),
        ),
        memory_len=0,
        num_classes=400,
    )
    base.update(overrides)
    return ModelSpec(**base)


def memvit16_spec(memory_len: int = 2, **overrides) -> ModelSpec:
    return mvit16_spec(memory_len=memory_len, **overrides)
