"""Network assembly: cube embedding, stacked attention blocks, head.

A ``Model`` is built deterministically from a ``ModelSpec`` and a seed.
``forward_clip`` runs one clip through the network, reading and updating
the per-layer memory banks in place, and returns per-clip logits plus
diagnostics.  A small decoupled-weight-decay optimizer and a versioned
checkpoint format round out the training loop used by the synthetic
tasks.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .attention import AttentionLayer, trunc_normal
from .autodiff import (
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    add,
    cross_entropy_logits,
    im2col3d,
    layernorm,
    matmul,
    mean_tokens,
    mul,
    reshape,
)
from .config import ModelSpec, layer_plan
from .memory import MemoryBank, memory_drop_augment
from .tokens import TokenTensor


@dataclass
class StreamOutput:
    logits: Tensor  # [num_classes]
    attended_keys: list[int]  # per layer
    bank_sizes: dict[int, int]  # layer index -> slot count after update


class Model:
    def __init__(self, spec: ModelSpec, seed: int):
        self.spec = spec
        self.plans = layer_plan(spec)
        rng = np.random.default_rng(seed)
        kprod = math.prod(spec.cube_kernel)
        self.cube_w = Parameter(
            trunc_normal(rng, (kprod * spec.in_channels, spec.cube_channels)),
            "cube.weight",
        )
        self.cube_b = Parameter(np.zeros(spec.cube_channels), "cube.bias")
        self.layers = [
            AttentionLayer(plan, rng, causal=spec.causal, rel_pos=spec.rel_pos)
            for plan in self.plans
        ]
        d_last = self.plans[-1].d_out
        self.norm_w = Parameter(np.ones(d_last), "norm.weight")
        self.norm_b = Parameter(np.zeros(d_last), "norm.bias")
        self.head_w = Parameter(
            trunc_normal(rng, (d_last, spec.num_classes)), "head.weight"
        )
        self.head_b = Parameter(np.zeros(spec.num_classes), "head.bias")

    def parameters(self) -> dict[str, Parameter]:
        params = [self.cube_w, self.cube_b]
        for layer in self.layers:
            params.extend(layer.parameters())
        params.extend([self.norm_w, self.norm_b, self.head_w, self.head_b])
        out = {}
        for p in params:
            if p.name in out:
                raise ContractError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    """Deterministic construction: truncated-normal (std 0.02) linears,
    average-filter pooling kernels, zero positional tables."""
    return Model(spec, seed)


def make_causal(spec: ModelSpec) -> ModelSpec:
    """Causal variant: left-padded temporal convolutions (cube embedding and
    all pooling) plus an additive attention mask forbidding future keys.
    There is no class token in either variant."""
    return replace(spec, causal=True)


def fresh_banks(model: Model) -> dict[int, MemoryBank]:
    return {
        plan.index: MemoryBank(layer_id=plan.index, max_len=plan.memory_len)
        for plan in model.plans
        if plan.memory_enabled
    }


def _cube_embed(model: Model, clip: np.ndarray) -> Tensor:
    spec = model.spec
    expected = (spec.input_t, spec.input_hw, spec.input_hw, spec.in_channels)
    if clip.shape != expected:
        raise DimensionError(f"clip shape {clip.shape} != spec shape {expected}")
    pt, ph, pw = spec.cube_padding
    t_pad = (2 * pt, 0) if spec.causal else (pt, pt)
    cols = im2col3d(
        np.asarray(clip, dtype=np.float64),
        spec.cube_kernel,
        spec.cube_stride,
        (t_pad, (ph, ph), (pw, pw)),
    )
    return add(matmul(Tensor(cols), model.cube_w), model.cube_b)


def forward_clip(
    model: Model,
    clip: np.ndarray,
    banks: dict[int, MemoryBank],
    training: bool = False,
    clip_index: int = 0,
    video_id: int = 0,
    rng: np.random.Generator | None = None,
    drop_augment: bool = False,
) -> StreamOutput:
    """One clip through the network; memory banks are updated in place."""
    spec = model.spec
    x = TokenTensor(
        _cube_embed(model, clip),
        *spec.token_extents(),
        clip_index=clip_index,
        video_id=video_id,
    )
    attended = []
    for layer, plan in zip(model.layers, model.plans):
        bank = banks.get(plan.index) if plan.memory_enabled else None
        view = None
        if bank is not None and training and drop_augment and bank.max_len > 1:
            if rng is None:
                raise ContractError("drop augmentation requires an rng")
            view = memory_drop_augment(bank, rng, training=training)
        x, info = layer.forward(x, bank=bank, bank_view=view)
        attended.append(info["attended_keys"])
    h = layernorm(x.data, model.norm_w, model.norm_b)
    pooled = mean_tokens(h)
    d = pooled.shape[0]
    logits = add(matmul(reshape(pooled, (1, d)), model.head_w), model.head_b)
    return StreamOutput(
        logits=reshape(logits, (spec.num_classes,)),
        attended_keys=attended,
        bank_sizes={i: len(b) for i, b in banks.items()},
    )


# -- training ----------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay adaptive optimizer (decay on >=2-D weights)."""

    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[k] = b1 * self._m[k] + (1 - b1) * g
            v = self._v[k] = b2 * self._v[k] + (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    frac = min(max(step / total, 0.0), 1.0)
    return 0.5 * base * (1.0 + math.cos(math.pi * frac))


def train_step(
    model: Model,
    sequences: list[list[tuple[np.ndarray, int | None]]],
    optimizer: AdamW,
    curriculum_len: int,
    rng: np.random.Generator,
    lr: float | None = None,
    drop_augment: bool = True,
) -> float:
    """One optimizer update over a batch of clip sequences.

    Each sequence is processed clip by clip through a fresh set of banks,
    truncated to ``curriculum_len`` clips; cross-entropy is accumulated on
    every clip that carries a label (None labels are skipped).
    """
    if curriculum_len < 1:
        raise ContractError("curriculum_len must be >= 1")
    optimizer.zero_grad()
    losses = []
    for seq in sequences:
        banks = fresh_banks(model)
        for ci, (clip, label) in enumerate(seq[:curriculum_len]):
            out = forward_clip(
                model, clip, banks, training=True, clip_index=ci, video_id=0,
                rng=rng, drop_augment=drop_augment,
            )
            if label is not None:
                losses.append(cross_entropy_logits(out.logits, int(label)))
    if not losses:
        raise ContractError("no labeled clips in batch")
    total = losses[0]
    for l in losses[1:]:
        total = add(total, l)
    loss = mul(total, 1.0 / len(losses))
    loss.backward()
    optimizer.step(lr=lr)
    return float(loss.data)


# -- checkpoints -------------------------------------------------------------
#
# Layout (little-endian): magic "MVCK" | u32 version=1 | u32 spec_len |
# spec JSON | u32 param_count | per parameter: u16 name_len | name utf-8 |
# u8 rank | u64 dims[rank] | f32 payload (row-major).

_CK_MAGIC = b"MVCK"
_CK_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path: str) -> None:
    params = model.parameters()
    spec_json = model.spec.to_json().encode()
    with open(path, "wb") as f:
        f.write(_CK_MAGIC)
        f.write(struct.pack("<II", _CK_VERSION, len(spec_json)))
        f.write(spec_json)
        f.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            f.write(p.data.astype("<f4").tobytes())


def load_checkpoint(path: str, seed: int = 0) -> Model:
    """Rebuild the model from the embedded spec and stored parameters.

    Parameters are stored in f32; loaded models therefore match a
    freshly-saved model bit-exactly but not an unsaved f64 training state.
    """
    with open(path, "rb") as f:
        data = f.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"truncated checkpoint: {what} at offset {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != _CK_MAGIC:
        raise CheckpointError("bad magic (not a checkpoint)")
    version, spec_len = struct.unpack("<II", take(8, "header"))
    if version != _CK_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    spec = ModelSpec.from_json(take(spec_len, "spec").decode())
    model = build_model(spec, seed=seed)
    params = model.parameters()
    (count,) = struct.unpack("<I", take(4, "param count"))
    if count != len(params):
        raise CheckpointError(
            f"checkpoint has {count} parameters, model expects {len(params)}"
        )
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode()
        if name not in params:
            raise CheckpointError(f"unknown parameter {name!r}")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        p = params[name]
        if tuple(dims) != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {tuple(dims)} != "
                f"model shape {p.data.shape}"
            )
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(4 * n, f"payload of {name}")
        p.data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)
        seen.add(name)
    if off != len(data):
        raise CheckpointError(f"trailing bytes at offset {off}")
    return model
