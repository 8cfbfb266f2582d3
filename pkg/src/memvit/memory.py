"""Per-layer bounded key/value memory banks.

A bank holds the most recent ``max_len`` clips' pooled keys and values,
oldest first.  All slots but the newest are compressed; the newest is
cached uncompressed and gets compressed during the *next* forward pass
(pipelined compression).  Slot payloads are rounded to float32 at
insertion so the on-disk snapshot format (which stores f32) round-trips
bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import ContractError, Tensor
from .tokens import TokenTensor


class BankParseError(ValueError):
    """Corrupt or truncated bank snapshot; message includes the byte offset."""


def _quantize_f32(a: np.ndarray) -> np.ndarray:
    """Round to float32 precision while keeping float64 storage."""
    return a.astype(np.float32).astype(np.float64)


@dataclass
class MemorySlot:
    key: TokenTensor
    value: TokenTensor
    compressed: bool
    clip_index: int
    video_id: int
    masked: bool = False  # view-only flag; never serialized

    def __post_init__(self):
        if self.key.extents != self.value.extents:
            raise ContractError(
                f"slot key extents {self.key.extents} != value extents "
                f"{self.value.extents}"
            )


def _make_slot(k: TokenTensor, v: TokenTensor, compressed: bool) -> MemorySlot:
    """Detach and f32-round token data; slots never carry gradient history."""

    def frozen(t: TokenTensor) -> TokenTensor:
        return t.with_data(Tensor(_quantize_f32(t.data.data)))

    return MemorySlot(
        key=frozen(k),
        value=frozen(v),
        compressed=compressed,
        clip_index=k.clip_index,
        video_id=k.video_id,
    )


class MemoryBank:
    """Ordered (oldest-first) FIFO of at most ``max_len`` slots."""

    def __init__(self, layer_id: int, max_len: int):
        if max_len < 0:
            raise ContractError("bank max_len must be >= 0")
        self.layer_id = layer_id
        self.max_len = max_len
        self.slots: list[MemorySlot] = []

    def __len__(self):
        return len(self.slots)

    @property
    def newest(self) -> MemorySlot | None:
        return self.slots[-1] if self.slots else None

    def validate(self):
        """Assert the structural invariants; used by tests after each update."""
        if len(self.slots) > self.max_len:
            raise ContractError(
                f"bank holds {len(self.slots)} slots > max_len {self.max_len}"
            )
        for i, s in enumerate(self.slots):
            if i < len(self.slots) - 1 and not s.compressed:
                raise ContractError(f"non-newest slot {i} is uncompressed")
            if s.key.data.requires_grad or s.value.data.requires_grad:
                raise ContractError(f"slot {i} carries gradient history")
        clips = [s.clip_index for s in self.slots]
        if any(b <= a for a, b in zip(clips, clips[1:])):
            raise ContractError(f"slot clip indices not strictly increasing: {clips}")


def bank_update(
    bank: MemoryBank,
    new_k: TokenTensor,
    new_v: TokenTensor,
    freshly_compressed_k: TokenTensor | None,
    freshly_compressed_v: TokenTensor | None,
) -> None:
    """Commit one attention step's cache mutation.

    Replaces the newest existing slot with its compressed form (computed by
    the caller during this forward), appends the current clip's uncompressed
    keys/values, and evicts the oldest slot past ``max_len``.
    """
    if bank.max_len == 0:
        return
    if bank.slots:
        if freshly_compressed_k is None or freshly_compressed_v is None:
            raise ContractError(
                "bank has an uncompressed newest slot but no compressed "
                "replacement was supplied"
            )
        old = bank.slots[-1]
        if freshly_compressed_k.extents != freshly_compressed_v.extents:
            raise ContractError(
                f"compressed key extents {freshly_compressed_k.extents} != "
                f"value extents {freshly_compressed_v.extents}"
            )
        repl = _make_slot(freshly_compressed_k, freshly_compressed_v, compressed=True)
        repl = replace(repl, clip_index=old.clip_index, video_id=old.video_id)
        bank.slots[-1] = repl
    elif freshly_compressed_k is not None or freshly_compressed_v is not None:
        raise ContractError("compressed replacement supplied for an empty bank")
    bank.slots.append(_make_slot(new_k, new_v, compressed=False))
    if len(bank.slots) > bank.max_len:
        del bank.slots[0]


def boundary_reset(bank: MemoryBank, new_video_id: int) -> None:
    """Zero the payload of every slot cached from a different video.

    Slot structure (count, extents, metadata) is retained so attended-key
    counts and per-clip cost stay constant; the attention layer additionally
    masks slots whose video_id differs from the current clip's.
    """
    for i, s in enumerate(bank.slots):
        if s.video_id != new_video_id:
            bank.slots[i] = replace(
                s,
                key=s.key.with_data(Tensor(np.zeros_like(s.key.data.data))),
                value=s.value.with_data(Tensor(np.zeros_like(s.value.data.data))),
            )


class MaskedBankView:
    """Read-only drop-augmented view: the m oldest slots zeroed and masked."""

    def __init__(self, bank: MemoryBank, dropped: int):
        self.layer_id = bank.layer_id
        self.max_len = bank.max_len
        self.dropped = dropped
        self.slots = [
            replace(
                s,
                key=s.key.with_data(Tensor(np.zeros_like(s.key.data.data))),
                value=s.value.with_data(Tensor(np.zeros_like(s.value.data.data))),
                masked=True,
            )
            if i < dropped
            else s
            for i, s in enumerate(bank.slots)
        ]


def memory_drop_augment(
    bank: MemoryBank, rng: np.random.Generator, training: bool = True
) -> MaskedBankView:
    """Zero-mask a uniformly sampled count m in [0, max_len-1] of the oldest
    slots, for this forward only; the bank itself is unmodified."""
    if not training:
        raise ContractError("memory_drop_augment is a training-time augmentation")
    m = int(rng.integers(0, bank.max_len)) if bank.max_len > 1 else 0
    return MaskedBankView(bank, min(m, len(bank.slots)))


# -- serialization -----------------------------------------------------------
#
# Snapshot layout (little-endian):
#   magic "MVBK" | u32 version=1 | u32 layer_id | u32 max_len | u32 slot_count
#   per slot: u8 compressed | u64 clip_index | u64 video_id
#             | u8 rank=4 | u64 extents[4] = (t, h, w, channels)
#             | f32 payload, row-major: key tokens then value tokens
#
# Payloads are exact because slot data is f32-rounded at insertion.

_MAGIC = b"MVBK"
_VERSION = 1


def bank_serialize(bank: MemoryBank) -> bytes:
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<III", _VERSION, bank.layer_id, bank.max_len)
    out += struct.pack("<I", len(bank.slots))
    for s in bank.slots:
        t, h, w = s.key.extents
        d = s.key.channels
        out += struct.pack("<BQQ", 1 if s.compressed else 0, s.clip_index, s.video_id)
        out += struct.pack("<B", 4)
        out += struct.pack("<4Q", t, h, w, d)
        out += s.key.data.data.astype("<f4").tobytes()
        out += s.value.data.data.astype("<f4").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise BankParseError(
                f"truncated snapshot: needed {n} bytes for {what} at offset "
                f"{self.off}, have {len(self.data) - self.off}"
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def bank_deserialize(data: bytes) -> MemoryBank:
    r = _Reader(data)
    if r.take(4, "magic") != _MAGIC:
        raise BankParseError("bad magic at offset 0 (not a bank snapshot)")
    version, layer_id, max_len = r.unpack("<III", "header")
    if version != _VERSION:
        raise BankParseError(f"unsupported snapshot version {version} at offset 4")
    (slot_count,) = r.unpack("<I", "slot count")
    bank = MemoryBank(layer_id=layer_id, max_len=max_len)
    slots: list[MemorySlot] = []
    for i in range(slot_count):
        compressed, clip_index, video_id = r.unpack("<BQQ", f"slot {i} header")
        (rank,) = r.unpack("<B", f"slot {i} rank")
        if rank != 4:
            raise BankParseError(f"slot {i}: unsupported rank {rank} at offset {r.off - 1}")
        t, h, w, d = r.unpack("<4Q", f"slot {i} extents")
        n = t * h * w
        payload = r.take(2 * n * d * 4, f"slot {i} payload")
        arr = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        key = TokenTensor(Tensor(arr[: n * d].reshape(n, d)), t, h, w, clip_index, video_id)
        val = TokenTensor(Tensor(arr[n * d :].reshape(n, d)), t, h, w, clip_index, video_id)
        slots.append(
            MemorySlot(
                key=key,
                value=val,
                compressed=bool(compressed),
                clip_index=clip_index,
                video_id=video_id,
            )
        )
    if r.off != len(data):
        raise BankParseError(f"trailing bytes after slot {slot_count - 1} at offset {r.off}")
    bank.slots = slots
    bank.validate()
    return bank
