"""Bank update protocol, boundary handling, drop augmentation, snapshots."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from memvit.autodiff import ContractError, Tensor
from memvit.memory import (
    BankParseError,
    MemoryBank,
    MemorySlot,
    bank_deserialize,
    bank_serialize,
    bank_update,
    boundary_reset,
    memory_drop_augment,
)
from memvit.tokens import TokenTensor


def tok(rng, extents, d, clip_index=0, video_id=0):
    t, h, w = extents
    return TokenTensor(
        Tensor(rng.standard_normal((t * h * w, d))), t, h, w, clip_index, video_id
    )


def make_warm_bank(rng, n_updates, max_len=2, extents=(1, 2, 2), c_extents=(1, 1, 1),
                   d=3, video_id=0):
    bank = MemoryBank(layer_id=0, max_len=max_len)
    for ci in range(n_updates):
        kv = [tok(rng, extents, d, ci, video_id) for _ in range(2)]
        if bank.slots:
            ck, cv = (tok(rng, c_extents, d, ci, video_id) for _ in range(2))
        else:
            ck = cv = None
        bank_update(bank, kv[0], kv[1], ck, cv)
    return bank


class TestBankUpdate:
    def test_hand_trace_m2(self, rng):
        """[DERIVED] full hand trace of three updates at capacity 2."""
        bank = MemoryBank(layer_id=3, max_len=2)

        k0, v0 = tok(rng, (1, 2, 2), 3, 0), tok(rng, (1, 2, 2), 3, 0)
        bank_update(bank, k0, v0, None, None)
        bank.validate()
        assert [s.compressed for s in bank.slots] == [False]
        assert bank.newest.clip_index == 0
        f32 = k0.data.data.astype(np.float32).astype(np.float64)
        assert np.array_equal(bank.slots[0].key.data.data, f32)

        c0k, c0v = tok(rng, (1, 1, 1), 3, 0), tok(rng, (1, 1, 1), 3, 0)
        k1, v1 = tok(rng, (1, 2, 2), 3, 1), tok(rng, (1, 2, 2), 3, 1)
        bank_update(bank, k1, v1, c0k, c0v)
        bank.validate()
        assert [s.compressed for s in bank.slots] == [True, False]
        assert [s.clip_index for s in bank.slots] == [0, 1]
        assert bank.slots[0].key.extents == (1, 1, 1)

        c1k, c1v = tok(rng, (1, 1, 1), 3, 1), tok(rng, (1, 1, 1), 3, 1)
        k2, v2 = tok(rng, (1, 2, 2), 3, 2), tok(rng, (1, 2, 2), 3, 2)
        bank_update(bank, k2, v2, c1k, c1v)
        bank.validate()
        # slot for clip 0 evicted; clip 1 now compressed; clip 2 fresh
        assert [s.clip_index for s in bank.slots] == [1, 2]
        assert [s.compressed for s in bank.slots] == [True, False]

    def test_hand_trace_m1(self, rng):
        bank = MemoryBank(layer_id=0, max_len=1)
        bank_update(bank, tok(rng, (1, 1, 1), 2, 0), tok(rng, (1, 1, 1), 2, 0), None, None)
        c = tok(rng, (1, 1, 1), 2, 0)
        bank_update(bank, tok(rng, (1, 1, 1), 2, 1), tok(rng, (1, 1, 1), 2, 1), c, c)
        bank.validate()
        assert len(bank) == 1
        assert bank.newest.clip_index == 1 and not bank.newest.compressed

    def test_zero_capacity_is_noop(self, rng):
        bank = MemoryBank(layer_id=0, max_len=0)
        bank_update(bank, tok(rng, (1, 1, 1), 2), tok(rng, (1, 1, 1), 2), None, None)
        assert len(bank) == 0

    def test_slots_are_detached(self, rng):
        bank = make_warm_bank(rng, 2)
        for s in bank.slots:
            assert not s.key.data.requires_grad
            assert not s.value.data.requires_grad

    def test_missing_replacement_raises(self, rng):
        bank = make_warm_bank(rng, 1)
        with pytest.raises(ContractError):
            bank_update(bank, tok(rng, (1, 2, 2), 3, 1), tok(rng, (1, 2, 2), 3, 1),
                        None, None)

    def test_replacement_for_empty_bank_raises(self, rng):
        bank = MemoryBank(layer_id=0, max_len=2)
        c = tok(rng, (1, 1, 1), 3)
        with pytest.raises(ContractError):
            bank_update(bank, tok(rng, (1, 2, 2), 3), tok(rng, (1, 2, 2), 3), c, c)

    def test_mismatched_compressed_extents_raise(self, rng):
        bank = make_warm_bank(rng, 1)
        ck = tok(rng, (1, 1, 1), 3, 1)
        cv = tok(rng, (1, 2, 1), 3, 1)
        with pytest.raises(ContractError):
            bank_update(bank, tok(rng, (1, 2, 2), 3, 1), tok(rng, (1, 2, 2), 3, 1),
                        ck, cv)


class TestValidate:
    def test_rejects_overfull(self, rng):
        bank = make_warm_bank(rng, 2, max_len=2)
        bank.max_len = 1
        with pytest.raises(ContractError):
            bank.validate()

    def test_rejects_uncompressed_older_slot(self, rng):
        bank = make_warm_bank(rng, 2)
        bank.slots[0].compressed = False
        with pytest.raises(ContractError):
            bank.validate()

    def test_rejects_nonincreasing_clips(self, rng):
        bank = make_warm_bank(rng, 2)
        bank.slots[1].clip_index = bank.slots[0].clip_index
        with pytest.raises(ContractError):
            bank.validate()

    def test_rejects_negative_capacity(self):
        with pytest.raises(ContractError):
            MemoryBank(layer_id=0, max_len=-1)


class TestBoundaryReset:
    def test_same_video_is_bit_noop(self, rng):
        bank = make_warm_bank(rng, 2, video_id=4)
        before = [s.key.data.data.copy() for s in bank.slots]
        boundary_reset(bank, 4)
        for s, b in zip(bank.slots, before):
            assert np.array_equal(s.key.data.data, b)

    def test_foreign_slots_zeroed_structure_kept(self, rng):
        bank = make_warm_bank(rng, 2, video_id=4)
        boundary_reset(bank, 5)
        assert len(bank) == 2
        for s in bank.slots:
            assert np.all(s.key.data.data == 0)
            assert np.all(s.value.data.data == 0)
            assert s.video_id == 4  # metadata retained for masking
        bank.validate()

    def test_idempotent(self, rng):
        bank = make_warm_bank(rng, 2, video_id=4)
        boundary_reset(bank, 5)
        snap = bank_serialize(bank)
        boundary_reset(bank, 5)
        assert bank_serialize(bank) == snap


class TestDropAugment:
    def test_view_masks_oldest_and_leaves_bank_alone(self, rng):
        bank = make_warm_bank(rng, 4, max_len=4)
        before = bank_serialize(bank)
        view = None
        r = np.random.default_rng(0)
        while view is None or view.dropped != 2:
            view = memory_drop_augment(bank, r)
        assert [s.masked for s in view.slots] == [True, True, False, False]
        assert np.all(view.slots[0].key.data.data == 0)
        assert not np.all(view.slots[2].key.data.data == 0)
        assert bank_serialize(bank) == before  # bank untouched

    def test_inference_time_raises(self, rng):
        bank = make_warm_bank(rng, 2)
        with pytest.raises(ContractError):
            memory_drop_augment(bank, np.random.default_rng(0), training=False)

    def test_capacity_one_never_drops(self, rng):
        bank = make_warm_bank(rng, 1, max_len=1)
        for _ in range(20):
            assert memory_drop_augment(bank, np.random.default_rng(0)).dropped == 0

    def test_drop_count_bounded_by_m_minus_one(self, rng):
        bank = make_warm_bank(rng, 4, max_len=4)
        r = np.random.default_rng(1)
        draws = {memory_drop_augment(bank, r).dropped for _ in range(500)}
        assert draws == {0, 1, 2, 3}  # never all M slots


class TestSnapshots:
    def test_round_trip_bit_exact(self, rng):
        bank = make_warm_bank(rng, 3, max_len=2, video_id=6)
        again = bank_deserialize(bank_serialize(bank))
        assert again.layer_id == bank.layer_id
        assert again.max_len == bank.max_len
        assert len(again) == len(bank)
        for a, b in zip(again.slots, bank.slots):
            assert a.compressed == b.compressed
            assert a.clip_index == b.clip_index
            assert a.video_id == b.video_id
            assert a.key.extents == b.key.extents
            assert np.array_equal(a.key.data.data, b.key.data.data)
            assert np.array_equal(a.value.data.data, b.value.data.data)
        # and the serialized form itself is a fixed point
        assert bank_serialize(again) == bank_serialize(bank)

    def test_empty_bank_round_trip(self):
        bank = MemoryBank(layer_id=9, max_len=3)
        again = bank_deserialize(bank_serialize(bank))
        assert (again.layer_id, again.max_len, len(again)) == (9, 3, 0)

    def test_bad_magic(self):
        with pytest.raises(BankParseError, match="magic"):
            bank_deserialize(b"NOPE" + b"\x00" * 16)

    def test_bad_version(self, rng):
        blob = bytearray(bank_serialize(make_warm_bank(rng, 1)))
        blob[4] = 99
        with pytest.raises(BankParseError, match="version"):
            bank_deserialize(bytes(blob))

    def test_truncation_reports_offset(self, rng):
        blob = bank_serialize(make_warm_bank(rng, 2))
        for cut in (2, 10, 17, len(blob) // 2, len(blob) - 3):
            with pytest.raises(BankParseError, match="offset"):
                bank_deserialize(blob[:cut])

    def test_trailing_bytes_rejected(self, rng):
        blob = bank_serialize(make_warm_bank(rng, 1))
        with pytest.raises(BankParseError, match="trailing"):
            bank_deserialize(blob + b"\x00")

    def test_bad_rank_rejected(self, rng):
        blob = bytearray(bank_serialize(make_warm_bank(rng, 1)))
        # rank byte sits after header(20) + slot header (1 + 8 + 8)
        assert blob[20 + 17] == 4
        blob[20 + 17] = 3
        with pytest.raises(BankParseError, match="rank"):
            bank_deserialize(bytes(blob))

    @given(
        n_updates=st.integers(0, 4),
        max_len=st.integers(1, 3),
        d=st.integers(1, 5),
        seed=st.integers(0, 50),
    )
    @settings(max_examples=30, deadline=None)
    def test_property_round_trip(self, n_updates, max_len, d, seed):
        r = np.random.default_rng(seed)
        bank = make_warm_bank(r, n_updates, max_len=max_len, d=d)
        blob = bank_serialize(bank)
        assert bank_serialize(bank_deserialize(blob)) == blob
