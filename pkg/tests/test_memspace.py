import random

import pytest

from rdmaflow import errors
from rdmaflow.memspace import (ArenaAllocator, BufferRef, MemorySpace,
                               null_buffer)


def make_space(capacity=64 * 1024, **kw):
    return MemorySpace(0, capacity, **kw)


class TestRegions:
    def test_registered_region_is_aligned(self):
        space = make_space()
        h = space.allocate_region(4096, register=True)
        assert h.length == 4096
        assert h.base_addr % 8 == 0
        assert h.access_token != 0
        space.check_registered(h)

    def test_zero_length_rejected(self):
        space = make_space()
        with pytest.raises(errors.ZeroLength):
            space.allocate_region(0)

    def test_capacity_exhaustion_at_seventeenth_region(self):
        space = make_space(64 * 1024)
        for _ in range(16):
            space.allocate_region(4096)
        with pytest.raises(errors.OutOfMemory):
            space.allocate_region(4096)

    def test_region_table_limit(self):
        space = make_space(max_regions=4)
        for _ in range(4):
            space.allocate_region(8)
        with pytest.raises(errors.OutOfMemory):
            space.allocate_region(8)

    def test_unregistered_region_has_no_token(self):
        space = make_space()
        h = space.allocate_region(64, register=False)
        assert h.access_token == 0
        with pytest.raises(errors.NotRegistered):
            space.check_registered(h)

    def test_remote_access_checks(self):
        space = make_space()
        h = space.allocate_region(256, register=True)
        space.check_remote_access(h.base_addr, 256, h.access_token)
        with pytest.raises(errors.BadToken):
            space.check_remote_access(h.base_addr, 256, h.access_token ^ 1)
        with pytest.raises(errors.RemoteOutOfBounds):
            space.check_remote_access(h.base_addr, 257, h.access_token)

    def test_token_gate_fuzz(self):
        # wrong tokens must always fail, over a large random sample
        space = make_space()
        h = space.allocate_region(128, register=True)
        rng = random.Random(0xF00D)
        for _ in range(1000):
            bad = rng.getrandbits(64)
            if bad == h.access_token:
                continue
            with pytest.raises(errors.BadToken):
                space.check_remote_access(h.base_addr, 128, bad)


class TestCopyCounters:
    def test_zero_byte_copy_is_a_noop(self):
        space = make_space()
        a = space.allocate_region(64)
        b = space.allocate_region(64)
        space.copy_bytes(a, 0, b, 0, 0)
        assert space.counters.payload_bytes_copied == 0
        assert space.counters.payload_copy_events == 0

    def test_copy_counts_exact_length(self):
        space = make_space()
        a = space.allocate_region(64)
        b = space.allocate_region(64)
        space.write_at(a, 0, bytes(range(48)))
        space.copy_bytes(a, 0, b, 0, 48)
        assert space.read_at(b, 0, 48) == bytes(range(48))
        assert space.counters.payload_bytes_copied == 48
        assert space.counters.payload_copy_events == 1

    def test_interleaved_copies_sum(self):
        # independent summation oracle over a random interleaving
        space = make_space()
        a = space.allocate_region(4096)
        b = space.allocate_region(4096)
        rng = random.Random(7)
        expected = 0
        for _ in range(10):
            n = rng.randint(1, 300)
            expected += n
            space.copy_bytes(a, rng.randint(0, 100), b, rng.randint(0, 100), n)
        assert space.counters.payload_bytes_copied == expected
        assert space.counters.payload_copy_events == 10

    def test_out_of_bounds_copy(self):
        space = make_space()
        a = space.allocate_region(64)
        b = space.allocate_region(64)
        with pytest.raises(errors.OutOfBounds):
            space.copy_bytes(a, 32, b, 0, 64)


class TestArena:
    def make_arena(self, size=8192):
        space = make_space(capacity=2 * size)
        backing = space.allocate_region(size, register=True)
        return space, ArenaAllocator(space, backing)

    def test_first_fit_reuses_freed_offset(self):
        _, arena = self.make_arena()
        a = arena.alloc(1024)
        b = arena.alloc(1024)
        c = arena.alloc(1024)
        arena.free(b)
        d = arena.alloc(1024)
        assert d.base_addr == b.base_addr
        for h in (a, c, d):
            arena.free(h)

    def test_exhaustion(self):
        _, arena = self.make_arena(4096)
        with pytest.raises(errors.ArenaExhausted):
            arena.alloc(4097)

    def test_zero_length(self):
        _, arena = self.make_arena()
        with pytest.raises(errors.ZeroLength):
            arena.alloc(0)

    def test_double_free_rejected(self):
        _, arena = self.make_arena()
        h = arena.alloc(64)
        arena.free(h)
        with pytest.raises(ValueError):
            arena.free(h)

    def test_ledger_replay_oracle(self):
        # brute-force ledger: replay every alloc/free independently and
        # compare resident bytes and peak after each operation
        _, arena = self.make_arena(512 * 1024)
        rng = random.Random(42)
        ledger = {}  # base_addr -> requested
        peak = 0
        live = []
        for step in range(1000):
            if live and rng.random() < 0.45:
                h = live.pop(rng.randrange(len(live)))
                arena.free(h)
                del ledger[h.base_addr]
            else:
                n = rng.randint(1, 701)
                h = arena.alloc(n)
                live.append(h)
                ledger[h.base_addr] = n
            peak = max(peak, sum(ledger.values()))
            assert arena.current_resident == sum(ledger.values())
            assert arena.peak_resident == peak
            if step % 97 == 0:
                self.assert_disjoint(arena)
        for h in live:
            arena.free(h)
        assert arena.current_resident == 0

    @staticmethod
    def assert_disjoint(arena):
        blocks = arena.live_blocks()
        for (off_a, len_a), (off_b, _len_b) in zip(blocks, blocks[1:]):
            assert off_a + len_a <= off_b

    def test_alignment_of_blocks(self):
        _, arena = self.make_arena()
        handles = [arena.alloc(n) for n in (1, 3, 7, 9, 13)]
        for h in handles:
            assert h.base_addr % 8 == 0

    def test_arena_handles_are_remotely_accessible(self):
        space, arena = self.make_arena()
        h = arena.alloc(100)
        space.check_registered(h)
        space.check_remote_access(h.base_addr, 100, h.access_token)


class TestBufferRef:
    def test_release_frees_once(self):
        space, arena = TestArena().make_arena()
        ref = BufferRef(arena.alloc(64), arena)
        ref.retain(2)
        ref.release()
        ref.release()
        assert arena.current_resident == 64
        ref.release()
        assert arena.current_resident == 0

    def test_over_release_asserts(self):
        ref = null_buffer()
        ref.release()
        with pytest.raises(AssertionError):
            ref.release()

    def test_view_release_never_frees(self):
        space = make_space()
        h = space.allocate_region(64)
        ref = BufferRef(h)  # non-owned
        ref.release()
