import random
import threading

import pytest

from rdmaflow import errors
from rdmaflow.fabric import (CostModel, Fabric, FaultConfig, MemRange)
from rdmaflow.memspace import MemorySpace


def make_pair(num_cqs=1, qps_per_peer=1, faults=None, capacity=1 << 20):
    fabric = Fabric(seed=5, faults=faults)
    spaces = [MemorySpace(i, capacity, seed=i) for i in range(2)]
    a = fabric.create_device(spaces[0], num_cqs=num_cqs, qps_per_peer=qps_per_peer)
    b = fabric.create_device(spaces[1], num_cqs=num_cqs, qps_per_peer=qps_per_peer)
    channels = a.connect(b.endpoint)
    return fabric, spaces, a, b, channels


class TestConnect:
    def test_round_robin_cq_assignment(self):
        _, _, a, _, channels = make_pair(num_cqs=2, qps_per_peer=4)
        assert [ch.qp.cq_index for ch in channels] == [0, 1, 0, 1]

    def test_round_robin_continues_across_peers(self):
        fabric = Fabric()
        spaces = [MemorySpace(i, 4096) for i in range(3)]
        devs = [fabric.create_device(s, num_cqs=3, qps_per_peer=2) for s in spaces]
        first = devs[0].connect(devs[1].endpoint)
        second = devs[0].connect(devs[2].endpoint)
        assert [ch.qp.cq_index for ch in first] == [0, 1]
        assert [ch.qp.cq_index for ch in second] == [2, 0]

    def test_unreachable_peer(self):
        fabric = Fabric()
        dev = fabric.create_device(MemorySpace(0, 4096))
        with pytest.raises(errors.PeerUnreachable):
            dev.connect((99, 1))

    def test_not_listening(self):
        fabric = Fabric()
        a = fabric.create_device(MemorySpace(0, 4096))
        b = fabric.create_device(MemorySpace(1, 4096), listening=False)
        with pytest.raises(errors.PeerUnreachable):
            a.connect(b.endpoint)

    def test_passive_side_gets_paired_qps(self):
        _, _, a, b, channels = make_pair(qps_per_peer=2)
        back = b.channels_to(a.endpoint)
        assert len(back) == 2
        for mine, theirs in zip(channels, back):
            assert mine.qp.peer_qp is theirs.qp
            assert theirs.qp.peer_qp is mine.qp


class TestOneSidedWrite:
    def test_single_byte_is_one_chunk_one_completion(self):
        chunks = []
        faults = FaultConfig(chunk_callback=lambda kind, i, addr, n: chunks.append(n))
        fabric, spaces, a, b, channels = make_pair(faults=faults)
        src = spaces[0].allocate_region(1, register=True)
        dst = spaces[1].allocate_region(1, register=True)
        spaces[0].write_at(src, 0, b"\xab")
        ch = channels[0]
        verb = ch.one_sided_write(src, dst.base_addr, dst.access_token, tag="t")
        assert chunks == [1]
        event = a.poll_cq(0)
        assert event.verb_id == verb and event.tag == "t" and event.nbytes == 1
        assert a.poll_cq(0) is None
        assert spaces[1].read_at(dst, 0, 1) == b"\xab"

    def test_scripted_chunks_ascend(self):
        # oracle: after each chunk, a prefix of the new bytes and nothing else
        observed = []

        faults = FaultConfig()
        fabric, spaces, a, b, channels = make_pair(faults=faults)
        src = spaces[0].allocate_region(100, register=True)
        dst = spaces[1].allocate_region(100, register=True)
        payload = bytes((i * 7 + 1) % 256 for i in range(100))
        spaces[0].write_at(src, 0, payload)

        def check(kind, index, addr, nbytes):
            current = spaces[1].read_at(dst, 0, 100)
            observed.append(current)

        faults.chunk_callback = check
        faults.chunk_schedules.append([40, 40, 20])
        channels[0].one_sided_write(src, dst.base_addr, dst.access_token)
        assert len(observed) == 3
        for done, snapshot in zip((40, 80, 100), observed):
            assert snapshot[:done] == payload[:done]
            assert snapshot[done:] == bytes(100 - done)
        # in particular byte 99 was never new before bytes 0..98 were new
        for snapshot in observed[:-1]:
            if snapshot[99:] == payload[99:]:
                assert snapshot[:99] == payload[:99]

    def test_randomized_ascending_prefixes(self):
        faults = FaultConfig(max_chunk=16)
        fabric, spaces, a, b, channels = make_pair(faults=faults)
        src = spaces[0].allocate_region(256, register=True)
        dst = spaces[1].allocate_region(256, register=True)
        rng = random.Random(11)
        for trial in range(50):
            payload = bytes(rng.randrange(1, 256) for _ in range(256))
            spaces[0].write_at(src, 0, payload)
            prefixes = []
            faults.chunk_callback = lambda k, i, a_, n: prefixes.append(
                spaces[1].read_at(dst, 0, 256))
            channels[0].one_sided_write(src, dst.base_addr, dst.access_token)
            done = 0
            for snap in prefixes:
                while done < 256 and snap[done] == payload[done]:
                    done += 1
            assert done == 256
            faults.chunk_callback = None
            spaces[1].write_at(dst, 0, bytes(256))

    def test_wrong_token_no_mutation(self):
        fabric, spaces, a, b, channels = make_pair()
        src = spaces[0].allocate_region(16, register=True)
        dst = spaces[1].allocate_region(16, register=True)
        spaces[0].write_at(src, 0, b"x" * 16)
        with pytest.raises(errors.BadToken):
            channels[0].one_sided_write(src, dst.base_addr, dst.access_token ^ 5)
        assert spaces[1].read_at(dst, 0, 16) == bytes(16)

    def test_remote_out_of_bounds(self):
        fabric, spaces, a, b, channels = make_pair()
        src = spaces[0].allocate_region(16, register=True)
        dst = spaces[1].allocate_region(8, register=True)
        with pytest.raises(errors.RemoteOutOfBounds):
            channels[0].one_sided_write(src, dst.base_addr, dst.access_token)

    def test_unregistered_source(self):
        fabric, spaces, a, b, channels = make_pair()
        src = spaces[0].allocate_region(16, register=False)
        dst = spaces[1].allocate_region(16, register=True)
        with pytest.raises(errors.NotRegistered):
            channels[0].one_sided_write(src, dst.base_addr, dst.access_token)

    def test_zero_length_rejected(self):
        fabric, spaces, a, b, channels = make_pair()
        src = spaces[0].allocate_region(16, register=True)
        dst = spaces[1].allocate_region(16, register=True)
        with pytest.raises(errors.InvalidLength):
            channels[0].one_sided_write(MemRange(src, 0, 0), dst.base_addr,
                                        dst.access_token)

    def test_gather_list_concatenates(self):
        fabric, spaces, a, b, channels = make_pair()
        s1 = spaces[0].allocate_region(8, register=True)
        s2 = spaces[0].allocate_region(8, register=True)
        dst = spaces[1].allocate_region(16, register=True)
        spaces[0].write_at(s1, 0, b"AAAAAAAA")
        spaces[0].write_at(s2, 0, b"BBBBBBBB")
        channels[0].one_sided_write([s1, s2], dst.base_addr, dst.access_token)
        assert spaces[1].read_at(dst, 0, 16) == b"AAAAAAAA" + b"BBBBBBBB"

    def test_default_chunks_within_bounds(self):
        sizes = []
        faults = FaultConfig(chunk_callback=lambda k, i, a, n: sizes.append(n))
        fabric, spaces, a, b, channels = make_pair(faults=faults, capacity=1 << 20)
        src = spaces[0].allocate_region(65536, register=True)
        dst = spaces[1].allocate_region(65536, register=True)
        channels[0].one_sided_write(src, dst.base_addr, dst.access_token)
        assert sum(sizes) == 65536
        assert all(1 <= n <= 4096 for n in sizes)
        assert len(sizes) > 1

    def test_clock_is_monotone(self):
        fabric, spaces, a, b, channels = make_pair()
        src = spaces[0].allocate_region(64, register=True)
        dst = spaces[1].allocate_region(64, register=True)
        stamps = [fabric.clock.now()]
        for _ in range(20):
            channels[0].one_sided_write(src, dst.base_addr, dst.access_token)
            stamps.append(fabric.clock.now())
        assert all(t0 < t1 for t0, t1 in zip(stamps, stamps[1:]))

    def test_clock_cost_is_exact(self):
        cost = CostModel()
        fabric = Fabric(cost)
        spaces = [MemorySpace(i, 1 << 20) for i in range(2)]
        a = fabric.create_device(spaces[0])
        b = fabric.create_device(spaces[1])
        ch = a.connect(b.endpoint)[0]
        src = spaces[0].allocate_region(4096, register=True)
        dst = spaces[1].allocate_region(4096, register=True)
        before = fabric.clock.now()
        ch.one_sided_write(src, dst.base_addr, dst.access_token)
        delta = fabric.clock.now() - before
        assert delta == pytest.approx(cost.alpha_s + cost.beta_s_per_byte * 4096,
                                      rel=1e-12)


class TestOneSidedRead:
    def test_roundtrip(self):
        fabric, spaces, a, b, channels = make_pair()
        src = spaces[0].allocate_region(64, register=True)
        remote = spaces[1].allocate_region(64, register=True)
        local = spaces[0].allocate_region(64, register=True)
        payload = bytes(range(64))
        spaces[0].write_at(src, 0, payload)
        channels[0].one_sided_write(src, remote.base_addr, remote.access_token)
        channels[0].one_sided_read(remote.base_addr, remote.access_token,
                                   MemRange(local))
        assert spaces[0].read_at(local, 0, 64) == payload

    def test_zero_length_read(self):
        fabric, spaces, a, b, channels = make_pair()
        local = spaces[0].allocate_region(64, register=True)
        with pytest.raises(errors.InvalidLength):
            channels[0].one_sided_read(0, 0, MemRange(local, 0, 0))

    def test_completion_goes_to_reader(self):
        fabric, spaces, a, b, channels = make_pair()
        remote = spaces[1].allocate_region(32, register=True)
        local = spaces[0].allocate_region(32, register=True)
        verb = channels[0].one_sided_read(remote.base_addr, remote.access_token,
                                          MemRange(local), tag="r")
        event = a.poll_cq(0)
        assert event.verb_id == verb and event.kind == "read"
        assert b.poll_cq(0) is None

    def test_concurrent_reads_on_two_qps(self):
        # schedule exploration: many trials of two chunked reads racing on
        # separate QPs, with forced yields between chunks to vary interleaving
        for trial in range(8):
            faults = FaultConfig(max_chunk=8, yield_between_chunks=True)
            fabric, spaces, a, b, channels = make_pair(qps_per_peer=2, faults=faults)
            remote = spaces[1].allocate_region(64, register=True)
            spaces[1].write_at(remote, 0, bytes(range(64)))
            locals_ = [spaces[0].allocate_region(64, register=True) for _ in range(2)]
            verbs = [None, None]

            def run_read(idx):
                verbs[idx] = channels[idx].one_sided_read(
                    remote.base_addr, remote.access_token, MemRange(locals_[idx]))

            order = (0, 1) if trial % 2 == 0 else (1, 0)
            threads = [threading.Thread(target=run_read, args=(i,)) for i in order]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            for lh in locals_:
                assert spaces[0].read_at(lh, 0, 64) == bytes(range(64))
            # each read completed independently, on its own QP
            events = [channels[i].take_completion(verbs[i]) for i in range(2)]
            assert events[0].qp_id != events[1].qp_id


class TestSendRecv:
    def test_matched_send_recv(self):
        fabric, spaces, a, b, channels = make_pair()
        buf = spaces[1].allocate_region(16, register=True)
        back = b.channels_to(a.endpoint)[0]
        back.post_recv(MemRange(buf), tag="rx")
        verb = channels[0].post_send(b"0123456789abcdef", tag="tx")
        assert verb is not None
        send_ev = a.poll_cq(0)
        recv_ev = b.poll_cq(0)
        assert send_ev.kind == "send" and send_ev.tag == "tx"
        assert recv_ev.kind == "recv" and recv_ev.tag == "rx" and recv_ev.nbytes == 16
        assert spaces[1].read_at(buf, 0, 16) == b"0123456789abcdef"

    def test_recv_buffer_too_small(self):
        fabric, spaces, a, b, channels = make_pair()
        buf = spaces[1].allocate_region(16, register=True)
        b.channels_to(a.endpoint)[0].post_recv(MemRange(buf))
        with pytest.raises(errors.RecvBufferTooSmall):
            channels[0].post_send(b"x" * 32)
        # the posted receive survives and still matches a fitting send
        assert channels[0].post_send(b"y" * 16) is not None

    def test_no_posted_receive_times_out(self):
        fabric, spaces, a, b, channels = make_pair()
        with pytest.raises(errors.NoPostedReceive):
            channels[0].post_send(b"hello", timeout=0.05)

    def test_nonblocking_send_returns_none(self):
        fabric, spaces, a, b, channels = make_pair()
        assert channels[0].post_send(b"hello", block=False) is None

    def test_concurrent_sends_match_fifo(self):
        # sequence-number oracle: payload i must land in the i-th posted buffer
        fabric, spaces, a, b, channels = make_pair(capacity=1 << 22)
        back = b.channels_to(a.endpoint)[0]
        bufs = [spaces[1].allocate_region(8, register=True) for _ in range(100)]

        def post_receives():
            for buf in bufs:
                back.post_recv(MemRange(buf))

        def send_all():
            for i in range(100):
                channels[0].post_send(i.to_bytes(8, "little"))

        threads = [threading.Thread(target=post_receives),
                   threading.Thread(target=send_all)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for i, buf in enumerate(bufs):
            assert int.from_bytes(spaces[1].read_at(buf, 0, 8), "little") == i

    def test_post_order_completions_per_qp(self):
        fabric, spaces, a, b, channels = make_pair()
        src = spaces[0].allocate_region(8, register=True)
        dst = spaces[1].allocate_region(8, register=True)
        for i in range(10):
            channels[0].one_sided_write(src, dst.base_addr, dst.access_token, tag=i)
        tags = []
        while True:
            ev = a.poll_cq(0)
            if ev is None:
                break
            tags.append(ev.tag)
        assert tags == list(range(10))

    def test_exactly_once_completion_accounting(self):
        fabric, spaces, a, b, channels = make_pair()
        src = spaces[0].allocate_region(8, register=True)
        dst = spaces[1].allocate_region(8, register=True)
        back = b.channels_to(a.endpoint)[0]
        for i in range(5):
            channels[0].one_sided_write(src, dst.base_addr, dst.access_token)
        back.post_recv(MemRange(dst))
        channels[0].post_send(b"12345678")
        assert fabric.completions_posted == fabric.verbs_posted - fabric.outstanding_recvs()
        assert fabric.outstanding_recvs() == 0


class TestRpc:
    def test_echo(self):
        fabric, spaces, a, b, channels = make_pair()
        b.register_rpc_handler(lambda req: req)
        assert channels[0].rpc_call(b"\xde\xad") == b"\xde\xad"

    def test_handler_missing(self):
        fabric, spaces, a, b, channels = make_pair()
        with pytest.raises(errors.HandlerMissing):
            channels[0].rpc_call(b"x")

    def test_timeout_with_fault_injection(self):
        faults = FaultConfig(drop_rpc_calls=1)
        fabric, spaces, a, b, channels = make_pair(faults=faults)
        b.register_rpc_handler(lambda req: req)
        with pytest.raises(errors.Timeout):
            channels[0].rpc_call(b"x")
        assert channels[0].rpc_call(b"x") == b"x"


class TestScriptedChunkValidation:
    def test_bad_schedule_sum_rejected(self):
        faults = FaultConfig()
        faults.chunk_schedules.append([4, 4])
        fabric, spaces, a, b, channels = make_pair(faults=faults)
        src = spaces[0].allocate_region(16, register=True)
        dst = spaces[1].allocate_region(16, register=True)
        with pytest.raises(ValueError):
            channels[0].one_sided_write(src, dst.base_addr, dst.access_token)
