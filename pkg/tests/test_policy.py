import time

import numpy as np
import pytest

from wbteleop.command import NormalizationStats
from wbteleop.policy import (CHUNK_LEN, HISTORY_LEN, SWITCH_AT, ChunkScheduler,
                             EchoPolicyServer, HistoryBuffer, PolicyClient,
                             PolicyProtocolError, PolicyRunner, PolicyTimeout,
                             pack_matrix, unpack_matrix)

DIM = 5


def make_chunk(value: float, dim: int = DIM) -> np.ndarray:
    return np.full((CHUNK_LEN, dim), value)


class TestHistoryBuffer:
    def test_empty_window_is_zero(self):
        buf = HistoryBuffer(dim=3)
        win = buf.window()
        assert win.shape == (HISTORY_LEN, 3)
        assert np.all(win == 0.0)

    def test_padding_repeats_oldest(self):
        buf = HistoryBuffer(dim=2)
        for v in (1.0, 2.0, 3.0):
            buf.push(np.full(2, v))
        win = buf.window()
        assert win.shape == (HISTORY_LEN, 2)
        assert np.all(win[: HISTORY_LEN - 2] == 1.0)
        assert np.all(win[-2] == 2.0)
        assert np.all(win[-1] == 3.0)

    def test_sliding_keeps_newest(self):
        buf = HistoryBuffer(dim=1)
        for v in range(25):
            buf.push(np.array([float(v)]))
        win = buf.window()
        assert win[:, 0].tolist() == [float(v) for v in range(9, 25)]

    def test_shape_checked(self):
        buf = HistoryBuffer(dim=4)
        with pytest.raises(ValueError, match="shape"):
            buf.push(np.zeros(3))


class TestMatrixCodec:
    def test_round_trip(self):
        rng = np.random.default_rng(7)
        mat = rng.normal(size=(16, 9))
        out = unpack_matrix(pack_matrix(mat))
        assert np.array_equal(out, mat)

    def test_length_mismatch_rejected(self):
        blob = pack_matrix(np.zeros((4, 3)))
        with pytest.raises(ValueError, match="bytes"):
            unpack_matrix(blob[:-8])

    def test_short_payload_rejected(self):
        with pytest.raises(ValueError, match="too short"):
            unpack_matrix(b"\x00\x01")


class TestChunkScheduler:
    def test_holds_before_first_chunk(self):
        sched = ChunkScheduler()
        assert sched.tick() is None
        assert sched.stats.holds == 1
        assert sched.wants_request

    def test_nominal_switch_after_48(self):
        sched = ChunkScheduler()
        a, b = make_chunk(1.0), make_chunk(2.0)
        sched.offer(a)
        for _ in range(SWITCH_AT):
            action = sched.tick()
            assert action[0] == 1.0
        sched.offer(b)
        action = sched.tick()
        assert action[0] == 2.0
        assert sched.stats.switch_steps == [SWITCH_AT]
        assert sched.stats.chunks_started == 2

    def test_early_offer_does_not_preempt(self):
        sched = ChunkScheduler()
        sched.offer(make_chunk(1.0))
        for _ in range(10):
            sched.tick()
        sched.offer(make_chunk(2.0))
        for i in range(10, SWITCH_AT):
            assert sched.tick()[0] == 1.0
        assert sched.tick()[0] == 2.0

    def test_late_chunk_runs_grace_tail(self):
        sched = ChunkScheduler()
        sched.offer(make_chunk(1.0))
        for _ in range(CHUNK_LEN):
            action = sched.tick()
            assert action[0] == 1.0
            assert not sched.starving
        assert sched.stats.executed == CHUNK_LEN

    def test_starvation_holds_last_action(self):
        sched = ChunkScheduler()
        sched.offer(make_chunk(3.0))
        for _ in range(CHUNK_LEN):
            sched.tick()
        for _ in range(5):
            action = sched.tick()
            assert action[0] == 3.0
            assert sched.starving
        assert sched.stats.starved_ticks == 5
        sched.offer(make_chunk(4.0))
        assert sched.tick()[0] == 4.0
        assert not sched.starving

    def test_wants_request_tracks_queue(self):
        sched = ChunkScheduler()
        sched.offer(make_chunk(1.0))
        assert not sched.wants_request
        sched.tick()
        assert sched.wants_request
        sched.offer(make_chunk(2.0))
        assert not sched.wants_request

    def test_offer_shape_checked(self):
        sched = ChunkScheduler()
        with pytest.raises(ValueError, match="chunk"):
            sched.offer(np.zeros((CHUNK_LEN - 1, DIM)))


def history_with(value: float, dim: int = DIM) -> np.ndarray:
    win = np.zeros((HISTORY_LEN, dim))
    win[-1] = value
    return win


class TestRequestReply:
    def test_echo_returns_tiled_last_row(self):
        with EchoPolicyServer() as server, \
                PolicyClient(server.host, server.port) as client:
            chunk = client.request(history_with(0.75), timeout=1.0)
            assert chunk.shape == (CHUNK_LEN, DIM)
            assert np.all(chunk == 0.75)
            assert server.requests_served == 1

    def test_latency_within_budget(self):
        with EchoPolicyServer(latency_s=0.04) as server, \
                PolicyClient(server.host, server.port) as client:
            t0 = time.monotonic()
            chunk = client.request(history_with(1.0))
            took = time.monotonic() - t0
            assert chunk.shape[0] == CHUNK_LEN
            assert took >= 0.04

    def test_mute_server_times_out(self):
        with EchoPolicyServer(mute=True) as server, \
                PolicyClient(server.host, server.port) as client:
            t0 = time.monotonic()
            with pytest.raises(PolicyTimeout):
                client.request(history_with(1.0), timeout=0.1)
            assert time.monotonic() - t0 < 1.0

    def test_short_chunk_is_protocol_error(self):
        with EchoPolicyServer(reply_steps=CHUNK_LEN - 1) as server, \
                PolicyClient(server.host, server.port) as client:
            with pytest.raises(PolicyProtocolError, match="63 steps"):
                client.request(history_with(1.0), timeout=1.0)


class TestPolicyRunner:
    def runner(self, server, **kw):
        stats = kw.pop("stats", NormalizationStats.identity(DIM))
        client = PolicyClient(server.host, server.port)
        return PolicyRunner(client, stats, **kw)

    def test_sustains_cadence_with_40ms_endpoint(self):
        with EchoPolicyServer(latency_s=0.04) as server, \
                self.runner(server) as runner:
            runner.observe(np.full(DIM, 0.5))
            report = runner.run(3.0)
        assert report.rate_hz >= 20.0
        assert report.stats.starved_ticks == 0
        assert report.fallbacks == 0
        assert all(s == SWITCH_AT for s in report.stats.switch_steps)
        assert report.stats.chunks_started >= 1

    def test_timeout_falls_back_to_hold(self):
        with EchoPolicyServer(mute=True) as server, \
                self.runner(server, request_timeout=0.05) as runner:
            runner.observe(np.zeros(DIM))
            report = runner.run(0.5)
        assert report.fallbacks >= 1
        assert report.stats.chunks_started == 0
        assert report.stats.holds == report.ticks

    def test_protocol_error_falls_back(self):
        with EchoPolicyServer(reply_steps=CHUNK_LEN - 1) as server, \
                self.runner(server, request_timeout=0.2) as runner:
            runner.observe(np.zeros(DIM))
            report = runner.run(0.5)
        assert report.protocol_errors >= 1
        assert report.stats.chunks_started == 0

    def test_actions_are_denormalized(self):
        stats = NormalizationStats(offset=np.full(DIM, 10.0),
                                   scale=np.full(DIM, 2.0))
        with EchoPolicyServer() as server, \
                self.runner(server, stats=stats) as runner:
            runner.observe(np.full(DIM, 16.0))
            deadline = time.monotonic() + 2.0
            action = runner.tick()
            while action is None and time.monotonic() < deadline:
                time.sleep(0.01)
                action = runner.tick()
        assert action is not None
        # echo returns the normalized observation, so the round trip is exact
        assert np.allclose(action, 16.0)
