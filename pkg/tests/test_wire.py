"""Wire-format and transport tests."""
from __future__ import annotations

import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dadapt.wire import (
    BadMagic,
    CRC_SIZE,
    CrcMismatch,
    FrameLog,
    HEADER_SIZE,
    MSG_BYE,
    MSG_DISC_GRAD,
    MSG_HELLO,
    ProtocolError,
    SyncFrame,
    Truncated,
    VersionMismatch,
    decode_frame,
    encode_frame,
    floats_to_payload,
    loopback_pair,
    payload_to_floats,
    tcp_pair,
)


def test_header_is_16_bytes():
    assert HEADER_SIZE == 16
    raw = encode_frame(SyncFrame(MSG_HELLO, 3, 0))
    assert len(raw) == HEADER_SIZE + CRC_SIZE


def test_total_size_formula():
    payload = bytes(range(10))
    raw = encode_frame(SyncFrame(MSG_DISC_GRAD, 1, 7, payload))
    assert len(raw) == HEADER_SIZE + len(payload) + CRC_SIZE


def test_known_layout():
    raw = encode_frame(SyncFrame(MSG_BYE, 0x0102, 0x0A0B0C0D, b"\x00"))
    assert raw[:4] == b"FRDA"
    assert raw[4] == 1
    assert raw[5] == MSG_BYE
    assert raw[6:8] == b"\x02\x01"          # little-endian u16
    assert raw[8:12] == b"\x0d\x0c\x0b\x0a"  # little-endian u32
    assert raw[12:16] == b"\x01\x00\x00\x00"


@settings(max_examples=100, deadline=None)
@given(
    st.sampled_from([0, 1, 2, 3, 4]),
    st.integers(0, 0xFFFF),
    st.integers(0, 0xFFFFFFFF),
    st.binary(max_size=512),
)
def test_roundtrip_property(msg_type, domain_id, step, payload):
    frame = SyncFrame(msg_type, domain_id, step, payload)
    back = decode_frame(encode_frame(frame))
    assert back == frame


def test_bad_magic():
    raw = bytearray(encode_frame(SyncFrame(MSG_HELLO, 0, 0)))
    raw[0:4] = b"NOPE"
    with pytest.raises(BadMagic):
        decode_frame(bytes(raw))


def test_version_mismatch():
    raw = bytearray(encode_frame(SyncFrame(MSG_HELLO, 0, 0)))
    raw[4] = 2
    with pytest.raises(VersionMismatch):
        decode_frame(bytes(raw))


def test_crc_flip_detected():
    raw = bytearray(encode_frame(SyncFrame(MSG_DISC_GRAD, 1, 5, b"\x01\x02\x03\x04")))
    raw[HEADER_SIZE] ^= 0x40
    with pytest.raises(CrcMismatch):
        decode_frame(bytes(raw))


def test_truncation_detected():
    raw = encode_frame(SyncFrame(MSG_DISC_GRAD, 1, 5, b"\x01\x02\x03\x04"))
    with pytest.raises(Truncated):
        decode_frame(raw[:-3])
    with pytest.raises(Truncated):
        decode_frame(raw + b"\x00")
    with pytest.raises(Truncated):
        decode_frame(raw[:10])


def test_float_payload_roundtrip():
    values = np.array([1.5, -2.25, 3e-8], dtype=np.float32)
    back = payload_to_floats(floats_to_payload(values))
    assert np.array_equal(back, values)


def _run_peer(endpoint, frames_out, results):
    try:
        got = [endpoint.exchange(f) for f in frames_out]
        results["frames"] = got
    except Exception as exc:  # surfaced by the main thread
        results["error"] = exc


def _exchange_over(make_pair):
    a, b = make_pair()
    payload = floats_to_payload(np.arange(40, dtype=np.float32))
    frames_a = [SyncFrame(MSG_HELLO, 0, 0), SyncFrame(MSG_DISC_GRAD, 0, 1, payload)]
    frames_b = [SyncFrame(MSG_HELLO, 1, 0), SyncFrame(MSG_DISC_GRAD, 1, 1, payload)]
    res_b: dict = {}
    t = threading.Thread(target=_run_peer, args=(b, frames_b, res_b))
    t.start()
    got_a = [a.exchange(f) for f in frames_a]
    t.join()
    assert "error" not in res_b, res_b.get("error")
    a.close()
    b.close()
    return a, b, got_a, res_b["frames"]


def test_loopback_exchange_and_counters():
    a, b, got_a, got_b = _exchange_over(loopback_pair)
    assert [f.domain_id for f in got_a] == [1, 1]
    assert [f.domain_id for f in got_b] == [0, 0]
    hello = len(encode_frame(SyncFrame(MSG_HELLO, 0, 0)))
    grad = len(encode_frame(SyncFrame(MSG_DISC_GRAD, 0, 1, floats_to_payload(np.arange(40, dtype=np.float32)))))
    assert a.bytes_sent == a.bytes_received == hello + grad
    assert a.frames_sent == a.frames_received == 2
    assert b.bytes_sent == b.bytes_received == hello + grad


def test_tcp_matches_loopback_observationally():
    la, lb, lgot_a, lgot_b = _exchange_over(loopback_pair)
    ta, tb, tgot_a, tgot_b = _exchange_over(tcp_pair)
    assert [f.payload for f in tgot_a] == [f.payload for f in lgot_a]
    assert [f.payload for f in tgot_b] == [f.payload for f in lgot_b]
    assert (ta.bytes_sent, ta.bytes_received) == (la.bytes_sent, la.bytes_received)
    assert (tb.bytes_sent, tb.bytes_received) == (lb.bytes_sent, lb.bytes_received)
    assert (ta.frames_sent, tb.frames_sent) == (la.frames_sent, lb.frames_sent)


def test_step_mismatch_aborts():
    a, b = loopback_pair()
    res: dict = {}
    t = threading.Thread(target=_run_peer, args=(b, [SyncFrame(MSG_HELLO, 1, 3)], res))
    t.start()
    with pytest.raises(ProtocolError):
        a.exchange(SyncFrame(MSG_HELLO, 0, 2))
    t.join()
    assert isinstance(res.get("error"), ProtocolError)


def test_frame_log_records_both_directions():
    log_a = FrameLog(keep_bytes=True)
    a, b = loopback_pair(logs=(log_a, None))
    res: dict = {}
    t = threading.Thread(target=_run_peer, args=(b, [SyncFrame(MSG_HELLO, 1, 0)], res))
    t.start()
    a.exchange(SyncFrame(MSG_HELLO, 0, 0))
    t.join()
    assert [r["direction"] for r in log_a.rows] == ["sent", "received"]
    assert all(r["msg_type"] == MSG_HELLO for r in log_a.rows)
    assert len(log_a.raw) == 2
    assert sum(r["frame_len"] for r in log_a.rows) == a.bytes_sent + a.bytes_received


def test_counters_monotone_and_exact():
    a, b = loopback_pair()
    res: dict = {}
    frames = [SyncFrame(MSG_HELLO, 1, s) for s in range(5)]
    t = threading.Thread(target=_run_peer, args=(b, frames, res))
    t.start()
    last = 0
    for s in range(5):
        a.exchange(SyncFrame(MSG_HELLO, 0, s))
        assert a.bytes_sent > last or s == 0
        assert a.bytes_sent == (s + 1) * (HEADER_SIZE + CRC_SIZE)
        last = a.bytes_sent
    t.join()
    assert "error" not in res
