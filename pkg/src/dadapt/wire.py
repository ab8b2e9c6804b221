"""Binary sync-frame protocol and the two transports that carry it.

Frame layout (little-endian):

    magic      4 bytes  b"FRDA"
    version    u8       currently 1
    msg_type   u8       0=hello 1=disc_grad_buffer 2=w1_stats 3=model_init 4=bye
    domain_id  u16
    step       u32
    payload_len u32
    payload    payload_len bytes (float32 LE, canonical layer order)
    crc32      u32      over header + payload

Header is exactly 16 bytes, total size 16 + payload_len + 4.  Both peers
advance in lockstep: every exchange sends one frame and blocks for the
peer's frame of the same step.  A step mismatch is a protocol error and
aborts the run; there are no retries.
"""
from __future__ import annotations

import queue
import socket
import struct
import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"FRDA"
VERSION = 1

MSG_HELLO = 0
MSG_DISC_GRAD = 1
MSG_W1_STATS = 2
MSG_MODEL_INIT = 3
MSG_BYE = 4
MSG_TYPES = (MSG_HELLO, MSG_DISC_GRAD, MSG_W1_STATS, MSG_MODEL_INIT, MSG_BYE)
MSG_NAMES = {
    MSG_HELLO: "hello",
    MSG_DISC_GRAD: "disc_grad",
    MSG_W1_STATS: "w1_stats",
    MSG_MODEL_INIT: "model_init",
    MSG_BYE: "bye",
}

HEADER = struct.Struct("<4sBBHII")
HEADER_SIZE = HEADER.size  # 16
CRC_SIZE = 4


class FrameError(ValueError):
    """Base class for frame decode failures."""


class BadMagic(FrameError):
    pass


class VersionMismatch(FrameError):
    pass


class CrcMismatch(FrameError):
    pass


class Truncated(FrameError):
    pass


class ProtocolError(RuntimeError):
    """Lockstep violated (wrong step) or handshake failed."""


@dataclass(frozen=True)
class SyncFrame:
    msg_type: int
    domain_id: int
    step: int
    payload: bytes = b""

    def __post_init__(self):
        if self.msg_type not in MSG_TYPES:
            raise ValueError(f"unknown msg_type {self.msg_type}")
        if not 0 <= self.domain_id <= 0xFFFF:
            raise ValueError("domain_id out of u16 range")
        if not 0 <= self.step <= 0xFFFFFFFF:
            raise ValueError("step out of u32 range")


def encode_frame(frame: SyncFrame) -> bytes:
    header = HEADER.pack(
        MAGIC, VERSION, frame.msg_type, frame.domain_id, frame.step, len(frame.payload)
    )
    crc = zlib.crc32(header + frame.payload) & 0xFFFFFFFF
    return header + frame.payload + struct.pack("<I", crc)


def decode_frame(data: bytes) -> SyncFrame:
    if len(data) < HEADER_SIZE + CRC_SIZE:
        raise Truncated(f"frame is {len(data)} bytes, shorter than any valid frame")
    magic, version, msg_type, domain_id, step, payload_len = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"version {version}, expected {VERSION}")
    total = HEADER_SIZE + payload_len + CRC_SIZE
    if len(data) < total:
        raise Truncated(f"frame declares {payload_len} payload bytes but only {len(data)} arrived")
    if len(data) > total:
        raise Truncated(f"{len(data) - total} trailing bytes after frame")
    payload = data[HEADER_SIZE:HEADER_SIZE + payload_len]
    (crc,) = struct.unpack_from("<I", data, HEADER_SIZE + payload_len)
    expect = zlib.crc32(data[:HEADER_SIZE + payload_len]) & 0xFFFFFFFF
    if crc != expect:
        raise CrcMismatch(f"crc {crc:#010x}, expected {expect:#010x}")
    if msg_type not in MSG_TYPES:
        raise FrameError(f"unknown msg_type {msg_type}")
    return SyncFrame(msg_type, domain_id, step, payload)


def floats_to_payload(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(np.asarray(values), dtype="<f4").tobytes()


def payload_to_floats(payload: bytes) -> np.ndarray:
    if len(payload) % 4:
        raise FrameError("float payload length must be a multiple of 4")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32)


@dataclass
class FrameLog:
    """Per-endpoint record of every frame that crossed the wire.

    keep_bytes=True retains the raw encodings for privacy auditing; the
    summary rows (direction, msg_type, step, size) are always kept.
    """

    keep_bytes: bool = False
    rows: list[dict] = field(default_factory=list)
    raw: list[bytes] = field(default_factory=list)

    def record(self, direction: str, encoded: bytes) -> None:
        frame = decode_frame(encoded)
        self.rows.append({
            "direction": direction,
            "msg_type": frame.msg_type,
            "domain_id": frame.domain_id,
            "step": frame.step,
            "payload_len": len(frame.payload),
            "frame_len": len(encoded),
        })
        if self.keep_bytes:
            self.raw.append(bytes(encoded))


class Endpoint:
    """One side of a two-peer lockstep link with exact byte accounting."""

    def __init__(self, log: FrameLog | None = None):
        self.frames_sent = 0
        self.bytes_sent = 0
        self.frames_received = 0
        self.bytes_received = 0
        self.log = log

    # transport-specific primitives
    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_bytes(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def exchange(self, out_frame: SyncFrame) -> SyncFrame:
        """Send out_frame, block for the peer's frame of the same step.

        Counters advance by the exact encoded sizes.  A step mismatch
        raises ProtocolError: the peers have fallen out of lockstep and
        the run must abort.
        """
        data = encode_frame(out_frame)
        self._send_bytes(data)
        self.frames_sent += 1
        self.bytes_sent += len(data)
        if self.log is not None:
            self.log.record("sent", data)
        incoming = self._recv_bytes()
        frame = decode_frame(incoming)
        self.frames_received += 1
        self.bytes_received += len(incoming)
        if self.log is not None:
            self.log.record("received", incoming)
        if frame.step != out_frame.step:
            raise ProtocolError(
                f"peer is at step {frame.step}, local step {out_frame.step}"
            )
        return frame


_CLOSED = object()


class LoopbackEndpoint(Endpoint):
    """In-process endpoint: a pair of queues shared with the peer."""

    def __init__(self, outbox: queue.Queue, inbox: queue.Queue, timeout: float = 60.0,
                 log: FrameLog | None = None):
        super().__init__(log=log)
        self._outbox = outbox
        self._inbox = inbox
        self._timeout = timeout

    def _send_bytes(self, data: bytes) -> None:
        self._outbox.put(data)

    def _recv_bytes(self) -> bytes:
        try:
            item = self._inbox.get(timeout=self._timeout)
        except queue.Empty:
            raise ConnectionError("loopback peer did not respond in time")
        if item is _CLOSED:
            raise ConnectionError("loopback peer closed the link")
        return item

    def close(self) -> None:
        self._outbox.put(_CLOSED)


def loopback_pair(timeout: float = 60.0, logs: tuple[FrameLog | None, FrameLog | None] = (None, None)):
    """Two connected in-process endpoints (a, b)."""
    q_ab: queue.Queue = queue.Queue()
    q_ba: queue.Queue = queue.Queue()
    a = LoopbackEndpoint(q_ab, q_ba, timeout, log=logs[0])
    b = LoopbackEndpoint(q_ba, q_ab, timeout, log=logs[1])
    return a, b


class TcpEndpoint(Endpoint):
    """One side of a single long-lived TCP connection.

    Reads the fixed header first, then exactly payload_len + crc bytes.
    Disconnects surface as ConnectionError; there are no retries.
    """

    def __init__(self, sock: socket.socket, timeout: float = 60.0, log: FrameLog | None = None):
        super().__init__(log=log)
        self._sock = sock
        self._sock.settimeout(timeout)

    def _send_bytes(self, data: bytes) -> None:
        self._sock.sendall(data)

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            chunk = self._sock.recv(n - got)
            if not chunk:
                raise ConnectionError("peer disconnected mid-frame")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def _recv_bytes(self) -> bytes:
        header = self._read_exact(HEADER_SIZE)
        magic, version, _, _, _, payload_len = HEADER.unpack(header)
        if magic != MAGIC:
            raise BadMagic(f"bad magic {magic!r}")
        if version != VERSION:
            raise VersionMismatch(f"version {version}, expected {VERSION}")
        rest = self._read_exact(payload_len + CRC_SIZE)
        return header + rest

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpListener:
    """Bound, listening socket that accepts exactly one peer on demand.

    Splitting bind from accept lets a driver learn the ephemeral port,
    hand it to a peer process, and only then block on the connection.
    """

    def __init__(self, host: str, port: int, timeout: float = 60.0):
        self._timeout = timeout
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._server.bind((host, port))
        self.port = self._server.getsockname()[1]
        self._server.listen(1)
        self._server.settimeout(timeout)

    def accept(self, log: FrameLog | None = None) -> TcpEndpoint:
        try:
            conn, _ = self._server.accept()
        finally:
            self._server.close()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return TcpEndpoint(conn, self._timeout, log=log)

    def close(self) -> None:
        self._server.close()


def tcp_listen(host: str, port: int, timeout: float = 60.0, log: FrameLog | None = None) -> tuple[TcpEndpoint, int]:
    """Accept exactly one peer; returns (endpoint, bound_port)."""
    listener = TcpListener(host, port, timeout=timeout)
    return listener.accept(log=log), listener.port


def tcp_connect(host: str, port: int, timeout: float = 60.0, log: FrameLog | None = None) -> TcpEndpoint:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpEndpoint(sock, timeout, log=log)


def tcp_pair(host: str = "127.0.0.1", timeout: float = 60.0,
             logs: tuple[FrameLog | None, FrameLog | None] = (None, None)):
    """Two connected TCP endpoints over localhost, for in-process node loops."""
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, 0))
    port = server.getsockname()[1]
    server.listen(1)
    result: dict = {}

    def _accept():
        conn, _ = server.accept()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        result["conn"] = conn

    t = threading.Thread(target=_accept)
    t.start()
    client = socket.create_connection((host, port), timeout=timeout)
    client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    t.join()
    server.close()
    a = TcpEndpoint(result["conn"], timeout, log=logs[0])
    b = TcpEndpoint(client, timeout, log=logs[1])
    return a, b
