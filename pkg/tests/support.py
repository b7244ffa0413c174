"""Shared test helpers: random envelope generation and a raw frame-level client."""

from __future__ import annotations

import random
import socket
import time

from meterlink.protocol import (
    ChatBody,
    ControlCode,
    ControlParameter,
    ErrorBody,
    ErrorCode,
    FrameDecoder,
    JoinBody,
    MessageEnvelope,
    MessageKind,
    MeterMode,
    PingBody,
    ReadingPayload,
    RosterBlock,
    RosterEntry,
    encode_envelope,
)

_TEXT_POOL = (
    "abcdefghijklmnopqrstuvwxyz"
    "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .,!?-_"
    "Ωµ中文éß"
)


def random_text(rng: random.Random, max_len: int) -> str:
    return "".join(rng.choice(_TEXT_POOL) for _ in range(rng.randrange(max_len + 1)))


def random_i64(rng: random.Random) -> int:
    return rng.randrange(-(1 << 63), 1 << 63)


def random_body(rng: random.Random, kind: MessageKind):
    if kind == MessageKind.JOIN:
        return JoinBody(random_text(rng, 30))
    if kind in (MessageKind.JOIN_ACK, MessageKind.LEAVE, MessageKind.ROSTER_UPDATE):
        members = tuple(
            RosterEntry(rng.randrange(1 << 32), random_text(rng, 12))
            for _ in range(rng.randrange(5))
        )
        return RosterBlock(members, rng.randrange(256), rng.random() < 0.5,
                           rng.random() < 0.5, random_i64(rng))
    if kind in (MessageKind.CONTROL, MessageKind.RELAY_CONTROL):
        return ControlParameter(rng.randrange(256), ControlCode(rng.randrange(3)),
                                random_i64(rng))
    if kind in (MessageKind.CHAT, MessageKind.RELAY_CHAT):
        return ChatBody(random_text(rng, 200))
    if kind in (MessageKind.MEASUREMENT, MessageKind.RELAY_MEASUREMENT):
        return ReadingPayload(MeterMode(rng.randrange(3)), rng.randrange(256),
                              rng.random() < 0.5, random_i64(rng))
    if kind in (MessageKind.PING, MessageKind.PONG):
        return PingBody(rng.randrange(1 << 64))
    return ErrorBody(ErrorCode(rng.randrange(1, 7)), random_text(rng, 60))


def random_envelope(rng: random.Random) -> MessageEnvelope:
    kind = rng.choice(list(MessageKind))
    return MessageEnvelope(
        kind=kind,
        origin=rng.randrange(1 << 32),
        group=rng.randrange(1 << 16),
        seq=rng.randrange(1 << 32),
        body=random_body(rng, kind),
    )


class RawClient:
    """Socket-level peer for exercising the broker below the session API."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(0.05)
        self._decoder = FrameDecoder()
        self._pending: list[MessageEnvelope] = []

    def send(self, env: MessageEnvelope) -> None:
        self.sock.sendall(encode_envelope(env))

    def send_raw(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv(self, timeout: float = 2.0) -> MessageEnvelope | None:
        deadline = time.monotonic() + timeout
        while not self._pending:
            if time.monotonic() > deadline:
                return None
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                return None
            if not chunk:
                return None
            self._pending.extend(self._decoder.feed(chunk))
        return self._pending.pop(0)

    def recv_all(self, timeout: float = 0.5) -> list[MessageEnvelope]:
        out = []
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            env = self.recv(timeout=0.05)
            if env is not None:
                out.append(env)
        return out

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass
