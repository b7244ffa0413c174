"""Group fan-out broker.

Accepts learner connections over two transports speaking one logical
protocol - raw TCP with the binary framing and WebSocket (path ``/ws``)
with the JSON mapping - tracks who belongs to which group, stamps each
relayed message with a per-group sequence number, copies it to every
member of the sender's group (sender included), and keeps an
authoritative fold of the group's instrument state so late joiners catch
up from a single snapshot.  Learning records go to an append-only
JSON-lines log.

Concurrency: everything runs on one asyncio loop, so all mutations of a
group's entry (membership, sequence counter, state fold, fan-out enqueue)
are serialized per inbound message; per-member sender tasks drain FIFO
queues, preserving sequence order on every transport.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import threading
import time
from dataclasses import dataclass, field

from websockets.asyncio.server import ServerConnection, serve as ws_serve
from websockets.exceptions import ConnectionClosed

from .instrument import (
    InvalidParameterError,
    MultimeterState,
    apply_control,
    apply_reading,
    default_state,
    validate_control,
    validate_reading,
)
from .protocol import (
    MAX_NAME_BYTES,
    ChatBody,
    ControlParameter,
    DecodeError,
    ErrorBody,
    ErrorCode,
    FrameDecoder,
    JoinBody,
    MessageEnvelope,
    MessageKind,
    ReadingPayload,
    RosterBlock,
    RosterEntry,
    decode_json,
    encode_envelope,
    encode_json,
)

__all__ = ["Broker", "BrokerThread", "RecordLog", "main"]

log = logging.getLogger("meterlink.broker")

BROKER_ORIGIN = 0  # origin id on broker-authored frames (acks, errors)

_RELAY_KIND = {
    MessageKind.CONTROL: MessageKind.RELAY_CONTROL,
    MessageKind.CHAT: MessageKind.RELAY_CHAT,
    MessageKind.MEASUREMENT: MessageKind.RELAY_MEASUREMENT,
}
_RECORD_KIND = {
    MessageKind.CONTROL: "control",
    MessageKind.CHAT: "chat",
    MessageKind.MEASUREMENT: "measurement",
}


class RecordLog:
    """Append-only learning-record log, one JSON object per line.

    Failures are best-effort by design: a bad path or full disk is logged
    and the broker keeps relaying.
    """

    def __init__(self, path: str | None):
        self.path = path
        self._fh = None
        if path is not None:
            try:
                self._fh = open(path, "a", encoding="utf-8")
            except OSError as exc:
                log.warning("STORAGE_FAILURE: cannot open record log %s: %s", path, exc)

    def append(self, group: int, user: int, kind: str, detail: str) -> None:
        if self._fh is None:
            return
        line = json.dumps(
            {"ts": int(time.time() * 1000), "group": group, "user": user,
             "kind": kind, "detail": detail},
            separators=(",", ":"),
        )
        try:
            self._fh.write(line + "\n")
            self._fh.flush()
        except OSError as exc:
            log.warning("STORAGE_FAILURE: dropped record: %s", exc)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class _Transport:
    """One connected peer, whichever transport it arrived on."""

    label = "?"

    async def send(self, env: MessageEnvelope) -> None:
        raise NotImplementedError

    async def recv(self) -> MessageEnvelope | None:
        """Next inbound envelope, or None on clean EOF.

        Raises DecodeError when the byte/text stream is unrecoverable.
        """
        raise NotImplementedError

    async def close(self) -> None:
        raise NotImplementedError


class _TcpTransport(_Transport):
    label = "tcp"

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self._reader = reader
        self._writer = writer
        self._decoder = FrameDecoder()
        self._pending: list[MessageEnvelope] = []

    async def send(self, env: MessageEnvelope) -> None:
        self._writer.write(encode_envelope(env))
        await self._writer.drain()

    async def recv(self) -> MessageEnvelope | None:
        while not self._pending:
            chunk = await self._reader.read(65536)
            if not chunk:
                return None
            self._pending = self._decoder.feed(chunk)
        return self._pending.pop(0)

    async def close(self) -> None:
        try:
            self._writer.close()
            await self._writer.wait_closed()
        except (OSError, ConnectionError):
            pass


class _WsTransport(_Transport):
    label = "ws"

    def __init__(self, connection: ServerConnection):
        self._conn = connection

    async def send(self, env: MessageEnvelope) -> None:
        await self._conn.send(encode_json(env))

    async def recv(self) -> MessageEnvelope | None:
        try:
            message = await self._conn.recv()
        except ConnectionClosed:
            return None
        if isinstance(message, bytes):
            raise DecodeError("MALFORMED_TEXT", "binary frame on the JSON transport")
        return decode_json(message)

    async def close(self) -> None:
        await self._conn.close()


@dataclass
class MemberSession:
    """Connection-scoped view of one learner."""

    user_id: int
    name: str
    group_id: int
    transport: _Transport
    joined_at_ms: int
    connected: bool = True
    outbox: asyncio.Queue = field(default_factory=asyncio.Queue)
    sender_task: asyncio.Task | None = None


@dataclass
class Group:
    """Registry entry: members, sequence counter, authoritative state."""

    group_id: int
    members: dict[int, MemberSession] = field(default_factory=dict)
    next_seq: int = 1
    state: MultimeterState = field(default_factory=default_state)

    @property
    def last_seq(self) -> int:
        return self.next_seq - 1


class Broker:
    """The relay service itself; one instance per asyncio loop."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        tcp_port: int = 7421,
        ws_port: int = 7422,
        records_path: str | None = None,
        liveness_timeout_ms: int = 10_000,
    ):
        self.host = host
        self.tcp_port = tcp_port
        self.ws_port = ws_port
        self.liveness_timeout = liveness_timeout_ms / 1000.0
        self.records = RecordLog(records_path)
        self.groups: dict[int, Group] = {}
        self._users: dict[int, MemberSession] = {}
        self._tcp_server: asyncio.Server | None = None
        self._ws_server = None

    # -- lifecycle ----------------------------------------------------------

    async def start(self) -> None:
        self._tcp_server = await asyncio.start_server(
            self._handle_tcp, self.host, self.tcp_port
        )
        self.tcp_port = self._tcp_server.sockets[0].getsockname()[1]
        self._ws_server = await ws_serve(self._handle_ws, self.host, self.ws_port)
        self.ws_port = next(iter(self._ws_server.sockets)).getsockname()[1]
        log.info("listening tcp=%s:%d ws=%s:%d/ws", self.host, self.tcp_port,
                 self.host, self.ws_port)

    async def stop(self) -> None:
        for session in list(self._users.values()):
            await self._drop(session)
        if self._tcp_server is not None:
            self._tcp_server.close()
            await self._tcp_server.wait_closed()
        if self._ws_server is not None:
            self._ws_server.close()
            await self._ws_server.wait_closed()
        self.records.close()

    # -- accessors (tests, embedding) ----------------------------------------

    def group_state(self, group_id: int) -> MultimeterState:
        return self.groups[group_id].state

    def group_last_seq(self, group_id: int) -> int:
        return self.groups[group_id].last_seq

    # -- connection handling --------------------------------------------------

    async def _handle_tcp(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        await self._serve_connection(_TcpTransport(reader, writer))

    async def _handle_ws(self, connection: ServerConnection) -> None:
        path = connection.request.path if connection.request else ""
        if path.split("?")[0] != "/ws":
            await connection.close(code=1008, reason="unknown path")
            return
        await self._serve_connection(_WsTransport(connection))

    async def _serve_connection(self, transport: _Transport) -> None:
        session: MemberSession | None = None
        try:
            while True:
                try:
                    env = await transport.recv()
                except DecodeError as exc:
                    # Framing loss is unrecoverable; drop the connection.
                    log.info("closing %s connection: %s", transport.label, exc)
                    break
                except (ConnectionError, OSError):
                    break
                if env is None:
                    break
                session = await self._dispatch(transport, session, env)
                if session is _CLOSED:
                    session = None
                    break
        finally:
            if session is not None and session is not _CLOSED:
                await self._leave(session)
            await transport.close()

    async def _dispatch(self, transport, session, env):
        kind = env.kind
        if kind == MessageKind.PING:
            # Liveness probes bypass group logic entirely.
            await self._send_direct(
                transport, session,
                MessageEnvelope(MessageKind.PONG, BROKER_ORIGIN, env.group, 0, env.body),
            )
            return session
        if kind == MessageKind.JOIN:
            return await self._join(transport, session, env)
        if kind in _RELAY_KIND:
            await self._relay(transport, session, env)
            return session
        if kind == MessageKind.LEAVE:
            if session is not None:
                await self._leave(session)
            return _CLOSED
        if kind == MessageKind.PONG:
            return session  # stray but harmless
        await self._error(transport, session, ErrorCode.UNSUPPORTED_KIND,
                          f"clients do not send {kind.name}")
        return session

    # -- join / leave ----------------------------------------------------------

    async def _join(self, transport, session, env):
        if session is not None:
            await self._error(transport, session, ErrorCode.UNSUPPORTED_KIND,
                              "connection already joined")
            return session
        body = env.body
        if not isinstance(body, JoinBody):
            await self._error(transport, None, ErrorCode.UNSUPPORTED_KIND, "JOIN body missing")
            return _CLOSED
        if len(body.name.encode("utf-8")) > MAX_NAME_BYTES:
            await self._error(transport, None, ErrorCode.OVERSIZED_NAME,
                              f"name exceeds {MAX_NAME_BYTES} bytes")
            return _CLOSED
        user_id = env.origin
        if user_id in self._users:
            await self._error(transport, None, ErrorCode.DUPLICATE_USER,
                              f"user {user_id} is already connected")
            return _CLOSED

        group = self.groups.setdefault(env.group, Group(env.group))
        session = MemberSession(user_id, body.name, group.group_id, transport,
                                int(time.time() * 1000))
        group.members[user_id] = session
        self._users[user_id] = session
        session.sender_task = asyncio.get_running_loop().create_task(self._pump(session))

        ack = MessageEnvelope(
            MessageKind.JOIN_ACK, BROKER_ORIGIN, group.group_id, group.last_seq,
            self._roster_block(group),
        )
        session.outbox.put_nowait(ack)
        update = MessageEnvelope(
            MessageKind.ROSTER_UPDATE, BROKER_ORIGIN, group.group_id, group.last_seq,
            self._roster_block(group),
        )
        for member in group.members.values():
            if member is not session:
                member.outbox.put_nowait(update)
        self.records.append(group.group_id, user_id, "join", body.name)
        log.info("user %d (%s) joined group %d via %s", user_id, body.name,
                 group.group_id, transport.label)
        return session

    async def _leave(self, session: MemberSession) -> None:
        """Idempotent removal; empty groups keep their state until shutdown."""
        if not session.connected:
            return
        session.connected = False
        group = self.groups.get(session.group_id)
        if group is not None and group.members.get(session.user_id) is session:
            del group.members[session.user_id]
            update = MessageEnvelope(
                MessageKind.ROSTER_UPDATE, BROKER_ORIGIN, group.group_id,
                group.last_seq, self._roster_block(group),
            )
            for member in group.members.values():
                member.outbox.put_nowait(update)
        if self._users.get(session.user_id) is session:
            del self._users[session.user_id]
        self.records.append(session.group_id, session.user_id, "leave", session.name)
        if session.sender_task is not None:
            session.outbox.put_nowait(None)  # drain, then stop
        log.info("user %d left group %d", session.user_id, session.group_id)

    async def _drop(self, session: MemberSession) -> None:
        await self._leave(session)
        await session.transport.close()

    def _roster_block(self, group: Group) -> RosterBlock:
        members = tuple(
            RosterEntry(m.user_id, m.name)
            for m in sorted(group.members.values(), key=lambda m: m.user_id)
        )
        state = group.state
        return RosterBlock(
            members=members,
            dial=int(state.dial),
            power=state.power,
            overload=state.reading_overload,
            last_value_micro=state.reading_value_micro,
        )

    # -- relay -----------------------------------------------------------------

    async def _relay(self, transport, session, env: MessageEnvelope) -> None:
        if session is None or not session.connected:
            await self._error(transport, session, ErrorCode.NOT_JOINED,
                              f"{env.kind.name} before JOIN")
            return
        group = self.groups[session.group_id]
        body = env.body

        # Validate before consuming a sequence number.
        try:
            if isinstance(body, ControlParameter):
                validate_control(body)
            elif isinstance(body, ReadingPayload):
                validate_reading(body)
            elif isinstance(body, ChatBody):
                pass
            else:
                raise InvalidParameterError(f"unexpected body {type(body).__name__}")
        except InvalidParameterError as exc:
            await self._error(transport, session, ErrorCode.INVALID_PARAMETER, str(exc))
            return

        seq = group.next_seq
        group.next_seq += 1
        if isinstance(body, ControlParameter):
            group.state = apply_control(group.state, body)
            detail = f"{body.code.name}={body.value}"
        elif isinstance(body, ReadingPayload):
            group.state = apply_reading(group.state, body)
            detail = (f"{body.mode.name} range={body.range_ordinal} "
                      f"overload={int(body.overload)} value_micro={body.value_micro}")
        else:
            detail = body.text

        relay = MessageEnvelope(
            _RELAY_KIND[env.kind], session.user_id, group.group_id, seq, body
        )
        for member in group.members.values():
            member.outbox.put_nowait(relay)
        self.records.append(group.group_id, session.user_id, _RECORD_KIND[env.kind], detail)

    # -- plumbing ----------------------------------------------------------------

    async def _pump(self, session: MemberSession) -> None:
        """Drain one member's outbox to its transport in FIFO order."""
        try:
            while True:
                env = await session.outbox.get()
                if env is None:
                    break
                await asyncio.wait_for(session.transport.send(env), self.liveness_timeout)
        except (ConnectionError, OSError, asyncio.TimeoutError, ConnectionClosed) as exc:
            log.info("send to user %d failed (%s); dropping connection",
                     session.user_id, type(exc).__name__)
            await self._drop(session)

    async def _send_direct(self, transport, session, env: MessageEnvelope) -> None:
        """Send outside the group fan-out (PONG, errors)."""
        if session is not None and session.connected:
            session.outbox.put_nowait(env)
            return
        try:
            await asyncio.wait_for(transport.send(env), self.liveness_timeout)
        except (ConnectionError, OSError, asyncio.TimeoutError, ConnectionClosed):
            pass

    async def _error(self, transport, session, code: ErrorCode, detail: str) -> None:
        group = session.group_id if session is not None else 0
        await self._send_direct(
            transport, session,
            MessageEnvelope(MessageKind.ERROR, BROKER_ORIGIN, group, 0,
                            ErrorBody(code, detail)),
        )


_CLOSED = object()  # dispatch sentinel: connection must end


class BrokerThread:
    """Run a broker on a private loop thread (tests, benches, embedding).

    Ports passed as 0 are resolved by the OS; read ``tcp_port`` /
    ``ws_port`` after ``start()``.
    """

    def __init__(self, **kwargs):
        kwargs.setdefault("tcp_port", 0)
        kwargs.setdefault("ws_port", 0)
        self._kwargs = kwargs
        self._loop: asyncio.AbstractEventLoop | None = None
        self._thread: threading.Thread | None = None
        self._ready = threading.Event()
        self.broker: Broker | None = None

    def start(self) -> "BrokerThread":
        self._thread = threading.Thread(target=self._run, name="broker", daemon=True)
        self._thread.start()
        if not self._ready.wait(timeout=10):
            raise RuntimeError("broker thread failed to start")
        return self

    def _run(self) -> None:
        self._loop = asyncio.new_event_loop()
        asyncio.set_event_loop(self._loop)
        self.broker = Broker(**self._kwargs)
        self._loop.run_until_complete(self.broker.start())
        self._ready.set()
        self._loop.run_forever()
        self._loop.run_until_complete(self.broker.stop())
        self._loop.close()

    @property
    def tcp_port(self) -> int:
        assert self.broker is not None
        return self.broker.tcp_port

    @property
    def ws_port(self) -> int:
        assert self.broker is not None
        return self.broker.ws_port

    def authoritative_state(self, group_id: int) -> MultimeterState:
        assert self._loop is not None and self.broker is not None
        future = asyncio.run_coroutine_threadsafe(
            _read_state(self.broker, group_id), self._loop
        )
        return future.result(timeout=5)

    def stop(self) -> None:
        if self._loop is not None:
            self._loop.call_soon_threadsafe(self._loop.stop)
        if self._thread is not None:
            self._thread.join(timeout=10)


async def _read_state(broker: Broker, group_id: int) -> MultimeterState:
    return broker.group_state(group_id)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="broker", description="Group fan-out broker.")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--tcp-port", type=int, default=7421)
    parser.add_argument("--ws-port", type=int, default=7422)
    parser.add_argument("--records", default=None, help="append learning records to this file")
    parser.add_argument("--liveness-timeout-ms", type=int, default=10_000)
    parser.add_argument("--print-ports", action="store_true",
                        help="print resolved ports as one JSON line once listening")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")

    async def _serve() -> None:
        broker = Broker(args.host, args.tcp_port, args.ws_port, args.records,
                        args.liveness_timeout_ms)
        await broker.start()
        if args.print_ports:
            print(json.dumps({"tcp_port": broker.tcp_port, "ws_port": broker.ws_port}),
                  flush=True)
        try:
            await asyncio.Event().wait()
        finally:
            await broker.stop()

    try:
        asyncio.run(_serve())
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
