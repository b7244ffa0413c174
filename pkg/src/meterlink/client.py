"""Learner-side session against the broker.

Connects over TCP, joins a group, and then follows the local-first rule:
a control is applied to the display copy immediately, transmitted, and
confirmed when its echo comes back in the group's sequence order.  The
authoritative state is only ever advanced by the relay stream, so all
members of a group converge no matter how their sends interleave.

The API is pull-based: a background reader thread timestamps and queues
raw envelopes, and :meth:`LearnerSession.poll_events` folds them into
state and returns ordered :class:`ClientEvent` values.  One session
belongs to one owning thread; only the queue is shared.
"""

from __future__ import annotations

import argparse
import json
import queue
import socket
import sys
import threading
import time
from dataclasses import dataclass

from .instrument import (
    DialPosition,
    InvalidParameterError,
    MultimeterState,
    apply_control,
    apply_reading,
    fold_state,
    reading_payload,
    state_display,
)
from .protocol import (
    MAX_TEXT_BYTES,
    ChatBody,
    ControlCode,
    ControlParameter,
    DecodeError,
    ErrorBody,
    FrameDecoder,
    JoinBody,
    MessageEnvelope,
    MessageKind,
    PingBody,
    ReadingPayload,
    RosterBlock,
    RosterEntry,
    encode_envelope,
)
from .serial_link import scan_stream

__all__ = [
    "ClientEvent",
    "StateChanged",
    "ChatReceived",
    "RosterChanged",
    "ReadingReceived",
    "SessionError",
    "ConnectError",
    "JoinRefusedError",
    "NotConnectedError",
    "TextTooLongError",
    "LearnerSession",
    "run_script",
    "main",
]


class ConnectError(ConnectionError):
    """Could not reach or complete a join with the broker."""


class JoinRefusedError(ConnectError):
    def __init__(self, code: str, detail: str):
        super().__init__(f"{code}: {detail}")
        self.code = code
        self.detail = detail


class NotConnectedError(RuntimeError):
    pass


class TextTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class ClientEvent:
    recv_ns: int


@dataclass(frozen=True)
class StateChanged(ClientEvent):
    state: MultimeterState
    origin: int
    seq: int


@dataclass(frozen=True)
class ChatReceived(ClientEvent):
    origin: int
    origin_name: str | None
    text: str
    seq: int


@dataclass(frozen=True)
class RosterChanged(ClientEvent):
    members: tuple[RosterEntry, ...]


@dataclass(frozen=True)
class ReadingReceived(ClientEvent):
    origin: int
    payload: ReadingPayload
    seq: int


@dataclass(frozen=True)
class SessionError(ClientEvent):
    code: str
    detail: str


_SENTINEL = object()


class LearnerSession:
    """One learner's connection, state mirror and event inbox."""

    def __init__(self, sock: socket.socket, user_id: int, group: int, name: str):
        self._sock = sock
        self.user_id = user_id
        self.group = group
        self.name = name
        self.state = None  # authoritative fold; set from the join ack
        self.roster: tuple[RosterEntry, ...] = ()
        self.last_seq = 0
        self.pending: list[ControlParameter] = []
        self.connected = False
        self.lost = False
        self._inbox: queue.Queue = queue.Queue()
        self._send_lock = threading.Lock()
        self._reader: threading.Thread | None = None

    # -- connection ------------------------------------------------------------

    @classmethod
    def connect(
        cls,
        host: str,
        port: int,
        user_id: int,
        group: int,
        name: str,
        timeout: float = 5.0,
    ) -> "LearnerSession":
        """Open the transport, join, and adopt the group's current state."""
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except socket.timeout as exc:
            raise ConnectError(f"CONNECT_TIMEOUT: {host}:{port}") from exc
        except OSError as exc:
            raise ConnectError(f"broker unreachable at {host}:{port}: {exc}") from exc
        sock.settimeout(None)
        session = cls(sock, user_id, group, name)
        session._send(MessageEnvelope(MessageKind.JOIN, user_id, group, 0, JoinBody(name)))
        session._start_reader()
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                sock.close()
                raise ConnectError("CONNECT_TIMEOUT: no join ack")
            try:
                item = session._inbox.get(timeout=remaining)
            except queue.Empty:
                continue
            if item is _SENTINEL:
                sock.close()
                raise ConnectError("connection closed before join ack")
            env, _ = item
            if env.kind == MessageKind.ERROR and isinstance(env.body, ErrorBody):
                sock.close()
                raise JoinRefusedError(env.body.code.name, env.body.detail)
            if env.kind == MessageKind.JOIN_ACK and isinstance(env.body, RosterBlock):
                session._adopt(env)
                session.connected = True
                return session
            # Anything else this early is broker misbehavior; keep waiting.

    def _adopt(self, ack: MessageEnvelope) -> None:
        block = ack.body
        self.roster = block.members
        self.last_seq = ack.seq
        self.state = MultimeterState(
            dial=DialPosition.from_ordinal(block.dial),
            power=block.power,
            reading_overload=block.overload,
            reading_value_micro=block.last_value_micro,
        )

    def _start_reader(self) -> None:
        self._reader = threading.Thread(
            target=self._read_loop, name=f"learner-{self.user_id}", daemon=True
        )
        self._reader.start()

    def _read_loop(self) -> None:
        decoder = FrameDecoder()
        try:
            while True:
                chunk = self._sock.recv(65536)
                if not chunk:
                    break
                stamp = time.monotonic_ns()
                for env in decoder.feed(chunk):
                    self._inbox.put((env, stamp))
        except (OSError, DecodeError):
            pass
        self._inbox.put(_SENTINEL)

    def _send(self, env: MessageEnvelope) -> None:
        data = encode_envelope(env)
        try:
            with self._send_lock:
                self._sock.sendall(data)
        except OSError as exc:
            raise NotConnectedError(f"transport failed: {exc}") from exc

    # -- outbound operations -----------------------------------------------------

    def send_control(self, p: ControlParameter) -> None:
        """Optimistically apply ``p`` to the display copy, then transmit."""
        self._require_connected()
        try:
            apply_control(self.state, p)
        except InvalidParameterError:
            raise  # rejected locally; nothing reaches the wire
        self.pending.append(p)
        self._send(MessageEnvelope(MessageKind.CONTROL, self.user_id, self.group, 0, p))

    def send_chat(self, text: str) -> None:
        self._require_connected()
        if len(text.encode("utf-8")) > MAX_TEXT_BYTES:
            raise TextTooLongError(f"chat text exceeds {MAX_TEXT_BYTES} bytes")
        self._send(MessageEnvelope(MessageKind.CHAT, self.user_id, self.group, 0,
                                   ChatBody(text)))

    def attach_serial(self, frames: bytes) -> int:
        """Publish every panel reading found in ``frames`` as a measurement.

        Scanner diagnostics become local error events and are never
        transmitted; blank (switched-off) panels carry nothing to send.
        Returns the number of measurements published.
        """
        self._require_connected()
        readings, diagnostics = scan_stream(frames)
        for diag in diagnostics:
            self._inbox.put(SessionError(time.monotonic_ns(), diag.code,
                                         f"serial offset {diag.offset}: {diag.message}"))
        sent = 0
        for reading in readings:
            if reading.blank:
                continue
            self._send(MessageEnvelope(MessageKind.MEASUREMENT, self.user_id,
                                       self.group, 0, reading_payload(reading)))
            sent += 1
        return sent

    def ping(self, nonce: int) -> None:
        self._require_connected()
        self._send(MessageEnvelope(MessageKind.PING, self.user_id, self.group, 0,
                                   PingBody(nonce)))

    def leave(self) -> None:
        if self.connected:
            try:
                block = RosterBlock((), int(self.state.dial), self.state.power,
                                    self.state.reading_overload,
                                    self.state.reading_value_micro)
                self._send(MessageEnvelope(MessageKind.LEAVE, self.user_id, self.group,
                                           0, block))
            except NotConnectedError:
                pass
        self.close()

    def close(self) -> None:
        self.connected = False
        try:
            self._sock.close()
        except OSError:
            pass

    def _require_connected(self) -> None:
        if not self.connected or self.lost:
            raise NotConnectedError("session is not joined")

    # -- inbound events ------------------------------------------------------------

    def poll_events(self, timeout: float = 0.0) -> list[ClientEvent]:
        """Drain the inbox in arrival (sequence) order.

        With a positive ``timeout`` the call blocks up to that long for
        the first event; it always returns everything already queued.
        """
        events: list[ClientEvent] = []
        first = True
        while True:
            try:
                if first and timeout > 0:
                    item = self._inbox.get(timeout=timeout)
                else:
                    item = self._inbox.get_nowait()
            except queue.Empty:
                break
            first = False
            if item is _SENTINEL:
                if not self.lost:
                    self.lost = True
                    self.connected = False
                    events.append(SessionError(time.monotonic_ns(),
                                               "CONNECTION_LOST", "transport closed"))
                break
            if isinstance(item, ClientEvent):
                events.append(item)
                continue
            env, stamp = item
            event = self._fold(env, stamp)
            if event is not None:
                events.append(event)
        return events

    def drain(self, expect: int | None = None, timeout: float = 5.0) -> list[ClientEvent]:
        """Poll until ``expect`` events arrived (or until idle)."""
        events: list[ClientEvent] = []
        deadline = time.monotonic() + timeout
        while True:
            events.extend(self.poll_events(timeout=0.05))
            if expect is not None and len(events) >= expect:
                return events
            if expect is None and events:
                return events
            if time.monotonic() > deadline:
                return events

    def _fold(self, env: MessageEnvelope, stamp: int) -> ClientEvent | None:
        kind = env.kind
        if kind in (MessageKind.RELAY_CONTROL, MessageKind.RELAY_CHAT,
                    MessageKind.RELAY_MEASUREMENT):
            if env.group != self.group:
                return SessionError(stamp, "PROTOCOL", f"relay for group {env.group}")
            if env.seq != self.last_seq + 1:
                # Should be impossible; surfaced so tests can assert on it.
                event = SessionError(stamp, "SEQUENCE_GAP",
                                     f"expected seq {self.last_seq + 1}, got {env.seq}")
                self.last_seq = env.seq
                return event
            self.last_seq = env.seq
        if kind == MessageKind.RELAY_CONTROL and isinstance(env.body, ControlParameter):
            self.state = apply_control(self.state, env.body)
            if env.origin == self.user_id and env.body in self.pending:
                self.pending.remove(env.body)
            return StateChanged(stamp, self.state, env.origin, env.seq)
        if kind == MessageKind.RELAY_CHAT and isinstance(env.body, ChatBody):
            return ChatReceived(stamp, env.origin, self._name_of(env.origin),
                                env.body.text, env.seq)
        if kind == MessageKind.RELAY_MEASUREMENT and isinstance(env.body, ReadingPayload):
            self.state = apply_reading(self.state, env.body)
            return ReadingReceived(stamp, env.origin, env.body, env.seq)
        if kind == MessageKind.ROSTER_UPDATE and isinstance(env.body, RosterBlock):
            self.roster = env.body.members
            return RosterChanged(stamp, env.body.members)
        if kind == MessageKind.ERROR and isinstance(env.body, ErrorBody):
            return SessionError(stamp, env.body.code.name, env.body.detail)
        if kind == MessageKind.PONG:
            return None
        return SessionError(stamp, "PROTOCOL", f"unexpected {kind.name} from broker")

    def _name_of(self, user_id: int) -> str | None:
        for entry in self.roster:
            if entry.user_id == user_id:
                return entry.name
        return None

    @property
    def display_state(self) -> MultimeterState:
        """Authoritative state plus any unconfirmed local controls."""
        return fold_state(self.state, self.pending)

    @property
    def display_text(self) -> str:
        return state_display(self.display_state)


# -- scripted CLI learner --------------------------------------------------------


@dataclass(frozen=True)
class ScriptCommand:
    at_ms: int
    verb: str
    argument: str


def parse_script(text: str) -> list[ScriptCommand]:
    """Parse the learner script format: ``@<ms> <verb> <argument>`` per line."""
    commands = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(None, 2)
        if len(parts) < 2 or not parts[0].startswith("@"):
            raise ValueError(f"script line {lineno}: expected '@<ms> <verb> ...', got {raw!r}")
        try:
            at_ms = int(parts[0][1:])
        except ValueError:
            raise ValueError(f"script line {lineno}: bad timestamp {parts[0]!r}") from None
        verb = parts[1].lower()
        argument = parts[2] if len(parts) > 2 else ""
        if verb not in ("dial", "power", "chat", "serial"):
            raise ValueError(f"script line {lineno}: unknown command {verb!r}")
        if verb != "chat" and not argument:
            raise ValueError(f"script line {lineno}: {verb} needs an argument")
        commands.append(ScriptCommand(at_ms, verb, argument))
    return sorted(commands, key=lambda c: c.at_ms)


def run_script(
    session: LearnerSession,
    commands: list[ScriptCommand],
    on_event=None,
) -> None:
    """Execute a timed command script, polling events along the way."""
    start = time.monotonic()
    for command in commands:
        while True:
            wait = command.at_ms / 1000.0 - (time.monotonic() - start)
            if wait <= 0:
                break
            for event in session.poll_events(timeout=min(wait, 0.05)):
                if on_event:
                    on_event(event)
        if command.verb == "dial":
            session.send_control(ControlParameter(0, ControlCode.SET_DIAL,
                                                  int(command.argument)))
        elif command.verb == "power":
            session.send_control(ControlParameter(0, ControlCode.SET_POWER,
                                                  int(command.argument)))
        elif command.verb == "chat":
            session.send_chat(command.argument)
        elif command.verb == "serial":
            with open(command.argument, "rb") as fh:
                session.attach_serial(fh.read())


def _event_json(event: ClientEvent) -> str:
    if isinstance(event, StateChanged):
        doc = {"event": "state_changed", "origin": event.origin, "seq": event.seq,
               "dial": int(event.state.dial), "power": event.state.power,
               "display": state_display(event.state)}
    elif isinstance(event, ChatReceived):
        doc = {"event": "chat", "origin": event.origin, "name": event.origin_name,
               "text": event.text, "seq": event.seq}
    elif isinstance(event, RosterChanged):
        doc = {"event": "roster",
               "members": [{"id": m.user_id, "name": m.name} for m in event.members]}
    elif isinstance(event, ReadingReceived):
        doc = {"event": "reading", "origin": event.origin, "seq": event.seq,
               "mode": event.payload.mode.name, "range": event.payload.range_ordinal,
               "overload": event.payload.overload,
               "value_micro": event.payload.value_micro}
    elif isinstance(event, SessionError):
        doc = {"event": "error", "code": event.code, "detail": event.detail}
    else:
        doc = {"event": "unknown"}
    return json.dumps(doc, separators=(",", ":"))


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="learner",
                                     description="Headless scriptable learner client.")
    parser.add_argument("--broker", required=True, help="host:port of the broker TCP listener")
    parser.add_argument("--user", required=True, type=int)
    parser.add_argument("--group", required=True, type=int)
    parser.add_argument("--name", default=None, help="display name (default user<id>)")
    parser.add_argument("--script", default=None, help="command script file")
    parser.add_argument("--linger-ms", type=int, default=500,
                        help="keep polling this long after the last command")
    parser.add_argument("--dump-state", action="store_true",
                        help="print the final authoritative state as JSON")
    parser.add_argument("--quiet", action="store_true", help="suppress event lines")
    args = parser.parse_args(argv)

    host, _, port = args.broker.partition(":")
    name = args.name or f"user{args.user}"
    commands: list[ScriptCommand] = []
    if args.script:
        with open(args.script, encoding="utf-8") as fh:
            commands = parse_script(fh.read())

    def emit(event: ClientEvent) -> None:
        if not args.quiet:
            print(_event_json(event), flush=True)

    try:
        session = LearnerSession.connect(host, int(port), args.user, args.group, name)
    except ConnectError as exc:
        print(f"connect failed: {exc}", file=sys.stderr)
        return 1

    try:
        run_script(session, commands, on_event=emit)
        deadline = time.monotonic() + args.linger_ms / 1000.0
        while time.monotonic() < deadline:
            for event in session.poll_events(timeout=0.05):
                emit(event)
        if args.dump_state:
            state = session.state
            print(json.dumps({
                "dial": int(state.dial), "power": state.power,
                "overload": state.reading_overload,
                "value_micro": state.reading_value_micro,
                "display": state_display(state),
                "seq": session.last_seq,
            }, separators=(",", ":")), flush=True)
    finally:
        session.leave()
    return 0


if __name__ == "__main__":
    sys.exit(main())
