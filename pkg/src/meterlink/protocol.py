"""Wire protocol shared by the broker, learner clients and the browser console.

One message model, two encodings:

* a length-prefixed binary framing for raw TCP transports, and
* a JSON text mapping for the WebSocket bridge.

Binary frame layout (all multi-byte integers big-endian)::

    [len: u32][kind: u8][origin: u32][group: u16][seq: u32][body ...]

``len`` counts the body bytes only.  Bodies per kind:

    JOIN                     [name_len: u8][name: UTF-8]
    JOIN_ACK / LEAVE /
    ROSTER_UPDATE            [member_count: u8]
                             ([id: u32][name_len: u8][name: UTF-8]) * count
                             [dial: u8][power: u8][overload: u8]
                             [last_value_micro: i64]
    CONTROL / RELAY_CONTROL  [instrument: u8][code: u8][value: i64]
    CHAT / RELAY_CHAT        [text_len: u16][text: UTF-8]
    MEASUREMENT /
    RELAY_MEASUREMENT        [mode: u8][range: u8][overload: u8][value_micro: i64]
    PING / PONG              [nonce: u64]
    ERROR                    [code: u8][detail_len: u16][detail: UTF-8]

The JSON mapping uses the field names ``kind, origin, group, seq, body``
with ``kind`` (and the body's ``code`` / ``mode``) spelled as enum name
strings; integers stay JSON integers.  ``encode_json`` is deterministic
(fixed key order, compact separators) so equal envelopes map to identical
text.

Everything in this module is a pure function over immutable values; it is
safe to call from any thread or task.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import IntEnum

__all__ = [
    "MessageKind",
    "MeterMode",
    "ControlCode",
    "ErrorCode",
    "MessageEnvelope",
    "JoinBody",
    "RosterEntry",
    "RosterBlock",
    "ControlParameter",
    "ChatBody",
    "ReadingPayload",
    "PingBody",
    "ErrorBody",
    "EncodeError",
    "DecodeError",
    "FrameDecoder",
    "encode_envelope",
    "decode_envelope",
    "encode_json",
    "decode_json",
    "MAX_NAME_BYTES",
    "MAX_TEXT_BYTES",
    "MAX_BODY_BYTES",
]

MAX_NAME_BYTES = 255
MAX_TEXT_BYTES = 65_535
# Largest body any kind can legally produce: a maximum-length chat text plus
# its u16 length prefix.  Bounds broker memory per read.
MAX_BODY_BYTES = MAX_TEXT_BYTES + 2


class MessageKind(IntEnum):
    """One-octet wire discriminant."""

    JOIN = 0x01
    JOIN_ACK = 0x02
    LEAVE = 0x03
    CONTROL = 0x04
    CHAT = 0x05
    MEASUREMENT = 0x06
    PING = 0x0A
    PONG = 0x0B
    RELAY_CONTROL = 0x14
    RELAY_CHAT = 0x15
    RELAY_MEASUREMENT = 0x16
    ROSTER_UPDATE = 0x20
    ERROR = 0x7F


class MeterMode(IntEnum):
    DCV = 0
    OHM = 1
    DIODE = 2


class ControlCode(IntEnum):
    SET_DIAL = 0
    SET_POWER = 1
    SET_PROBE_NODE = 2


class ErrorCode(IntEnum):
    DUPLICATE_USER = 1
    OVERSIZED_NAME = 2
    NOT_JOINED = 3
    INVALID_PARAMETER = 4
    TEXT_TOO_LONG = 5
    UNSUPPORTED_KIND = 6


@dataclass(frozen=True)
class JoinBody:
    name: str


@dataclass(frozen=True)
class RosterEntry:
    user_id: int
    name: str


@dataclass(frozen=True)
class RosterBlock:
    """Roster plus the group's instrument-state snapshot.

    Shared body of JOIN_ACK, LEAVE and ROSTER_UPDATE.  ``dial`` is a dial
    position ordinal (0-11 for live states; the codec only enforces u8).
    """

    members: tuple[RosterEntry, ...]
    dial: int
    power: bool
    overload: bool
    last_value_micro: int


@dataclass(frozen=True)
class ControlParameter:
    """A user action normalized for relay: (instrument, code, value).

    ``value`` semantics depend on ``code``: a dial position ordinal for
    SET_DIAL, 0/1 for SET_POWER, a free node index for SET_PROBE_NODE.
    The codec checks wire ranges only; semantic validity is checked by
    ``instrument.validate_control``.
    """

    instrument: int
    code: ControlCode
    value: int


@dataclass(frozen=True)
class ChatBody:
    text: str


@dataclass(frozen=True)
class ReadingPayload:
    """A measured value as it travels between peers.

    ``value_micro`` is an exact integer in micro-units (uV for DCV/DIODE,
    uOhm for OHM) so peers compare byte-identical readings; it is zero when
    ``overload`` is set.  ``range_ordinal`` is the dial position the
    reading was taken on.
    """

    mode: MeterMode
    range_ordinal: int
    overload: bool
    value_micro: int


@dataclass(frozen=True)
class PingBody:
    nonce: int


@dataclass(frozen=True)
class ErrorBody:
    code: ErrorCode
    detail: str


Body = (
    JoinBody
    | RosterBlock
    | ControlParameter
    | ChatBody
    | ReadingPayload
    | PingBody
    | ErrorBody
)


@dataclass(frozen=True)
class MessageEnvelope:
    """One wire message.

    ``seq`` is 0 on anything a client sends; the broker stamps strictly
    positive, per-group sequence numbers on RELAY_* messages.
    """

    kind: MessageKind
    origin: int
    group: int
    seq: int
    body: Body


class EncodeError(ValueError):
    """A field violates its wire range (REJECT)."""


class DecodeError(ValueError):
    """Bytes/text outside the codec image.

    ``code`` is one of UNKNOWN_KIND, TRUNCATED, TRAILING_BYTES,
    INVALID_BODY, MALFORMED_TEXT, OVERSIZED.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


_HEADER = struct.Struct(">IBIHI")  # len, kind, origin, group, seq
_I64 = struct.Struct(">q")
_U64 = struct.Struct(">Q")

_ROSTER_KINDS = frozenset(
    {MessageKind.JOIN_ACK, MessageKind.LEAVE, MessageKind.ROSTER_UPDATE}
)
_CONTROL_KINDS = frozenset({MessageKind.CONTROL, MessageKind.RELAY_CONTROL})
_CHAT_KINDS = frozenset({MessageKind.CHAT, MessageKind.RELAY_CHAT})
_MEASUREMENT_KINDS = frozenset(
    {MessageKind.MEASUREMENT, MessageKind.RELAY_MEASUREMENT}
)
_PING_KINDS = frozenset({MessageKind.PING, MessageKind.PONG})

_BODY_TYPES: dict[MessageKind, type] = {
    MessageKind.JOIN: JoinBody,
    MessageKind.JOIN_ACK: RosterBlock,
    MessageKind.LEAVE: RosterBlock,
    MessageKind.ROSTER_UPDATE: RosterBlock,
    MessageKind.CONTROL: ControlParameter,
    MessageKind.RELAY_CONTROL: ControlParameter,
    MessageKind.CHAT: ChatBody,
    MessageKind.RELAY_CHAT: ChatBody,
    MessageKind.MEASUREMENT: ReadingPayload,
    MessageKind.RELAY_MEASUREMENT: ReadingPayload,
    MessageKind.PING: PingBody,
    MessageKind.PONG: PingBody,
    MessageKind.ERROR: ErrorBody,
}


def _check_uint(value: int, bits: int, what: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise EncodeError(f"{what} must be an int, got {type(value).__name__}")
    if not 0 <= value < (1 << bits):
        raise EncodeError(f"{what} out of u{bits} range: {value}")
    return value


def _check_i64(value: int, what: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise EncodeError(f"{what} must be an int, got {type(value).__name__}")
    if not -(1 << 63) <= value < (1 << 63):
        raise EncodeError(f"{what} out of i64 range: {value}")
    return value


# --- binary body encoders -------------------------------------------------


def _encode_body(env: MessageEnvelope) -> bytes:
    kind, body = env.kind, env.body
    expected = _BODY_TYPES[kind]
    if not isinstance(body, expected):
        raise EncodeError(
            f"{kind.name} body must be {expected.__name__}, got {type(body).__name__}"
        )

    if isinstance(body, JoinBody):
        raw = body.name.encode("utf-8")
        if len(raw) > MAX_NAME_BYTES:
            raise EncodeError(f"name exceeds {MAX_NAME_BYTES} bytes")
        return bytes([len(raw)]) + raw

    if isinstance(body, RosterBlock):
        parts = [bytes([_check_uint(len(body.members), 8, "member count")])]
        for entry in body.members:
            raw = entry.name.encode("utf-8")
            if len(raw) > MAX_NAME_BYTES:
                raise EncodeError(f"member name exceeds {MAX_NAME_BYTES} bytes")
            parts.append(struct.pack(">IB", _check_uint(entry.user_id, 32, "member id"), len(raw)))
            parts.append(raw)
        parts.append(
            bytes(
                [
                    _check_uint(body.dial, 8, "dial ordinal"),
                    1 if body.power else 0,
                    1 if body.overload else 0,
                ]
            )
        )
        parts.append(_I64.pack(_check_i64(body.last_value_micro, "last_value_micro")))
        return b"".join(parts)

    if isinstance(body, ControlParameter):
        code = ControlCode(body.code)  # raises ValueError outside {0,1,2}
        return (
            bytes([_check_uint(body.instrument, 8, "instrument id"), code])
            + _I64.pack(_check_i64(body.value, "control value"))
        )

    if isinstance(body, ChatBody):
        raw = body.text.encode("utf-8")
        if len(raw) > MAX_TEXT_BYTES:
            raise EncodeError(f"chat text exceeds {MAX_TEXT_BYTES} bytes")
        return struct.pack(">H", len(raw)) + raw

    if isinstance(body, ReadingPayload):
        mode = MeterMode(body.mode)
        return (
            bytes(
                [
                    mode,
                    _check_uint(body.range_ordinal, 8, "range ordinal"),
                    1 if body.overload else 0,
                ]
            )
            + _I64.pack(_check_i64(body.value_micro, "value_micro"))
        )

    if isinstance(body, PingBody):
        return _U64.pack(_check_uint(body.nonce, 64, "nonce"))

    if isinstance(body, ErrorBody):
        raw = body.detail.encode("utf-8")
        if len(raw) > MAX_TEXT_BYTES:
            raise EncodeError(f"error detail exceeds {MAX_TEXT_BYTES} bytes")
        return bytes([ErrorCode(body.code)]) + struct.pack(">H", len(raw)) + raw

    raise EncodeError(f"unencodable body type {type(body).__name__}")


def encode_envelope(env: MessageEnvelope) -> bytes:
    """Serialize one envelope to a complete binary frame.

    Deterministic: equal envelopes produce byte-identical frames.  Raises
    :class:`EncodeError` when a field exceeds its declared wire range.
    """
    if env.kind not in _BODY_TYPES:
        raise EncodeError(f"unknown kind {env.kind!r}")
    body = _encode_body(env)
    if len(body) > MAX_BODY_BYTES:
        raise EncodeError(f"body of {len(body)} bytes exceeds {MAX_BODY_BYTES}")
    header = _HEADER.pack(
        len(body),
        env.kind,
        _check_uint(env.origin, 32, "origin"),
        _check_uint(env.group, 16, "group"),
        _check_uint(env.seq, 32, "seq"),
    )
    return header + body


# --- binary body decoders -------------------------------------------------


class _Cursor:
    """Sequential reader that converts under/overruns into DecodeErrors."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("TRUNCATED", f"body ends inside {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack(">H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack(">I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]

    def i64(self, what: str) -> int:
        return _I64.unpack(self.take(8, what))[0]

    def text(self, n: int, what: str) -> str:
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("INVALID_BODY", f"{what} is not valid UTF-8") from exc

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise DecodeError(
                "TRAILING_BYTES",
                f"{len(self.data) - self.pos} byte(s) after body",
            )


def _decode_flag(value: int, what: str) -> bool:
    if value not in (0, 1):
        raise DecodeError("INVALID_BODY", f"{what} must be 0 or 1, got {value}")
    return bool(value)


def _decode_body(kind: MessageKind, data: bytes) -> Body:
    cur = _Cursor(data)

    if kind is MessageKind.JOIN:
        n = cur.u8("name length")
        body: Body = JoinBody(cur.text(n, "name"))

    elif kind in _ROSTER_KINDS:
        count = cur.u8("member count")
        members = []
        for _ in range(count):
            uid = cur.u32("member id")
            n = cur.u8("member name length")
            members.append(RosterEntry(uid, cur.text(n, "member name")))
        dial = cur.u8("dial")
        power = _decode_flag(cur.u8("power"), "power flag")
        overload = _decode_flag(cur.u8("overload"), "overload flag")
        body = RosterBlock(tuple(members), dial, power, overload, cur.i64("last_value_micro"))

    elif kind in _CONTROL_KINDS:
        instrument = cur.u8("instrument id")
        raw_code = cur.u8("control code")
        try:
            code = ControlCode(raw_code)
        except ValueError:
            raise DecodeError("INVALID_BODY", f"unknown control code {raw_code}") from None
        body = ControlParameter(instrument, code, cur.i64("control value"))

    elif kind in _CHAT_KINDS:
        n = cur.u16("text length")
        body = ChatBody(cur.text(n, "chat text"))

    elif kind in _MEASUREMENT_KINDS:
        raw_mode = cur.u8("mode")
        try:
            mode = MeterMode(raw_mode)
        except ValueError:
            raise DecodeError("INVALID_BODY", f"unknown meter mode {raw_mode}") from None
        rng = cur.u8("range ordinal")
        overload = _decode_flag(cur.u8("overload flag"), "overload flag")
        body = ReadingPayload(mode, rng, overload, cur.i64("value_micro"))

    elif kind in _PING_KINDS:
        body = PingBody(cur.u64("nonce"))

    elif kind is MessageKind.ERROR:
        raw_code = cur.u8("error code")
        try:
            err = ErrorCode(raw_code)
        except ValueError:
            raise DecodeError("INVALID_BODY", f"unknown error code {raw_code}") from None
        n = cur.u16("detail length")
        body = ErrorBody(err, cur.text(n, "error detail"))

    else:  # pragma: no cover - kinds above are exhaustive
        raise DecodeError("UNKNOWN_KIND", f"no decoder for kind {kind}")

    cur.finish()
    return body


def decode_envelope(frame: bytes) -> MessageEnvelope:
    """Parse one complete binary frame (length prefix included).

    Inverse of :func:`encode_envelope` on its image; anything outside the
    image raises :class:`DecodeError` - never a silently wrong envelope.
    """
    if len(frame) < _HEADER.size:
        raise DecodeError("TRUNCATED", f"frame of {len(frame)} bytes has no full header")
    length, raw_kind, origin, group, seq = _HEADER.unpack_from(frame)
    if length > MAX_BODY_BYTES:
        raise DecodeError("OVERSIZED", f"declared body of {length} bytes exceeds {MAX_BODY_BYTES}")
    try:
        kind = MessageKind(raw_kind)
    except ValueError:
        raise DecodeError("UNKNOWN_KIND", f"unknown kind byte 0x{raw_kind:02X}") from None
    body_bytes = frame[_HEADER.size :]
    if len(body_bytes) < length:
        raise DecodeError("TRUNCATED", f"frame carries {len(body_bytes)} of {length} body bytes")
    if len(body_bytes) > length:
        raise DecodeError("TRAILING_BYTES", f"{len(body_bytes) - length} byte(s) beyond declared length")
    return MessageEnvelope(kind, origin, group, seq, _decode_body(kind, body_bytes))


class FrameDecoder:
    """Incremental splitter for a binary frame stream.

    Feed arbitrary chunks; complete envelopes come back in order.  Framing
    violations raise :class:`DecodeError` and poison the stream (callers
    should drop the connection - the byte stream is unrecoverable).
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[MessageEnvelope]:
        self._buf.extend(data)
        out: list[MessageEnvelope] = []
        while len(self._buf) >= _HEADER.size:
            length = struct.unpack_from(">I", self._buf)[0]
            if length > MAX_BODY_BYTES:
                raise DecodeError("OVERSIZED", f"declared body of {length} bytes exceeds {MAX_BODY_BYTES}")
            total = _HEADER.size + length
            if len(self._buf) < total:
                break
            frame = bytes(self._buf[:total])
            del self._buf[:total]
            out.append(decode_envelope(frame))
        return out


# --- JSON mapping ----------------------------------------------------------


def _body_to_json(body: Body) -> dict:
    if isinstance(body, JoinBody):
        return {"name": body.name}
    if isinstance(body, RosterBlock):
        return {
            "members": [{"id": m.user_id, "name": m.name} for m in body.members],
            "dial": body.dial,
            "power": body.power,
            "overload": body.overload,
            "last_value_micro": body.last_value_micro,
        }
    if isinstance(body, ControlParameter):
        return {
            "instrument": body.instrument,
            "code": ControlCode(body.code).name,
            "value": body.value,
        }
    if isinstance(body, ChatBody):
        return {"text": body.text}
    if isinstance(body, ReadingPayload):
        return {
            "mode": MeterMode(body.mode).name,
            "range": body.range_ordinal,
            "overload": body.overload,
            "value_micro": body.value_micro,
        }
    if isinstance(body, PingBody):
        return {"nonce": body.nonce}
    if isinstance(body, ErrorBody):
        return {"code": ErrorCode(body.code).name, "detail": body.detail}
    raise EncodeError(f"unencodable body type {type(body).__name__}")


def encode_json(env: MessageEnvelope) -> str:
    """Serialize an envelope to its JSON text form.

    Validates the same wire ranges as the binary encoder (the two forms
    are a bijection) and emits a deterministic compact rendering.
    """
    encode_envelope(env)  # reuse every range check; result discarded
    doc = {
        "kind": env.kind.name,
        "origin": env.origin,
        "group": env.group,
        "seq": env.seq,
        "body": _body_to_json(env.body),
    }
    return json.dumps(doc, separators=(",", ":"))


_JSON_KIND_NAMES = {k.name: k for k in MessageKind}
_JSON_CODE_NAMES = {c.name: c for c in ControlCode}
_JSON_MODE_NAMES = {m.name: m for m in MeterMode}
_JSON_ERROR_NAMES = {e.name: e for e in ErrorCode}


class _Fields:
    """Typed accessor over one JSON object; rejects missing/extra keys."""

    def __init__(self, obj, what: str):
        if not isinstance(obj, dict):
            raise DecodeError("INVALID_BODY", f"{what} must be a JSON object")
        self.obj = obj
        self.what = what
        self.seen: set[str] = set()

    def _get(self, key: str):
        if key not in self.obj:
            raise DecodeError("TRUNCATED", f"{self.what} is missing '{key}'")
        self.seen.add(key)
        return self.obj[key]

    def integer(self, key: str, lo: int, hi: int) -> int:
        v = self._get(key)
        if not isinstance(v, int) or isinstance(v, bool):
            raise DecodeError("INVALID_BODY", f"'{key}' must be an integer")
        if not lo <= v <= hi:
            raise DecodeError("INVALID_BODY", f"'{key}'={v} outside [{lo}, {hi}]")
        return v

    def boolean(self, key: str) -> bool:
        v = self._get(key)
        if not isinstance(v, bool):
            raise DecodeError("INVALID_BODY", f"'{key}' must be a boolean")
        return v

    def string(self, key: str, max_bytes: int) -> str:
        v = self._get(key)
        if not isinstance(v, str):
            raise DecodeError("INVALID_BODY", f"'{key}' must be a string")
        if len(v.encode("utf-8")) > max_bytes:
            raise DecodeError("INVALID_BODY", f"'{key}' exceeds {max_bytes} bytes")
        return v

    def array(self, key: str) -> list:
        v = self._get(key)
        if not isinstance(v, list):
            raise DecodeError("INVALID_BODY", f"'{key}' must be an array")
        return v

    def finish(self) -> None:
        extra = set(self.obj) - self.seen
        if extra:
            raise DecodeError(
                "TRAILING_BYTES", f"unexpected field(s) in {self.what}: {sorted(extra)}"
            )


_I64_MIN, _I64_MAX = -(1 << 63), (1 << 63) - 1


def _body_from_json(kind: MessageKind, obj) -> Body:
    f = _Fields(obj, f"{kind.name} body")

    if kind is MessageKind.JOIN:
        body: Body = JoinBody(f.string("name", MAX_NAME_BYTES))

    elif kind in _ROSTER_KINDS:
        members = []
        for i, raw in enumerate(f.array("members")):
            mf = _Fields(raw, f"member[{i}]")
            members.append(
                RosterEntry(mf.integer("id", 0, 2**32 - 1), mf.string("name", MAX_NAME_BYTES))
            )
            mf.finish()
        if len(members) > 255:
            raise DecodeError("INVALID_BODY", "more than 255 roster members")
        body = RosterBlock(
            tuple(members),
            f.integer("dial", 0, 255),
            f.boolean("power"),
            f.boolean("overload"),
            f.integer("last_value_micro", _I64_MIN, _I64_MAX),
        )

    elif kind in _CONTROL_KINDS:
        instrument = f.integer("instrument", 0, 255)
        name = f.string("code", 64)
        if name not in _JSON_CODE_NAMES:
            raise DecodeError("INVALID_BODY", f"unknown control code {name!r}")
        body = ControlParameter(
            instrument, _JSON_CODE_NAMES[name], f.integer("value", _I64_MIN, _I64_MAX)
        )

    elif kind in _CHAT_KINDS:
        body = ChatBody(f.string("text", MAX_TEXT_BYTES))

    elif kind in _MEASUREMENT_KINDS:
        name = f.string("mode", 64)
        if name not in _JSON_MODE_NAMES:
            raise DecodeError("INVALID_BODY", f"unknown meter mode {name!r}")
        body = ReadingPayload(
            _JSON_MODE_NAMES[name],
            f.integer("range", 0, 255),
            f.boolean("overload"),
            f.integer("value_micro", _I64_MIN, _I64_MAX),
        )

    elif kind in _PING_KINDS:
        body = PingBody(f.integer("nonce", 0, 2**64 - 1))

    else:  # ERROR
        name = f.string("code", 64)
        if name not in _JSON_ERROR_NAMES:
            raise DecodeError("INVALID_BODY", f"unknown error code {name!r}")
        body = ErrorBody(_JSON_ERROR_NAMES[name], f.string("detail", MAX_TEXT_BYTES))

    f.finish()
    return body


def decode_json(text: str) -> MessageEnvelope:
    """Parse the JSON text form back into an envelope.

    Raises :class:`DecodeError` with MALFORMED_TEXT for non-JSON input and
    the binary codec's error classes for everything else.
    """
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DecodeError("MALFORMED_TEXT", f"not valid JSON: {exc}") from None
    f = _Fields(doc, "envelope")
    kind_name = f.string("kind", 64)
    if kind_name not in _JSON_KIND_NAMES:
        raise DecodeError("UNKNOWN_KIND", f"unknown kind {kind_name!r}")
    kind = _JSON_KIND_NAMES[kind_name]
    env = MessageEnvelope(
        kind,
        f.integer("origin", 0, 2**32 - 1),
        f.integer("group", 0, 2**16 - 1),
        f.integer("seq", 0, 2**32 - 1),
        _body_from_json(kind, f._get("body")),
    )
    f.finish()
    return env
