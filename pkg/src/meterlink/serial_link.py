"""Emulated serial capture module for the meter panel.

Stands in for the little board that snapshots a hand-held meter's display
and streams it to a PC.  One frame is 14 bytes; byte k (1-indexed) carries
k in its high nibble, so the stream self-aligns, and payload travels in
the low nibbles:

    byte 1      flags        [DC, minus, AUTO=0, connected=1]
    bytes 2-9   four digits, leftmost first, two bytes per digit:
                first low nibble [dp, a, b, c], second [d, e, f, g]
    byte 10     units        [V, Ohm, diode, milli]
    byte 11     scale        [kilo, Mega, reserved=0, overload]
    bytes 12-13 range ordinal (high nibble of the ordinal, then low)
    byte 14     checksum     sum of low nibbles of bytes 1-13, mod 16

Segment layout (bit order a..g within the patterns below)::

         aaa
        f   b
         ggg
        e   c
         ddd

An overloaded panel shows the digit sequence [blank, 0, L, blank]; a
switched-off panel is all-blank with every flag clear.  The decimal point
implied by the range ordinal is cross-checked against the dp bits, so a
single corrupted nibble that survives the checksum still trips BAD_FLAGS.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass

from .instrument import (
    MAX_COUNTS,
    CircuitStimulus,
    DcSource,
    DialPosition,
    Diode,
    MultimeterState,
    PanelReading,
    Resistor,
    measure,
)
from .protocol import MeterMode

__all__ = [
    "FRAME_SIZE",
    "FrameError",
    "ScanDiagnostic",
    "FrameScanner",
    "encode_frame",
    "decode_frame",
    "scan_stream",
    "simulate_source",
    "parse_stimulus",
    "main",
]

FRAME_SIZE = 14

# 7-segment patterns, bit order a..g (bit 6 = a, bit 0 = g).
_SEGMENTS = {
    "0": 0b1111110,
    "1": 0b0110000,
    "2": 0b1101101,
    "3": 0b1111001,
    "4": 0b0110011,
    "5": 0b1011011,
    "6": 0b1011111,
    "7": 0b1110000,
    "8": 0b1111111,
    "9": 0b1111011,
    " ": 0b0000000,
    "L": 0b0001110,
}
_GLYPHS = {v: k for k, v in _SEGMENTS.items()}

_OL_DIGITS = " 0L "

# byte 1 flag bits
_FLAG_DC = 0x8
_FLAG_MINUS = 0x4
_FLAG_AUTO = 0x2
_FLAG_CONNECTED = 0x1
# byte 10 unit bits
_UNIT_V = 0x8
_UNIT_OHM = 0x4
_UNIT_DIODE = 0x2
_UNIT_MILLI = 0x1
# byte 11 scale bits
_SCALE_KILO = 0x8
_SCALE_MEGA = 0x4
_SCALE_RESERVED = 0x2
_SCALE_OVERLOAD = 0x1


class FrameError(ValueError):
    """Rejected panel frame; ``code`` is BAD_INDEX, BAD_CHECKSUM,
    BAD_SEGMENT or BAD_FLAGS."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class UnrepresentableError(ValueError):
    """Reading has no flag encoding (unreachable for the 12 dial positions)."""


def _unit_nibble(rng: DialPosition) -> int:
    if rng.mode == MeterMode.DCV:
        nibble = _UNIT_V
    elif rng.mode == MeterMode.OHM:
        nibble = _UNIT_OHM
    elif rng.mode == MeterMode.DIODE:
        nibble = _UNIT_DIODE
    else:  # pragma: no cover
        raise UnrepresentableError(f"no unit flags for mode {rng.mode}")
    if rng.unit == "mV":
        nibble |= _UNIT_MILLI
    return nibble


def _scale_nibble(rng: DialPosition) -> int:
    if rng.unit.startswith("k"):
        return _SCALE_KILO
    if rng.unit.startswith("M"):
        return _SCALE_MEGA
    return 0


def _display_digits(reading: PanelReading) -> tuple[str, int]:
    """Return (4 display glyphs, dp digit index) for a live reading.

    Leading zeros left of the decimal-point anchor are blanked, the way a
    real panel suppresses them.
    """
    rng = reading.range
    scaled = abs(reading.value_micro) * 10**rng.decimals // rng.unit_scale_micro
    digits = list(str(scaled).rjust(4, "0"))
    if len(digits) > 4:  # pragma: no cover - counts cap makes this impossible
        raise UnrepresentableError(f"value needs {len(digits)} digits")
    anchor = 3 - rng.decimals
    for i in range(anchor):
        if digits[i] != "0":
            break
        digits[i] = " "
    return "".join(digits), anchor


def encode_frame(reading: PanelReading) -> bytes:
    """Encode one panel snapshot as a 14-byte frame."""
    rng = reading.range
    ordinal = int(rng)

    if reading.blank:
        glyphs, dp_index = "    ", -1
        flags = _FLAG_CONNECTED
        units = 0
        scale = 0
    elif reading.overload:
        glyphs, dp_index = _OL_DIGITS, -1
        flags = _FLAG_CONNECTED | (_FLAG_DC if rng.mode == MeterMode.DCV else 0)
        units = _unit_nibble(rng)
        scale = _scale_nibble(rng) | _SCALE_OVERLOAD
    else:
        glyphs, dp_index = _display_digits(reading)
        flags = _FLAG_CONNECTED | (_FLAG_DC if rng.mode == MeterMode.DCV else 0)
        if reading.value_micro < 0:
            flags |= _FLAG_MINUS
        units = _unit_nibble(rng)
        scale = _scale_nibble(rng)

    nibbles = [flags]
    for i, glyph in enumerate(glyphs):
        pattern = _SEGMENTS[glyph]
        dp = 1 if i == dp_index else 0
        # pattern bits: a=6 b=5 c=4 d=3 e=2 f=1 g=0
        first = (dp << 3) | (pattern >> 4)
        second = pattern & 0xF
        nibbles.extend([first, second])
    nibbles.extend([units, scale, (ordinal >> 4) & 0xF, ordinal & 0xF])

    checksum = sum(nibbles) & 0xF
    nibbles.append(checksum)
    return bytes(((k + 1) << 4) | nib for k, nib in enumerate(nibbles))


def decode_frame(frame: bytes) -> PanelReading:
    """Validate and decode one 14-byte frame.

    Checks, in order: positional index nibbles, checksum, segment
    patterns, then flag/range consistency.
    """
    if len(frame) != FRAME_SIZE:
        raise FrameError("BAD_INDEX", f"frame must be {FRAME_SIZE} bytes, got {len(frame)}")
    for k, byte in enumerate(frame, start=1):
        if byte >> 4 != k:
            raise FrameError("BAD_INDEX", f"byte {k} has index nibble {byte >> 4}")
    nibbles = [byte & 0xF for byte in frame]
    if sum(nibbles[:13]) & 0xF != nibbles[13]:
        raise FrameError("BAD_CHECKSUM", "low-nibble sum mismatch")

    flags, units, scale = nibbles[0], nibbles[9], nibbles[10]
    if not flags & _FLAG_CONNECTED:
        raise FrameError("BAD_FLAGS", "connected bit clear")
    if flags & _FLAG_AUTO:
        raise FrameError("BAD_FLAGS", "auto-range bit set")
    if scale & _SCALE_RESERVED:
        raise FrameError("BAD_FLAGS", "reserved scale bit set")

    glyphs = []
    dp_bits = []
    for i in range(4):
        first, second = nibbles[1 + 2 * i], nibbles[2 + 2 * i]
        dp_bits.append(first >> 3)
        pattern = ((first & 0x7) << 4) | second
        if pattern not in _GLYPHS:
            raise FrameError("BAD_SEGMENT", f"digit {i} pattern {pattern:07b} unmappable")
        glyphs.append(_GLYPHS[pattern])

    ordinal = (nibbles[11] << 4) | nibbles[12]
    try:
        rng = DialPosition(ordinal)
    except ValueError:
        raise FrameError("BAD_FLAGS", f"range ordinal {ordinal} invalid") from None

    mode_bits = (units & _UNIT_V, units & _UNIT_OHM, units & _UNIT_DIODE)
    if sum(1 for bit in mode_bits if bit) > 1:
        raise FrameError("BAD_FLAGS", "more than one mode flag set")

    # Switched-off panel: everything dark.
    if glyphs == [" "] * 4 and not any(dp_bits):
        if units or scale or flags != _FLAG_CONNECTED:
            raise FrameError("BAD_FLAGS", "blank digits with active flags")
        return PanelReading(rng, 0, False, 0, blank=True)

    if units != _unit_nibble(rng):
        raise FrameError("BAD_FLAGS", f"unit flags {units:04b} do not match range {rng.label}")
    expected_dc = _FLAG_DC if rng.mode == MeterMode.DCV else 0
    if (flags & _FLAG_DC) != expected_dc:
        raise FrameError("BAD_FLAGS", "DC flag inconsistent with range")

    if scale & _SCALE_OVERLOAD:
        if "".join(glyphs) != _OL_DIGITS or any(dp_bits):
            raise FrameError("BAD_FLAGS", "overload flag without OL digits")
        if flags & _FLAG_MINUS:
            raise FrameError("BAD_FLAGS", "sign on an overloaded panel")
        if (scale & ~_SCALE_OVERLOAD) != _scale_nibble(rng):
            raise FrameError("BAD_FLAGS", "scale flags do not match range")
        return PanelReading(rng, 0, True, 0)

    if (scale & ~_SCALE_OVERLOAD) != _scale_nibble(rng) or scale & _SCALE_OVERLOAD:
        raise FrameError("BAD_FLAGS", "scale flags do not match range")
    if "L" in glyphs:
        raise FrameError("BAD_FLAGS", "L glyph outside an OL panel")

    anchor = 3 - rng.decimals
    if [i for i, bit in enumerate(dp_bits) if bit] != [anchor]:
        raise FrameError("BAD_FLAGS", "decimal point does not match range")

    # Leading blanks are only legal as suppressed zeros left of the anchor.
    text = "".join(glyphs)
    stripped = text.lstrip(" ")
    if not stripped:
        raise FrameError("BAD_FLAGS", "blank digits with active flags")
    if " " in stripped:
        raise FrameError("BAD_FLAGS", "blank digit inside the number")
    pad = 4 - len(stripped)
    if pad > anchor:
        raise FrameError("BAD_FLAGS", "digits blanked past the decimal point")
    if pad < anchor and stripped[0] == "0":
        raise FrameError("BAD_FLAGS", "unsuppressed leading zero")

    scaled = int(stripped)
    rng_factor = rng.resolution_micro * 10**rng.decimals // rng.unit_scale_micro
    if scaled % rng_factor:
        raise FrameError("BAD_FLAGS", f"digits {stripped} not a count multiple on {rng.label}")
    counts = scaled // rng_factor
    if counts > MAX_COUNTS:
        raise FrameError("BAD_FLAGS", f"counts {counts} beyond full scale")
    if flags & _FLAG_MINUS:
        if counts == 0:
            raise FrameError("BAD_FLAGS", "negative zero")
        counts = -counts
    return PanelReading(rng, counts, False, counts * rng.resolution_micro)


@dataclass(frozen=True)
class ScanDiagnostic:
    """One recoverable stream problem: error class and absolute byte offset."""

    offset: int
    code: str
    message: str


class FrameScanner:
    """Resynchronizing scanner over an unbounded frame stream.

    Sequential state machine: one instance per stream.  On any frame
    error the scanner reports a diagnostic, drops bytes until the next
    frame-start nibble and resumes, so garbage never costs more than the
    damaged frame itself.
    """

    def __init__(self) -> None:
        self._buf = bytearray()
        self._offset = 0  # absolute stream offset of _buf[0]
        self._skipped_from: int | None = None
        self._silent_skip = False

    def feed(self, data: bytes) -> tuple[list[PanelReading], list[ScanDiagnostic]]:
        self._buf.extend(data)
        readings: list[PanelReading] = []
        diagnostics: list[ScanDiagnostic] = []

        while True:
            # Hunt for a frame-start byte (high nibble 1).
            while self._buf and self._buf[0] >> 4 != 1:
                if self._skipped_from is None:
                    self._skipped_from = self._offset
                del self._buf[0]
                self._offset += 1
            if self._buf and self._skipped_from is not None:
                if not self._silent_skip:
                    diagnostics.append(
                        ScanDiagnostic(
                            self._skipped_from,
                            "RESYNC",
                            f"skipped {self._offset - self._skipped_from} byte(s) to next frame start",
                        )
                    )
                self._skipped_from = None
                self._silent_skip = False
            if len(self._buf) < FRAME_SIZE:
                return readings, diagnostics
            try:
                readings.append(decode_frame(bytes(self._buf[:FRAME_SIZE])))
                del self._buf[:FRAME_SIZE]
                self._offset += FRAME_SIZE
            except FrameError as exc:
                diagnostics.append(ScanDiagnostic(self._offset, exc.code, str(exc)))
                del self._buf[0]
                self._offset += 1
                # The diagnostic covers this frame; hunt quietly for the next.
                self._skipped_from = self._offset
                self._silent_skip = True

    def flush(self) -> list[ScanDiagnostic]:
        """End of stream: report any bytes that never formed a frame."""
        diagnostics: list[ScanDiagnostic] = []
        if self._skipped_from is not None and not self._silent_skip:
            diagnostics.append(
                ScanDiagnostic(
                    self._skipped_from,
                    "RESYNC",
                    f"skipped {self._offset - self._skipped_from} byte(s) at end of stream",
                )
            )
        if self._buf:
            diagnostics.append(
                ScanDiagnostic(
                    self._offset,
                    "INCOMPLETE",
                    f"{len(self._buf)} trailing byte(s) do not form a frame",
                )
            )
        self._buf.clear()
        self._skipped_from = None
        self._silent_skip = False
        return diagnostics


def scan_stream(data: bytes) -> tuple[list[PanelReading], list[ScanDiagnostic]]:
    """Scan a complete byte sequence; see :class:`FrameScanner`."""
    scanner = FrameScanner()
    readings, diagnostics = scanner.feed(data)
    diagnostics.extend(scanner.flush())
    return readings, diagnostics


def simulate_source(
    stimulus: CircuitStimulus,
    dial: DialPosition,
    rate: float,
    count: int,
    fault: tuple[str, int] | None = None,
) -> bytes:
    """Byte stream a meter on ``dial`` would emit measuring ``stimulus``.

    ``rate`` (frames/second) must be positive; pacing itself is up to the
    transport (the CLI sleeps between frames, tests take the bytes whole).
    ``fault`` injects one defect for scanner tests: ``("drop-bytes", n)``
    deletes the first three bytes of frame n, ``("flip-nibble", n)``
    flips one payload bit so the checksum trips.  Frames count from 1.
    """
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    state = MultimeterState(dial, True, False, 0)
    frame = encode_frame(measure(stimulus, state))
    out = bytearray()
    for index in range(1, count + 1):
        emitted = bytearray(frame)
        if fault is not None and fault[1] == index:
            kind = fault[0]
            if kind == "drop-bytes":
                del emitted[:3]
            elif kind == "flip-nibble":
                emitted[4] ^= 0x01
            else:
                raise ValueError(f"unknown fault kind {kind!r}")
        out.extend(emitted)
    return bytes(out)


def parse_stimulus(spec: str) -> CircuitStimulus:
    """Parse a stimulus spec: ``resistor:<ohms>``, ``diode:<volts>`` or
    ``dc:<volts>[,rs=<ohms>][,rp=<ohms>]``."""
    kind, _, rest = spec.partition(":")
    kind = kind.strip().lower()
    if not rest:
        raise ValueError(f"stimulus {spec!r} has no value part")
    try:
        if kind == "resistor":
            return Resistor(float(rest))
        if kind == "diode":
            return Diode(float(rest))
        if kind == "dc":
            parts = rest.split(",")
            volts = float(parts[0])
            extras = {}
            for part in parts[1:]:
                key, _, value = part.partition("=")
                extras[key.strip().lower()] = float(value)
            unknown = set(extras) - {"rs", "rp"}
            if unknown:
                raise ValueError(f"unknown dc source field(s): {sorted(unknown)}")
            return DcSource(volts, extras.get("rs", 0.0), extras.get("rp", 0.0))
    except ValueError as exc:
        raise ValueError(f"bad stimulus spec {spec!r}: {exc}") from None
    raise ValueError(f"unknown stimulus kind {kind!r}")


def _parse_fault(spec: str) -> tuple[str, int]:
    kind, _, frame = spec.partition("@")
    if kind not in ("drop-bytes", "flip-nibble"):
        raise argparse.ArgumentTypeError(f"unknown fault kind {kind!r}")
    try:
        return kind, int(frame)
    except ValueError:
        raise argparse.ArgumentTypeError(f"fault {spec!r} needs <kind>@<frame>") from None


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dmm-sim",
        description="Emit emulated meter panel frames for a fixed stimulus.",
    )
    parser.add_argument("--stimulus", required=True, type=parse_stimulus,
                        help="resistor:<ohms> | diode:<volts> | dc:<volts>[,rs=..][,rp=..]")
    parser.add_argument("--dial", required=True, type=DialPosition.from_label,
                        help="dial position, e.g. ohm-2k or dcv-20v")
    parser.add_argument("--rate", type=float, default=10.0, help="frames per second")
    parser.add_argument("--count", type=int, default=1, help="number of frames")
    parser.add_argument("--fault", type=_parse_fault, default=None,
                        help="inject <drop-bytes|flip-nibble>@<frame>")
    parser.add_argument("--out", default=None, help="write frames to this file instead of stdout")
    parser.add_argument("--pace", action="store_true",
                        help="sleep 1/rate between frames instead of bursting")
    args = parser.parse_args(argv)

    data = simulate_source(args.stimulus, args.dial, args.rate, args.count, args.fault)
    sink = open(args.out, "wb") if args.out else sys.stdout.buffer
    try:
        if args.pace:
            for i in range(0, len(data), FRAME_SIZE):
                sink.write(data[i : i + FRAME_SIZE])
                sink.flush()
                time.sleep(1.0 / args.rate)
        else:
            sink.write(data)
            sink.flush()
    finally:
        if args.out:
            sink.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
