"""Virtual 3.5-digit multimeter: dial/power state machine and measurement math.

The meter has 12 dial positions (five DC-volt ranges, six resistance
ranges, one diode range), a maximum count of 1999 and a resolution of
full-scale / 2000 on every range.  Readings are held as exact integer
micro-units (uV / uOhm) so two peers that fold the same control sequence
end up with byte-identical state.

All functions here are pure: callers own their state values and nothing
is shared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Callable, Iterable, Union

from .protocol import ControlCode, ControlParameter, MeterMode, ReadingPayload

__all__ = [
    "DialPosition",
    "MultimeterState",
    "DcSource",
    "Resistor",
    "Diode",
    "CircuitStimulus",
    "PanelReading",
    "InvalidParameterError",
    "PowerOffError",
    "METER_INPUT_OHMS",
    "MAX_COUNTS",
    "default_state",
    "validate_control",
    "validate_reading",
    "apply_control",
    "apply_reading",
    "fold_state",
    "measure",
    "reading_from_state",
    "render_display",
    "state_display",
    "reading_payload",
    "dc_divider_voltage",
]

MAX_COUNTS = 1999

# DC input impedance on every volts range; forms a divider with the probed
# element (the "loading effect").
METER_INPUT_OHMS = 10e6


class InvalidParameterError(ValueError):
    """Control parameter outside the meter's vocabulary (INVALID_PARAMETER)."""


class PowerOffError(RuntimeError):
    """Measurement requested while the meter is switched off (POWER_OFF)."""


class DialPosition(IntEnum):
    """The 12 dial positions; the integer value is the wire ordinal."""

    DCV_200MV = 0
    DCV_2V = 1
    DCV_20V = 2
    DCV_200V = 3
    DCV_1000V = 4
    OHM_200 = 5
    OHM_2K = 6
    OHM_20K = 7
    OHM_200K = 8
    OHM_2M = 9
    OHM_20M = 10
    DIODE = 11

    @property
    def mode(self) -> MeterMode:
        return _DIAL_TABLE[self][0]

    @property
    def full_scale_micro(self) -> int:
        return _DIAL_TABLE[self][1]

    @property
    def resolution_micro(self) -> int:
        """Micro-units per count: full scale / 2000."""
        return _DIAL_TABLE[self][1] // 2000

    @property
    def unit(self) -> str:
        return _DIAL_TABLE[self][2]

    @property
    def unit_scale_micro(self) -> int:
        """Micro-units per displayed unit (e.g. 10**9 for a kOhm display)."""
        return _DIAL_TABLE[self][3]

    @property
    def decimals(self) -> int:
        return _DIAL_TABLE[self][4]

    @property
    def label(self) -> str:
        return _DIAL_TABLE[self][5]

    @classmethod
    def from_ordinal(cls, ordinal: int) -> "DialPosition":
        try:
            return cls(ordinal)
        except ValueError:
            raise InvalidParameterError(f"no dial position with ordinal {ordinal}") from None

    @classmethod
    def from_label(cls, label: str) -> "DialPosition":
        key = label.strip().lower()
        for pos in cls:
            if pos.label == key:
                return pos
        raise InvalidParameterError(f"unknown dial position {label!r}")


# mode, full scale (micro), display unit, micro per display unit, decimals, label
_DIAL_TABLE: dict[DialPosition, tuple] = {
    DialPosition.DCV_200MV: (MeterMode.DCV, 200_000, "mV", 1_000, 1, "dcv-200mv"),
    DialPosition.DCV_2V: (MeterMode.DCV, 2_000_000, "V", 1_000_000, 3, "dcv-2v"),
    DialPosition.DCV_20V: (MeterMode.DCV, 20_000_000, "V", 1_000_000, 2, "dcv-20v"),
    DialPosition.DCV_200V: (MeterMode.DCV, 200_000_000, "V", 1_000_000, 1, "dcv-200v"),
    DialPosition.DCV_1000V: (MeterMode.DCV, 1_000_000_000, "V", 1_000_000, 1, "dcv-1000v"),
    DialPosition.OHM_200: (MeterMode.OHM, 200_000_000, "Ω", 1_000_000, 1, "ohm-200"),
    DialPosition.OHM_2K: (MeterMode.OHM, 2_000_000_000, "kΩ", 1_000_000_000, 3, "ohm-2k"),
    DialPosition.OHM_20K: (MeterMode.OHM, 20_000_000_000, "kΩ", 1_000_000_000, 2, "ohm-20k"),
    DialPosition.OHM_200K: (MeterMode.OHM, 200_000_000_000, "kΩ", 1_000_000_000, 1, "ohm-200k"),
    DialPosition.OHM_2M: (MeterMode.OHM, 2_000_000_000_000, "MΩ", 1_000_000_000_000, 3, "ohm-2m"),
    DialPosition.OHM_20M: (MeterMode.OHM, 20_000_000_000_000, "MΩ", 1_000_000_000_000, 2, "ohm-20m"),
    DialPosition.DIODE: (MeterMode.DIODE, 2_000_000, "V", 1_000_000, 3, "diode"),
}


@dataclass(frozen=True)
class MultimeterState:
    """The shared state every group member converges on.

    The last reading is stored as its wire-representable projection
    (overload flag + exact micro value); the displayed text derives from
    the current dial position, so the whole state survives the 12-byte
    catch-up snapshot sent to late joiners without loss.
    """

    dial: DialPosition
    power: bool
    reading_overload: bool
    reading_value_micro: int


def default_state() -> MultimeterState:
    """Power-on default: DC volts, 20 V range, zero reading."""
    return MultimeterState(DialPosition.DCV_20V, True, False, 0)


@dataclass(frozen=True)
class DcSource:
    """DC source of ``source_volts`` behind ``r_series``, probed across
    ``r_probe`` (a plain voltage divider)."""

    source_volts: float
    r_series: float = 0.0
    r_probe: float = 0.0


@dataclass(frozen=True)
class Resistor:
    ohms: float


@dataclass(frozen=True)
class Diode:
    """Forward drop model only; no I-V curve."""

    forward_volts: float


CircuitStimulus = Union[DcSource, Resistor, Diode]


@dataclass(frozen=True)
class PanelReading:
    """One quantized panel snapshot.

    ``value_micro`` always equals ``counts * resolution_micro(range)``.
    ``blank`` marks a switched-off panel (nothing displayed, no flags).
    """

    range: DialPosition
    counts: int
    overload: bool
    value_micro: int
    blank: bool = False

    @property
    def mode(self) -> MeterMode:
        return self.range.mode


def validate_control(p: ControlParameter) -> None:
    """Raise :class:`InvalidParameterError` unless ``p`` is meter-valid."""
    if p.instrument != 0:
        raise InvalidParameterError(f"unknown instrument id {p.instrument}")
    if p.code == ControlCode.SET_DIAL:
        DialPosition.from_ordinal(p.value)
    elif p.code == ControlCode.SET_POWER:
        if p.value not in (0, 1):
            raise InvalidParameterError(f"SET_POWER value must be 0 or 1, got {p.value}")
    elif p.code == ControlCode.SET_PROBE_NODE:
        if not 0 <= p.value <= 255:
            raise InvalidParameterError(f"SET_PROBE_NODE value out of range: {p.value}")
    else:
        raise InvalidParameterError(f"unknown control code {p.code}")


def validate_reading(payload: ReadingPayload) -> None:
    """Reject measurement payloads no meter could have produced."""
    rng = DialPosition.from_ordinal(payload.range_ordinal)
    if rng.mode != payload.mode:
        raise InvalidParameterError(
            f"mode {payload.mode.name} does not match range {rng.label}"
        )
    if payload.overload and payload.value_micro != 0:
        raise InvalidParameterError("overloaded reading must carry a zero value")
    if not payload.overload:
        if payload.value_micro % rng.resolution_micro:
            raise InvalidParameterError(
                f"value {payload.value_micro} is not a count multiple on {rng.label}"
            )
        if abs(payload.value_micro) > MAX_COUNTS * rng.resolution_micro:
            raise InvalidParameterError(
                f"value {payload.value_micro} exceeds full scale on {rng.label}"
            )


def apply_control(state: MultimeterState, p: ControlParameter) -> MultimeterState:
    """Pure set-semantics update; idempotent; invalid parameters raise.

    SET_PROBE_NODE is accepted (and relayed/logged by callers) but leaves
    the state untouched: the shipped circuit model keys off stimulus type
    only, and the catch-up snapshot has no slot for a probe node.
    """
    validate_control(p)
    if p.code == ControlCode.SET_DIAL:
        return replace(state, dial=DialPosition.from_ordinal(p.value))
    if p.code == ControlCode.SET_POWER:
        return replace(state, power=bool(p.value))
    return state


def apply_reading(state: MultimeterState, payload: ReadingPayload) -> MultimeterState:
    """Fold a relayed measurement into the shared state.

    The panel mirrors the measuring meter's frame, so the dial follows
    the reading's range; a later dial turn wins over a stale reading
    (last relay in sequence order decides, either way).
    """
    return replace(
        state,
        dial=DialPosition.from_ordinal(payload.range_ordinal),
        reading_overload=payload.overload,
        reading_value_micro=payload.value_micro,
    )


def fold_state(
    state: MultimeterState,
    params: Iterable[ControlParameter],
    on_invalid: Callable[[ControlParameter, InvalidParameterError], None] | None = None,
) -> MultimeterState:
    """Left fold of :func:`apply_control`; invalid entries are skipped.

    Peers are equal exactly when they fold the same sequence from the same
    initial state.  ``on_invalid`` receives skipped parameters (diagnostic
    only; the fold never aborts).
    """
    for p in params:
        try:
            state = apply_control(state, p)
        except InvalidParameterError as exc:
            if on_invalid is not None:
                on_invalid(p, exc)
    return state


def _round_half_away(x: float) -> int:
    if x >= 0:
        return int(math.floor(x + 0.5))
    return -int(math.floor(-x + 0.5))


def dc_divider_voltage(
    source_volts: float,
    r_series: float,
    r_probe: float,
    r_input: float = METER_INPUT_OHMS,
) -> float:
    """Voltage across the probed element with the meter's input impedance
    loading it: Vs * (Rp || Rin) / (Rs + (Rp || Rin)).

    Probing the source directly (both resistances zero) reads the source
    itself.  As ``r_input`` grows this approaches the unloaded divider.
    """
    if r_series == 0.0 and r_probe == 0.0:
        return source_volts
    r_par = (r_probe * r_input) / (r_probe + r_input) if r_probe > 0 else 0.0
    denom = r_series + r_par
    if denom == 0.0:
        return source_volts
    return source_volts * r_par / denom


def _true_value(stimulus: CircuitStimulus, mode: MeterMode) -> float | None:
    """Mode-matched physics; ``None`` means forced overload (mode misuse)."""
    if mode == MeterMode.DCV:
        if isinstance(stimulus, DcSource):
            return dc_divider_voltage(stimulus.source_volts, stimulus.r_series, stimulus.r_probe)
        # No EMF in the circuit: a voltmeter across a passive element reads 0.
        return 0.0
    if mode == MeterMode.OHM:
        if isinstance(stimulus, Resistor):
            return stimulus.ohms
        # Live source or junction upsets the ohmmeter's test current.
        return None
    # DIODE mode
    if isinstance(stimulus, Diode):
        return stimulus.forward_volts
    return None


def measure(stimulus: CircuitStimulus, state: MultimeterState) -> PanelReading:
    """Measure ``stimulus`` with the meter as configured in ``state``.

    Physics first (divider loading for DC volts), then quantization:
    counts round half-away-from-zero at the range's resolution, overload
    past full scale * 1999/2000.
    """
    if not state.power:
        raise PowerOffError("meter is switched off")
    rng = state.dial
    true_value = _true_value(stimulus, rng.mode)
    if true_value is None:
        return PanelReading(rng, 0, True, 0)
    resolution = rng.resolution_micro / 1e6
    full_scale = rng.full_scale_micro / 1e6
    if abs(true_value) > full_scale * (MAX_COUNTS / 2000.0):
        return PanelReading(rng, 0, True, 0)
    counts = _round_half_away(true_value / resolution)
    return PanelReading(rng, counts, False, counts * rng.resolution_micro)


def reading_from_state(state: MultimeterState) -> PanelReading:
    """Panel content implied by the shared state (what the face shows).

    Power off blanks the panel.  The stored micro value is re-quantized at
    the current dial's resolution, so a reading taken on one range renders
    deterministically (possibly as OL) after the group turns the dial.
    """
    rng = state.dial
    if not state.power:
        return PanelReading(rng, 0, False, 0, blank=True)
    if state.reading_overload:
        return PanelReading(rng, 0, True, 0)
    counts = _round_half_away(state.reading_value_micro / rng.resolution_micro)
    if abs(counts) > MAX_COUNTS:
        return PanelReading(rng, 0, True, 0)
    return PanelReading(rng, counts, False, counts * rng.resolution_micro)


def render_display(reading: PanelReading) -> str:
    """Panel text: value with the range's decimal point and unit, ``OL`` on
    overload, empty when blank."""
    if reading.blank:
        return ""
    if reading.overload:
        return "OL"
    rng = reading.range
    scaled = reading.value_micro * 10**rng.decimals
    if scaled % rng.unit_scale_micro != 0:
        raise ValueError(
            f"value {reading.value_micro} not representable with "
            f"{rng.decimals} decimals on {rng.label}"
        )
    scaled //= rng.unit_scale_micro
    digits = str(abs(scaled)).rjust(rng.decimals + 1, "0")
    whole, frac = digits[: -rng.decimals], digits[-rng.decimals :]
    sign = "-" if scaled < 0 else ""
    return f"{sign}{whole}.{frac} {rng.unit}"


def state_display(state: MultimeterState) -> str:
    """Display string for a shared state; O(1) convergence check for peers."""
    return render_display(reading_from_state(state))


def reading_payload(reading: PanelReading) -> ReadingPayload:
    """Wire form of a reading; the value is zeroed when overloaded."""
    if reading.blank:
        raise ValueError("a blank panel has no measurement to transmit")
    return ReadingPayload(
        mode=reading.mode,
        range_ordinal=int(reading.range),
        overload=reading.overload,
        value_micro=0 if reading.overload else reading.value_micro,
    )
