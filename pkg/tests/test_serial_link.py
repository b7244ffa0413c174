"""Panel-frame codec, stream scanner and simulator tests."""

import random

import pytest

from meterlink.instrument import DialPosition, MultimeterState, PanelReading, Resistor, measure
from meterlink.serial_link import (
    FRAME_SIZE,
    FrameError,
    FrameScanner,
    decode_frame,
    encode_frame,
    parse_stimulus,
    scan_stream,
    simulate_source,
)

# Hand-assembled "5.00 V DC" panel (counts 500 on the 20 V range): flags
# DC+connected, digits [blank, 5., 0, 0], V unit, ordinal 2, checksum 5.
GOLDEN_FRAME = bytes.fromhex("1920304d5b677e879ea8b0c0d2e5")
GOLDEN_READING = PanelReading(DialPosition.DCV_20V, 500, False, 5_000_000)


def all_valid_readings():
    for pos in DialPosition:
        for counts in range(-1999, 2000, 117):
            yield PanelReading(pos, counts, False, counts * pos.resolution_micro)
        yield PanelReading(pos, 0, True, 0)
        yield PanelReading(pos, 0, False, 0, blank=True)


def test_golden_frame_bytes():
    assert encode_frame(GOLDEN_READING) == GOLDEN_FRAME
    assert decode_frame(GOLDEN_FRAME) == GOLDEN_READING


def test_frame_shape_invariants():
    for reading in all_valid_readings():
        frame = encode_frame(reading)
        assert len(frame) == FRAME_SIZE
        for k, byte in enumerate(frame, start=1):
            assert byte >> 4 == k
        nibbles = [b & 0xF for b in frame]
        assert sum(nibbles[:13]) & 0xF == nibbles[13]


def test_round_trip_over_reading_domain():
    for reading in all_valid_readings():
        assert decode_frame(encode_frame(reading)) == reading


def test_power_off_frame_is_all_blank():
    frame = encode_frame(PanelReading(DialPosition.DCV_20V, 0, False, 0, blank=True))
    digit_nibbles = [frame[i] & 0xF for i in range(1, 9)]
    assert digit_nibbles == [0] * 8
    assert frame[0] & 0x8 == 0  # DC flag clear
    assert frame[9] & 0xF == 0  # no unit flags


def test_swapped_bytes_trip_index_check():
    frame = bytearray(GOLDEN_FRAME)
    frame[2], frame[3] = frame[3], frame[2]
    with pytest.raises(FrameError) as err:
        decode_frame(bytes(frame))
    assert err.value.code == "BAD_INDEX"


def test_checksum_corruption():
    frame = bytearray(GOLDEN_FRAME)
    frame[13] = (frame[13] & 0xF0) | ((frame[13] + 1) & 0xF)
    with pytest.raises(FrameError) as err:
        decode_frame(bytes(frame))
    assert err.value.code == "BAD_CHECKSUM"


def test_segment_corruption():
    # Give digit 2 ('0') an unmappable pattern, fixing the checksum so the
    # segment check is what trips.
    frame = bytearray(GOLDEN_FRAME)
    frame[6] = (frame[6] & 0xF0) | 0x5  # pattern becomes 101_1110: not a glyph
    delta = (frame[6] & 0xF) - (GOLDEN_FRAME[6] & 0xF)
    frame[13] = (frame[13] & 0xF0) | ((GOLDEN_FRAME[13] + delta) & 0xF)
    with pytest.raises(FrameError) as err:
        decode_frame(bytes(frame))
    assert err.value.code == "BAD_SEGMENT"


def test_decimal_point_cross_check():
    # Move the dp bit from digit 1 to digit 2 with a checksum-neutral edit.
    frame = bytearray(GOLDEN_FRAME)
    frame[3] &= ~0x08  # clear dp on digit 1
    frame[5] |= 0x08  # set dp on digit 2
    with pytest.raises(FrameError) as err:
        decode_frame(bytes(frame))
    assert err.value.code == "BAD_FLAGS"


def test_wrong_unit_flag():
    # Claim Ohm on a volts range, fixing the checksum so the flag
    # cross-check is what trips.
    frame = bytearray(GOLDEN_FRAME)
    frame[9] = (frame[9] & 0xF0) | 0x4
    delta = (frame[9] & 0xF) - (GOLDEN_FRAME[9] & 0xF)
    frame[13] = (frame[13] & 0xF0) | ((GOLDEN_FRAME[13] + delta) & 0xF)
    with pytest.raises(FrameError) as err:
        decode_frame(bytes(frame))
    assert err.value.code == "BAD_FLAGS"


def test_decode_totality_fuzz():
    """decode_frame never raises anything but FrameError on any 14 bytes."""
    rng = random.Random(23)
    for _ in range(20_000):
        data = bytes(rng.randrange(256) for _ in range(FRAME_SIZE))
        try:
            decode_frame(data)
        except FrameError:
            pass
    # Near-miss inputs: valid frames with a couple of nibble edits.
    for _ in range(20_000):
        frame = bytearray(encode_frame(GOLDEN_READING))
        for _ in range(rng.randrange(1, 4)):
            i = rng.randrange(FRAME_SIZE)
            frame[i] = (frame[i] & 0xF0) | rng.randrange(16)
        try:
            decode_frame(bytes(frame))
        except FrameError:
            pass


def test_scan_two_concatenated_frames():
    readings, diagnostics = scan_stream(GOLDEN_FRAME * 2)
    assert readings == [GOLDEN_READING, GOLDEN_READING]
    assert diagnostics == []


def test_scan_empty_stream():
    assert scan_stream(b"") == ([], [])


def test_scan_resync_after_deleted_head():
    stream = GOLDEN_FRAME[3:] + GOLDEN_FRAME
    readings, diagnostics = scan_stream(stream)
    assert readings == [GOLDEN_READING]
    assert len(diagnostics) == 1
    assert diagnostics[0].code == "RESYNC"


def test_scan_corrupt_middle_frame():
    stream = simulate_source(Resistor(1000.0), DialPosition.OHM_2K, 10.0, 3,
                             fault=("flip-nibble", 2))
    readings, diagnostics = scan_stream(stream)
    assert len(readings) == 2
    assert len(diagnostics) == 1
    assert diagnostics[0].code == "BAD_CHECKSUM"


def test_scanner_incremental_feed():
    rng = random.Random(29)
    stream = GOLDEN_FRAME * 40
    scanner = FrameScanner()
    readings = []
    pos = 0
    while pos < len(stream):
        step = rng.randrange(1, 9)
        got, diags = scanner.feed(stream[pos : pos + step])
        readings.extend(got)
        assert diags == []
        pos += step
    assert scanner.flush() == []
    assert len(readings) == 40


def test_resync_recovers_every_intact_frame():
    """Garbage between frames never costs an intact frame.  Garbage bytes use
    high nibble 0xF so they can never alias a frame start."""
    rng = random.Random(31)
    frames = [encode_frame(r) for r in all_valid_readings()]
    expected = []
    stream = bytearray()
    for _ in range(300):
        if rng.random() < 0.35:
            stream.extend(0xF0 | rng.randrange(16) for _ in range(rng.randrange(1, 20)))
        frame = rng.choice(frames)
        stream.extend(frame)
        expected.append(decode_frame(frame))
    readings, _ = scan_stream(bytes(stream))
    assert readings == expected


def test_resync_with_arbitrary_garbage_keeps_order():
    """With unrestricted garbage extra decodes may appear, but every intact
    frame still comes out, in order (no cascading loss)."""
    rng = random.Random(37)
    frames = [encode_frame(r) for r in all_valid_readings()]
    expected = []
    stream = bytearray()
    for _ in range(200):
        if rng.random() < 0.5:
            stream.extend(rng.randbytes(rng.randrange(1, 25)))
        frame = rng.choice(frames)
        stream.extend(frame)
        expected.append(decode_frame(frame))
    readings, _ = scan_stream(bytes(stream))
    it = iter(readings)
    for want in expected:
        for got in it:
            if got == want:
                break
        else:
            pytest.fail(f"intact frame lost: {want}")


def test_simulator_basic_output():
    data = simulate_source(Resistor(1000.0), DialPosition.OHM_2K, 10.0, 5)
    assert len(data) == 70
    readings, diagnostics = scan_stream(data)
    assert diagnostics == []
    assert len(readings) == 5
    assert all(r.counts == 1000 for r in readings)


def test_simulator_zero_frames_and_bad_rate():
    assert simulate_source(Resistor(1.0), DialPosition.OHM_200, 1.0, 0) == b""
    with pytest.raises(ValueError):
        simulate_source(Resistor(1.0), DialPosition.OHM_200, 0.0, 1)


def test_simulator_drop_bytes_fault():
    data = simulate_source(Resistor(1000.0), DialPosition.OHM_2K, 10.0, 3,
                           fault=("drop-bytes", 1))
    readings, diagnostics = scan_stream(data)
    assert len(readings) == 2
    assert len(diagnostics) == 1


def test_heavily_corrupted_long_stream():
    """1,000 frames, 5% corrupted: every intact frame is still decoded."""
    rng = random.Random(41)
    state = MultimeterState(DialPosition.OHM_2K, True, False, 0)
    frame = encode_frame(measure(Resistor(1000.0), state))
    stream = bytearray()
    intact = 0
    for _ in range(1000):
        if rng.random() < 0.05:
            damaged = bytearray(frame)
            i = rng.randrange(FRAME_SIZE)
            damaged[i] ^= rng.choice((0x01, 0x10, 0xFF))
            stream.extend(damaged)
        else:
            stream.extend(frame)
            intact += 1
    readings, diagnostics = scan_stream(bytes(stream))
    assert len(readings) >= intact
    assert diagnostics  # the damage was noticed


def test_parse_stimulus_specs():
    assert parse_stimulus("resistor:1000").ohms == 1000.0
    assert parse_stimulus("diode:0.6").forward_volts == 0.6
    dc = parse_stimulus("dc:10,rs=1e3,rp=2e3")
    assert (dc.source_volts, dc.r_series, dc.r_probe) == (10.0, 1000.0, 2000.0)
    with pytest.raises(ValueError):
        parse_stimulus("magnet:1")
    with pytest.raises(ValueError):
        parse_stimulus("dc:10,bogus=1")
