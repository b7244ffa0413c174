"""Learner session behavior against a live broker."""

import subprocess
import sys
import time

import pytest

from meterlink.broker import BrokerThread
from meterlink.client import (
    ChatReceived,
    ConnectError,
    JoinRefusedError,
    LearnerSession,
    NotConnectedError,
    ReadingReceived,
    RosterChanged,
    SessionError,
    StateChanged,
    TextTooLongError,
    parse_script,
)
from meterlink.instrument import (
    DialPosition,
    InvalidParameterError,
    Resistor,
    default_state,
    state_display,
)
from meterlink.protocol import ControlCode, ControlParameter
from meterlink.serial_link import simulate_source


@pytest.fixture
def broker():
    handle = BrokerThread().start()
    yield handle
    handle.stop()


def connect(broker, user, group, **kwargs):
    return LearnerSession.connect("127.0.0.1", broker.tcp_port, user, group,
                                  f"u{user}", **kwargs)


def drain_until(session, predicate, timeout=3.0):
    events = []
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        events.extend(session.poll_events(timeout=0.05))
        if predicate(events):
            return events
    raise AssertionError(f"condition not reached; events={events}")


def test_connect_fresh_group_default_state(broker):
    session = connect(broker, 1, 1)
    assert session.state == default_state()
    assert session.last_seq == 0
    assert [m.user_id for m in session.roster] == [1]
    session.leave()


def test_connect_duplicate_refused(broker):
    session = connect(broker, 1, 1)
    with pytest.raises(JoinRefusedError) as err:
        connect(broker, 1, 2)
    assert err.value.code == "DUPLICATE_USER"
    session.leave()


def test_connect_to_closed_port_fails_quickly():
    started = time.monotonic()
    with pytest.raises(ConnectError):
        LearnerSession.connect("127.0.0.1", 1, 1, 1, "x", timeout=2.0)
    assert time.monotonic() - started < 5.0


def test_lone_member_optimistic_display_confirmed_by_echo(broker):
    session = connect(broker, 1, 1)
    session.send_control(ControlParameter(0, ControlCode.SET_DIAL, 9))
    # Display follows immediately; authority waits for the echo.
    assert session.display_state.dial == DialPosition.OHM_2M
    assert session.state.dial == DialPosition.DCV_20V
    drain_until(session, lambda evs: any(isinstance(e, StateChanged) for e in evs))
    assert session.state.dial == DialPosition.OHM_2M
    assert session.pending == []
    assert session.display_state == session.state
    session.leave()


def test_invalid_ordinal_rejected_locally(broker):
    session = connect(broker, 1, 1)
    with pytest.raises(InvalidParameterError):
        session.send_control(ControlParameter(0, ControlCode.SET_DIAL, 99))
    assert session.pending == []
    assert session.last_seq == 0
    time.sleep(0.2)
    assert session.poll_events() == []  # nothing was transmitted
    session.leave()


def test_concurrent_dial_race_converges(broker):
    a = connect(broker, 1, 9)
    b = connect(broker, 2, 9)
    a.poll_events(timeout=0.3)

    a.send_control(ControlParameter(0, ControlCode.SET_DIAL, int(DialPosition.OHM_200)))
    b.send_control(ControlParameter(0, ControlCode.SET_DIAL, int(DialPosition.DCV_2V)))

    for session in (a, b):
        drain_until(session, lambda evs: session.last_seq >= 2)
    assert a.state == b.state
    assert state_display(a.state) == state_display(b.state)
    assert a.state == broker.authoritative_state(9)
    a.leave()
    b.leave()


def test_chat_echo_and_limits(broker):
    members = [connect(broker, uid, 4) for uid in (1, 2, 3)]
    for m in members:
        m.poll_events(timeout=0.3)
    members[0].send_chat("hello group")
    members[1].send_chat("")  # empty chat is legal
    for m in members:
        events = drain_until(
            m, lambda evs: len([e for e in evs if isinstance(e, ChatReceived)]) >= 2)
        chats = [e for e in events if isinstance(e, ChatReceived)]
        assert [c.text for c in chats] == ["hello group", ""]
        assert chats[0].origin == 1 and chats[0].origin_name == "u1"
    with pytest.raises(TextTooLongError):
        members[0].send_chat("x" * 70_000)
    for m in members:
        m.leave()


def test_attach_serial_fans_out_readings(broker):
    members = [connect(broker, uid, 6) for uid in (1, 2, 3)]
    for m in members:
        m.poll_events(timeout=0.3)
    frames = simulate_source(Resistor(1000.0), DialPosition.OHM_2K, 10.0, 5)
    sent = members[0].attach_serial(frames)
    assert sent == 5
    for m in members:
        events = drain_until(
            m, lambda evs: len([e for e in evs if isinstance(e, ReadingReceived)]) >= 5)
        readings = [e for e in events if isinstance(e, ReadingReceived)]
        assert len(readings) == 5
        assert all(r.origin == 1 for r in readings)
        assert state_display(m.state) == "1.000 kΩ"
    for m in members:
        m.leave()


def test_attach_serial_with_corrupt_frame(broker):
    members = [connect(broker, uid, 6) for uid in (1, 2)]
    for m in members:
        m.poll_events(timeout=0.3)
    frames = simulate_source(Resistor(1000.0), DialPosition.OHM_2K, 10.0, 5,
                             fault=("flip-nibble", 3))
    members[0].attach_serial(frames)

    own = drain_until(
        members[0],
        lambda evs: len([e for e in evs if isinstance(e, ReadingReceived)]) >= 4)
    local_errors = [e for e in own if isinstance(e, SessionError)]
    assert len(local_errors) == 1 and local_errors[0].code == "BAD_CHECKSUM"

    peer = drain_until(
        members[1],
        lambda evs: len([e for e in evs if isinstance(e, ReadingReceived)]) >= 4)
    assert len([e for e in peer if isinstance(e, ReadingReceived)]) == 4
    assert not [e for e in peer if isinstance(e, SessionError)]
    for m in members:
        m.leave()


def test_serial_before_join_rejected(broker):
    session = connect(broker, 1, 1)
    session.leave()
    with pytest.raises(NotConnectedError):
        session.attach_serial(b"")


def test_poll_idle_and_single_event(broker):
    session = connect(broker, 1, 1)
    assert session.poll_events() == []
    session.send_control(ControlParameter(0, ControlCode.SET_POWER, 0))
    events = drain_until(session, lambda evs: len(evs) >= 1)
    state_changes = [e for e in events if isinstance(e, StateChanged)]
    assert len(state_changes) == 1
    assert state_changes[0].state.power is False
    session.leave()


def test_roster_events_on_join_and_leave(broker):
    a = connect(broker, 1, 2)
    b = connect(broker, 2, 2)
    events = drain_until(a, lambda evs: any(isinstance(e, RosterChanged) for e in evs))
    roster = [e for e in events if isinstance(e, RosterChanged)][-1]
    assert [m.user_id for m in roster.members] == [1, 2]
    b.leave()
    events = drain_until(a, lambda evs: any(isinstance(e, RosterChanged) for e in evs))
    roster = [e for e in events if isinstance(e, RosterChanged)][-1]
    assert [m.user_id for m in roster.members] == [1]
    a.leave()


def test_broker_death_surfaces_connection_lost():
    handle = BrokerThread().start()
    session = LearnerSession.connect("127.0.0.1", handle.tcp_port, 1, 1, "x")
    handle.stop()
    events = drain_until(
        session, lambda evs: any(
            isinstance(e, SessionError) and e.code == "CONNECTION_LOST" for e in evs),
        timeout=5.0)
    assert events
    assert session.lost
    with pytest.raises(NotConnectedError):
        session.send_chat("too late")


def test_parse_script():
    script = parse_script(
        "# warm-up\n"
        "@0 dial 6\n"
        "@50 power 1\n"
        "@100 chat hello there\n"
        "@150 serial frames.bin\n"
    )
    assert [c.verb for c in script] == ["dial", "power", "chat", "serial"]
    assert script[2].argument == "hello there"
    with pytest.raises(ValueError):
        parse_script("dial 6")
    with pytest.raises(ValueError):
        parse_script("@10 warp 9")


def test_learner_cli_end_to_end(broker, tmp_path):
    frames = tmp_path / "frames.bin"
    frames.write_bytes(simulate_source(Resistor(470.0), DialPosition.OHM_2K, 10.0, 2))
    script = tmp_path / "script.txt"
    script.write_text(
        "@0 dial 6\n"
        "@40 chat checking in\n"
        f"@80 serial {frames}\n"
    )
    out = subprocess.run(
        [sys.executable, "-m", "meterlink.client",
         "--broker", f"127.0.0.1:{broker.tcp_port}",
         "--user", "77", "--group", "3", "--script", str(script),
         "--linger-ms", "400", "--dump-state", "--quiet"],
        capture_output=True, text=True, timeout=30,
    )
    assert out.returncode == 0, out.stderr
    import json

    state = json.loads(out.stdout.strip().splitlines()[-1])
    assert state["dial"] == 6
    assert state["display"] == "0.470 kΩ"
    assert state["seq"] == 4  # dial + chat + two readings
