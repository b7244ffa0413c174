"""Response-time benchmark: groups join one at a time, everyone issues
paced dial commands, and per-group delivery latency is aggregated.

The default layout is 40 learners in 13 groups (twelve groups of three
plus a four-member last group).  Phase k brings group k online; every
connected learner then sends its command script, and each relayed command
is timed from the sender's transmit to every member's receive on the
shared monotonic clock.  Per-phase group statistics land in a CSV, with a
companion figure of the rising trend.

Absolute numbers here are loopback-scale and orders of magnitude below
what 2000s-era classroom hardware produced (see the README for the
historical reference values); the qualitative rising trend with group
count is the comparable feature, so the harness reports the Spearman
rank correlation between phase index and mean response time rather than
asserting absolute times.
"""

from __future__ import annotations

import argparse
import csv
import random
import statistics
import sys
import threading
import time
from dataclasses import dataclass, field

from .client import LearnerSession, SessionError, StateChanged
from .protocol import ControlCode, ControlParameter

__all__ = [
    "ExperimentConfig",
    "LatencySample",
    "GroupStats",
    "ExperimentResult",
    "PhaseTimeoutError",
    "group_layout",
    "run_experiment",
    "summarize",
    "export_csv",
    "spearman_correlation",
    "main",
]


class PhaseTimeoutError(RuntimeError):
    """A phase failed to quiesce; the run is aborted."""


@dataclass(frozen=True)
class ExperimentConfig:
    broker_host: str = "127.0.0.1"
    broker_port: int = 7421
    total_learners: int = 40
    group_size: int = 3
    oversize_last_group: bool = True
    commands_per_learner: int = 20
    pace_ms: float = 100.0
    phase_timeout_s: float = 60.0
    seed: int = 20407


@dataclass(frozen=True)
class LatencySample:
    group: int
    sender: int
    receiver: int
    send_ns: int
    recv_ns: int

    @property
    def response_ms(self) -> float:
        return (self.recv_ns - self.send_ns) / 1e6

    @property
    def echo(self) -> bool:
        return self.sender == self.receiver


@dataclass(frozen=True)
class GroupStats:
    phase: int
    n_learners: int
    group: int
    samples: int  # non-echo deliveries the stats are computed over
    mean_ms: float | None
    median_ms: float | None
    p95_ms: float | None


@dataclass
class ExperimentResult:
    stats: list[GroupStats] = field(default_factory=list)
    phase_means: list[float] = field(default_factory=list)
    commands_sent: int = 0
    samples_expected: int = 0
    samples_collected: int = 0
    trend_correlation: float = 0.0

    @property
    def loss(self) -> int:
        return self.samples_expected - self.samples_collected


def group_layout(cfg: ExperimentConfig) -> list[list[int]]:
    """User ids per group; with the defaults, 12 groups of 3 plus one of 4."""
    if cfg.total_learners < 1 or cfg.group_size < 1:
        raise ValueError("need at least one learner and a positive group size")
    users = list(range(1, cfg.total_learners + 1))
    if cfg.oversize_last_group and cfg.total_learners >= cfg.group_size:
        n_groups = cfg.total_learners // cfg.group_size
        groups = [users[i * cfg.group_size : (i + 1) * cfg.group_size] for i in range(n_groups)]
        for leftover in users[n_groups * cfg.group_size :]:
            groups[-1].append(leftover)
        return groups
    return [users[i : i + cfg.group_size] for i in range(0, len(users), cfg.group_size)]


def _p95(values: list[float]) -> float:
    ordered = sorted(values)
    rank = max(0, -(-len(ordered) * 95 // 100) - 1)  # nearest-rank, ceil
    return ordered[rank]


def summarize(samples: list[LatencySample], phase: int, n_learners: int,
              groups_active: list[int]) -> list[GroupStats]:
    """Per-group stats over non-echo samples; empty groups get blank rows."""
    by_group: dict[int, list[float]] = {g: [] for g in groups_active}
    for sample in samples:
        if not sample.echo and sample.group in by_group:
            by_group[sample.group].append(sample.response_ms)
    rows = []
    for group in sorted(by_group):
        values = by_group[group]
        if values:
            rows.append(GroupStats(phase, n_learners, group, len(values),
                                   statistics.fmean(values),
                                   statistics.median(values), _p95(values)))
        else:
            rows.append(GroupStats(phase, n_learners, group, 0, None, None, None))
    return rows


def export_csv(stats: list[GroupStats], path: str) -> None:
    """Deterministic CSV: identical stats give identical bytes."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "n_learners", "group", "mean_ms", "median_ms",
                         "p95_ms", "samples"])
        for row in sorted(stats, key=lambda r: (r.phase, r.group)):
            writer.writerow([
                row.phase, row.n_learners, row.group,
                "" if row.mean_ms is None else f"{row.mean_ms:.3f}",
                "" if row.median_ms is None else f"{row.median_ms:.3f}",
                "" if row.p95_ms is None else f"{row.p95_ms:.3f}",
                row.samples,
            ])


def _ranks(values: list[float]) -> list[float]:
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def spearman_correlation(xs: list[float], ys: list[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    if len(xs) != len(ys):
        raise ValueError("series must have equal length")
    if len(xs) < 2:
        return 0.0
    rx, ry = _ranks(list(xs)), _ranks(list(ys))
    mx, my = statistics.fmean(rx), statistics.fmean(ry)
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    var_x = sum((a - mx) ** 2 for a in rx)
    var_y = sum((b - my) ** 2 for b in ry)
    if var_x == 0 or var_y == 0:
        return 0.0
    return cov / (var_x * var_y) ** 0.5


def _command_run(session: LearnerSession, count: int, pace_s: float,
                 rng: random.Random, out: list[int]) -> None:
    for _ in range(count):
        ordinal = rng.randrange(12)
        out.append(time.monotonic_ns())
        session.send_control(ControlParameter(0, ControlCode.SET_DIAL, ordinal))
        if pace_s > 0:
            time.sleep(pace_s)


def run_experiment(cfg: ExperimentConfig, progress=None) -> ExperimentResult:
    """Run all phases against a live broker and aggregate every sample."""
    layout = group_layout(cfg)
    result = ExperimentResult()
    sessions: dict[int, LearnerSession] = {}
    group_of: dict[int, int] = {}
    rng = random.Random(cfg.seed)

    def say(message: str) -> None:
        if progress:
            progress(message)

    try:
        for phase, members in enumerate(layout, start=1):
            group_id = phase
            for user in members:
                sessions[user] = LearnerSession.connect(
                    cfg.broker_host, cfg.broker_port, user, group_id, f"learner{user}"
                )
                group_of[user] = group_id

            # Roster churn from the joins must not count against the phase.
            time.sleep(0.05)
            for session in sessions.values():
                session.poll_events()

            send_ns: dict[int, list[int]] = {user: [] for user in sessions}
            threads = []
            for user, session in sessions.items():
                thread = threading.Thread(
                    target=_command_run,
                    args=(session, cfg.commands_per_learner, cfg.pace_ms / 1000.0,
                          random.Random(rng.randrange(2**32)), send_ns[user]),
                    name=f"sender-{user}",
                )
                threads.append(thread)
                thread.start()
            for thread in threads:
                thread.join()
            result.commands_sent += cfg.commands_per_learner * len(sessions)

            group_sizes = {gid: len(m) for gid, m in
                           ((g, layout[g - 1]) for g in range(1, phase + 1))}
            expected = {
                user: group_sizes[group_of[user]] * cfg.commands_per_learner
                for user in sessions
            }
            result.samples_expected += sum(expected.values())

            deadline = time.monotonic() + cfg.phase_timeout_s
            received: dict[int, list[StateChanged]] = {user: [] for user in sessions}
            pending = set(sessions)
            while pending:
                if time.monotonic() > deadline:
                    raise PhaseTimeoutError(
                        f"phase {phase}: {len(pending)} learner(s) still waiting "
                        f"for relays after {cfg.phase_timeout_s}s"
                    )
                for user in list(pending):
                    for event in sessions[user].poll_events(timeout=0.01):
                        if isinstance(event, StateChanged):
                            received[user].append(event)
                        elif isinstance(event, SessionError):
                            raise PhaseTimeoutError(
                                f"phase {phase}: learner {user} error "
                                f"{event.code}: {event.detail}"
                            )
                    if len(received[user]) >= expected[user]:
                        pending.discard(user)

            samples: list[LatencySample] = []
            for user, events in received.items():
                per_origin: dict[int, int] = {}
                for event in events:
                    index = per_origin.get(event.origin, 0)
                    per_origin[event.origin] = index + 1
                    samples.append(LatencySample(
                        group=group_of[user], sender=event.origin, receiver=user,
                        send_ns=send_ns[event.origin][index], recv_ns=event.recv_ns,
                    ))
            result.samples_collected += len(samples)

            phase_rows = summarize(samples, phase, len(sessions),
                                   list(range(1, phase + 1)))
            result.stats.extend(phase_rows)
            non_echo = [s.response_ms for s in samples if not s.echo]
            phase_mean = statistics.fmean(non_echo) if non_echo else float("nan")
            result.phase_means.append(phase_mean)
            say(f"phase {phase:2d}: {len(sessions):2d} learners, "
                f"{len(samples)} samples, mean {phase_mean:.3f} ms")
    finally:
        for session in sessions.values():
            session.leave()

    result.trend_correlation = spearman_correlation(
        [float(i) for i in range(1, len(result.phase_means) + 1)],
        result.phase_means,
    )
    return result


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bench", description="Measure relay response time as groups are added."
    )
    parser.add_argument("--broker", required=True, help="host:port of the broker TCP listener")
    parser.add_argument("--learners", type=int, default=40)
    parser.add_argument("--group-size", type=int, default=3)
    parser.add_argument("--oversize-last", dest="oversize", action="store_true", default=True,
                        help="fold leftover learners into the last group (default)")
    parser.add_argument("--no-oversize-last", dest="oversize", action="store_false")
    parser.add_argument("--commands", type=int, default=20, help="commands per learner per phase")
    parser.add_argument("--pace-ms", type=float, default=100.0)
    parser.add_argument("--phase-timeout-s", type=float, default=60.0)
    parser.add_argument("--seed", type=int, default=20407)
    parser.add_argument("--out", required=True, help="CSV output path")
    parser.add_argument("--plot", default=None,
                        help="figure output path (default: CSV path with .png)")
    parser.add_argument("--no-plot", action="store_true")
    args = parser.parse_args(argv)

    host, _, port = args.broker.partition(":")
    cfg = ExperimentConfig(
        broker_host=host, broker_port=int(port), total_learners=args.learners,
        group_size=args.group_size, oversize_last_group=args.oversize,
        commands_per_learner=args.commands, pace_ms=args.pace_ms,
        phase_timeout_s=args.phase_timeout_s, seed=args.seed,
    )
    try:
        result = run_experiment(cfg, progress=print)
    except PhaseTimeoutError as exc:
        print(f"PHASE_TIMEOUT: {exc}", file=sys.stderr)
        return 1

    export_csv(result.stats, args.out)
    print(f"wrote {args.out} ({len(result.stats)} rows)")
    if not args.no_plot:
        from .figures import save_response_time_figure

        plot_path = args.plot or (args.out.rsplit(".", 1)[0] + ".png")
        save_response_time_figure(result.stats, plot_path)
        print(f"wrote {plot_path}")
    print(f"commands sent: {result.commands_sent}")
    print(f"samples: {result.samples_collected}/{result.samples_expected} "
          f"(loss {result.loss})")
    print(f"trend correlation (phase vs mean): {result.trend_correlation:+.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
