"""Benchmark harness: layout, aggregation, CSV determinism, and a small
live run with exact fan-out arithmetic."""

from pathlib import Path

import pytest

from meterlink.bench import (
    ExperimentConfig,
    GroupStats,
    LatencySample,
    export_csv,
    group_layout,
    run_experiment,
    spearman_correlation,
    summarize,
)
from meterlink.broker import BrokerThread
from meterlink.figures import save_response_time_figure


def test_default_layout_is_twelve_threes_and_a_four():
    layout = group_layout(ExperimentConfig())
    assert len(layout) == 13
    assert [len(g) for g in layout] == [3] * 12 + [4]
    assert sum(len(g) for g in layout) == 40
    assert sorted(u for g in layout for u in g) == list(range(1, 41))


def test_layout_without_oversized_last_group():
    layout = group_layout(ExperimentConfig(total_learners=7, group_size=3,
                                           oversize_last_group=False))
    assert [len(g) for g in layout] == [3, 3, 1]


def sample(group, sender, receiver, ms):
    return LatencySample(group, sender, receiver, 0, int(ms * 1e6))


def test_summarize_mean_median():
    samples = [sample(1, 1, 2, 10.0), sample(1, 1, 2, 20.0), sample(1, 2, 1, 30.0)]
    rows = summarize(samples, phase=1, n_learners=3, groups_active=[1])
    assert rows[0].mean_ms == pytest.approx(20.0)
    assert rows[0].median_ms == pytest.approx(20.0)
    assert rows[0].samples == 3


def test_summarize_single_sample_and_echo_exclusion():
    samples = [sample(1, 1, 1, 5.0), sample(1, 1, 2, 7.0)]
    rows = summarize(samples, 1, 2, [1])
    assert rows[0].samples == 1
    assert rows[0].mean_ms == rows[0].median_ms == rows[0].p95_ms == pytest.approx(7.0)


def test_summarize_empty_group_row():
    rows = summarize([], 2, 4, [1, 2])
    assert all(r.samples == 0 and r.mean_ms is None for r in rows)
    assert [r.group for r in rows] == [1, 2]


def test_spearman_known_series():
    assert spearman_correlation([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
    assert spearman_correlation([1, 2, 3, 4], [9, 7, 5, 3]) == pytest.approx(-1.0)
    assert spearman_correlation([1, 2, 3], [5, 5, 5]) == 0.0
    # Monotone in rank even when not linear in value.
    assert spearman_correlation([1, 2, 3, 4], [1, 10, 100, 1000]) == pytest.approx(1.0)
    # Tied middle values get averaged ranks.
    rho = spearman_correlation([1, 2, 3, 4], [1, 2, 2, 3])
    assert 0.9 < rho <= 1.0


def test_export_csv_deterministic_and_blank_rows(tmp_path):
    stats = [
        GroupStats(1, 3, 1, 4, 1.25, 1.0, 2.0),
        GroupStats(2, 6, 2, 0, None, None, None),
        GroupStats(2, 6, 1, 2, 3.5, 3.5, 4.0),
    ]
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    export_csv(stats, str(first))
    export_csv(list(stats), str(second))
    assert first.read_bytes() == second.read_bytes()
    lines = first.read_text().splitlines()
    assert lines[0] == "phase,n_learners,group,mean_ms,median_ms,p95_ms,samples"
    assert lines[1] == "1,3,1,1.250,1.000,2.000,4"
    assert lines[3] == "2,6,2,,,,0"  # blank stats for the empty group


def test_small_live_run_has_exact_fanout_and_figure(tmp_path):
    """One group of 3, 10 commands each: non-echo samples are exactly
    3 senders x 10 commands x 2 receivers = 60, echo 30, loss 0."""
    handle = BrokerThread().start()
    try:
        cfg = ExperimentConfig(
            broker_host="127.0.0.1", broker_port=handle.tcp_port,
            total_learners=3, group_size=3, commands_per_learner=10,
            pace_ms=5.0, phase_timeout_s=30.0,
        )
        result = run_experiment(cfg)
    finally:
        handle.stop()

    assert result.commands_sent == 30
    assert result.samples_expected == 90
    assert result.samples_collected == 90
    assert result.loss == 0
    assert len(result.stats) == 1
    row = result.stats[0]
    assert row.samples == 60
    assert row.mean_ms is not None and row.mean_ms >= 0

    csv_path = tmp_path / "r.csv"
    export_csv(result.stats, str(csv_path))
    figure_path = save_response_time_figure(result.stats, str(tmp_path / "r.png"))
    assert Path(figure_path).stat().st_size > 0
    assert csv_path.read_text().count("\n") == 2


def test_two_phase_run_accumulates_learners(tmp_path):
    handle = BrokerThread().start()
    try:
        cfg = ExperimentConfig(
            broker_host="127.0.0.1", broker_port=handle.tcp_port,
            total_learners=4, group_size=2, oversize_last_group=True,
            commands_per_learner=5, pace_ms=2.0, phase_timeout_s=30.0,
        )
        result = run_experiment(cfg)
    finally:
        handle.stop()

    # Phase 1: group 1 alone (2 learners); phase 2: both groups command.
    assert result.commands_sent == 2 * 5 + 4 * 5
    assert [(r.phase, r.group) for r in result.stats] == [(1, 1), (2, 1), (2, 2)]
    assert result.loss == 0
    assert len(result.phase_means) == 2
