"""Figure rendering for benchmark reports.

Kept apart from the measurement code so headless runs only pay the
matplotlib import when a figure is actually requested.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .bench import GroupStats

__all__ = ["save_response_time_figure"]


def save_response_time_figure(stats: list[GroupStats], path: str) -> str:
    """Plot mean relay response time against connected learners.

    One marker per (phase, group) plus a line through the per-phase means,
    weighted by sample count.  Saves to ``path`` and returns it.
    """
    phases: dict[int, tuple[int, float, int]] = {}
    xs, ys = [], []
    for row in stats:
        if row.mean_ms is None:
            continue
        xs.append(row.n_learners)
        ys.append(row.mean_ms)
        n, total, weight = phases.get(row.phase, (row.n_learners, 0.0, 0))
        phases[row.phase] = (row.n_learners, total + row.mean_ms * row.samples,
                             weight + row.samples)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.plot(xs, ys, "o", markersize=4, alpha=0.45, label="per-group mean")
    line_x = [phases[p][0] for p in sorted(phases)]
    line_y = [phases[p][1] / phases[p][2] for p in sorted(phases) if phases[p][2]]
    if len(line_y) == len(line_x):
        ax.plot(line_x, line_y, "-", linewidth=1.8, label="phase mean")
    ax.set_xlabel("connected learners")
    ax.set_ylabel("mean response time (ms)")
    ax.set_title("Relay response time vs. group count")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
