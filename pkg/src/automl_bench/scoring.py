"""Benchmark score series, regulated score and report files."""
from __future__ import annotations

import bisect
import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DomainError, MalformedLog
from .runlog import RunLog

STEP_SECONDS = 360  # 0.1 hour
MAX_ERROR = 0.30
INVALID_TOKEN = "INVALID (error > 30%)"


def regulated_score(error: float, ops_per_second: float) -> float:
    """``-ln(error) * ops``: rises ever faster as error falls, linear in ops."""
    if not 0.0 < error < 1.0:
        raise DomainError(f"error must lie in (0, 1), got {error}")
    if ops_per_second < 0:
        raise DomainError("ops_per_second must be non-negative")
    return -math.log(error) * ops_per_second


@dataclass(frozen=True)
class ScorePoint:
    t: int
    cumulative_ops: int
    ops_per_second: float
    min_error: float
    regulated_score: float


@dataclass
class ScoreSeries:
    points: list[ScorePoint] = field(default_factory=list)
    step_seconds: int = STEP_SECONDS

    @property
    def final_score(self) -> float:
        return self.points[-1].ops_per_second if self.points else 0.0

    @property
    def final_regulated_score(self) -> float:
        return self.points[-1].regulated_score if self.points else 0.0

    @property
    def final_error(self) -> float:
        return self.points[-1].min_error if self.points else 1.0

    @property
    def valid(self) -> bool:
        return bool(self.points) and self.final_error <= MAX_ERROR


def _check_order(log: RunLog) -> None:
    last: dict[int, float] = {}
    for i, ev in enumerate(log.events):
        prev = last.get(ev.replica_id)
        if prev is not None and ev.ts_seconds < prev:
            raise MalformedLog(f"event {i}: replica {ev.replica_id} goes back in time ({ev.ts_seconds} < {prev})")
        last[ev.replica_id] = ev.ts_seconds
        if ev.event == "epoch" and (ev.error is None or not 0.0 < ev.error < 1.0):
            raise MalformedLog(f"event {i}: epoch error {ev.error!r} outside (0, 1)")


def compute_score_series(log: RunLog, step_seconds: int = STEP_SECONDS) -> ScoreSeries:
    """Cumulative ops and best error at every multiple of ``step_seconds``.

    Each epoch's ops land entirely at its end timestamp.  The series runs
    to the first step at or after the last epoch.
    """
    _check_order(log)
    epochs = sorted(log.epochs(), key=lambda e: e.ts_seconds)
    if not epochs:
        return ScoreSeries(step_seconds=step_seconds)
    ts = [e.ts_seconds for e in epochs]
    cum_ops = []
    cum_err = []
    total, best = 0, 1.0
    for e in epochs:
        total += e.epoch_ops
        best = min(best, e.error)
        cum_ops.append(total)
        cum_err.append(best)
    n_steps = max(1, math.ceil(ts[-1] / step_seconds))
    points = []
    for k in range(1, n_steps + 1):
        t = k * step_seconds
        i = bisect.bisect_right(ts, t)
        ops = cum_ops[i - 1] if i else 0
        err = cum_err[i - 1] if i else 1.0
        rate = ops / t
        reg = regulated_score(err, rate) if err < 1.0 else 0.0
        points.append(ScorePoint(t, ops, rate, err, reg))
    return ScoreSeries(points, step_seconds)


def series_csv(series: ScoreSeries) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_seconds", "cumulative_ops", "ops_per_second", "min_error", "regulated_score"])
    for p in series.points:
        w.writerow([p.t, p.cumulative_ops, repr(p.ops_per_second), repr(p.min_error), repr(p.regulated_score)])
    return buf.getvalue()


def summary_text(series: ScoreSeries, log: RunLog) -> str:
    recorded = log.recorded()
    best = min(recorded, key=lambda e: e.error, default=None)
    dataset = log.header.get("dataset", {})
    lines = [
        f"final_score_ops_per_second={series.final_score!r}",
        f"regulated_score={series.final_regulated_score!r}",
        f"valid={'true' if series.valid else 'false'}",
        f"status={'VALID' if series.valid else INVALID_TOKEN}",
        f"trials={len(recorded)}",
        f"best_error={series.final_error!r}",
        f"best_architecture={best.trial_digest if best else 'none'}",
        f"nonstandard={'true' if dataset.get('nonstandard') else 'false'}",
        f"rng_seed={log.header.get('rng_seed', 'unknown')}",
    ]
    return "\n".join(lines) + "\n"


def plot_svg(series: ScoreSeries, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    hours = [p.t / 3600 for p in series.points]
    with matplotlib.rc_context({"svg.hashsalt": "automl-bench", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(7, 4))
        ax.plot(hours, [p.ops_per_second / 1e15 for p in series.points], label="score (cumulative OPS)")
        ax.plot(hours, [p.regulated_score / 1e15 for p in series.points], label="regulated score", linestyle="--")
        ax.set_xlabel("time (hours)")
        ax.set_ylabel("Peta OPS")
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_report(series: ScoreSeries, log: RunLog, out_dir) -> dict[str, Path]:
    """Write ``score.csv``, ``summary.txt`` and ``score.svg`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "score.csv", "summary": out / "summary.txt", "svg": out / "score.svg"}
    paths["csv"].write_text(series_csv(series), encoding="utf-8")
    paths["summary"].write_text(summary_text(series, log), encoding="utf-8")
    plot_svg(series, paths["svg"])
    return paths
