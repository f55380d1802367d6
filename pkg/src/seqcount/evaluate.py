"""Meta-test evaluation: decode every episode and aggregate counting/detection metrics."""

from __future__ import annotations

from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .metrics import class_counts, counting_errors, detection_scores, match_points
from .model import ModelConfig, predict


@dataclass
class EpisodeOutcome:
    ways: int
    shots: int
    pred_counts: list
    gt_counts: list
    match: object
    predictions: list


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    recall: float
    precision: float
    episodes: int
    radius: float
    t_max: int
    buckets: dict = field(default_factory=dict)  # (ways, shots) -> dict of metrics

    def as_dict(self) -> dict:
        return {
            "episodes": self.episodes, "radius": self.radius, "t_max": self.t_max,
            "mae": self.mae, "rmse": self.rmse, "recall": self.recall, "precision": self.precision,
            "buckets": {f"C{c}_S{s}": m for (c, s), m in sorted(self.buckets.items())},
        }

    def to_text(self) -> str:
        lines = [
            f"episodes: {self.episodes}",
            f"radius: {self.radius:g}",
            f"t_max: {self.t_max}",
            f"mae: {self.mae:.4f}",
            f"rmse: {self.rmse:.4f}",
            f"recall: {self.recall:.4f}",
            f"precision: {self.precision:.4f}",
            "buckets:",
            "  ways shots episodes     mae    rmse  recall  precision",
        ]
        for (c, s), m in sorted(self.buckets.items()):
            lines.append(f"  {c:4d} {s:5d} {m['episodes']:8d} {m['mae']:7.3f} {m['rmse']:7.3f} "
                         f"{m['recall']:7.3f} {m['precision']:10.3f}")
        return "\n".join(lines) + "\n"


def evaluate_episode(params, cfg: ModelConfig, task, radius=16.0, t_max=32) -> EpisodeOutcome:
    preds = predict(params, cfg, task, t_max)
    gt = [((y, x), c) for y, x, c in task.query]
    return EpisodeOutcome(task.ways, task.shots, class_counts(preds, task.ways), task.gt_counts(),
                          match_points(preds, gt, radius), preds)


def _summarize(outcomes) -> dict:
    mae, rmse = counting_errors((o.pred_counts, o.gt_counts) for o in outcomes)
    recall, precision = detection_scores(o.match for o in outcomes)
    return {"episodes": len(outcomes), "mae": mae, "rmse": rmse, "recall": recall, "precision": precision}


def summarize(outcomes, radius=16.0, t_max=32) -> MetricsReport:
    overall = _summarize(outcomes)
    groups = defaultdict(list)
    for o in outcomes:
        groups[(o.ways, o.shots)].append(o)
    return MetricsReport(overall["mae"], overall["rmse"], overall["recall"], overall["precision"],
                         len(outcomes), radius, t_max, {k: _summarize(v) for k, v in groups.items()})


def _worker(args):
    params, cfg, task, radius, t_max = args
    return evaluate_episode(params, cfg, task, radius, t_max)


def evaluate(params, cfg: ModelConfig, tasks, radius=16.0, t_max=32, workers=1) -> MetricsReport:
    """Decode every task and aggregate MAE, RMSE, recall and precision.

    Aggregation folds outcomes in task order, so the report does not
    depend on ``workers``.
    """
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_worker, [(params, cfg, t, radius, t_max) for t in tasks]))
    else:
        outcomes = [evaluate_episode(params, cfg, t, radius, t_max) for t in tasks]
    return summarize(outcomes, radius, t_max)


def plot_report(report: MetricsReport, path) -> None:
    """Metric-vs-shots curves, one line per number of ways."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 4, figsize=(14, 3.2))
    ways = sorted({c for c, _ in report.buckets})
    for ax, key in zip(axes, ("mae", "rmse", "recall", "precision")):
        for c in ways:
            pts = sorted((s, m[key]) for (cc, s), m in report.buckets.items() if cc == c)
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"C={c}")
        ax.set_xlabel("shots")
        ax.set_title(key)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
