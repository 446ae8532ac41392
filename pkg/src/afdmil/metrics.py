"""Bag-level classification metrics and distillation-quality metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, UndefinedMetricError

log = logging.getLogger(__name__)

SCORE_TABLE_HEADER = "idx,x,y,y_hat,alpha,sel_ins,sel_att"


@dataclass
class MetricsReport:
    acc: float
    auc: float | None
    recall: float
    precision: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float
    recall_degenerate: bool = False
    precision_degenerate: bool = False
    distill_precision_ins: float | None = None
    distill_precision_att: float | None = None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def classify_metrics(final_probs, labels, threshold: float = 0.5) -> MetricsReport:
    """Confusion counts and derived rates at a fixed decision threshold.

    Degenerate denominators (no positives / no positive predictions)
    report 0 and set the matching flag instead of dividing by zero. AUC is
    filled when both classes are present.
    """
    probs = np.asarray(final_probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if probs.shape != y.shape or probs.ndim != 1 or probs.size == 0:
        raise ConfigError(f"need equal-length non-empty 1-D inputs, got {probs.shape} and {y.shape}")
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must be in (0, 1), got {threshold}")

    pred = probs >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))

    recall_degenerate = (tp + fn) == 0
    precision_degenerate = (tp + fp) == 0
    return MetricsReport(
        acc=(tp + tn) / probs.size,
        auc=auc(probs, y) if 0 < y.sum() < y.size else None,
        recall=0.0 if recall_degenerate else tp / (tp + fn),
        precision=0.0 if precision_degenerate else tp / (tp + fp),
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        threshold=threshold,
        recall_degenerate=recall_degenerate,
        precision_degenerate=precision_degenerate,
    )


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: over all (positive, negative) pairs, credit 1 when
    the positive scores higher and 0.5 on ties. Exactly the trapezoidal ROC
    area, but tie-correct by construction."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    pos = s[y == 1]
    neg = s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    diff = pos[:, None] - neg[None, :]
    credit = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(credit / (pos.size * neg.size))


def distill_precision(selected_indices, instance_labels, witness_label: int = 1) -> float:
    """Fraction of selected instances whose latent label is the witness label."""
    idx = list(selected_indices)
    if not idx:
        raise ConfigError("selection is empty")
    if instance_labels is None:
        raise UndefinedMetricError("no latent instance labels available")
    latent = np.asarray(instance_labels)
    hits = sum(1 for i in idx if latent[i] == witness_label)
    return hits / len(idx)


def mean_distill_precision(
    selections_and_latents, witness_label: int = 1
) -> float | None:
    """Average per-bag distillation precision; None when nothing qualifies.

    ``selections_and_latents`` yields (selected indices, latent labels)
    pairs, typically one per positive bag.
    """
    values = []
    for indices, latent in selections_and_latents:
        if latent is None or not list(indices):
            continue
        values.append(distill_precision(indices, latent, witness_label))
    if not values:
        return None
    return float(np.mean(values))


METRICS_HEADER = (
    "acc,auc,recall,precision,tp,fp,tn,fn,threshold,"
    "recall_degenerate,precision_degenerate,distill_precision_ins,distill_precision_att"
)


def metrics_csv(report: MetricsReport) -> str:
    """One-row CSV rendering of a report; undefined fields stay blank."""
    opt = lambda v: "" if v is None else repr(v)
    row = (
        f"{report.acc!r},{opt(report.auc)},{report.recall!r},{report.precision!r},"
        f"{report.tp},{report.fp},{report.tn},{report.fn},{report.threshold!r},"
        f"{int(report.recall_degenerate)},{int(report.precision_degenerate)},"
        f"{opt(report.distill_precision_ins)},{opt(report.distill_precision_att)}"
    )
    return METRICS_HEADER + "\n" + row + "\n"


def export_instance_scores(trace, bag, path: str | Path) -> tuple[Path, Path | None]:
    """Write the per-instance score table, plus a graymap raster when possible.

    Table rows: instance index, grid coordinates (blank without coords),
    the instance probability, the attention weight and one selection flag
    per channel. When coordinates form an integer grid with no duplicate
    cells, an 8-bit portable graymap of the instance probabilities is
    written next to the table (gray = round(255 * probability)).
    """
    path = Path(path)
    K = bag.n_instances
    sel1 = set(trace.channel1_indices)
    sel2 = set(trace.channel2_indices)
    rows = [SCORE_TABLE_HEADER]
    for i in range(K):
        if bag.coords is not None:
            x, y = bag.coords[i]
            x_txt, y_txt = _coord_text(x), _coord_text(y)
        else:
            x_txt, y_txt = "", ""
        rows.append(
            f"{i},{x_txt},{y_txt},{float(trace.instance_probs[i])!r},"
            f"{float(trace.attention_weights[i])!r},{int(i in sel1)},{int(i in sel2)}"
        )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(rows) + "\n")

    raster_path = None
    if bag.coords is not None:
        raster_path = path.with_suffix(".pgm")
        if not _write_raster(trace.instance_probs, bag.coords, raster_path):
            raster_path = None
    return path, raster_path


def _coord_text(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def _write_raster(probs: np.ndarray, coords: np.ndarray, path: Path) -> bool:
    ints = np.round(coords)
    if not np.allclose(coords, ints):
        log.warning("coords are not an integer grid; skipping raster %s", path)
        return False
    ints = ints.astype(np.int64)
    cells = {(int(x), int(y)) for x, y in ints}
    if len(cells) != len(ints):
        log.warning("duplicate grid cells in coords; skipping raster %s", path)
        return False
    x0, y0 = ints[:, 0].min(), ints[:, 1].min()
    width = int(ints[:, 0].max() - x0 + 1)
    height = int(ints[:, 1].max() - y0 + 1)
    grid = np.zeros((height, width), dtype=np.int64)
    for (x, y), p in zip(ints, probs):
        grid[y - y0, x - x0] = int(round(255.0 * float(p)))
    lines = ["P2", f"{width} {height}", "255"]
    lines.extend(" ".join(str(v) for v in row) for row in grid)
    path.write_text("\n".join(lines) + "\n")
    return True
