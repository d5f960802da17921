"""Recognition metrics and distributional uncertainty reports.

Metrics: per-video accuracy (reported mean +/- std across videos) and macro
precision / recall / Jaccard over the phases present in a video.  The relaxed
variant forgives a prediction near a ground-truth transition when it equals
the phase on the other side of that transition, within round(10 * fps)
frames.

Uncertainty: per frame, m reverse-diffusion trajectories give m class
probability rows.  PIW is the 2.5-97.5 percentile width of the true-class
column; the paired t-test compares each trajectory's top-1 and top-2
probability.  Frames are grouped by majority-vote correctness (for PIW) and
by test rejection (for accuracy), per phase and overall.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .data import MASKED
from .errors import PhasediffError, ShapeError

__all__ = [
    "MetricsReport", "frame_metrics", "relax_predictions",
    "piw", "ptst", "PtstResult", "student_t_two_sided_p",
    "UncertaintyReport", "uncertainty_report",
    "ribbon", "ribbon_decode", "ribbon_csv",
]


# ---------------------------------------------------------------------------
# recognition metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    per_video_accuracy: list[float]
    accuracy_mean: float
    accuracy_std: float
    macro_precision: float
    macro_recall: float
    macro_jaccard: float
    relaxed: bool
    fps: float

    def to_dict(self) -> dict:
        return {
            "per_video_accuracy": [float(a) for a in self.per_video_accuracy],
            "accuracy_mean": float(self.accuracy_mean),
            "accuracy_std": float(self.accuracy_std),
            "macro_precision": float(self.macro_precision),
            "macro_recall": float(self.macro_recall),
            "macro_jaccard": float(self.macro_jaccard),
            "relaxed": bool(self.relaxed),
            "fps": float(self.fps),
        }


def _as_video_lists(preds, labels):
    if isinstance(preds, np.ndarray) and preds.ndim == 1:
        preds, labels = [preds], [labels]
    if len(preds) != len(labels):
        raise ShapeError("frame_metrics", f"{len(preds)} prediction videos vs {len(labels)} label videos")
    pairs = []
    for p, l in zip(preds, labels):
        p = np.asarray(p, dtype=np.int64)
        l = np.asarray(l, dtype=np.int64)
        if p.shape != l.shape:
            raise ShapeError("frame_metrics", f"prediction length {p.shape} vs labels {l.shape}")
        keep = l != MASKED
        pairs.append((p[keep], l[keep]))
    return pairs


def relax_predictions(pred: np.ndarray, label: np.ndarray, window: int) -> np.ndarray:
    """Forgive adjacent-phase predictions near transitions.

    Within `window` frames before a transition, predicting the upcoming
    phase counts as correct; within `window` frames after, predicting the
    preceding phase does.  Forgiven frames are rewritten to the label so any
    downstream metric sees them as correct.
    """
    out = pred.copy()
    n = label.shape[0]
    for p in range(1, n):
        before, after = label[p - 1], label[p]
        if before == after:
            continue
        lo = max(0, p - window)
        for f in range(lo, p):
            if out[f] != label[f] and pred[f] == after:
                out[f] = label[f]
        hi = min(n, p + window)
        for f in range(p, hi):
            if out[f] != label[f] and pred[f] == before:
                out[f] = label[f]
    return out


def _video_macro(pred: np.ndarray, label: np.ndarray):
    phases = np.union1d(np.unique(pred), np.unique(label))
    precision, recall, jaccard = [], [], []
    for c in phases:
        tp = int(np.sum((pred == c) & (label == c)))
        fp = int(np.sum((pred == c) & (label != c)))
        fn = int(np.sum((pred != c) & (label == c)))
        precision.append(tp / (tp + fp) if tp + fp else 0.0)
        recall.append(tp / (tp + fn) if tp + fn else 0.0)
        jaccard.append(tp / (tp + fp + fn))
    return float(np.mean(precision)), float(np.mean(recall)), float(np.mean(jaccard))


def frame_metrics(preds, labels, relaxed: bool = False, fps: float = 1.0) -> MetricsReport:
    """Accuracy / macro precision / recall / Jaccard over one or more videos."""
    pairs = _as_video_lists(preds, labels)
    window = int(round(10.0 * fps))
    accs, prs, res, jas = [], [], [], []
    for pred, label in pairs:
        if label.size == 0:
            continue
        scored = relax_predictions(pred, label, window) if relaxed else pred
        accs.append(float(np.mean(scored == label)))
        pr, re, ja = _video_macro(scored, label)
        prs.append(pr)
        res.append(re)
        jas.append(ja)
    if not accs:
        raise PhasediffError("frame_metrics: no labeled frames to score")
    return MetricsReport(
        per_video_accuracy=accs,
        accuracy_mean=float(np.mean(accs)),
        accuracy_std=float(np.std(accs)),
        macro_precision=float(np.mean(prs)),
        macro_recall=float(np.mean(res)),
        macro_jaccard=float(np.mean(jas)),
        relaxed=bool(relaxed),
        fps=float(fps),
    )


# ---------------------------------------------------------------------------
# prediction interval width and paired t-test
# ---------------------------------------------------------------------------

def piw(values: np.ndarray, lo: float = 2.5, hi: float = 97.5) -> float:
    """Percentile interval width with sorted linear interpolation at p*(m-1)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise PhasediffError(f"piw: need at least 2 samples, got shape {values.shape}")
    lo_v, hi_v = np.percentile(values, [lo, hi], method="linear")
    return float(hi_v - lo_v)


def student_t_two_sided_p(t: float, df: int) -> float:
    """Two-sided p-value via the regularized incomplete beta function.

    P(|T| >= t) = I_{df/(df+t^2)}(df/2, 1/2) for Student's t with df degrees
    of freedom; validated against tabulated critical values in the tests.
    """
    if df < 1:
        raise PhasediffError(f"t distribution needs df >= 1, got {df}")
    t = float(t)
    if not np.isfinite(t):
        return 0.0
    x = df / (df + t * t)
    return float(betainc(df / 2.0, 0.5, x))


@dataclass(frozen=True)
class PtstResult:
    t: float
    p: float
    rejected: bool


def ptst(top1: np.ndarray, top2: np.ndarray, rho: float = 0.05) -> PtstResult:
    """Paired t-test between per-trajectory top-1 and top-2 probabilities.

    Rejection of "the two means are equal" marks a confidently separated
    prediction.  Degenerate zero-variance differences are rejected with
    p = 0 when the mean difference is nonzero, and are an error otherwise.
    """
    top1 = np.asarray(top1, dtype=np.float64)
    top2 = np.asarray(top2, dtype=np.float64)
    if top1.shape != top2.shape or top1.ndim != 1:
        raise ShapeError("ptst", f"paired samples must match, got {top1.shape} vs {top2.shape}")
    m = top1.size
    if m < 2:
        raise PhasediffError("ptst: need at least 2 paired samples")
    diff = top1 - top2
    mean = float(np.mean(diff))
    sd = float(np.std(diff, ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            raise PhasediffError("ptst: degenerate samples (zero variance, zero mean)")
        return PtstResult(t=float(np.sign(mean)) * float("inf"), p=0.0, rejected=True)
    t = mean / (sd / np.sqrt(m))
    p = student_t_two_sided_p(abs(t), m - 1)
    return PtstResult(t=float(t), p=p, rejected=bool(p < rho))


# ---------------------------------------------------------------------------
# grouped uncertainty report
# ---------------------------------------------------------------------------

@dataclass
class UncertaintyReport:
    """Per-phase and overall uncertainty statistics (one row per phase + all)."""

    rows: list[dict]
    m: int
    rho: float
    piw_column: str
    notice: str | None = None

    def to_dict(self) -> dict:
        return {
            "rows": self.rows,
            "m": int(self.m),
            "rho": float(self.rho),
            "piw_column": self.piw_column,
            "notice": self.notice,
        }

    def to_text(self) -> str:
        headers = ["phase", "n", "accuracy", "piw_correct", "piw_incorrect",
                   "acc_reject", "acc_not_reject", "n_not_reject"]
        lines = ["  ".join(f"{h:>14}" for h in headers)]
        for row in self.rows:
            cells = []
            for h in headers:
                v = row.get(h)
                if v is None:
                    cells.append(f"{'-':>14}")
                elif isinstance(v, float):
                    cells.append(f"{v:>14.4f}")
                else:
                    cells.append(f"{str(v):>14}")
            lines.append("  ".join(cells))
        if self.notice:
            lines.append(f"note: {self.notice}")
        return "\n".join(lines)


def _group_row(name, correct, piws, rejected):
    n = correct.size
    row = {"phase": name, "n": int(n)}
    if n == 0:
        row.update({"accuracy": None, "piw_correct": None, "piw_incorrect": None,
                    "acc_reject": None, "acc_not_reject": None, "n_not_reject": 0})
        return row
    row["accuracy"] = float(np.mean(correct))
    if piws is None:
        row.update({"piw_correct": None, "piw_incorrect": None,
                    "acc_reject": None, "acc_not_reject": None, "n_not_reject": 0})
        return row
    got = correct.astype(bool)
    row["piw_correct"] = float(np.mean(piws[got])) if np.any(got) else None
    row["piw_incorrect"] = float(np.mean(piws[~got])) if np.any(~got) else None
    rej = rejected.astype(bool)
    row["acc_reject"] = float(np.mean(correct[rej])) if np.any(rej) else None
    row["acc_not_reject"] = float(np.mean(correct[~rej])) if np.any(~rej) else None
    row["n_not_reject"] = int(np.sum(~rej))
    return row


def uncertainty_report(trajectory_sets, labels, classes: int, rho: float = 0.05,
                       piw_column: str = "true", rule: str = "majority") -> UncertaintyReport:
    """Full grouped report from per-frame trajectory sets.

    piw_column selects whether the interval is measured on the true-class
    probability column (default) or the predicted-class column.
    """
    from .diffusion import aggregate_prediction

    labels = np.asarray(labels, dtype=np.int64)
    if len(trajectory_sets) != labels.shape[0]:
        raise ShapeError("uncertainty_report",
                         f"{len(trajectory_sets)} trajectory sets vs {labels.shape[0]} labels")
    if piw_column not in ("true", "predicted"):
        raise PhasediffError(f"unknown piw_column {piw_column!r}")

    keep = labels != MASKED
    m = trajectory_sets[0].m if trajectory_sets else 0
    have_spread = m >= 2

    correct, piws, rejected, phase_of = [], [], [], []
    for ts, label in zip(trajectory_sets, labels):
        if label == MASKED:
            continue
        probs = ts.probs()
        pred, _ = aggregate_prediction(ts, rule)
        correct.append(pred == int(label))
        phase_of.append(int(label))
        if have_spread:
            col = int(label) if piw_column == "true" else pred
            piws.append(piw(probs[:, col]))
            ordered = np.sort(probs, axis=1)
            res = ptst(ordered[:, -1], ordered[:, -2], rho)
            rejected.append(res.rejected)
    correct = np.asarray(correct, dtype=bool)
    phase_of = np.asarray(phase_of, dtype=np.int64)
    piw_arr = np.asarray(piws) if have_spread else None
    rej_arr = np.asarray(rejected, dtype=bool) if have_spread else None

    rows = [_group_row("all", correct, piw_arr, rej_arr)]
    for c in range(classes):
        mask = phase_of == c
        rows.append(_group_row(c, correct[mask],
                               piw_arr[mask] if have_spread else None,
                               rej_arr[mask] if have_spread else None))
    notice = None if have_spread else "m < 2: interval widths and paired tests omitted"
    return UncertaintyReport(rows=rows, m=int(m), rho=float(rho),
                             piw_column=piw_column, notice=notice)


# ---------------------------------------------------------------------------
# ribbon (run-length) exports
# ---------------------------------------------------------------------------

def ribbon(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """Lossless run-length encoding: (phase, start, length) bands."""
    labels = np.asarray(labels, dtype=np.int64)
    bands = []
    start = 0
    for i in range(1, labels.size + 1):
        if i == labels.size or labels[i] != labels[start]:
            bands.append((int(labels[start]), int(start), int(i - start)))
            start = i
    return bands


def ribbon_decode(bands) -> np.ndarray:
    total = sum(length for _, _, length in bands)
    out = np.empty(total, dtype=np.int64)
    for phase, start, length in bands:
        out[start : start + length] = phase
    return out


def ribbon_csv(bands) -> str:
    lines = ["phase,start,length"]
    lines.extend(f"{p},{s},{n}" for p, s, n in bands)
    return "\n".join(lines) + "\n"
