"""Evaluation: accuracy, ROC sweep, interpolated equal error rate, and the
sliced evaluation report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fileio import atomic_write_text, canonical_json

HEAD_VIEWS = ("audio", "text", "multi")


def accuracy(verdicts, labels) -> float:
    v = np.asarray(verdicts).astype(bool)
    y = np.asarray(labels).astype(bool)
    if v.shape != y.shape:
        raise ValueError(f"length mismatch: {v.shape} verdicts vs {y.shape} labels")
    if v.size == 0:
        raise ValueError("cannot compute accuracy of an empty set")
    return float(np.mean(v == y))


def _check_two_classes(labels: np.ndarray) -> None:
    if labels.min() == labels.max():
        raise ValueError("need both classes present, got a single class")


def roc_curve(scores, labels):
    """Operating points (threshold, FAR, FRR) for verdict = score > threshold.

    Thresholds sweep -inf, the midpoints between adjacent distinct scores,
    and +inf, which together realize every achievable classification. A
    sample scoring exactly at the threshold counts as rejected. FAR is
    non-increasing and FRR non-decreasing along the sweep.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(np.int64).reshape(-1)
    if s.shape != y.shape or s.size == 0:
        raise ValueError("scores and labels must be equal-length and non-empty")
    _check_two_classes(y)
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)

    order = np.argsort(s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    distinct, starts = np.unique(s_sorted, return_index=True)
    bounds = list(starts) + [len(s_sorted)]

    points = [(-np.inf, 1.0, 0.0)]
    neg_above = n_neg
    pos_below = 0
    for k in range(len(distinct)):
        block = y_sorted[bounds[k]:bounds[k + 1]]
        pos_here = int(block.sum())
        neg_above -= len(block) - pos_here
        pos_below += pos_here
        threshold = (0.5 * (distinct[k] + distinct[k + 1])
                     if k + 1 < len(distinct) else np.inf)
        points.append((float(threshold), neg_above / n_neg, pos_below / n_pos))
    return points


def eer(scores, labels) -> float:
    """Equal error rate from the ROC sweep.

    Walks the sweep until FAR crosses below FRR; returns the exact value
    when the curves meet at an operating point, otherwise linearly
    interpolates between the bracketing points.
    """
    points = roc_curve(scores, labels)
    prev_far, prev_frr = points[0][1], points[0][2]
    for _, far, frr in points:
        if far == frr:
            return float(far)
        if far < frr:
            d0 = prev_far - prev_frr
            d1 = far - frr
            alpha = d0 / (d0 - d1)
            return float(prev_far + alpha * (far - prev_far))
        prev_far, prev_frr = far, frr
    raise AssertionError("FAR/FRR curves never crossed")  # unreachable


def _confusion(verdicts: np.ndarray, labels: np.ndarray) -> dict:
    v = verdicts.astype(bool)
    y = labels.astype(bool)
    return {
        "tp": int(np.sum(v & y)),
        "fp": int(np.sum(v & ~y)),
        "tn": int(np.sum(~v & ~y)),
        "fn": int(np.sum(~v & y)),
    }


@dataclass
class EvalReport:
    """Per-view and policy metrics, with aligned/misaligned slices when the
    dataset carries misalignment diagnostics."""

    n_samples: int
    view_accuracy: dict
    view_eer: dict
    align_accuracy: float | None = None
    align_eer: float | None = None
    policy1_accuracy: float | None = None
    policy2_accuracy: float | None = None
    policy1_branch_counts: dict | None = None
    slices: dict | None = None

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "view_accuracy": self.view_accuracy,
            "view_eer": self.view_eer,
            "align_accuracy": self.align_accuracy,
            "align_eer": self.align_eer,
            "policy1_accuracy": self.policy1_accuracy,
            "policy2_accuracy": self.policy2_accuracy,
            "policy1_branch_counts": self.policy1_branch_counts,
            "slices": self.slices,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    def format_table(self) -> str:
        """Fixed-order human-readable summary."""
        def fmt(v):
            return f"{v:.4f}" if v is not None else "--"

        lines = [
            "view       align_acc  text_acc   audio_acc  merge_acc  eer",
            "metrics    {}     {}     {}     {}     {}".format(
                fmt(self.align_accuracy), fmt(self.view_accuracy["text"]),
                fmt(self.view_accuracy["audio"]), fmt(self.view_accuracy["multi"]),
                fmt(self.view_eer["multi"])),
            f"per-view eer: audio={fmt(self.view_eer['audio'])} "
            f"text={fmt(self.view_eer['text'])} multi={fmt(self.view_eer['multi'])} "
            f"align={fmt(self.align_eer)}",
            f"policy1 accuracy: {fmt(self.policy1_accuracy)}"
            + ("" if self.policy1_accuracy is not None else " (absent)"),
            f"policy2 accuracy: {fmt(self.policy2_accuracy)}"
            + ("" if self.policy2_accuracy is not None else " (absent)"),
        ]
        if self.slices is not None:
            for name in ("aligned", "misaligned"):
                sl = self.slices[name]
                if sl["accuracy"] is None:
                    lines.append(f"slice {name}: n=0")
                    continue
                accs = " ".join(f"{k}={fmt(v)}" for k, v in sl["accuracy"].items())
                lines.append(f"slice {name}: n={sl['n']} {accs}")
        return "\n".join(lines) + "\n"


def build_report(score_table, labels, misaligned=None, policy1_verdicts=None,
                 policy1_branches=None, policy2_verdicts=None) -> EvalReport:
    """Assemble the evaluation report from raw scores and verdicts.

    `score_table` columns follow the fixed view order align, audio, text,
    multi. Head verdicts are score > 0.5. Slices appear only when
    misalignment flags are supplied.
    """
    scores = np.asarray(score_table, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[1] != 4 or scores.shape[0] != y.size:
        raise ValueError(f"score table must be ({y.size}, 4), got {scores.shape}")
    n = int(y.size)
    cols = {"align": scores[:, 0], "audio": scores[:, 1],
            "text": scores[:, 2], "multi": scores[:, 3]}

    view_acc = {v: accuracy(cols[v] > 0.5, y) for v in HEAD_VIEWS}
    view_eer = {v: eer(cols[v], y) for v in HEAD_VIEWS}

    align_acc = align_eer = None
    flags = None
    if misaligned is not None:
        flags = np.asarray(misaligned).astype(bool)
        if flags.shape != y.shape:
            raise ValueError("misaligned flags length mismatch")
        aligned_flag = ~flags
        align_acc = accuracy(cols["align"] > 0.5, aligned_flag)
        if 0 < aligned_flag.sum() < n:
            align_eer = eer(cols["align"], aligned_flag)

    p1 = np.asarray(policy1_verdicts).astype(bool) if policy1_verdicts is not None else None
    p2 = np.asarray(policy2_verdicts).astype(bool) if policy2_verdicts is not None else None
    p1_acc = accuracy(p1, y) if p1 is not None else None
    p2_acc = accuracy(p2, y) if p2 is not None else None

    branch_counts = None
    if p1 is not None and policy1_branches is not None:
        branches = np.asarray(policy1_branches)
        branch_counts = {}
        for branch in ("text", "audio", "multi"):
            mask = branches == branch
            branch_counts[branch] = _confusion(p1[mask], y[mask])
    if p2 is not None:
        branch_counts = branch_counts or {}
        branch_counts["fusion"] = _confusion(p2, y)

    slices = None
    if flags is not None:
        slices = {}
        for name, mask in (("aligned", ~flags), ("misaligned", flags)):
            if not mask.any():
                slices[name] = {"n": 0, "accuracy": None}
                continue
            acc = {v: accuracy(cols[v][mask] > 0.5, y[mask]) for v in HEAD_VIEWS}
            if p1 is not None:
                acc["policy1"] = accuracy(p1[mask], y[mask])
            if p2 is not None:
                acc["policy2"] = accuracy(p2[mask], y[mask])
            slices[name] = {"n": int(mask.sum()), "accuracy": acc}

    return EvalReport(
        n_samples=n,
        view_accuracy=view_acc,
        view_eer=view_eer,
        align_accuracy=align_acc,
        align_eer=align_eer,
        policy1_accuracy=p1_acc,
        policy2_accuracy=p2_acc,
        policy1_branch_counts=branch_counts,
        slices=slices,
    )


def save_report(report: EvalReport, path: str) -> None:
    atomic_write_text(path, canonical_json(report.to_dict()) + "\n")


def load_report(path: str) -> EvalReport:
    import json

    with open(path, "r", encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))
