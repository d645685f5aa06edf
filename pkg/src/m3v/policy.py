"""Decision layer over the four view scores: threshold routing (Policy 1),
linear SVM score fusion (Policy 2), and validation-set calibration of all
thresholds."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .fileio import atomic_write_text, canonical_json
from .metrics import accuracy
from .model import ViewScores
from .numerics import Array, Rng

FEATURE_ORDER = ("align", "audio", "text", "multi")


class CalibrationError(ValueError):
    """Calibration input cannot support the requested fit."""


@dataclass
class ThresholdSet:
    """Five routing thresholds plus the Policy-2 fusion threshold."""

    t_align_low: float = 0.0
    t_align_high: float = 1.0
    t_audio: float = 0.5
    t_text: float = 0.5
    t_multi: float = 0.5
    t_fusion: float = 0.0

    def __post_init__(self):
        if self.t_align_low > self.t_align_high:
            raise ValueError(
                f"t_align_low {self.t_align_low} > t_align_high {self.t_align_high}")
        for name in ("t_align_low", "t_align_high", "t_audio", "t_text", "t_multi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("t_align_low", "t_align_high", "t_audio", "t_text", "t_multi",
                 "t_fusion")}


@dataclass
class SvmModel:
    """Linear fusion classifier over [v_align, v_audio, v_text, v_multi]."""

    weights: Array
    bias: float
    regularization: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.weights.shape != (4,):
            raise ValueError(f"SVM needs 4 weights, got shape {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)) or not np.isfinite(self.bias):
            raise ValueError("SVM parameters must be finite")
        self.bias = float(self.bias)

    def margin(self, features):
        x = np.asarray(features, dtype=np.float64)
        out = x @ self.weights + self.bias
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "bias": self.bias,
                "regularization": self.regularization, "seed": self.seed}


@dataclass
class Decision:
    verdict: bool
    branch: str
    scores: ViewScores


def policy1_decide(s: ViewScores, th: ThresholdSet) -> Decision:
    """Route by alignment confidence: trust the text head when alignment is
    high, the audio head when it is low, the fused head in between. All
    comparisons are strict."""
    if s.v_align > th.t_align_high:
        return Decision(s.v_text > th.t_text, "text", s)
    if s.v_align < th.t_align_low:
        return Decision(s.v_audio > th.t_audio, "audio", s)
    return Decision(s.v_multi > th.t_multi, "multi", s)


def policy1_apply(score_table, th: ThresholdSet):
    """Vectorized Policy 1 over an (n, 4) score table; returns verdicts
    and branch names."""
    scores = np.asarray(score_table, dtype=np.float64)
    v_align, v_audio, v_text, v_multi = scores.T
    text_branch = v_align > th.t_align_high
    audio_branch = (~text_branch) & (v_align < th.t_align_low)
    verdicts = np.where(text_branch, v_text > th.t_text,
                        np.where(audio_branch, v_audio > th.t_audio,
                                 v_multi > th.t_multi))
    branches = np.where(text_branch, "text",
                        np.where(audio_branch, "audio", "multi"))
    return verdicts.astype(bool), branches


def policy2_decide(s: ViewScores, svm: SvmModel, t_fusion: float) -> Decision:
    return Decision(bool(svm.margin(s.as_vector()) > t_fusion), "fusion", s)


def policy2_apply(score_table, svm: SvmModel, t_fusion: float):
    return svm.margin(np.asarray(score_table, dtype=np.float64)) > t_fusion


def sweep_threshold(scores, labels, floor: float | None = None):
    """Best accuracy threshold for verdict = score > threshold.

    Candidates are the midpoints between adjacent distinct scores plus two
    boundary values (below the minimum and at the maximum), so the sweep
    dominates every fixed threshold; ties resolve to the lowest threshold.
    Returns (threshold, accuracy).
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.size == 0 or s.shape != y.shape:
        raise ValueError("scores and labels must be equal-length and non-empty")
    distinct = np.unique(s)
    low = floor if floor is not None else float(distinct[0] - 1.0)
    candidates = np.concatenate([[low], 0.5 * (distinct[:-1] + distinct[1:]),
                                 [distinct[-1]]])
    best_t, best_acc = None, -1.0
    for t in candidates:
        acc = accuracy(s > t, y)
        if acc > best_acc:
            best_t, best_acc = float(t), acc
    return best_t, best_acc


def calibrate_thresholds(score_table, labels, svm: SvmModel | None = None,
                         align_grid: int = 21) -> ThresholdSet:
    """Fit all thresholds on validation scores.

    Per-head thresholds come from independent accuracy sweeps. The
    alignment pair is a grid search over quantiles of the alignment score
    (low <= high) maximizing Policy-1 accuracy given the head thresholds.
    The fusion threshold sweeps the SVM margins when a model is supplied,
    else stays at the natural decision boundary 0.
    """
    scores = np.asarray(score_table, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[1] != 4 or scores.shape[0] != y.size:
        raise ValueError(f"score table must be ({y.size}, 4), got {scores.shape}")
    if y.size < 4 or y.sum() < 2 or (y.size - y.sum()) < 2:
        raise CalibrationError(
            "calibration needs at least two samples of each class")

    t_audio, _ = sweep_threshold(scores[:, 1], y, floor=0.0)
    t_text, _ = sweep_threshold(scores[:, 2], y, floor=0.0)
    t_multi, _ = sweep_threshold(scores[:, 3], y, floor=0.0)

    quantiles = np.quantile(scores[:, 0], np.linspace(0.0, 1.0, align_grid))
    best = (0.0, 1.0, -1.0)
    for i in range(align_grid):
        for j in range(i, align_grid):
            th = ThresholdSet(t_align_low=float(quantiles[i]),
                              t_align_high=float(quantiles[j]),
                              t_audio=t_audio, t_text=t_text, t_multi=t_multi)
            verdicts, _ = policy1_apply(scores, th)
            acc = accuracy(verdicts, y)
            if acc > best[2]:
                best = (th.t_align_low, th.t_align_high, acc)

    t_fusion = 0.0
    if svm is not None:
        t_fusion, _ = sweep_threshold(svm.margin(scores), y)

    return ThresholdSet(t_align_low=best[0], t_align_high=best[1],
                        t_audio=t_audio, t_text=t_text, t_multi=t_multi,
                        t_fusion=float(t_fusion))


def train_svm(features, labels, c: float = 1.0, epochs: int = 200,
              seed: int = 0) -> SvmModel:
    """Soft-margin linear SVM by deterministic primal subgradient descent.

    Pegasos-style schedule: per-sample updates in a seed-shuffled order
    with step 1/(lambda*t), lambda = 1/(c*n), plus the projection that
    bounds ||w||; the bias is unregularized.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if x.ndim != 2 or x.shape[1] != 4 or x.shape[0] != y.size:
        raise ValueError(f"features must be ({y.size}, 4), got {x.shape}")
    if y.size < 2 or len(set(y.tolist())) < 2:
        raise CalibrationError("SVM training needs both classes present")
    if c <= 0 or epochs < 1:
        raise ValueError("need c > 0 and epochs >= 1")

    sign = 2.0 * y - 1.0
    n = y.size
    lam = 1.0 / (c * n)
    radius = 1.0 / np.sqrt(lam)
    w = np.zeros(4)
    b = 0.0
    t = 0
    rng = Rng(seed, ("svm",))
    for epoch in range(epochs):
        order = rng.split("epoch", epoch).permutation(n)
        for i in order:
            t += 1
            eta = 1.0 / (lam * t)
            xi, yi = x[int(i)], sign[int(i)]
            if yi * (w @ xi + b) < 1.0:
                w = (1.0 - eta * lam) * w + eta * yi * xi
                b += eta * yi
            else:
                w = (1.0 - eta * lam) * w
            norm = float(np.linalg.norm(w))
            if norm > radius:
                w *= radius / norm
    return SvmModel(weights=w, bias=b, regularization=float(c), seed=int(seed))


POLICY_FORMAT_VERSION = 1


def save_policy(path: str, thresholds: ThresholdSet, svm: SvmModel,
                provenance: dict) -> None:
    payload = {
        "format_version": POLICY_FORMAT_VERSION,
        "feature_order": ",".join(FEATURE_ORDER),
        "thresholds": thresholds.to_dict(),
        "svm": svm.to_dict(),
        "provenance": provenance,
    }
    atomic_write_text(path, canonical_json(payload) + "\n")


def load_policy(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != POLICY_FORMAT_VERSION:
        raise ValueError(
            f"unsupported policy file version {payload.get('format_version')!r}")
    if payload.get("feature_order") != ",".join(FEATURE_ORDER):
        raise ValueError("policy file feature order does not match this build")
    th = ThresholdSet(**payload["thresholds"])
    svm = SvmModel(**payload["svm"])
    return th, svm, payload.get("provenance", {})
