"""Training objectives: per-view cross-entropy, the InfoNCE text-audio
alignment loss, and their fixed or uncertainty-weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Array, ShapeError, cross_entropy

LOSS_ORDER = ("audio", "text", "multi", "contrastive")


@dataclass
class LossWeights:
    """Interaction weights for the total objective.

    In fixed mode the four components are combined as
    lam*L_audio + gamma*L_text + alpha*L_multi + beta*L_contrastive.
    In automatic mode each component k is weighted by 1/(2*sigma_k^2) with
    a log(1 + sigma_k^2) regularizer, sigma_k^2 = exp(s_k) for trainable
    scale parameters s_k held in M3VParams.loss_scales.
    """

    mode: str = "automatic"
    lam: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.mode not in ("fixed", "automatic"):
            raise ValueError(f"unknown loss weight mode {self.mode!r}")
        # Zero is allowed so single-view baselines stay expressible.
        for name in ("lam", "gamma", "alpha", "beta"):
            if getattr(self, name) < 0:
                raise ValueError(f"fixed weight {name} must be >= 0")

    def fixed_vector(self) -> Array:
        return np.array([self.lam, self.gamma, self.alpha, self.beta])


@dataclass
class LossBreakdown:
    l_audio: float
    l_text: float
    l_multi: float
    l_contrastive: float
    l_total: float
    effective_weights: dict

    def components(self) -> Array:
        return np.array([self.l_audio, self.l_text, self.l_multi,
                         self.l_contrastive])


def similarity_matrix(z_audio, z_text) -> Array:
    za = np.asarray(z_audio, dtype=np.float64)
    zt = np.asarray(z_text, dtype=np.float64)
    if za.ndim != 2 or zt.ndim != 2 or za.shape != zt.shape:
        raise ShapeError(
            f"projections must be matching (n, k) matrices, got {za.shape} / {zt.shape}")
    return za @ zt.T


def _logsumexp_rows(x: Array) -> Array:
    m = x.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=1, keepdims=True)))[:, 0]


def info_nce_from_similarity(sim, tau: float, symmetric: bool = True) -> float:
    """InfoNCE on a precomputed similarity matrix with diagonal positives.

    Each anchor i is pushed toward its paired sample against the other
    n-1 in-batch candidates. The symmetric form averages the
    audio-anchored and text-anchored directions.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(sim, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {s.shape}")
    logits = s / tau
    diag = np.diag(logits)
    loss = float(np.mean(_logsumexp_rows(logits) - diag))
    if symmetric:
        loss_t = float(np.mean(_logsumexp_rows(logits.T) - diag))
        loss = 0.5 * (loss + loss_t)
    return loss


def info_nce(z_audio, z_text, tau: float, symmetric: bool = True) -> float:
    return info_nce_from_similarity(similarity_matrix(z_audio, z_text), tau,
                                    symmetric=symmetric)


def _softmax_rows(x: Array) -> Array:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def info_nce_grad(z_audio, z_text, tau: float, symmetric: bool = True):
    """Loss plus gradients w.r.t. both projection matrices."""
    za = np.asarray(z_audio, dtype=np.float64)
    zt = np.asarray(z_text, dtype=np.float64)
    sim = similarity_matrix(za, zt)
    loss = info_nce_from_similarity(sim, tau, symmetric=symmetric)
    n = sim.shape[0]
    logits = sim / tau
    eye = np.eye(n)
    g = _softmax_rows(logits) - eye
    if symmetric:
        p_col = _softmax_rows(logits.T).T
        g = 0.5 * (g + p_col - eye)
    g /= n * tau
    return loss, g @ zt, g.T @ za


def view_losses(outputs, labels):
    """Cross-entropy of each head against the directedness labels."""
    y = np.asarray(labels, dtype=np.int64)
    return (cross_entropy(outputs.probs_audio, y),
            cross_entropy(outputs.probs_text, y),
            cross_entropy(outputs.probs_multi, y))


def head_logit_grads(probs: Array, labels) -> Array:
    """d(mean cross-entropy)/d(logits) for a softmax head."""
    y = np.asarray(labels, dtype=np.int64)
    g = probs.copy()
    g[np.arange(len(y)), y] -= 1.0
    return g / len(y)


def total_loss(l_audio: float, l_text: float, l_multi: float,
               l_contrastive: float, weights: LossWeights,
               scales: Array | None = None) -> LossBreakdown:
    """Combine the four components under the active weighting mode."""
    comps = np.array([l_audio, l_text, l_multi, l_contrastive])
    if weights.mode == "fixed":
        w = weights.fixed_vector()
        total = float(w @ comps)
    else:
        if scales is None:
            raise ValueError("automatic weighting needs the scale parameters")
        sig2 = np.exp(np.asarray(scales, dtype=np.float64))
        w = 1.0 / (2.0 * sig2)
        total = float(np.sum(comps * w + np.log1p(sig2)))
    eff = dict(zip(LOSS_ORDER, (float(v) for v in w)))
    return LossBreakdown(float(l_audio), float(l_text), float(l_multi),
                         float(l_contrastive), total, eff)


def scale_grads(components, scales: Array) -> Array:
    """d(total)/d(s_k) for the automatic weighting parameters."""
    comps = np.asarray(components, dtype=np.float64)
    sig2 = np.exp(np.asarray(scales, dtype=np.float64))
    return -comps / (2.0 * sig2) + sig2 / (1.0 + sig2)
