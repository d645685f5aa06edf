"""The four-view network: dual encoders, concatenation fusion, three
softmax classification heads, unit-normalized contrastive projections,
and per-utterance view scoring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoders import (EncoderParams, create_encoder, encode_backward,
                       encode_pooled, pool)
from .numerics import Array, LinearLayer, Rng, ShapeError, relu, softmax

VIEW_ORDER = ("align", "audio", "text", "multi")

NORM_EPS = 1e-12


@dataclass
class ViewScores:
    """The four inference-time scores: alignment confidence plus the
    device-directed probability of each classification head."""

    v_align: float
    v_audio: float
    v_text: float
    v_multi: float

    def __post_init__(self):
        for name in ("v_align", "v_audio", "v_text", "v_multi"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
            setattr(self, name, v)

    def as_vector(self) -> Array:
        """Fixed feature order: align, audio, text, multi."""
        return np.array([self.v_align, self.v_audio, self.v_text, self.v_multi])


class FeedForwardHead:
    """Two-layer classifier: linear -> ReLU -> linear, softmax at use site."""

    def __init__(self, fc1: LinearLayer, fc2: LinearLayer):
        self.fc1 = fc1
        self.fc2 = fc2
        self._hidden_pre: Array | None = None

    @classmethod
    def create(cls, in_dim: int, hidden_dim: int, rng: Rng,
               out_dim: int = 2) -> "FeedForwardHead":
        return cls(LinearLayer.create(in_dim, hidden_dim, rng.split("fc1")),
                   LinearLayer.create(hidden_dim, out_dim, rng.split("fc2")))

    @property
    def in_dim(self) -> int:
        return self.fc1.in_dim

    def forward(self, x, cache: bool = False) -> Array:
        h = self.fc1.forward(x, cache=cache)
        if cache:
            self._hidden_pre = h
        return self.fc2.forward(relu(h), cache=cache)

    def backward(self, grad_logits) -> Array:
        grad_hidden = self.fc2.backward(grad_logits)
        return self.fc1.backward(grad_hidden * (self._hidden_pre > 0))

    def layers(self):
        return [self.fc1, self.fc2]

    def copy(self) -> "FeedForwardHead":
        return FeedForwardHead(self.fc1.copy(), self.fc2.copy())


@dataclass
class M3VParams:
    """All trainable state: encoders, three view heads, two contrastive
    projections, the (fixed) temperature, and the per-loss uncertainty
    scale parameters used by automatic loss weighting."""

    audio_encoder: EncoderParams
    text_encoder: EncoderParams
    head_audio: FeedForwardHead
    head_text: FeedForwardHead
    head_multi: FeedForwardHead
    proj_audio: LinearLayer
    proj_text: LinearLayer
    temperature: float = 0.07
    loss_scales: Array = field(default_factory=lambda: np.zeros(4))
    loss_scales_grad: Array = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        d, t = self.audio_encoder.repr_dim, self.text_encoder.repr_dim
        if self.head_multi.in_dim != d + t:
            raise ShapeError(
                f"multi head expects input dim {d + t}, got {self.head_multi.in_dim}")
        if self.proj_audio.out_dim != self.proj_text.out_dim:
            raise ShapeError("contrastive projections must share an output dim")
        self.loss_scales = np.asarray(self.loss_scales, dtype=np.float64)
        self.loss_scales_grad = np.asarray(self.loss_scales_grad, dtype=np.float64)

    @classmethod
    def create(cls, audio_feat_dim: int, text_feat_dim: int, rng: Rng,
               audio_repr_dim: int = 16, text_repr_dim: int = 12,
               contrastive_dim: int = 8, hidden_dim: int = 32,
               temperature: float = 0.07) -> "M3VParams":
        return cls(
            audio_encoder=create_encoder(audio_feat_dim, audio_repr_dim,
                                         rng.split("enc_audio")),
            text_encoder=create_encoder(text_feat_dim, text_repr_dim,
                                        rng.split("enc_text")),
            head_audio=FeedForwardHead.create(audio_repr_dim, hidden_dim,
                                              rng.split("head_audio")),
            head_text=FeedForwardHead.create(text_repr_dim, hidden_dim,
                                             rng.split("head_text")),
            head_multi=FeedForwardHead.create(audio_repr_dim + text_repr_dim,
                                              hidden_dim, rng.split("head_multi")),
            proj_audio=LinearLayer.create(audio_repr_dim, contrastive_dim,
                                          rng.split("proj_audio")),
            proj_text=LinearLayer.create(text_repr_dim, contrastive_dim,
                                         rng.split("proj_text")),
            temperature=temperature,
        )

    def _layers(self):
        return [
            ("enc_audio", self.audio_encoder.projection),
            ("enc_text", self.text_encoder.projection),
            ("head_audio.fc1", self.head_audio.fc1),
            ("head_audio.fc2", self.head_audio.fc2),
            ("head_text.fc1", self.head_text.fc1),
            ("head_text.fc2", self.head_text.fc2),
            ("head_multi.fc1", self.head_multi.fc1),
            ("head_multi.fc2", self.head_multi.fc2),
            ("proj_audio", self.proj_audio),
            ("proj_text", self.proj_text),
        ]

    def param_items(self):
        """(name, value, grad) triples in a fixed order."""
        items = []
        for name, layer in self._layers():
            items.append((f"{name}.weight", layer.weight, layer.gweight))
            items.append((f"{name}.bias", layer.bias, layer.gbias))
        items.append(("loss_scales", self.loss_scales, self.loss_scales_grad))
        return items

    def trainable(self):
        return [(value, grad) for _, value, grad in self.param_items()]

    def zero_grad(self) -> None:
        for _, layer in self._layers():
            layer.zero_grad()
        self.loss_scales_grad.fill(0.0)

    def copy(self) -> "M3VParams":
        return M3VParams(
            audio_encoder=EncoderParams(self.audio_encoder.projection.copy(),
                                        self.audio_encoder.pooling_kind),
            text_encoder=EncoderParams(self.text_encoder.projection.copy(),
                                       self.text_encoder.pooling_kind),
            head_audio=self.head_audio.copy(),
            head_text=self.head_text.copy(),
            head_multi=self.head_multi.copy(),
            proj_audio=self.proj_audio.copy(),
            proj_text=self.proj_text.copy(),
            temperature=self.temperature,
            loss_scales=self.loss_scales.copy(),
            loss_scales_grad=self.loss_scales_grad.copy(),
        )

    def to_state(self) -> dict:
        arrays = {}
        for name, layer in self._layers():
            arrays[f"{name}.weight"] = layer.weight.tolist()
            arrays[f"{name}.bias"] = layer.bias.tolist()
        arrays["loss_scales"] = self.loss_scales.tolist()
        return {"temperature": float(self.temperature), "arrays": arrays}

    @classmethod
    def from_state(cls, state: dict) -> "M3VParams":
        arrays = state["arrays"]

        def layer(name):
            return LinearLayer(arrays[f"{name}.weight"], arrays[f"{name}.bias"])

        return cls(
            audio_encoder=EncoderParams(layer("enc_audio")),
            text_encoder=EncoderParams(layer("enc_text")),
            head_audio=FeedForwardHead(layer("head_audio.fc1"), layer("head_audio.fc2")),
            head_text=FeedForwardHead(layer("head_text.fc1"), layer("head_text.fc2")),
            head_multi=FeedForwardHead(layer("head_multi.fc1"), layer("head_multi.fc2")),
            proj_audio=layer("proj_audio"),
            proj_text=layer("proj_text"),
            temperature=state["temperature"],
            loss_scales=np.asarray(arrays["loss_scales"], dtype=np.float64),
        )


@dataclass
class BatchOutputs:
    """Everything the forward pass produces for one batch."""

    a: Array
    t: Array
    m: Array
    probs_audio: Array
    probs_text: Array
    probs_multi: Array
    z_audio: Array
    z_text: Array
    raw_z_audio: Array | None = None
    raw_z_text: Array | None = None


def fuse(a, t) -> Array:
    """Concatenate representations, audio block first."""
    a = np.asarray(a, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if a.ndim != t.ndim or (a.ndim == 2 and a.shape[0] != t.shape[0]):
        raise ShapeError(f"cannot fuse shapes {a.shape} and {t.shape}")
    return np.concatenate([a, t], axis=-1)


def head_forward(reprs, head: FeedForwardHead, cache: bool = False) -> Array:
    """Two-class probabilities; column 1 is the device-directed class."""
    return softmax(head.forward(reprs, cache=cache))


def normalize_rows(raw: Array) -> Array:
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    return raw / (norms + NORM_EPS)


def normalize_rows_backward(raw: Array, grad_z: Array) -> Array:
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    n = norms + NORM_EPS
    dot = np.sum(raw * grad_z, axis=-1, keepdims=True)
    return grad_z / n - raw * dot / (np.maximum(norms, NORM_EPS) * n * n)


def project(reprs, proj: LinearLayer, cache: bool = False) -> Array:
    """Linear map into the shared contrastive space, L2-normalized rows."""
    return normalize_rows(proj.forward(reprs, cache=cache))


def alignment_score(z_audio, z_text):
    """Cosine of the unit projections mapped affinely onto [0, 1]."""
    za = np.asarray(z_audio, dtype=np.float64)
    zt = np.asarray(z_text, dtype=np.float64)
    if za.shape != zt.shape:
        raise ShapeError(f"projection shapes differ: {za.shape} vs {zt.shape}")
    cos = np.sum(za * zt, axis=-1)
    return np.clip((cos + 1.0) / 2.0, 0.0, 1.0)


def forward(pooled_audio, pooled_text, params: M3VParams,
            cache: bool = False) -> BatchOutputs:
    """Run encoders, fusion, the three heads, and both projections."""
    a = encode_pooled(pooled_audio, params.audio_encoder, cache=cache)
    t = encode_pooled(pooled_text, params.text_encoder, cache=cache)
    m = fuse(a, t)
    raw_za = params.proj_audio.forward(a, cache=cache)
    raw_zt = params.proj_text.forward(t, cache=cache)
    return BatchOutputs(
        a=a, t=t, m=m,
        probs_audio=head_forward(a, params.head_audio, cache=cache),
        probs_text=head_forward(t, params.head_text, cache=cache),
        probs_multi=head_forward(m, params.head_multi, cache=cache),
        z_audio=normalize_rows(raw_za),
        z_text=normalize_rows(raw_zt),
        raw_z_audio=raw_za if cache else None,
        raw_z_text=raw_zt if cache else None,
    )


def backward(params: M3VParams, out: BatchOutputs, grad_logits_audio,
             grad_logits_text, grad_logits_multi, grad_z_audio,
             grad_z_text) -> None:
    """Accumulate parameter gradients for a cached forward pass.

    Inputs are d(loss)/d(head logits) and d(loss)/d(normalized projection),
    already scaled by the effective loss weights.
    """
    d = params.audio_encoder.repr_dim
    grad_a = params.head_audio.backward(grad_logits_audio)
    grad_t = params.head_text.backward(grad_logits_text)
    grad_m = params.head_multi.backward(grad_logits_multi)
    grad_a = grad_a + grad_m[:, :d]
    grad_t = grad_t + grad_m[:, d:]
    grad_a = grad_a + params.proj_audio.backward(
        normalize_rows_backward(out.raw_z_audio, grad_z_audio))
    grad_t = grad_t + params.proj_text.backward(
        normalize_rows_backward(out.raw_z_text, grad_z_text))
    encode_backward(params.audio_encoder, out.a, grad_a)
    encode_backward(params.text_encoder, out.t, grad_t)


def score_matrix(params: M3VParams, pooled_audio, pooled_text) -> Array:
    """Score a whole dataset: (n, 4) columns align, audio, text, multi."""
    out = forward(pooled_audio, pooled_text, params)
    v_align = alignment_score(out.z_audio, out.z_text)
    return np.column_stack([v_align, out.probs_audio[:, 1],
                            out.probs_text[:, 1], out.probs_multi[:, 1]])


def score(pair, params: M3VParams) -> ViewScores:
    """Four view scores for a single utterance pair."""
    pooled_a = pool(pair.audio_frames)[None, :]
    pooled_t = pool(pair.text_tokens)[None, :]
    row = score_matrix(params, pooled_a, pooled_t)[0]
    return ViewScores(v_align=float(row[0]), v_audio=float(row[1]),
                      v_text=float(row[2]), v_multi=float(row[3]))
