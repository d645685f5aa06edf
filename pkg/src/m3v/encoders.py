"""Utterance-level representations: mean pooling over the sequence axis,
then a trainable linear projection squashed by tanh."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Array, LinearLayer, Rng, ShapeError

POOLING_KINDS = ("mean",)


@dataclass
class EncoderParams:
    projection: LinearLayer
    pooling_kind: str = "mean"

    def __post_init__(self):
        if self.pooling_kind not in POOLING_KINDS:
            raise ValueError(f"unknown pooling kind {self.pooling_kind!r}")
        if self.projection.out_dim < 2:
            raise ValueError(f"representation dim must be >= 2, got {self.projection.out_dim}")

    @property
    def feat_dim(self) -> int:
        return self.projection.in_dim

    @property
    def repr_dim(self) -> int:
        return self.projection.out_dim


def create_encoder(feat_dim: int, repr_dim: int, rng: Rng) -> EncoderParams:
    return EncoderParams(LinearLayer.create(feat_dim, repr_dim, rng))


def pool(frames) -> Array:
    """Element-wise mean over the sequence axis."""
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError(f"cannot pool an empty or non-2-D sequence, shape {arr.shape}")
    return arr.mean(axis=0)


def pool_sequences(sequences) -> Array:
    """Pool each variable-length sequence into one row of a matrix."""
    return np.stack([pool(seq) for seq in sequences])


def encode_pooled(pooled: Array, enc: EncoderParams, cache: bool = False) -> Array:
    """pooled (n, feat_dim) -> tanh(linear) representations (n, repr_dim)."""
    return np.tanh(enc.projection.forward(pooled, cache=cache))


def encode_backward(enc: EncoderParams, outputs: Array, grad_outputs: Array) -> None:
    """Accumulate parameter gradients given d(loss)/d(representation)."""
    enc.projection.backward(grad_outputs * (1.0 - outputs * outputs))


def _encode_single(frames, enc: EncoderParams) -> Array:
    pooled = pool(frames)
    if pooled.shape[0] != enc.feat_dim:
        raise ShapeError(
            f"encoder expects feature dim {enc.feat_dim}, got {pooled.shape[0]}")
    return encode_pooled(pooled[None, :], enc)[0]


def encode_audio(frames, enc: EncoderParams) -> Array:
    return _encode_single(frames, enc)


def encode_text(tokens, enc: EncoderParams) -> Array:
    return _encode_single(tokens, enc)
