"""Dataset model, JSONL I/O, deterministic splitting and batching, and a
synthetic text-audio pair generator with a controllable misalignment rate.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .fileio import atomic_write_text, canonical_json
from .numerics import Array, Rng


class DataFormatError(ValueError):
    """Malformed dataset input; carries the offending line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass
class UtterancePair:
    """One sample: frame-level audio features, token-level text features,
    the directedness label, and (for synthetic diagnostics) whether the
    text was swapped for an unrelated transcript."""

    id: str
    audio_frames: Array
    text_tokens: Array
    label: int
    misaligned: bool = False
    transcript: str | None = None

    def __post_init__(self):
        self.audio_frames = np.asarray(self.audio_frames, dtype=np.float64)
        self.text_tokens = np.asarray(self.text_tokens, dtype=np.float64)
        for name, arr in (("audio", self.audio_frames), ("text", self.text_tokens)):
            if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
                raise ValueError(
                    f"{name} features must be a non-empty 2-D sequence, got shape {arr.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} features contain non-finite values")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        self.label = int(self.label)
        self.misaligned = bool(self.misaligned)


@dataclass
class Dataset:
    """An immutable collection of utterance pairs with homogeneous dims."""

    samples: list
    audio_feat_dim: int
    text_feat_dim: int
    provenance: str = "loaded"

    def __post_init__(self):
        if not self.samples:
            raise ValueError("dataset is empty")
        ids = set()
        for s in self.samples:
            if s.audio_frames.shape[1] != self.audio_feat_dim:
                raise ValueError(
                    f"sample {s.id}: audio feature dim {s.audio_frames.shape[1]} "
                    f"!= dataset dim {self.audio_feat_dim}"
                )
            if s.text_tokens.shape[1] != self.text_feat_dim:
                raise ValueError(
                    f"sample {s.id}: text feature dim {s.text_tokens.shape[1]} "
                    f"!= dataset dim {self.text_feat_dim}"
                )
            if s.id in ids:
                raise ValueError(f"duplicate sample id {s.id!r}")
            ids.add(s.id)

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> Array:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def misaligned_flags(self) -> Array:
        return np.array([s.misaligned for s in self.samples], dtype=bool)

    def digest(self) -> str:
        """Content hash over the canonical JSONL serialization."""
        h = hashlib.sha256()
        for s in self.samples:
            h.update(_sample_line(s).encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


@dataclass
class GenConfig:
    """Synthetic generator settings.

    Each sample draws a latent directedness label, then audio frames and
    text tokens around class-conditional mean directions. With probability
    `misalignment_rate` the text is regenerated from an independently drawn
    label, emulating a transcription that does not match the audio; the
    stored label still describes the audio.
    """

    n_samples: int
    positive_rate: float = 0.5
    misalignment_rate: float = 0.0
    class_separation: float = 1.5
    frames_range: tuple = (20, 60)
    tokens_range: tuple = (3, 15)
    noise_scale: float = 0.5
    seed: int = 0
    audio_feat_dim: int = 32
    text_feat_dim: int = 24

    def __post_init__(self):
        self.frames_range = tuple(int(v) for v in self.frames_range)
        self.tokens_range = tuple(int(v) for v in self.tokens_range)
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")
        for name in ("positive_rate", "misalignment_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.class_separation <= 0:
            raise ValueError(f"class_separation must be > 0, got {self.class_separation}")
        if self.noise_scale < 0:
            raise ValueError(f"noise_scale must be >= 0, got {self.noise_scale}")
        for name, (lo, hi) in (("frames_range", self.frames_range),
                               ("tokens_range", self.tokens_range)):
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.audio_feat_dim < 1 or self.text_feat_dim < 1:
            raise ValueError("feature dims must be >= 1")

    def config_hash(self) -> str:
        payload = canonical_json(self.__dict__ | {
            "frames_range": list(self.frames_range),
            "tokens_range": list(self.tokens_range),
        })
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _unit_direction(rng: Rng, dim: int) -> Array:
    v = rng.normal((dim,))
    return v / max(float(np.linalg.norm(v)), 1e-12)


def generate_synthetic(cfg: GenConfig) -> Dataset:
    """Draw a labeled dataset of text-audio feature pairs.

    Noise has two parts per modality: a per-utterance offset that pooling
    cannot average away (keeps the classes overlapping at utterance level)
    and per-frame jitter. Every sample uses its own named RNG substreams,
    so changing the misalignment rate never perturbs the audio draws.
    """
    root = Rng(cfg.seed, ("synth",))
    dir_audio = _unit_direction(root.split("dir_audio"), cfg.audio_feat_dim)
    dir_text = _unit_direction(root.split("dir_text"), cfg.text_feat_dim)
    half = 0.5 * cfg.class_separation
    ns = cfg.noise_scale
    samples = []
    for i in range(cfg.n_samples):
        r = root.split("sample", i)
        label = 1 if r.split("label").uniform() < cfg.positive_rate else 0

        ra = r.split("audio")
        n_frames = ra.integers(cfg.frames_range[0], cfg.frames_range[1] + 1)
        mean_a = (2 * label - 1) * half * dir_audio
        audio = mean_a + ns * ra.normal((cfg.audio_feat_dim,)) \
            + ns * ra.normal((n_frames, cfg.audio_feat_dim))

        misaligned = False
        text_label = label
        rm = r.split("misalign")
        if rm.uniform() < cfg.misalignment_rate:
            misaligned = True
            text_label = rm.integers(0, 2)

        rt = r.split("text")
        n_tokens = rt.integers(cfg.tokens_range[0], cfg.tokens_range[1] + 1)
        mean_t = (2 * text_label - 1) * half * dir_text
        text = mean_t + ns * rt.normal((cfg.text_feat_dim,)) \
            + ns * rt.normal((n_tokens, cfg.text_feat_dim))

        samples.append(UtterancePair(
            id=f"s{cfg.seed}-{i:06d}",
            audio_frames=audio,
            text_tokens=text,
            label=label,
            misaligned=misaligned,
        ))
    return Dataset(samples, cfg.audio_feat_dim, cfg.text_feat_dim,
                   provenance=f"synthetic:{cfg.config_hash()}")


def _sample_line(s: UtterancePair) -> str:
    obj = {
        "id": s.id,
        "audio": s.audio_frames.tolist(),
        "text": s.text_tokens.tolist(),
        "label": s.label,
        "misaligned": s.misaligned,
    }
    if s.transcript is not None:
        obj["transcript"] = s.transcript
    return canonical_json(obj)


def save_jsonl(ds: Dataset, path: str) -> None:
    atomic_write_text(path, "".join(_sample_line(s) + "\n" for s in ds.samples))


_ALLOWED_KEYS = {"id", "audio", "text", "label", "misaligned", "transcript"}


def _parse_sample(line: str, lineno: int) -> UtterancePair:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"invalid JSON ({e.msg})", line=lineno) from e
    if not isinstance(obj, dict):
        raise DataFormatError("each line must be a JSON object", line=lineno)
    unknown = set(obj) - _ALLOWED_KEYS
    if unknown:
        raise DataFormatError(f"unknown fields {sorted(unknown)}", line=lineno)
    for key in ("id", "audio", "text", "label"):
        if key not in obj:
            raise DataFormatError(f"missing required field {key!r}", line=lineno)
    try:
        return UtterancePair(
            id=str(obj["id"]),
            audio_frames=obj["audio"],
            text_tokens=obj["text"],
            label=obj["label"],
            misaligned=obj.get("misaligned", False),
            transcript=obj.get("transcript"),
        )
    except (ValueError, TypeError) as e:
        raise DataFormatError(str(e), line=lineno) from e


def load_jsonl(path: str) -> Dataset:
    """Load a newline-delimited dataset; failures name the offending line."""
    samples = []
    audio_dim = text_dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            s = _parse_sample(line, lineno)
            if audio_dim is None:
                audio_dim = s.audio_frames.shape[1]
                text_dim = s.text_tokens.shape[1]
            else:
                if s.audio_frames.shape[1] != audio_dim:
                    raise DataFormatError(
                        f"audio feature dim {s.audio_frames.shape[1]} != {audio_dim} "
                        "seen earlier in the file", line=lineno)
                if s.text_tokens.shape[1] != text_dim:
                    raise DataFormatError(
                        f"text feature dim {s.text_tokens.shape[1]} != {text_dim} "
                        "seen earlier in the file", line=lineno)
            samples.append(s)
    if not samples:
        raise DataFormatError("dataset file is empty")
    return Dataset(samples, audio_dim, text_dim,
                   provenance=f"loaded:{os.path.basename(path)}")


def split(ds: Dataset, fractions, seed: int = 0):
    """Stratified (by label) disjoint partition into train/valid/test.

    Fractions must be positive and sum to 1. Per label group the samples
    are shuffled with a seed-derived stream and cut at rounded boundaries,
    so every split keeps roughly the global label ratio.
    """
    f = [float(v) for v in fractions]
    if len(f) != 3 or any(v <= 0 for v in f):
        raise ValueError(f"need three positive fractions, got {fractions}")
    if abs(sum(f) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got sum {sum(f)!r}")
    buckets = ([], [], [])
    for lab in (0, 1):
        idx = [i for i, s in enumerate(ds.samples) if s.label == lab]
        if not idx:
            continue
        perm = Rng(seed, ("split", lab)).permutation(len(idx))
        shuffled = [idx[int(j)] for j in perm]
        b1 = int(round(f[0] * len(idx)))
        b2 = int(round((f[0] + f[1]) * len(idx)))
        buckets[0].extend(shuffled[:b1])
        buckets[1].extend(shuffled[b1:b2])
        buckets[2].extend(shuffled[b2:])
    names = ("train", "valid", "test")
    out = []
    for name, bucket in zip(names, buckets):
        if not bucket:
            raise ValueError(f"{name} split is empty; use larger fractions or more data")
        picked = [ds.samples[i] for i in sorted(bucket)]
        out.append(Dataset(picked, ds.audio_feat_dim, ds.text_feat_dim,
                           provenance=f"{ds.provenance}/{name}"))
    return tuple(out)


def batch_indices(n: int, batch_size: int, rng: Rng | None = None):
    """Index batches covering 0..n-1 exactly once; the tail batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def batch_iter(ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True):
    """Yield lists of samples; every sample appears exactly once per pass."""
    rng = Rng(seed, ("batch",)) if shuffle else None
    for idx in batch_indices(len(ds), batch_size, rng):
        yield [ds.samples[int(i)] for i in idx]
