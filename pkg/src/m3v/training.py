"""The optimization loop wiring data, model, and losses together, plus
checkpoint serialization and whole-dataset evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .data import Dataset, batch_indices
from .encoders import pool_sequences
from .fileio import atomic_write_text, canonical_json
from .metrics import EvalReport, accuracy, build_report, eer
from .model import M3VParams, backward, forward, score_matrix
from .numerics import Adam, Rng

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "M3VCKPT"
CHECKPOINT_VERSION = 1

VALID_METRICS = ("accuracy_multi", "eer_multi")


class TrainingError(RuntimeError):
    """Training aborted (e.g. a non-finite loss surfaced a bug)."""


class CheckpointError(ValueError):
    """Checkpoint file cannot be used."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported by this build."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint bytes do not match their recorded digest."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    weight_mode: str = "automatic"
    lam: float = 1.0
    gamma: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0
    temperature: float = 0.07
    symmetric_contrastive: bool = True
    audio_repr_dim: int = 16
    text_repr_dim: int = 12
    contrastive_dim: int = 8
    hidden_dim: int = 32
    patience: int = 5
    valid_metric: str = "accuracy_multi"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.batch_size < 2:
            log.warning("batch_size 1 makes every batch contrastive-degenerate")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("learning_rate and temperature must be positive")
        for name in ("audio_repr_dim", "text_repr_dim", "contrastive_dim",
                     "hidden_dim"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.valid_metric not in VALID_METRICS:
            raise ValueError(f"valid_metric must be one of {VALID_METRICS}")
        # Weight validation happens in LossWeights.
        self.loss_weights()

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(mode=self.weight_mode, lam=self.lam,
                                  gamma=self.gamma, alpha=self.alpha,
                                  beta=self.beta)


@dataclass
class EpochStats:
    """Mean loss breakdown over an epoch's batches plus the validation
    metric tracked for model selection."""

    epoch: int
    l_audio: float
    l_text: float
    l_multi: float
    l_contrastive: float
    l_total: float
    valid_metric: float
    degenerate_batches: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    version: int
    params: M3VParams
    config: dict
    history: list
    rng_state: dict


def pooled_features(ds: Dataset):
    """Mean-pool every sample once; pooling has no trainable parameters so
    this is safe to precompute."""
    pa = pool_sequences([s.audio_frames for s in ds.samples])
    pt = pool_sequences([s.text_tokens for s in ds.samples])
    return pa, pt


def _valid_metric_value(metric: str, params: M3VParams, pooled_a, pooled_t,
                        labels) -> float:
    scores = score_matrix(params, pooled_a, pooled_t)
    if metric == "accuracy_multi":
        return accuracy(scores[:, 3] > 0.5, labels)
    return eer(scores[:, 3], labels)


def _improved(metric: str, value: float, best: float | None) -> bool:
    if best is None:
        return True
    return value > best if metric == "accuracy_multi" else value < best


def train_step(params: M3VParams, pooled_a, pooled_t, labels,
               weights: losses.LossWeights, temperature: float,
               symmetric: bool):
    """One gradient accumulation over a batch. Returns the breakdown and
    whether the batch was contrastive-degenerate (size 1)."""
    params.zero_grad()
    out = forward(pooled_a, pooled_t, params, cache=True)
    l_a, l_t, l_m = losses.view_losses(out, labels)
    degenerate = len(labels) < 2
    if degenerate:
        l_c = 0.0
        dza = np.zeros_like(out.z_audio)
        dzt = np.zeros_like(out.z_text)
    else:
        l_c, dza, dzt = losses.info_nce_grad(out.z_audio, out.z_text,
                                             temperature, symmetric=symmetric)
    breakdown = losses.total_loss(l_a, l_t, l_m, l_c, weights,
                                  scales=params.loss_scales)
    if not np.isfinite(breakdown.l_total):
        raise TrainingError(f"non-finite loss: {breakdown}")
    w = breakdown.effective_weights
    backward(
        params, out,
        w["audio"] * losses.head_logit_grads(out.probs_audio, labels),
        w["text"] * losses.head_logit_grads(out.probs_text, labels),
        w["multi"] * losses.head_logit_grads(out.probs_multi, labels),
        w["contrastive"] * dza,
        w["contrastive"] * dzt,
    )
    if weights.mode == "automatic":
        params.loss_scales_grad += losses.scale_grads(
            breakdown.components(), params.loss_scales)
    return breakdown, degenerate


def train(cfg: TrainConfig, train_ds: Dataset, valid_ds: Dataset) -> Checkpoint:
    """Run the full loop and return the best-validation checkpoint.

    Deterministic given (config, datasets): initialization, shuffling, and
    every update draw from named substreams of the config seed. Early
    stopping fires after `patience` epochs without improvement.
    """
    if (train_ds.audio_feat_dim != valid_ds.audio_feat_dim
            or train_ds.text_feat_dim != valid_ds.text_feat_dim):
        raise ValueError("train and validation feature dims differ")
    rng = Rng(cfg.seed, ("train",))
    params = M3VParams.create(
        train_ds.audio_feat_dim, train_ds.text_feat_dim, rng.split("init"),
        audio_repr_dim=cfg.audio_repr_dim, text_repr_dim=cfg.text_repr_dim,
        contrastive_dim=cfg.contrastive_dim, hidden_dim=cfg.hidden_dim,
        temperature=cfg.temperature)
    weights = cfg.loss_weights()
    optimizer = Adam(params.trainable(), lr=cfg.learning_rate)

    pa, pt = pooled_features(train_ds)
    labels = train_ds.labels()
    pav, ptv = pooled_features(valid_ds)
    labels_v = valid_ds.labels()

    history = []
    best_value = None
    best_params = params.copy()
    epochs_since_best = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(5)
        degenerate = 0
        batches = batch_indices(len(train_ds), cfg.batch_size,
                                rng.split("shuffle", epoch))
        for bi, idx in enumerate(batches):
            try:
                breakdown, degen = train_step(
                    params, pa[idx], pt[idx], labels[idx], weights,
                    cfg.temperature, cfg.symmetric_contrastive)
            except TrainingError as e:
                raise TrainingError(f"epoch {epoch} batch {bi}: {e}") from e
            optimizer.step()
            sums += [breakdown.l_audio, breakdown.l_text, breakdown.l_multi,
                     breakdown.l_contrastive, breakdown.l_total]
            degenerate += int(degen)
        if degenerate:
            log.warning("epoch %d: %d contrastive-degenerate batch(es) of size 1",
                        epoch, degenerate)
        means = sums / len(batches)
        value = _valid_metric_value(cfg.valid_metric, params, pav, ptv, labels_v)
        history.append(EpochStats(epoch, *[float(v) for v in means],
                                  valid_metric=float(value),
                                  degenerate_batches=degenerate))
        if _improved(cfg.valid_metric, value, best_value):
            best_value = value
            best_params = params.copy()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                break

    config = asdict(cfg) | {
        "data_dims": {"audio_feat_dim": train_ds.audio_feat_dim,
                      "text_feat_dim": train_ds.text_feat_dim},
    }
    return Checkpoint(version=CHECKPOINT_VERSION, params=best_params,
                      config=config, history=history, rng_state=rng.state())


def evaluate(ckpt: Checkpoint, ds: Dataset, thresholds=None,
             svm=None) -> EvalReport:
    """Score every sample and assemble the report; policy metrics appear
    when calibration artifacts are supplied."""
    dims = ckpt.config.get("data_dims", {})
    if (dims.get("audio_feat_dim") != ds.audio_feat_dim
            or dims.get("text_feat_dim") != ds.text_feat_dim):
        raise ValueError(
            f"dataset dims ({ds.audio_feat_dim}, {ds.text_feat_dim}) do not match "
            f"checkpoint dims ({dims.get('audio_feat_dim')}, {dims.get('text_feat_dim')})")
    pa, pt = pooled_features(ds)
    scores = score_matrix(ckpt.params, pa, pt)
    labels = ds.labels()
    flags = ds.misaligned_flags()
    misaligned = flags if flags.any() else None

    p1_verdicts = p1_branches = p2_verdicts = None
    if thresholds is not None:
        from .policy import policy1_apply, policy2_apply
        p1_verdicts, p1_branches = policy1_apply(scores, thresholds)
        if svm is not None:
            p2_verdicts = policy2_apply(scores, svm, thresholds.t_fusion)
    return build_report(scores, labels, misaligned=misaligned,
                        policy1_verdicts=p1_verdicts,
                        policy1_branches=p1_branches,
                        policy2_verdicts=p2_verdicts)


def _checkpoint_payload(ckpt: Checkpoint) -> str:
    return canonical_json({
        "config": ckpt.config,
        "history": [h.to_dict() for h in ckpt.history],
        "params": ckpt.params.to_state(),
        "rng_state": ckpt.rng_state,
    })


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Layout: magic+version line, sha256 digest line, canonical JSON body.

    The digest covers the body bytes, so truncation or corruption is
    detected on load; identical checkpoints serialize to identical bytes.
    """
    body = _checkpoint_payload(ckpt)
    digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
    atomic_write_text(path, f"{CHECKPOINT_MAGIC} {ckpt.version}\n"
                            f"sha256 {digest}\n{body}")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    parts = text.split("\n", 2)
    if len(parts) < 3 or not parts[0].startswith(CHECKPOINT_MAGIC + " "):
        raise CheckpointError(f"{path} is not a checkpoint file")
    try:
        version = int(parts[0].split(" ", 1)[1])
    except ValueError as e:
        raise CheckpointError(f"malformed checkpoint header {parts[0]!r}") from e
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    tag, _, digest = parts[1].partition(" ")
    body = parts[2]
    if tag != "sha256" or hashlib.sha256(body.encode("utf-8")).hexdigest() != digest:
        raise CheckpointIntegrityError(f"{path} failed its integrity check")
    payload = json.loads(body)
    return Checkpoint(
        version=version,
        params=M3VParams.from_state(payload["params"]),
        config=payload["config"],
        history=[EpochStats(**h) for h in payload["history"]],
        rng_state=payload["rng_state"],
    )


GRAD_CHECK_COMPONENTS = ("audio", "text", "multi", "contrastive",
                         "total_automatic")


def grad_check_components(audio_feat_dim: int = 32, text_feat_dim: int = 24,
                          batch: int = 8, seed: int = 0, n_probes: int = 60,
                          h: float = 1e-5, cfg: TrainConfig | None = None):
    """Finite-difference check of every loss component's gradients on a
    random batch. Returns [(component, max relative error)]."""
    from .numerics import grad_check

    cfg = cfg or TrainConfig(seed=seed)
    rng = Rng(seed, ("grad_check_data",))
    params = M3VParams.create(
        audio_feat_dim, text_feat_dim, rng.split("init"),
        audio_repr_dim=cfg.audio_repr_dim, text_repr_dim=cfg.text_repr_dim,
        contrastive_dim=cfg.contrastive_dim, hidden_dim=cfg.hidden_dim,
        temperature=cfg.temperature)
    pa = rng.split("audio").normal((batch, audio_feat_dim))
    pt = rng.split("text").normal((batch, text_feat_dim))
    labels = rng.split("labels").integers(0, 2, shape=(batch,))

    component_weights = {
        "audio": losses.LossWeights(mode="fixed", lam=1, gamma=0, alpha=0, beta=0),
        "text": losses.LossWeights(mode="fixed", lam=0, gamma=1, alpha=0, beta=0),
        "multi": losses.LossWeights(mode="fixed", lam=0, gamma=0, alpha=1, beta=0),
        "contrastive": losses.LossWeights(mode="fixed", lam=0, gamma=0, alpha=0, beta=1),
        "total_automatic": losses.LossWeights(mode="automatic"),
    }
    results = []
    for name in GRAD_CHECK_COMPONENTS:
        weights = component_weights[name]

        def loss_fn():
            breakdown, _ = train_step(params, pa, pt, labels, weights,
                                      cfg.temperature, cfg.symmetric_contrastive)
            return breakdown.l_total

        pairs = [(v, g) for _, v, g in params.param_items()]
        results.append((name, grad_check(loss_fn, pairs, n_probes=n_probes,
                                         h=h, seed=seed)))
    return results
