"""Metric-learning training: work/version batch composition, semi-hard
triplet mining, triplet hinge loss, Adam, and the per-feature training loop.

Mining follows FaceNet semantics: for every ordered anchor-positive pair the
negative is the closest one inside the margin band (d_ap < d_an < d_ap +
margin); if the band is empty, the closest negative beyond d_ap; failing
that, the hardest negative overall.  Ties break toward the lowest batch
index, which keeps runs bit-reproducible.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import fileformats
from .retrieval import embedding_distance_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    margin: float = 0.3
    works_per_batch: int = 16
    versions_per_work: int = 4
    epochs: int = 10
    steps_per_epoch: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.works_per_batch * self.versions_per_work != self.batch_size:
            raise ValueError(
                "works_per_batch * versions_per_work must equal batch_size"
            )
        if self.margin <= 0:
            raise ValueError("margin must be positive")


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def sample_batch(manifest, config: TrainConfig, rng):
    """Draw works_per_batch distinct works, versions_per_work tracks each.

    Works with fewer versions than requested contribute every version once
    and are topped up by sampling with replacement.  Returns a list of
    (track_id, work_id) pairs.
    """
    eligible = {w: tids for w, tids in manifest.works().items() if len(tids) >= 2}
    if len(eligible) < config.works_per_batch:
        raise ValueError(
            f"need {config.works_per_batch} works with >= 2 versions, "
            f"manifest has {len(eligible)}"
        )
    work_ids = sorted(eligible)
    chosen = rng.choice(len(work_ids), size=config.works_per_batch, replace=False)
    batch = []
    for wi in chosen:
        work = work_ids[int(wi)]
        tids = eligible[work]
        if len(tids) >= config.versions_per_work:
            picks = rng.choice(len(tids), size=config.versions_per_work, replace=False)
            picked = [tids[int(i)] for i in picks]
        else:
            picked = list(tids)
            extra = rng.choice(
                len(tids), size=config.versions_per_work - len(tids), replace=True
            )
            picked.extend(tids[int(i)] for i in extra)
        batch.extend((tid, work) for tid in picked)
    return batch


def triplet_loss(d_ap: float, d_an: float, margin: float) -> float:
    """Hinge max(0, d_ap - d_an + margin); zero iff the margin is satisfied."""
    if d_ap < 0 or d_an < 0:
        raise ValueError("distances must be nonnegative")
    return max(0.0, d_ap - d_an + margin)


def mine_semi_hard(embeddings: np.ndarray, works, margin: float):
    """Semi-hard negative per ordered anchor-positive pair.

    Selection ladder per anchor-positive: (1) closest negative inside the
    band (d_ap, d_ap + margin), (2) closest negative beyond d_ap, (3) the
    hardest negative overall.  Ties break toward the lowest index.
    """
    works = np.asarray(works)
    n = len(works)
    if n != embeddings.shape[0]:
        raise ValueError("embeddings and works disagree in length")
    dist = embedding_distance_matrix(embeddings)
    triplets = []
    for a in range(n):
        positives = np.flatnonzero((works == works[a]) & (np.arange(n) != a))
        negatives = np.flatnonzero(works != works[a])
        if positives.size == 0:
            continue
        if negatives.size == 0:
            raise ValueError("batch contains a single work: no negatives to mine")
        d_neg = dist[a, negatives]
        for p in positives:
            d_ap = dist[a, p]
            in_band = (d_neg > d_ap) & (d_neg < d_ap + margin)
            if in_band.any():
                pool = negatives[in_band]
                pick = pool[int(np.argmin(d_neg[in_band]))]
            else:
                beyond = d_neg > d_ap
                if beyond.any():
                    pool = negatives[beyond]
                    pick = pool[int(np.argmin(d_neg[beyond]))]
                else:
                    pick = negatives[int(np.argmin(d_neg))]
            triplets.append(Triplet(anchor=a, positive=int(p), negative=int(pick)))
    return triplets


def adam_step(weights: dict, grads: dict, state: AdamState, lr: float):
    """One Adam update over a dict of arrays; mutates weights and state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(weights[name])
            state.v[name] = np.zeros_like(weights[name])
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        weights[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return weights, state


def batch_loss_and_embedding_grads(embeddings: np.ndarray, works, margin: float):
    """Mean triplet hinge over mined triplets plus d(loss)/d(embedding).

    Returns (mean_loss, grads (batch x dim), active_fraction, n_triplets).
    """
    triplets = mine_semi_hard(embeddings, works, margin)
    grads = np.zeros_like(embeddings)
    if not triplets:
        return 0.0, grads, 0.0, 0
    total = 0.0
    active = 0
    for tr in triplets:
        ea, ep, en = embeddings[tr.anchor], embeddings[tr.positive], embeddings[tr.negative]
        d_ap = float(np.linalg.norm(ea - ep))
        d_an = float(np.linalg.norm(ea - en))
        loss = triplet_loss(d_ap, d_an, margin)
        total += loss
        if loss > 0.0:
            active += 1
            u_ap = (ea - ep) / max(d_ap, 1e-12)
            u_an = (ea - en) / max(d_an, 1e-12)
            grads[tr.anchor] += u_ap - u_an
            grads[tr.positive] -= u_ap
            grads[tr.negative] += u_an
    n = len(triplets)
    return total / n, grads / n, active / n, n


def load_features(manifest, feature_kind: str) -> dict:
    """Read every track's feature matrix for one kind, keyed by track_id."""
    out = {}
    missing = [r.track_id for r in manifest.records if feature_kind not in r.feature_paths]
    if missing:
        raise ValueError(
            f"{len(missing)} track(s) lack the {feature_kind} feature, "
            f"e.g. {missing[:3]}"
        )
    for record in manifest.records:
        values, kind = fileformats.read_feature(record.feature_paths[feature_kind])
        if kind != feature_kind:
            raise ValueError(
                f"{record.feature_paths[feature_kind]}: tagged {kind}, "
                f"expected {feature_kind}"
            )
        out[record.track_id] = values.astype(np.float64)
    return out


def train_feature_model(
    manifest,
    feature_kind: str,
    weights: dict,
    train_config: TrainConfig,
    encoder_config: enc.EncoderConfig,
    out_dir=None,
    features: dict = None,
):
    """Train one feature encoder with semi-hard triplets and Adam.

    Weights are updated in place; per-epoch checkpoints and a CSV loss log
    are written when out_dir is given.  Returns (weights, history) where
    history rows are dicts with epoch, mean_loss and active_fraction.
    """
    if features is None:
        features = load_features(manifest, feature_kind)
    rng = np.random.default_rng(train_config.seed)
    state = AdamState()
    history = []
    out_dir = Path(out_dir) if out_dir is not None else None
    for epoch in range(1, train_config.epochs + 1):
        epoch_losses = []
        epoch_active = []
        for _ in range(train_config.steps_per_epoch):
            batch = sample_batch(manifest, train_config, rng)
            embeddings = np.empty((len(batch), encoder_config.output_dim))
            caches = []
            for i, (tid, _) in enumerate(batch):
                emb, cache = enc.encoder_forward_cached(
                    features[tid], encoder_config, weights, train_mode=True, rng=rng
                )
                embeddings[i] = emb
                caches.append(cache)
            works = [w for _, w in batch]
            mean_loss, emb_grads, active, _ = batch_loss_and_embedding_grads(
                embeddings, works, train_config.margin
            )
            epoch_losses.append(mean_loss)
            epoch_active.append(active)
            if active == 0.0:
                continue
            grads = None
            for i, (tid, _) in enumerate(batch):
                if not emb_grads[i].any():
                    continue
                sample_grads = enc.encoder_backward(
                    features[tid], encoder_config, weights, emb_grads[i], cache=caches[i]
                )
                if grads is None:
                    grads = sample_grads
                else:
                    for name in grads:
                        grads[name] += sample_grads[name]
            adam_step(weights, grads, state, train_config.learning_rate)
        row = {
            "epoch": epoch,
            "mean_loss": float(np.mean(epoch_losses)),
            "active_fraction": float(np.mean(epoch_active)),
        }
        history.append(row)
        log.info(
            "%s epoch %d: loss %.4f, active %.3f",
            feature_kind, epoch, row["mean_loss"], row["active_fraction"],
        )
        if out_dir is not None:
            fileformats.write_checkpoint(
                out_dir / f"{feature_kind}_epoch{epoch:03d}.ckpt", weights
            )
    if out_dir is not None:
        fileformats.write_checkpoint(out_dir / f"{feature_kind}.ckpt", weights)
        with open(out_dir / f"{feature_kind}_train_log.csv", "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "mean_loss", "active_fraction"]
            )
            writer.writeheader()
            writer.writerows(history)
    return weights, history
