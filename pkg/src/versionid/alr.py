"""Lyrics recognition pipeline: convolutional acoustic model over 40-band mel
input, CTC loss with exact gradients, greedy decoding and character error
rate.

The model emits a posteriorgram: per-frame log-probabilities over 28 symbols
(letters a..z, space, and the CTC blank in the last slot).  The CTC loss is
the forward algorithm over the blank-extended label sequence computed in log
space; its gradient with respect to pre-softmax logits comes from
forward-backward occupancies.  A path-enumeration oracle is included for
small instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn

ALPHABET = "abcdefghijklmnopqrstuvwxyz "
BLANK = 27
N_SYMBOLS = 28
NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """Target cannot be emitted in the available number of frames."""


@dataclass(frozen=True)
class Posteriorgram:
    """frames x 28 log-probability matrix; rows normalize to 1."""

    log_probs: np.ndarray
    frame_hop_s: float = 0.04


def encode_text(text: str) -> np.ndarray:
    """Map a string over a..z and space to label indices (no blanks)."""
    try:
        return np.array([ALPHABET.index(ch) for ch in text], dtype=np.intp)
    except ValueError:
        raise ValueError(f"text contains symbols outside a-z/space: {text!r}") from None


def decode_labels(indices) -> str:
    return "".join(ALPHABET[i] for i in indices)


def _check_labels(target) -> np.ndarray:
    target = np.asarray(target, dtype=np.intp)
    if target.ndim != 1:
        raise ValueError("target must be a 1-D index sequence")
    if target.size and (target.min() < 0 or target.max() >= BLANK):
        raise ValueError("target indices must lie in 0..26 (no blanks)")
    return target


def min_frames_for(target) -> int:
    """Shortest posteriorgram that can emit the target."""
    target = _check_labels(target)
    repeats = int(np.sum(target[1:] == target[:-1])) if target.size > 1 else 0
    return int(target.size + repeats)


def _extended_labels(target):
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.intp)
    ext[1::2] = target
    return ext


def _log_matmul_step(prev, allow_skip, log_emit):
    # prev: (S,) log alpha at t-1; transitions: stay, from s-1, from s-2 where
    # allowed (label differs from the one two back and is not blank).
    S = prev.shape[0]
    stacked = np.full((3, S), NEG_INF)
    stacked[0] = prev
    stacked[1, 1:] = prev[:-1]
    stacked[2, 2:] = np.where(allow_skip[2:], prev[:-2], NEG_INF)
    m = stacked.max(axis=0)
    safe = m > NEG_INF
    out = np.full(S, NEG_INF)
    out[safe] = m[safe] + np.log(
        np.exp(stacked[:, safe] - m[safe]).sum(axis=0)
    )
    return out + log_emit


def _forward_table(log_probs, ext):
    T = log_probs.shape[0]
    S = ext.shape[0]
    allow_skip = np.zeros(S, dtype=bool)
    allow_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        alpha[t] = _log_matmul_step(alpha[t - 1], allow_skip, log_probs[t, ext])
    return alpha, allow_skip


def _backward_table(log_probs, ext, allow_skip):
    T = log_probs.shape[0]
    S = ext.shape[0]
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = log_probs[T - 1, ext[S - 1]]
    if S > 1:
        beta[T - 1, S - 2] = log_probs[T - 1, ext[S - 2]]
    # mirrored transitions: stay, to s+1, to s+2 where the skip is allowed
    for t in range(T - 2, -1, -1):
        prev = beta[t + 1]
        stacked = np.full((3, S), NEG_INF)
        stacked[0] = prev
        stacked[1, :-1] = prev[1:]
        stacked[2, :-2] = np.where(allow_skip[2:], prev[2:], NEG_INF)
        m = stacked.max(axis=0)
        safe = m > NEG_INF
        out = np.full(S, NEG_INF)
        out[safe] = m[safe] + np.log(np.exp(stacked[:, safe] - m[safe]).sum(axis=0))
        beta[t] = out + log_probs[t, ext]
    return beta


def _log_prob_of_target(log_probs, target):
    target = _check_labels(target)
    T = log_probs.shape[0]
    if log_probs.ndim != 2 or log_probs.shape[1] != N_SYMBOLS:
        raise ValueError(f"log_probs must be frames x {N_SYMBOLS}")
    need = min_frames_for(target)
    if T < need:
        raise InfeasibleTargetError(
            f"target needs at least {need} frames, posteriorgram has {T}"
        )
    ext = _extended_labels(target)
    alpha, allow_skip = _forward_table(log_probs, ext)
    S = ext.shape[0]
    tail = alpha[T - 1, S - 1]
    if S > 1:
        tail = np.logaddexp(tail, alpha[T - 1, S - 2])
    return tail, ext, alpha, allow_skip


def ctc_loss(log_probs: np.ndarray, target) -> float:
    """-log P(target | log_probs) via the log-space forward algorithm."""
    log_p, _, _, _ = _log_prob_of_target(np.asarray(log_probs, dtype=np.float64), target)
    if log_p == NEG_INF:
        raise ValueError("target has zero probability under the posteriorgram")
    return float(-log_p)


def ctc_gradient(log_probs: np.ndarray, target) -> np.ndarray:
    """Gradient of ctc_loss w.r.t. pre-softmax logits (frames x 28).

    grad[t, k] = softmax(logits)[t, k] - occupancy(t, k) / P(target), where
    the occupancy comes from forward-backward over the extended labels.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    log_p, ext, alpha, allow_skip = _log_prob_of_target(log_probs, target)
    if log_p == NEG_INF:
        raise ValueError("target has zero probability under the posteriorgram")
    beta = _backward_table(log_probs, ext, allow_skip)
    T = log_probs.shape[0]
    # gamma(t, s) = alpha * beta / emission, so that sum_s gamma(t, s) = P
    log_gamma = alpha + beta - log_probs[:, ext]
    grad = np.exp(log_probs)  # softmax of the (normalized) logits
    occ = np.zeros((T, N_SYMBOLS))
    with np.errstate(invalid="ignore"):
        gamma = np.exp(log_gamma - log_p)
    gamma = np.nan_to_num(gamma, nan=0.0, posinf=0.0, neginf=0.0)
    for s, lab in enumerate(ext):
        occ[:, int(lab)] += gamma[:, s]
    return grad - occ


def _collapse(path, blank=BLANK):
    """Definitional CTC collapse: merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return tuple(out)


def ctc_brute_force(probs: np.ndarray, target) -> float:
    """Sum of path probabilities whose collapse equals the target.

    Test oracle: depth-first enumeration over frame-wise symbol choices,
    pruning branches whose collapsed prefix cannot extend to the target.
    Only practical for a handful of frames.
    """
    probs = np.asarray(probs, dtype=np.float64)
    target = tuple(int(i) for i in _check_labels(target))
    T = probs.shape[0]

    def walk(t, collapsed_len, last, p):
        if t == T:
            return p if collapsed_len == len(target) else 0.0
        total = 0.0
        for s in range(N_SYMBOLS):
            if s == BLANK or s == last:
                new_len = collapsed_len
            elif collapsed_len < len(target) and target[collapsed_len] == s:
                new_len = collapsed_len + 1
            else:
                continue
            if new_len + (T - t - 1) < len(target):
                # cannot place the remaining labels in the remaining frames
                continue
            total += walk(t + 1, new_len, s, p * probs[t, s])
        return total

    return walk(0, 0, -1, 1.0)


def greedy_decode(log_probs: np.ndarray) -> str:
    """Best-path decoding: per-frame argmax, collapse repeats, drop blanks."""
    path = np.argmax(np.asarray(log_probs), axis=1)
    return decode_labels(_collapse(path))


def character_error_rate(hypothesis: str, reference: str) -> float:
    """Levenshtein(hypothesis, reference) / len(reference)."""
    if not reference:
        raise ValueError("reference must be nonempty")
    m, n = len(hypothesis), len(reference)
    prev = np.arange(n + 1)
    for i in range(1, m + 1):
        cur = np.empty(n + 1, dtype=np.intp)
        cur[0] = i
        for j in range(1, n + 1):
            cost = 0 if hypothesis[i - 1] == reference[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return float(prev[n]) / n


# -----------------------------------------------------------------------
# acoustic model
# -----------------------------------------------------------------------


@dataclass(frozen=True)
class AlrLayer:
    filters: int
    kernel: tuple = (3, 3)
    pool: tuple = (1, 2)
    dropout: float = 0.3


@dataclass(frozen=True)
class AlrModelConfig:
    layers: tuple = ()
    n_mels: int = 40


def default_alr_config() -> AlrModelConfig:
    """Canonical 8-layer model: 64 filters doubled up to 512, 3x3 kernels,
    2x2 pooling on the first two layers then 1x2, dropout 0.3."""
    filters = [min(64 * 2**i, 512) for i in range(8)]
    layers = tuple(
        AlrLayer(
            filters=f,
            kernel=(3, 3),
            pool=(2, 2) if i < 2 else (1, 2),
            dropout=0.3,
        )
        for i, f in enumerate(filters)
    )
    cfg = AlrModelConfig(layers=layers, n_mels=40)
    assert len(cfg.layers) == 8 and cfg.layers[0].filters == 64
    assert max(l.filters for l in cfg.layers) == 512
    return cfg


def init_alr_weights(config: AlrModelConfig, rng) -> dict:
    """He-uniform conv weights plus the 1x1 output head (28 channels)."""
    weights = {}
    cin = 1
    for i, layer in enumerate(config.layers):
        kt, kf = layer.kernel
        fan_in = kt * kf * cin
        weights[f"conv{i}/w"] = nn.he_uniform(
            (kt, kf, cin, layer.filters), fan_in, rng
        )
        weights[f"conv{i}/b"] = np.zeros(layer.filters)
        cin = layer.filters
    weights["head/w"] = nn.he_uniform((1, 1, cin, N_SYMBOLS), cin, rng)
    weights["head/b"] = np.zeros(N_SYMBOLS)
    return weights


def alr_forward(
    mel_values: np.ndarray,
    config: AlrModelConfig,
    weights: dict,
    train_mode: bool = False,
    rng=None,
    frame_hop_s: float = 0.01,
):
    """Run the acoustic model on a frames x n_mels matrix.

    Returns a Posteriorgram whose frame count is the input count divided by
    the total time pooling (4 for the canonical config).
    """
    post, _ = _alr_forward_cached(mel_values, config, weights, train_mode, rng)
    total_time_pool = 1
    for layer in config.layers:
        total_time_pool *= layer.pool[0]
    return Posteriorgram(log_probs=post, frame_hop_s=frame_hop_s * total_time_pool)


def _alr_forward_cached(mel_values, config, weights, train_mode=False, rng=None):
    mel_values = np.asarray(mel_values, dtype=np.float64)
    if mel_values.ndim != 2 or mel_values.shape[1] != config.n_mels:
        raise ValueError(
            f"expected frames x {config.n_mels} mel input, got {mel_values.shape}"
        )
    if train_mode and rng is None:
        rng = np.random.default_rng(0)
    x = mel_values[:, :, None]
    caches = []
    for i, layer in enumerate(config.layers):
        z, conv_cache = nn.conv2d(x, weights[f"conv{i}/w"], weights[f"conv{i}/b"])
        a, relu_mask = nn.relu_forward(z)
        p, pool_cache = nn.pool2d(a, layer.pool, layer.pool, "max")
        if train_mode and layer.dropout > 0:
            x, drop_cache = nn.dropout(p, layer.dropout, rng)
        else:
            x, drop_cache = p, None
        caches.append((conv_cache, relu_mask, pool_cache, drop_cache))
    # collapse the remaining frequency axis, then project to 28 symbols
    freq_pool = (1, x.shape[1])
    pooled, head_pool_cache = nn.pool2d(x, freq_pool, freq_pool, "max")
    logits3, head_cache = nn.conv2d(pooled, weights["head/w"], weights["head/b"])
    logits = logits3[:, 0, :]
    log_probs = nn.log_softmax(logits, axis=1)
    cache = (caches, head_pool_cache, head_cache, log_probs)
    return log_probs, cache


def _alr_backward(dlogits, config, cache):
    """Backprop from d loss / d logits to all conv weights."""
    caches, head_pool_cache, head_cache, _ = cache
    grads = {}
    dx, dw, db = nn.conv2d_backward(dlogits[:, None, :], head_cache)
    grads["head/w"] = dw
    grads["head/b"] = db
    dx = nn.pool2d_backward(dx, head_pool_cache)
    for i in range(len(config.layers) - 1, -1, -1):
        conv_cache, relu_mask, pool_cache, drop_cache = caches[i]
        dx = nn.dropout_backward(dx, drop_cache)
        dx = nn.pool2d_backward(dx, pool_cache)
        dx = nn.relu_backward(dx, relu_mask)
        dx, dw, db = nn.conv2d_backward(dx, conv_cache)
        grads[f"conv{i}/w"] = dw
        grads[f"conv{i}/b"] = db
    return grads


def alr_loss_and_gradients(mel_values, target, config, weights, train_mode=True, rng=None):
    """CTC loss of one (mel, text) pair plus gradients for every weight."""
    log_probs, cache = _alr_forward_cached(mel_values, config, weights, train_mode, rng)
    loss = ctc_loss(log_probs, target)
    dlogits = ctc_gradient(log_probs, target)
    grads = _alr_backward(dlogits, config, cache)
    return loss, grads, log_probs
