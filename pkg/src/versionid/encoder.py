"""Per-feature convolutional embedding encoders.

Each feature kind (Me, Ha, Rh, Ly) has a fixed five-layer configuration:
stride-1 convolutions (same padding except Ha, which uses valid padding and
time dilations on layers 3 and 5), ReLU, max or mean pooling, and dropout.
The stack feeds a gated temporal attention over frames, then a dense layer
produces an embedding that is L2-normalized onto the unit hypersphere, so
any two embeddings are at most distance 2 apart.

Forward and reverse passes are explicit; `encoder_backward` yields exact
gradients for every weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .fileformats import FEATURE_KINDS

EMBEDDING_DIM = 512
LYRICS_BINS = 28


@dataclass(frozen=True)
class LayerSpec:
    filters: int
    kernel: tuple
    pool: tuple = (1, 1)
    pool_stride: tuple = None
    dropout: float = 0.0
    padding: str = "same"
    dilation: tuple = (1, 1)
    pooling: str = "max"
    kernel_stride: tuple = (1, 1)

    def __post_init__(self):
        if self.pool_stride is None:
            object.__setattr__(self, "pool_stride", self.pool)
        if min(self.filters, *self.kernel, *self.pool, *self.pool_stride) < 1:
            raise ValueError("layer extents must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.kernel_stride != (1, 1):
            raise ValueError("only stride-1 convolutions are supported")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown padding {self.padding!r}")
        if self.pooling not in ("max", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")


@dataclass(frozen=True)
class EncoderConfig:
    feature_kind: str
    layers: tuple
    attention_dim: int = 128
    output_dim: int = EMBEDDING_DIM


def build_encoder_config(feature_kind: str) -> EncoderConfig:
    """The four canonical five-layer configurations, one per feature kind."""
    if feature_kind == "Me":
        layers = tuple(
            LayerSpec(filters=f, kernel=(3, 3), pool=(2, 2), dropout=d)
            for f, d in zip((64, 128, 256, 512, 1024), (0.0, 0.1, 0.1, 0.2, 0.3))
        )
    elif feature_kind == "Ha":
        specs = []
        for i, f in enumerate((256, 256, 256, 512, 512)):
            specs.append(
                LayerSpec(
                    filters=f,
                    kernel=(180, 12) if i == 0 else (5, 1),
                    pool=(1, 12) if i == 0 else (1, 1),
                    pool_stride=(1, 1),
                    dropout=0.0,
                    padding="valid",
                    dilation=(20, 1) if i == 2 else ((13, 1) if i == 4 else (1, 1)),
                )
            )
        layers = tuple(specs)
    elif feature_kind == "Rh":
        layers = tuple(
            LayerSpec(
                filters=f,
                kernel=(3, 20) if i == 0 else (3, 3),
                pool=(1, 2),
                dropout=d,
            )
            for i, (f, d) in enumerate(
                zip((64, 128, 256, 512, 1024), (0.4, 0.3, 0.2, 0.1, 0.0))
            )
        )
    elif feature_kind == "Ly":
        # 1-D along time: the 28 posteriorgram bins enter as channels
        layers = tuple(
            LayerSpec(
                filters=f,
                kernel=(10, 1),
                pool=(5, 1),
                pool_stride=(2, 1),
                dropout=d,
                pooling="mean",
            )
            for f, d in zip((64, 128, 256, 512, 1024), (0.3, 0.2, 0.1, 0.1, 0.0))
        )
    else:
        raise ValueError(f"unknown feature kind {feature_kind!r}")
    return EncoderConfig(feature_kind=feature_kind, layers=layers)


def toy_encoder_config(
    feature_kind: str, output_dim: int = 64, attention_dim: int = 16
) -> EncoderConfig:
    """Small two-layer encoder for desk-scale experiments."""
    layers = (
        LayerSpec(filters=8, kernel=(3, 3), pool=(2, 2)),
        LayerSpec(filters=16, kernel=(3, 3), pool=(2, 2)),
    )
    return EncoderConfig(
        feature_kind=feature_kind,
        layers=layers,
        attention_dim=attention_dim,
        output_dim=output_dim,
    )


def config_to_dict(config: EncoderConfig) -> dict:
    """JSON-friendly form of an encoder config (for checkpoint sidecars)."""
    return {
        "feature_kind": config.feature_kind,
        "attention_dim": config.attention_dim,
        "output_dim": config.output_dim,
        "layers": [
            {
                "filters": l.filters,
                "kernel": list(l.kernel),
                "pool": list(l.pool),
                "pool_stride": list(l.pool_stride),
                "dropout": l.dropout,
                "padding": l.padding,
                "dilation": list(l.dilation),
                "pooling": l.pooling,
            }
            for l in config.layers
        ],
    }


def config_from_dict(data: dict) -> EncoderConfig:
    layers = tuple(
        LayerSpec(
            filters=l["filters"],
            kernel=tuple(l["kernel"]),
            pool=tuple(l["pool"]),
            pool_stride=tuple(l["pool_stride"]),
            dropout=l["dropout"],
            padding=l["padding"],
            dilation=tuple(l["dilation"]),
            pooling=l["pooling"],
        )
        for l in data["layers"]
    )
    return EncoderConfig(
        feature_kind=data["feature_kind"],
        layers=layers,
        attention_dim=data["attention_dim"],
        output_dim=data["output_dim"],
    )


def feature_to_tensor(values: np.ndarray, feature_kind: str) -> np.ndarray:
    """Arrange a time x bins feature for the conv stack.

    Ly keeps time as the only spatial axis with the 28 bins as channels;
    the other kinds are single-channel 2-D images.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError("feature matrix must be 2-D (time x bins)")
    if feature_kind == "Ly":
        if values.shape[1] != LYRICS_BINS:
            raise ValueError(f"Ly feature must have {LYRICS_BINS} bins")
        return values[:, None, :]
    return values[:, :, None]


def conv_output_extent(extent, kernel, padding, dilation):
    if padding == "same":
        return extent
    eff = (kernel - 1) * dilation + 1
    if extent < eff:
        raise ValueError(f"extent {extent} smaller than effective kernel {eff}")
    return extent - eff + 1


def encoder_shapes(config: EncoderConfig, input_shape) -> list:
    """Per-layer (time, freq, channels) output shapes, pre-attention last."""
    t, f, c = input_shape
    shapes = []
    for layer in config.layers:
        t = conv_output_extent(t, layer.kernel[0], layer.padding, layer.dilation[0])
        f = conv_output_extent(f, layer.kernel[1], layer.padding, layer.dilation[1])
        t = nn.pooled_extent(t, layer.pool[0], layer.pool_stride[0])
        f = nn.pooled_extent(f, layer.pool[1], layer.pool_stride[1])
        c = layer.filters
        shapes.append((t, f, c))
    return shapes


def init_encoder_weights(config: EncoderConfig, input_shape, rng) -> dict:
    """He-uniform weights for the conv stack, attention and dense head."""
    weights = {}
    c_in = input_shape[2]
    for i, layer in enumerate(config.layers):
        kt, kf = layer.kernel
        weights[f"conv{i}/w"] = nn.he_uniform(
            (kt, kf, c_in, layer.filters), kt * kf * c_in, rng
        )
        weights[f"conv{i}/b"] = np.zeros(layer.filters)
        c_in = layer.filters
    t, f, c = encoder_shapes(config, input_shape)[-1]
    channels = f * c
    a = config.attention_dim
    weights["attn/w"] = nn.he_uniform((channels, a), channels, rng)
    weights["attn/b"] = np.zeros(a)
    weights["attn/v"] = nn.he_uniform((a,), a, rng)
    weights["attn/u"] = nn.he_uniform((channels, channels), channels, rng)
    weights["attn/c"] = np.zeros(channels)
    weights["dense/w"] = nn.he_uniform((channels, config.output_dim), channels, rng)
    weights["dense/b"] = np.zeros(config.output_dim)
    return weights


def conv2d_forward(x: np.ndarray, layer: LayerSpec, w: np.ndarray, b: np.ndarray):
    """One encoder layer: dilated conv + bias + ReLU + pooling."""
    out, _ = _layer_forward(x, layer, w, b)
    return out


def _layer_forward(x, layer, w, b):
    z, conv_cache = nn.conv2d(x, w, b, padding=layer.padding, dilation=layer.dilation)
    a, relu_mask = nn.relu_forward(z)
    out, pool_cache = nn.pool2d(a, layer.pool, layer.pool_stride, layer.pooling)
    return out, (conv_cache, relu_mask, pool_cache)


def gated_temporal_attention(features: np.ndarray, weights: dict) -> np.ndarray:
    """Attention-pool a (time, channels) matrix to a channel vector."""
    out, _ = nn.attention(
        features,
        weights["attn/w"],
        weights["attn/b"],
        weights["attn/v"],
        weights["attn/u"],
        weights["attn/c"],
    )
    return out


def attention_weights(features: np.ndarray, weights: dict) -> np.ndarray:
    """The softmax frame weights used by the attention pooling."""
    th = np.tanh(features @ weights["attn/w"] + weights["attn/b"])
    return nn.softmax(th @ weights["attn/v"])


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray
    feature_kind: str


def encoder_forward_cached(
    feature_values, config: EncoderConfig, weights: dict, train_mode=False, rng=None
):
    """Forward pass returning (embedding values, cache for the backward)."""
    if train_mode and rng is None:
        rng = np.random.default_rng(0)
    x = feature_to_tensor(feature_values, config.feature_kind)
    layer_caches = []
    for i, layer in enumerate(config.layers):
        x, cache = _layer_forward(x, layer, weights[f"conv{i}/w"], weights[f"conv{i}/b"])
        if train_mode and layer.dropout > 0:
            x, drop_cache = nn.dropout(x, layer.dropout, rng)
        else:
            drop_cache = None
        layer_caches.append((cache, drop_cache))
    t, f, c = x.shape
    frames = x.reshape(t, f * c)
    attended, attn_cache = nn.attention(
        frames,
        weights["attn/w"],
        weights["attn/b"],
        weights["attn/v"],
        weights["attn/u"],
        weights["attn/c"],
    )
    pre_norm, dense_cache = nn.dense(attended, weights["dense/w"], weights["dense/b"])
    emb, norm_cache = nn.l2_normalize(pre_norm)
    cache = (layer_caches, (t, f, c), attn_cache, dense_cache, norm_cache)
    return emb, cache


def encode(
    feature_values,
    config: EncoderConfig,
    weights: dict,
    train_mode: bool = False,
    rng=None,
) -> Embedding:
    """Embed one feature matrix as a unit vector tagged with its kind."""
    emb, _ = encoder_forward_cached(feature_values, config, weights, train_mode, rng)
    return Embedding(values=emb, feature_kind=config.feature_kind)


def encoder_backward(
    feature_values,
    config: EncoderConfig,
    weights: dict,
    upstream_grad: np.ndarray,
    cache=None,
) -> dict:
    """Exact gradients of (upstream_grad . embedding) for every weight."""
    if cache is None:
        _, cache = encoder_forward_cached(feature_values, config, weights)
    layer_caches, (t, f, c), attn_cache, dense_cache, norm_cache = cache
    d = nn.l2_normalize_backward(np.asarray(upstream_grad, dtype=np.float64), norm_cache)
    d, dw_dense, db_dense = nn.dense_backward(d, dense_cache)
    grads = {"dense/w": dw_dense, "dense/b": db_dense}
    d, attn_grads = nn.attention_backward(d, attn_cache)
    for key, val in attn_grads.items():
        grads[f"attn/{key}"] = val
    d = d.reshape(t, f, c)
    for i in range(len(config.layers) - 1, -1, -1):
        (conv_cache, relu_mask, pool_cache), drop_cache = layer_caches[i]
        d = nn.dropout_backward(d, drop_cache)
        d = nn.pool2d_backward(d, pool_cache)
        d = nn.relu_backward(d, relu_mask)
        d, dw, db = nn.conv2d_backward(d, conv_cache)
        grads[f"conv{i}/w"] = dw
        grads[f"conv{i}/b"] = db
    return grads
