"""Positional encoding and the MLPs behind the per-point heads.

The geometry head maps (encoded point, interpolated volume feature) to a
density and a hidden feature vector.  The color and semantic heads both
read that hidden feature; the semantic head additionally sees the encoded
point and view direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ACTIVATIONS = ("relu",)
OUTPUTS = ("none", "sigmoid", "softplus", "softmax")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MlpConfig:
    in_width: int
    hidden: tuple = (64, 64)
    out_width: int = 1
    activation: str = "relu"
    output: str = "none"

    def __post_init__(self):
        widths = (self.in_width, *self.hidden, self.out_width)
        if any(int(w) < 1 for w in widths):
            raise ConfigError(f"all widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.output not in OUTPUTS:
            raise ConfigError(f"unknown output activation {self.output!r}")

    @property
    def widths(self):
        return (self.in_width, *self.hidden, self.out_width)


class Mlp:
    def __init__(self, config, prefix):
        self.config = config
        self.prefix = prefix

    def init(self, store):
        w = self.config.widths
        for i in range(len(w) - 1):
            store.glorot(f"{self.prefix}/w{i}", w[i], w[i + 1])
            store.zeros(f"{self.prefix}/b{i}", (w[i + 1],))
        return store

    def __call__(self, store, x):
        x = ad.as_tensor(x)
        if x.shape[-1] != self.config.in_width:
            raise ConfigError(
                f"{self.prefix}: input width {x.shape[-1]} != {self.config.in_width}")
        n = len(self.config.widths) - 1
        for i in range(n):
            x = x @ store[f"{self.prefix}/w{i}"] + store[f"{self.prefix}/b{i}"]
            if i < n - 1:
                x = ad.relu(x)
        out = self.config.output
        if out == "sigmoid":
            x = ad.sigmoid(x)
        elif out == "softplus":
            x = ad.softplus(x)
        elif out == "softmax":
            x = ad.softmax(x, axis=-1)
        return x


def positional_encode(x, frequencies):
    """[x, sin(2^k x), cos(2^k x) for k < frequencies] along the last axis.

    Works on arrays or tensors; the output width is ``d * (1 + 2F)``.
    """
    if frequencies < 0:
        raise ValueError("frequencies must be >= 0")
    x = ad.as_tensor(x)
    parts = [x]
    for k in range(frequencies):
        scaled = x * float(2.0 ** k)
        parts.append(_sin(scaled))
        parts.append(_cos(scaled))
    return ad.concat(parts, axis=-1) if len(parts) > 1 else x


def encoded_width(width, frequencies):
    return width * (1 + 2 * frequencies)


def _sin(a):
    return ad._node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def _cos(a):
    return ad._node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


@dataclass(frozen=True)
class HeadsConfig:
    feature_width: int = 8
    n_classes: int = 4
    point_freqs: int = 4
    dir_freqs: int = 2
    hidden: tuple = (64, 64)
    hidden_feature: int = 32
    # room-scale coordinates are divided by this before encoding
    point_scale: float = 4.0

    def geometry(self):
        return MlpConfig(encoded_width(3, self.point_freqs) + self.feature_width,
                         tuple(self.hidden), 1 + self.hidden_feature)

    def color(self):
        return MlpConfig(self.hidden_feature + encoded_width(3, self.dir_freqs),
                         tuple(self.hidden[:1]), 3, output="sigmoid")

    def semantic(self):
        return MlpConfig(encoded_width(3, self.point_freqs) + encoded_width(3, self.dir_freqs)
                         + self.hidden_feature, tuple(self.hidden[:1]), self.n_classes)


@dataclass
class Heads:
    """The per-point MLP heads, all under one name prefix."""

    config: HeadsConfig
    prefix: str
    geo: Mlp = field(init=False)
    col: Mlp = field(init=False)
    sem: Mlp = field(init=False)

    def __post_init__(self):
        self.geo = Mlp(self.config.geometry(), f"{self.prefix}/geo")
        self.col = Mlp(self.config.color(), f"{self.prefix}/color")
        self.sem = Mlp(self.config.semantic(), f"{self.prefix}/sem")

    def init(self, store):
        for m in (self.geo, self.col, self.sem):
            m.init(store)
        return store

    def encode_point(self, x):
        return positional_encode(ad.as_tensor(x) * (1.0 / self.config.point_scale),
                                 self.config.point_freqs)

    def encode_dir(self, d):
        return positional_encode(d, self.config.dir_freqs)


def geometry_head(store, heads, x, feature):
    """Density (softplus, per meter) and hidden feature for points ``x``."""
    feature = ad.as_tensor(feature)
    if feature.shape[-1] != heads.config.feature_width:
        raise ConfigError(
            f"feature width {feature.shape[-1]} != {heads.config.feature_width}")
    out = heads.geo(store, ad.concat([heads.encode_point(x), feature], axis=-1))
    sigma = ad.softplus(out[..., 0])
    return sigma, out[..., 1:]


def color_head(store, heads, hidden, d):
    return heads.col(store, ad.concat([ad.as_tensor(hidden), heads.encode_dir(d)], axis=-1))


def semantic_head(store, heads, x, d, hidden):
    """Raw class logits; softmax happens in rendering and the losses."""
    inp = ad.concat([heads.encode_point(x), heads.encode_dir(d), ad.as_tensor(hidden)], axis=-1)
    return heads.sem(store, inp)
