"""Channel-wise feature whitening with fixed dataset statistics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted


@dataclass
class ChannelStats:
    """Running per-channel mean and sum of squared deviations.

    Partial statistics merge exactly (Chan et al. pairwise update), so frames
    can be accumulated in any order or in parallel shards.
    """

    channels: int
    mean: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)
    count: int = 0
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.channels)
        if self.m2 is None:
            self.m2 = np.zeros(self.channels)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.m2 = np.asarray(self.m2, dtype=np.float64)

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros(self.channels)
        return np.maximum(self.m2 / self.count, 0.0)

    def merge(self, other: "ChannelStats") -> "ChannelStats":
        if other.channels != self.channels:
            raise ValueError(f"channel mismatch: {self.channels} vs {other.channels}")
        n = self.count + other.count
        if other.count == 0:
            return ChannelStats(self.channels, self.mean.copy(), self.m2.copy(), self.count, self.epsilon)
        if self.count == 0:
            return ChannelStats(self.channels, other.mean.copy(), other.m2.copy(), other.count, self.epsilon)
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / n)
        return ChannelStats(self.channels, mean, m2, n, self.epsilon)

    def to_json(self) -> str:
        return json.dumps({
            "channels": self.channels,
            "mean": self.mean.tolist(),
            "variance": self.variance.tolist(),
            "count": int(self.count),
            "epsilon": self.epsilon,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChannelStats":
        d = json.loads(text)
        mean = np.asarray(d["mean"], dtype=np.float64)
        var = np.asarray(d["variance"], dtype=np.float64)
        if len(mean) != d["channels"] or len(var) != d["channels"]:
            raise ValueError("stats arrays do not match channel count")
        if np.any(var < 0):
            raise ValueError("negative variance in stats file")
        return cls(int(d["channels"]), mean, var * d["count"], int(d["count"]), float(d["epsilon"]))


def map_stats(data: np.ndarray, nonzero_only: bool = False, epsilon: float = 1e-5) -> ChannelStats:
    """Two-pass statistics of one ``D x X x Y`` map."""
    data = np.asarray(data, dtype=np.float64)
    flat = data.reshape(data.shape[0], -1)
    if nonzero_only:
        flat = flat[:, np.any(flat != 0, axis=0)]
    n = flat.shape[1]
    if n == 0:
        return ChannelStats(data.shape[0], epsilon=epsilon)
    mean = flat.mean(axis=1)
    m2 = ((flat - mean[:, None]) ** 2).sum(axis=1)
    return ChannelStats(data.shape[0], mean, m2, n, epsilon)


def accumulate_stats(stats: ChannelStats, data: np.ndarray, nonzero_only: bool = False) -> ChannelStats:
    data = np.asarray(data)
    if data.shape[0] != stats.channels:
        raise ValueError(f"channel mismatch: stats have {stats.channels}, map has {data.shape[0]}")
    return stats.merge(map_stats(data, nonzero_only, stats.epsilon))


def whiten(data: np.ndarray, stats: ChannelStats) -> np.ndarray:
    if stats.count <= 0:
        raise ValueError("statistics are not finalized (count == 0)")
    data = np.asarray(data)
    if data.shape[-3] != stats.channels:
        raise ValueError("channel mismatch between map and stats")
    scale = 1.0 / np.sqrt(stats.variance + stats.epsilon)
    shape = (stats.channels, 1, 1)
    out = (data.astype(np.float64) - stats.mean.reshape(shape)) * scale.reshape(shape)
    return out.astype(data.dtype if data.dtype.kind == "f" else np.float64)


def unwhiten(data: np.ndarray, stats: ChannelStats) -> np.ndarray:
    scale = np.sqrt(stats.variance + stats.epsilon).reshape(-1, 1, 1)
    return np.asarray(data, dtype=np.float64) * scale + stats.mean.reshape(-1, 1, 1)


class FeatureWhitener(TransformerMixin, BaseEstimator):
    """Fixed per-channel standardization of BEV feature maps.

    ``fit`` takes an iterable of ``D x X x Y`` maps (or an ``N x D x X x Y``
    array). There is no learnable scale or bias.
    """

    def __init__(self, epsilon=1e-5, nonzero_only=False):
        self.epsilon = epsilon
        self.nonzero_only = nonzero_only

    def partial_fit(self, X, y=None):
        X = np.asarray(X)
        maps = X[None] if X.ndim == 3 else X
        if maps.ndim != 4:
            raise ValueError("expected D x X x Y or N x D x X x Y input")
        stats = getattr(self, "stats_", None) or ChannelStats(maps.shape[1], epsilon=self.epsilon)
        for m in maps:
            stats = accumulate_stats(stats, m, self.nonzero_only)
        self._set_stats(stats)
        return self

    def fit(self, X, y=None):
        if hasattr(self, "stats_"):
            del self.stats_
        if isinstance(X, np.ndarray):
            return self.partial_fit(X)
        for m in X:
            self.partial_fit(m)
        if not hasattr(self, "stats_"):
            raise ValueError("cannot fit whitening stats on an empty dataset")
        return self

    def _set_stats(self, stats: ChannelStats):
        self.stats_ = stats
        self.mean_ = stats.mean
        self.var_ = stats.variance
        self.n_samples_seen_ = stats.count

    @classmethod
    def from_stats(cls, stats: ChannelStats) -> "FeatureWhitener":
        est = cls(epsilon=stats.epsilon)
        est._set_stats(stats)
        return est

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return whiten(X, self.stats_)

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return unwhiten(X, self.stats_)
