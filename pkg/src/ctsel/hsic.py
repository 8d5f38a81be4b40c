"""Hilbert-Schmidt independence criterion with Gaussian kernels.

Used as the balancing regularizer between assigned treatments and the
encoder representation of patient history: the biased V-statistic
HSIC = (1/n^2) trace(K H L H) vanishes iff the two sample sets look
independent under the (characteristic) Gaussian kernel. The estimator
is built on the autodiff tape so it can be minimized during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

_BANDWIDTH_FLOOR = 1e-6


@dataclass(frozen=True)
class HsicConfig:
    """Kernel bandwidths for the two arguments; None means median heuristic."""
    bandwidth_u: float | None = None
    bandwidth_v: float | None = None

    def __post_init__(self):
        for bw in (self.bandwidth_u, self.bandwidth_v):
            if bw is not None and bw <= 0:
                raise ValueError("bandwidths must be positive")


def _as_matrix(samples) -> np.ndarray:
    """Coerce (n,) or (n, d) samples to an (n, d) float matrix."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"samples must be (n,) or (n, d), got shape {x.shape}")
    return x


def median_bandwidth(samples: np.ndarray) -> float:
    """Median of pairwise squared distances, floored for constant input."""
    x = _as_matrix(samples)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    off = d2[~np.eye(len(x), dtype=bool)]
    return max(float(np.median(off)), _BANDWIDTH_FLOOR)


def _gaussian_gram(x: ad.Tensor, bandwidth: float) -> ad.Tensor:
    """Gram matrix exp(-||x_i - x_j||^2 / bandwidth), differentiable in x."""
    sq = ad.matmul(ad.square(x), ad.constant(np.ones((x.shape[1], 1))))  # (n,1) row norms
    d2 = ad.sub(ad.add(sq, ad.transpose(sq)), ad.scale(ad.matmul(x, ad.transpose(x)), 2.0))
    return ad.exp(ad.scale(d2, -1.0 / bandwidth))


def hsic(samples_u, samples_v, config: HsicConfig | None = None) -> ad.Tensor:
    """Biased V-statistic HSIC estimate between two aligned sample sets.

    Accepts (n, d) arrays or tape tensors; returns a scalar tape tensor
    (use .data for the value). Bandwidths from the config, or the median
    heuristic computed from the current values and treated as constant.
    """
    config = config or HsicConfig()
    u = samples_u if isinstance(samples_u, ad.Tensor) else ad.constant(_as_matrix(samples_u))
    v = samples_v if isinstance(samples_v, ad.Tensor) else ad.constant(_as_matrix(samples_v))
    n = u.shape[0]
    if n < 4:
        raise ValueError(f"HSIC needs at least 4 samples, got {n}")
    if v.shape[0] != n:
        raise ValueError(f"sample counts differ: {n} vs {v.shape[0]}")
    bw_u = config.bandwidth_u if config.bandwidth_u is not None else median_bandwidth(u.data)
    bw_v = config.bandwidth_v if config.bandwidth_v is not None else median_bandwidth(v.data)
    k = _gaussian_gram(u, bw_u)
    l = _gaussian_gram(v, bw_v)
    h = ad.constant(np.eye(n) - np.full((n, n), 1.0 / n))
    kc = ad.matmul(ad.matmul(h, k), h)
    return ad.scale(ad.total(ad.mul(kc, l)), 1.0 / n ** 2)


def hsic_value(samples_u, samples_v, config: HsicConfig | None = None) -> float:
    """Plain-number HSIC for measurement (no gradient tracking)."""
    return float(hsic(np.asarray(samples_u), np.asarray(samples_v), config).data)


def permutation_quantile(samples_u, samples_v, quantile: float, n_permutations: int,
                         rng: np.random.Generator, config: HsicConfig | None = None) -> float:
    """Quantile of the permutation null: HSIC after shuffling v's rows."""
    v = _as_matrix(samples_v)
    stats = np.empty(n_permutations)
    for i in range(n_permutations):
        stats[i] = hsic_value(samples_u, v[rng.permutation(len(v))], config)
    return float(np.quantile(stats, quantile))
