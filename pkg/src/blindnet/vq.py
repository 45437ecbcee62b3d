"""Vector quantisation with an EMA-maintained codebook.

The codebook never receives gradients. Encoder outputs are snapped to their
nearest code, gradients pass straight through to the encoder, a commitment
term pulls the encoder toward its codes, and the codes themselves track the
running mean of the vectors assigned to them.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["Codebook", "QuantizeResult", "quantize", "straight_through", "ema_update",
           "reinit_dead_codes", "nearest_codes"]


class Codebook:
    """K x D embedding table plus EMA cluster statistics.

    ``ema_cluster_size`` starts at one and ``ema_embed_sum`` at the initial
    embeddings, so ``embeddings == ema_embed_sum / smoothed_size`` holds from
    the first step.
    """

    def __init__(self, num_codes, dim, beta=0.25, decay=0.99, laplace_eps=1e-5,
                 rng=None, dtype=np.float32, embeddings=None):
        if num_codes < 2 or dim < 1:
            raise ValueError(f"codebook needs K >= 2 and D >= 1, got K={num_codes}, D={dim}")
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must lie in [0, 1)")
        self.beta = float(beta)
        self.decay = float(decay)
        self.laplace_eps = float(laplace_eps)
        if embeddings is None:
            rng = np.random.default_rng() if rng is None else rng
            embeddings = rng.uniform(-1.0 / num_codes, 1.0 / num_codes, size=(num_codes, dim))
        self.embeddings = np.array(embeddings, dtype=dtype)
        self.ema_cluster_size = np.ones(num_codes, dtype=dtype)
        self.ema_embed_sum = self.embeddings.copy()

    @property
    def num_codes(self):
        return self.embeddings.shape[0]

    @property
    def dim(self):
        return self.embeddings.shape[1]

    def copy(self):
        cb = Codebook.__new__(Codebook)
        cb.beta, cb.decay, cb.laplace_eps = self.beta, self.decay, self.laplace_eps
        cb.embeddings = self.embeddings.copy()
        cb.ema_cluster_size = self.ema_cluster_size.copy()
        cb.ema_embed_sum = self.ema_embed_sum.copy()
        return cb

    def state_arrays(self):
        return {"embeddings": self.embeddings, "ema_cluster_size": self.ema_cluster_size,
                "ema_embed_sum": self.ema_embed_sum}


@dataclass
class QuantizeResult:
    quantized: Tensor
    indices: np.ndarray
    commit_loss: Tensor


def _flatten(zd):
    """(N, D, H, W) -> (N*H*W, D)."""
    n, d, h, w = zd.shape
    return zd.transpose(0, 2, 3, 1).reshape(-1, d)


def nearest_codes(flat, embeddings):
    """Index of the nearest row of ``embeddings`` for every row of ``flat``.

    Ties go to the lowest index.
    """
    dist = (
        (flat * flat).sum(axis=1, keepdims=True)
        - 2.0 * flat @ embeddings.T
        + (embeddings * embeddings).sum(axis=1)[None, :]
    )
    return np.argmin(dist, axis=1)


def quantize(z, cb):
    if cb.num_codes == 0:
        raise ValueError("empty codebook")
    if z.data.ndim != 4 or z.shape[1] != cb.dim:
        raise T.ShapeError(f"quantize: channel axis of {z.shape} must equal codebook dim {cb.dim}")
    n, d, h, w = z.shape
    emb = cb.embeddings.astype(z.dtype, copy=False)
    idx = nearest_codes(_flatten(z.data), emb)
    q = emb[idx].reshape(n, h, w, d).transpose(0, 3, 1, 2)
    q = Tensor(np.ascontiguousarray(q))
    commit = cb.beta * T.mean(T.square(z - T.stop_gradient(q)))
    return QuantizeResult(quantized=q, indices=idx.reshape(n, h, w), commit_loss=commit)


def straight_through(z, quantized):
    """Forward: ``quantized``. Backward: identity into ``z``; nothing into the codebook."""
    if z.shape != quantized.shape:
        raise T.ShapeError(f"straight_through: {z.shape} vs {quantized.shape}")
    return T._make(quantized.data.copy(), (z,), lambda g: (g,), "straight_through")


def ema_update(cb, z, indices):
    """One EMA step of the cluster statistics; returns the per-code batch counts."""
    zd = z.data if isinstance(z, Tensor) else np.asarray(z)
    flat = _flatten(zd).astype(cb.embeddings.dtype, copy=False)
    idx = np.asarray(indices).reshape(-1)
    k = cb.num_codes
    counts = np.bincount(idx, minlength=k).astype(cb.embeddings.dtype)
    sums = np.zeros_like(cb.embeddings)
    np.add.at(sums, idx, flat)
    a = cb.decay
    cb.ema_cluster_size = a * cb.ema_cluster_size + (1 - a) * counts
    cb.ema_embed_sum = a * cb.ema_embed_sum + (1 - a) * sums
    total = cb.ema_cluster_size.sum()
    smoothed = (cb.ema_cluster_size + cb.laplace_eps) / (total + k * cb.laplace_eps) * total
    cb.embeddings = (cb.ema_embed_sum / smoothed[:, None]).astype(cb.embeddings.dtype)
    return counts


def reinit_dead_codes(cb, z, threshold, rng):
    """Move codes whose EMA size fell below ``threshold`` onto random encoder vectors.

    Returns the indices of the codes that were replaced.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    dead = np.flatnonzero(cb.ema_cluster_size < threshold)
    if dead.size == 0:
        return dead
    zd = z.data if isinstance(z, Tensor) else np.asarray(z)
    flat = _flatten(zd)
    rows = flat[rng.integers(0, flat.shape[0], size=dead.size)]
    cb.embeddings[dead] = rows
    cb.ema_embed_sum[dead] = rows
    cb.ema_cluster_size[dead] = 1.0
    return dead
