"""Reconstruction, latent and Siamese losses and their composition.

Masked losses are normalised by the number of participating elements, so
their scale does not depend on how large the distractor is. Masks are
``(N, H, W)`` arrays in {0, 1} and broadcast over channels.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["LossWeights", "LossReport", "TrainBatch", "loss_masked_recon", "loss_latent",
           "loss_siamese_recon", "natural_branch_loss", "total_loss", "mse"]


class MaskError(ValueError):
    pass


@dataclass
class LossWeights:
    gamma_q: float = 1.0
    gamma_o: float = 1.0
    omega: float = 1.0
    latent_prequant: bool = False

    def __post_init__(self):
        if min(self.gamma_q, self.gamma_o, self.omega) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    l_q: float
    l_r: float
    l_vq: float
    l_l: float
    l_o: float
    l_s: float
    total: float
    omega: float = 1.0
    gamma_q: float = 1.0
    total_tensor: Tensor = None

    def check(self, rtol=1e-6):
        """Raise if the composition identities do not hold."""
        def close(a, b):
            return abs(a - b) <= rtol * max(abs(a), abs(b), 1e-12)

        if not close(self.total, self.l_vq + self.omega * self.l_s):
            raise AssertionError(f"total {self.total} != l_vq + omega*l_s")
        if not close(self.l_vq, self.l_r + self.gamma_q * self.l_q):
            raise AssertionError(f"l_vq {self.l_vq} != l_r + gamma_q*l_q")

    def row(self):
        return {k: getattr(self, k) for k in ("l_q", "l_r", "l_l", "l_o", "total")}


@dataclass
class TrainBatch:
    """Float NCHW arrays in [0, 1]; masks are (N, H, W)."""

    x_clean: np.ndarray
    x_overlaid: np.ndarray
    mask: np.ndarray
    x_natural: np.ndarray = None
    mask_natural: np.ndarray = None

    @property
    def n_natural(self):
        return 0 if self.x_natural is None else len(self.x_natural)


def _mask(mask, like):
    m = np.asarray(mask)
    if m.dtype != bool:
        if not np.isin(m, (0, 1)).all():
            raise MaskError("mask must be binary (0/1)")
        m = m.astype(bool)
    if m.ndim == like.data.ndim - 1:
        m = m[:, None]
    if m.shape[0] != like.shape[0] or m.shape[-2:] != like.shape[-2:]:
        raise T.ShapeError(f"mask {m.shape} does not match image {like.shape}")
    return np.broadcast_to(m, like.shape)


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _region_mse(target, recon, keep):
    """Mean squared error over elements where ``keep`` is True (0 when empty)."""
    if target.shape != recon.shape:
        raise T.ShapeError(f"image {target.shape} vs reconstruction {recon.shape}")
    count = int(keep.sum())
    diff = T.masked(recon - target, keep)
    if count == 0:
        return T.mul(T.squared_sum(diff), 0.0)
    return T.mul(T.squared_sum(diff), 1.0 / count)


def mse(target, recon):
    target = _as_tensor(target, recon)
    return _region_mse(target, recon, np.ones(recon.shape, bool))


def loss_masked_recon(x_overlaid, recon, mask):
    """Squared error outside the distractor mask, averaged over unmasked elements."""
    x = _as_tensor(x_overlaid, recon)
    return _region_mse(x, recon, ~_mask(mask, recon))


def loss_siamese_recon(x_clean, recon_overlaid, mask):
    """Squared error between the clean image and the overlaid arm's output, inside the mask."""
    x = _as_tensor(x_clean, recon_overlaid)
    return _region_mse(x, recon_overlaid, _mask(mask, recon_overlaid))


def natural_branch_loss(x_natural, mask, recon):
    return loss_masked_recon(x_natural, recon, mask)


def _latent_tensor(lat, prequant):
    if not prequant:
        return lat.e_concat
    return T.concat([lat.z_bottom, T.upsample2x(lat.z_top)], axis=1)


def loss_latent(lat_clean, lat_overlaid, prequant=False):
    """Element-mean absolute difference between the two arms' latents."""
    a = _latent_tensor(lat_clean, prequant)
    b = _latent_tensor(lat_overlaid, prequant)
    if a.shape != b.shape:
        raise T.ShapeError(f"latent shapes differ: {a.shape} vs {b.shape}")
    return T.mean(T.abs(b - a))


def total_loss(out, batch, weights, blind=True):
    """Compose every term for one batch.

    The reconstruction term averages, per decoded image, the overlaid arm's
    masked loss, the clean arm's plain loss and the natural images' masked
    loss. With ``blind=False`` masks are ignored and every reconstruction is
    plain (the non-blind baseline); the Siamese terms are still reported.
    """
    m = batch.x_clean.shape[0]
    k = batch.n_natural
    mask = batch.mask if blind else np.zeros_like(batch.mask, dtype=bool)
    l_ro = loss_masked_recon(batch.x_overlaid, out.recon_overlaid, mask)
    l_rc = mse(batch.x_clean, out.recon_clean)
    l_r = T.mul(l_ro, float(m)) + T.mul(l_rc, float(m))
    if k:
        nat_mask = batch.mask_natural if blind else np.zeros_like(batch.mask_natural, dtype=bool)
        l_r = l_r + T.mul(natural_branch_loss(batch.x_natural, nat_mask, out.recon_natural), float(k))
    l_r = T.mul(l_r, 1.0 / (2 * m + k))
    l_q = out.stacked.commit_loss
    l_vq = l_r + T.mul(l_q, weights.gamma_q)
    l_l = loss_latent(out.latent_clean, out.latent_overlaid, weights.latent_prequant)
    l_o = loss_siamese_recon(batch.x_clean, out.recon_overlaid, batch.mask)
    l_s = l_l + T.mul(l_o, weights.gamma_o)
    total = l_vq + T.mul(l_s, weights.omega) if weights.omega else l_vq + T.mul(T.stop_gradient(l_s), 0.0)
    return LossReport(
        l_q=l_q.item(), l_r=l_r.item(), l_vq=l_vq.item(), l_l=l_l.item(), l_o=l_o.item(),
        l_s=l_s.item(), total=total.item(), omega=weights.omega, gamma_q=weights.gamma_q,
        total_tensor=total,
    )
