"""Two-level hierarchical VQ autoencoder and its Siamese (shared-weight) pairing.

The bottom encoder downsamples by 4, the top encoder reads bottom features and
downsamples by 2 more. Each level is quantised by its own codebook; the top
codes are upsampled to bottom resolution and concatenated channel-wise, and the
decoder sees only that concatenation.
"""
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .vq import Codebook, quantize, straight_through

__all__ = ["BlindNetConfig", "HierLatent", "SiameseOutput", "BlindNet"]


@dataclass
class BlindNetConfig:
    in_channels: int = 3
    base_channels: int = 32
    bottom_codes: int = 128
    bottom_dim: int = 32
    top_codes: int = 64
    top_dim: int = 32
    res_blocks: int = 2
    image_size: int = 48
    beta: float = 0.25
    decay: float = 0.99
    laplace_eps: float = 1e-5
    # unit-norm encoder outputs: the latent scale cannot shrink to game an L1 latent loss
    unit_latents: bool = False

    DOWNSAMPLE = 8

    def validate(self):
        if self.image_size % self.DOWNSAMPLE:
            raise ValueError(
                f"image_size {self.image_size} must be divisible by {self.DOWNSAMPLE} "
                "(bottom x4, top x2 downsampling)"
            )
        for name in ("in_channels", "base_channels", "bottom_dim", "top_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.res_blocks < 0:
            raise ValueError("res_blocks must be >= 0")


@dataclass
class HierLatent:
    e_top: Tensor
    e_bottom: Tensor
    e_concat: Tensor
    indices_top: np.ndarray
    indices_bottom: np.ndarray
    z_top: Tensor = None
    z_bottom: Tensor = None
    commit_loss: Tensor = None
    param_ids: frozenset = field(default_factory=frozenset)


@dataclass
class SiameseOutput:
    latent_clean: HierLatent
    latent_overlaid: HierLatent
    recon_clean: Tensor
    recon_overlaid: Tensor
    stacked: HierLatent = None
    recon_natural: Tensor = None


def _slice_latent(lat, sl):
    return HierLatent(
        e_top=T.take(lat.e_top, sl, 0),
        e_bottom=T.take(lat.e_bottom, sl, 0),
        e_concat=T.take(lat.e_concat, sl, 0),
        indices_top=lat.indices_top[sl],
        indices_bottom=lat.indices_bottom[sl],
        z_top=T.take(lat.z_top, sl, 0),
        z_bottom=T.take(lat.z_bottom, sl, 0),
        param_ids=lat.param_ids,
    )


class BlindNet:
    """Parameters live in one dict; both Siamese arms read that same dict."""

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or BlindNetConfig()
        self.config.validate()
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.params = self._init_params(rng)
        cfg = self.config
        self.codebooks = {
            "bottom": Codebook(cfg.bottom_codes, cfg.bottom_dim, cfg.beta, cfg.decay,
                               cfg.laplace_eps, rng=rng, dtype=dtype),
            "top": Codebook(cfg.top_codes, cfg.top_dim, cfg.beta, cfg.decay,
                            cfg.laplace_eps, rng=rng, dtype=dtype),
        }

    # -- parameters ---------------------------------------------------------

    def _init_params(self, rng):
        cfg = self.config
        c = cfg.base_channels
        p = {}

        def conv(name, cin, cout, k):
            std = np.sqrt(2.0 / (cin * k * k))
            p[name + ".w"] = Tensor(rng.normal(0, std, (cout, cin, k, k)).astype(self.dtype), True, name)
            p[name + ".b"] = Tensor(np.zeros(cout, self.dtype), True, name)

        def convt(name, cin, cout, k):
            std = np.sqrt(2.0 / (cin * k * k / 4))
            p[name + ".w"] = Tensor(rng.normal(0, std, (cin, cout, k, k)).astype(self.dtype), True, name)
            p[name + ".b"] = Tensor(np.zeros(cout, self.dtype), True, name)

        def res(prefix):
            for i in range(cfg.res_blocks):
                conv(f"{prefix}.res{i}.a", c, c, 3)
                conv(f"{prefix}.res{i}.b", c, c, 1)

        conv("enc_b.0", cfg.in_channels, c, 4)
        conv("enc_b.1", c, c, 4)
        conv("enc_b.2", c, c, 3)
        res("enc_b")
        conv("pre_b", c, cfg.bottom_dim, 1)
        conv("enc_t.0", c, c, 4)
        conv("enc_t.1", c, c, 3)
        res("enc_t")
        conv("pre_t", c, cfg.top_dim, 1)
        conv("dec.0", cfg.bottom_dim + cfg.top_dim, c, 3)
        res("dec")
        convt("dec.up0", c, c, 4)
        convt("dec.up1", c, cfg.in_channels, 4)
        return p

    def encoder_param_names(self):
        return [k for k in self.params if not k.startswith("dec")]

    def decoder_param_names(self):
        return [k for k in self.params if k.startswith("dec")]

    def _conv(self, name, x, stride=1, pad=0):
        return T.conv2d(x, self.params[name + ".w"], self.params[name + ".b"], stride, pad)

    def _res_stack(self, prefix, h):
        for i in range(self.config.res_blocks):
            r = self._conv(f"{prefix}.res{i}.a", T.relu(h), pad=1)
            r = self._conv(f"{prefix}.res{i}.b", T.relu(r))
            h = h + r
        return T.relu(h)

    # -- forward ------------------------------------------------------------

    def features(self, x):
        """Pre-quantisation encoder outputs (z_bottom at H/4, z_top at H/8)."""
        cfg = self.config
        if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.image_size, cfg.image_size):
            raise T.ShapeError(
                f"encode: expected (N, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), got {x.shape}"
            )
        h = T.relu(self._conv("enc_b.0", x, 2, 1))
        h = T.relu(self._conv("enc_b.1", h, 2, 1))
        h = self._conv("enc_b.2", h, pad=1)
        hb = self._res_stack("enc_b", h)
        z_b = self._conv("pre_b", hb)
        t = T.relu(self._conv("enc_t.0", hb, 2, 1))
        t = self._conv("enc_t.1", t, pad=1)
        t = self._res_stack("enc_t", t)
        z_t = self._conv("pre_t", t)
        if cfg.unit_latents:
            z_b, z_t = T.l2_normalize(z_b), T.l2_normalize(z_t)
        return z_b, z_t

    def encode(self, x):
        """Quantised hierarchical latent of image batch ``x`` (values in [0, 1])."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        z_b, z_t = self.features(x)
        qb = quantize(z_b, self.codebooks["bottom"])
        qt = quantize(z_t, self.codebooks["top"])
        e_b = straight_through(z_b, qb.quantized)
        e_t = straight_through(z_t, qt.quantized)
        return HierLatent(
            e_top=e_t, e_bottom=e_b, e_concat=T.concat([e_b, T.upsample2x(e_t)], axis=1),
            indices_top=qt.indices, indices_bottom=qb.indices, z_top=z_t, z_bottom=z_b,
            commit_loss=qb.commit_loss + qt.commit_loss,
            param_ids=frozenset(id(p) for k, p in self.params.items() if not k.startswith("dec")),
        )

    def decode(self, latent):
        e = latent.e_concat if isinstance(latent, HierLatent) else latent
        cfg = self.config
        side = cfg.image_size // 4
        if e.data.ndim != 4 or e.shape[1:] != (cfg.bottom_dim + cfg.top_dim, side, side):
            raise T.ShapeError(f"decode: latent shape {e.shape} does not match config")
        h = self._conv("dec.0", e, pad=1)
        h = self._res_stack("dec", h)
        h = T.relu(T.conv_transpose2d(h, self.params["dec.up0.w"], self.params["dec.up0.b"], 2, 1))
        h = T.conv_transpose2d(h, self.params["dec.up1.w"], self.params["dec.up1.b"], 2, 1)
        return T.sigmoid(h)

    def siamese_forward(self, x_clean, x_overlaid, x_natural=None):
        """Run both arms with the single shared parameter store.

        The arm batches (and optional natural images, which only pass through
        one arm) are stacked and encoded/decoded in one pass, so the arms
        cannot diverge. ``stacked`` keeps the full latent, whose commitment
        loss covers every encoded image at both levels.
        """
        def arr(x):
            return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)

        xc, xo = arr(x_clean), arr(x_overlaid)
        if xc.shape != xo.shape:
            raise T.ShapeError(f"siamese_forward: arm inputs differ in shape {xc.shape} vs {xo.shape}")
        n = xc.shape[0]
        parts = [xc, xo]
        if x_natural is not None and len(x_natural):
            parts.append(arr(x_natural))
        stacked = self.encode(Tensor(np.concatenate(parts, axis=0)))
        recon = self.decode(stacked)
        total = recon.shape[0]
        return SiameseOutput(
            latent_clean=_slice_latent(stacked, slice(0, n)),
            latent_overlaid=_slice_latent(stacked, slice(n, 2 * n)),
            recon_clean=T.take(recon, slice(0, n), 0),
            recon_overlaid=T.take(recon, slice(n, 2 * n), 0),
            stacked=stacked,
            recon_natural=T.take(recon, slice(2 * n, total), 0) if total > 2 * n else None,
        )

    # -- utilities ----------------------------------------------------------

    def reconstruct(self, x):
        with T.no_grad():
            return self.decode(self.encode(x)).data

    def checksum(self, names=None):
        """Stable digest of parameters (and codebooks) for freeze assertions."""
        h = hashlib.sha256()
        for k in sorted(names if names is not None else self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k].data).tobytes())
        for name in sorted(self.codebooks):
            for arr in self.codebooks[name].state_arrays().values():
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()
