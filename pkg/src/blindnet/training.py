"""Training loop for the blind and non-blind autoencoders."""
import csv
import functools
import logging

import numpy as np

from . import tensor as T
from .checkpoint import (Checkpoint, add_model, add_optimizer, load_model_state,
                         load_optimizer_state)
from .config import RunConfig
from .data import CAR, OverlayStream, generate_corpus, import_external, to_chw
from .losses import LossWeights, TrainBatch, total_loss
from .model import BlindNet, BlindNetConfig
from .optim import Adam, step_lr
from .vq import ema_update, reinit_dead_codes

log = logging.getLogger(__name__)

LOG_FIELDS = ["step", "l_q", "l_r", "l_l", "l_o", "total", "lr"]


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, detail):
        super().__init__(f"non-finite value at step {step}: {detail}")
        self.step = step


def model_config(cfg):
    return BlindNetConfig(
        base_channels=cfg.base_channels, bottom_codes=cfg.bottom_codes, bottom_dim=cfg.bottom_dim,
        top_codes=cfg.top_codes, top_dim=cfg.top_dim, res_blocks=cfg.res_blocks,
        image_size=cfg.image_size, beta=cfg.beta, decay=cfg.decay, laplace_eps=cfg.laplace_eps,
        unit_latents=cfg.unit_latents,
    )


@functools.lru_cache(maxsize=4)
def _generated(seed, count, size):
    return generate_corpus(seed, count, size)


def load_corpus(cfg):
    if cfg.corpus_dir:
        return import_external(cfg.corpus_dir)
    return _generated(cfg.data_seed, cfg.corpus_count, cfg.image_size)


def batch_arrays(overlays, naturals):
    b = TrainBatch(
        x_clean=to_chw([s.x_clean for s in overlays]),
        x_overlaid=to_chw([s.x_overlaid for s in overlays]),
        mask=np.stack([s.mask for s in overlays]),
    )
    if naturals:
        b.x_natural = to_chw([s.image for s in naturals])
        b.mask_natural = np.stack([s.mask for s in naturals])
    return b


class Trainer:
    """Owns the model, optimiser and step counter; one instance per run.

    Every source of randomness is keyed by ``(seed, step)``, so resuming from
    a checkpoint reproduces the uninterrupted run exactly.
    """

    def __init__(self, cfg: RunConfig, corpus=None):
        self.cfg = cfg.validate()
        self.dtype = np.dtype(cfg.dtype).type
        self.model = BlindNet(model_config(cfg), seed=cfg.seed, dtype=self.dtype)
        self.weights = LossWeights(cfg.gamma_q, cfg.gamma_o, cfg.omega, cfg.latent_prequant)
        self.opt = Adam(self.model.params, lr=cfg.lr)
        self.step_idx = 0
        corpus = load_corpus(cfg) if corpus is None else corpus
        train = corpus.split("train")
        self.stream = OverlayStream(train if len(train) else corpus, CAR, cfg.ratio, cfg.instances)

    # -- one step -----------------------------------------------------------

    def make_batch(self, step):
        return batch_arrays(*self.stream.batch(self.cfg.batch_size, self.cfg.seed, step))

    def init_codebooks(self, batch):
        """Seed both codebooks with encoder outputs of the first batch."""
        rng = np.random.default_rng([self.cfg.seed, 0xC0DE])
        x = np.concatenate([batch.x_clean, batch.x_overlaid], axis=0).astype(self.dtype)
        with T.no_grad():
            z_b, z_t = self.model.features(T.Tensor(x))
        for level, z in (("bottom", z_b), ("top", z_t)):
            cb = self.model.codebooks[level]
            flat = z.data.transpose(0, 2, 3, 1).reshape(-1, cb.dim)
            rows = flat[rng.integers(0, flat.shape[0], cb.num_codes)]
            cb.embeddings = rows.astype(cb.embeddings.dtype)
            cb.ema_embed_sum = cb.embeddings.copy()
            cb.ema_cluster_size = np.ones(cb.num_codes, cb.embeddings.dtype)

    def step(self, inspect=None):
        """One optimisation step. ``inspect(batch, out, report)``, if given, sees the forward pass."""
        cfg, k = self.cfg, self.step_idx
        batch = self.make_batch(k)
        if k == 0:
            self.init_codebooks(batch)
        lr = step_lr(k, cfg.lr, cfg.lr_step_size, cfg.lr_gamma)
        self.opt.set_lr(lr)
        try:
            out = self.model.siamese_forward(batch.x_clean, batch.x_overlaid, batch.x_natural)
            report = total_loss(out, batch, self.weights, blind=cfg.blind)
            if not np.isfinite(report.total):
                raise T.NonFiniteError("total loss")
            if inspect is not None:
                inspect(batch, out, report)
            self.opt.zero_grad()
            report.total_tensor.backward()
        except T.NonFiniteError as exc:
            raise TrainingDiverged(k, str(exc)) from exc
        self.opt.step()
        stacked = out.stacked
        rng = np.random.default_rng([cfg.seed, k, 0xDEAD])
        for level, z, idx in (("bottom", stacked.z_bottom, stacked.indices_bottom),
                              ("top", stacked.z_top, stacked.indices_top)):
            cb = self.model.codebooks[level]
            ema_update(cb, z.data, idx)
            reinit_dead_codes(cb, z.data, cfg.dead_code_threshold * cb.ema_cluster_size.mean(), rng)
        for name, p in self.model.params.items():
            if not np.all(np.isfinite(p.data)):
                raise TrainingDiverged(k, f"parameter {name}")
        self.step_idx += 1
        report.total_tensor = None
        return report, lr

    def train(self, steps, log_path=None, checkpoint_fn=None, checkpoint_every=None):
        """Run ``steps`` more steps, appending rows to ``log_path``."""
        rows = []
        writer = fh = None
        if log_path is not None:
            new = self.step_idx == 0
            fh = open(log_path, "w" if new else "a", newline="")
            writer = csv.writer(fh)
            if new:
                writer.writerow(LOG_FIELDS)
        try:
            for _ in range(steps):
                step = self.step_idx
                report, lr = self.step()
                row = [step, report.l_q, report.l_r, report.l_l, report.l_o, report.total, lr]
                rows.append((report, lr))
                if writer:
                    writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
                if step % 100 == 0:
                    log.info("step %d total %.5f l_r %.5f l_l %.5f l_o %.5f", step, report.total,
                             report.l_r, report.l_l, report.l_o)
                if checkpoint_fn and checkpoint_every and self.step_idx % checkpoint_every == 0:
                    checkpoint_fn(self)
        finally:
            if fh:
                fh.close()
        return rows

    # -- checkpoints --------------------------------------------------------

    def checkpoint(self, tag=""):
        ck = Checkpoint(self.cfg.dumps(), {"kind": "blindnet", "step": self.step_idx, "tag": tag})
        add_model(ck, self.model)
        add_optimizer(ck, self.opt)
        ck.add("train/step", np.array(self.step_idx, np.int64))
        ck.add("train/rng", np.array([self.cfg.seed, self.step_idx], np.int64))
        return ck

    @classmethod
    def from_checkpoint(cls, ck, corpus=None):
        cfg = RunConfig.loads(ck.config_text, env={})
        tr = cls(cfg, corpus)
        load_model_state(ck, tr.model)
        load_optimizer_state(ck, tr.opt)
        tr.step_idx = int(ck["train/step"])
        return tr


def model_from_checkpoint(ck):
    """Rebuild a :class:`BlindNet` (parameters and codebooks) from a checkpoint."""
    cfg = RunConfig.loads(ck.config_text, env={})
    model = BlindNet(model_config(cfg), seed=cfg.seed, dtype=np.dtype(cfg.dtype).type)
    load_model_state(ck, model)
    return model, cfg
