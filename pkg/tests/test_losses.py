import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import blindnet.tensor as T
from blindnet.losses import (LossWeights, TrainBatch, loss_latent, loss_masked_recon,
                             loss_siamese_recon, mse, natural_branch_loss, total_loss)
from blindnet.model import BlindNet, BlindNetConfig, HierLatent
from blindnet.tensor import Tensor


def img(rng, n=2, c=3, h=4, w=4):
    return rng.uniform(size=(n, c, h, w))


def test_masked_recon_fully_masked_is_zero(rng):
    x, r = img(rng), Tensor(img(rng))
    assert loss_masked_recon(x, r, np.ones((2, 4, 4), bool)).item() == 0.0


def test_masked_recon_empty_mask_is_mse(rng):
    x, r = img(rng), img(rng)
    got = loss_masked_recon(x, Tensor(r), np.zeros((2, 4, 4), bool)).item()
    assert np.isclose(got, np.mean((x - r) ** 2), rtol=1e-12)


def test_masked_recon_half_masked_constant():
    x = np.zeros((1, 3, 4, 4))
    r = np.full((1, 3, 4, 4), 0.5)
    m = np.zeros((1, 4, 4), bool)
    m[:, :, :2] = True
    r[:, :, :, :2] = 7.0  # masked half is ignored
    assert loss_masked_recon(x, Tensor(r), m).item() == 0.25


def test_masked_recon_rejects_non_binary_mask(rng):
    with pytest.raises(ValueError, match="binary"):
        loss_masked_recon(img(rng), Tensor(img(rng)), np.full((2, 4, 4), 0.5))


def test_siamese_recon_examples(rng):
    x = img(rng)
    r = img(rng)
    assert loss_siamese_recon(x, Tensor(r), np.zeros((2, 4, 4), bool)).item() == 0.0
    m = rng.uniform(size=(2, 4, 4)) < 0.5
    r2 = np.where(m[:, None], x, r)
    assert loss_siamese_recon(x, Tensor(r2), m).item() == 0.0


def test_siamese_recon_matches_per_pixel_oracle(rng):
    # reconstruction reproduces a distractor inside M, background elsewhere
    background = rng.uniform(size=(1, 3, 6, 6))
    distractor = rng.uniform(size=(1, 3, 6, 6))
    m = np.zeros((1, 6, 6), bool)
    m[0, 1:4, 2:5] = True
    recon = np.where(m[:, None], distractor, background)
    acc, count = 0.0, 0
    for c in range(3):
        for i in range(6):
            for j in range(6):
                if m[0, i, j]:
                    acc += (distractor[0, c, i, j] - background[0, c, i, j]) ** 2
                    count += 1
    got = loss_siamese_recon(background, Tensor(recon), m).item()
    assert np.isclose(got, acc / count, rtol=1e-12)


def _latent(e):
    return HierLatent(e_top=None, e_bottom=None, e_concat=Tensor(e), indices_top=None, indices_bottom=None)


def test_latent_loss_examples(rng):
    e = rng.normal(size=(2, 5, 3, 3))
    assert loss_latent(_latent(e), _latent(e.copy())).item() == 0.0
    assert np.isclose(loss_latent(_latent(e), _latent(e + 0.5)).item(), 0.5)


def test_latent_loss_matches_flat_loop(rng):
    a, b = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))
    flat = [abs(x - y) for x, y in zip(b.ravel().tolist(), a.ravel().tolist())]
    assert abs(loss_latent(_latent(a), _latent(b)).item() - sum(flat) / len(flat)) < 1e-12


def _grad_wrt_recon(fn, rng, m):
    r = Tensor(img(rng, 2, 3, 5, 5), requires_grad=True)
    fn(img(rng, 2, 3, 5, 5), r, m).backward()
    return r.grad


def test_masked_gradients_are_bitwise_zero(rng):
    m = rng.uniform(size=(2, 5, 5)) < 0.4
    g = _grad_wrt_recon(loss_masked_recon, rng, m)
    sel = np.broadcast_to(m[:, None], g.shape)
    assert not g[sel].view(np.uint64).any()
    assert np.all(g[~sel] != 0)
    g = _grad_wrt_recon(loss_siamese_recon, rng, m)
    assert not g[~sel].view(np.uint64).any()
    assert np.all(g[sel] != 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_enlarging_mask_never_increases_masked_loss_total(seed):
    # the normalised loss can move either way; the un-normalised sum cannot grow
    rng = np.random.default_rng(seed)
    x, r = img(rng, 1), img(rng, 1)
    small = rng.uniform(size=(1, 4, 4)) < 0.3
    big = small | (rng.uniform(size=(1, 4, 4)) < 0.3)

    def summed(m):
        keep = ~m
        n = int(keep.sum()) * 3
        return loss_masked_recon(x, Tensor(r), m).item() * n

    assert summed(big) <= summed(small) + 1e-12


def test_natural_branch_examples(rng):
    x, r = img(rng), img(rng)
    assert np.isclose(natural_branch_loss(x, np.zeros((2, 4, 4), bool), Tensor(r)).item(), np.mean((x - r) ** 2))
    assert natural_branch_loss(x, np.ones((2, 4, 4), bool), Tensor(r)).item() == 0.0


def small_model(seed=0):
    cfg = BlindNetConfig(base_channels=4, bottom_codes=8, bottom_dim=3, top_codes=6, top_dim=2,
                         res_blocks=1, image_size=8)
    return BlindNet(cfg, seed=seed, dtype=np.float64)


def random_batch(rng, m=3, k=1, size=8):
    xc = rng.uniform(size=(m, 3, size, size))
    mask = rng.uniform(size=(m, size, size)) < 0.3
    xo = np.where(mask[:, None], rng.uniform(size=xc.shape), xc)
    b = TrainBatch(xc, xo, mask)
    if k:
        b.x_natural = rng.uniform(size=(k, 3, size, size))
        b.mask_natural = rng.uniform(size=(k, size, size)) < 0.3
    return b


def test_total_loss_identities_and_accumulation_oracle(rng):
    model = small_model()
    batch = random_batch(rng, m=3, k=2)
    w = LossWeights(gamma_q=0.7, gamma_o=1.3, omega=0.9)
    out = model.siamese_forward(batch.x_clean, batch.x_overlaid, batch.x_natural)
    rep = total_loss(out, batch, w)
    rep.check(1e-6)
    # independent accumulation: per-image losses weighted by image count
    rc, ro, rn = out.recon_clean.data, out.recon_overlaid.data, out.recon_natural.data
    keep_o = ~np.broadcast_to(batch.mask[:, None], ro.shape)
    keep_n = ~np.broadcast_to(batch.mask_natural[:, None], rn.shape)
    l_ro = ((ro - batch.x_overlaid) ** 2)[keep_o].mean()
    l_rc = ((rc - batch.x_clean) ** 2).mean()
    l_rn = ((rn - batch.x_natural) ** 2)[keep_n].mean()
    expected_r = (3 * l_ro + 3 * l_rc + 2 * l_rn) / 8
    assert np.isclose(rep.l_r, expected_r, rtol=1e-10)
    sel = np.broadcast_to(batch.mask[:, None], ro.shape)
    l_o = ((ro - batch.x_clean) ** 2)[sel].mean()
    l_l = np.abs(out.latent_overlaid.e_concat.data - out.latent_clean.e_concat.data).mean()
    assert np.isclose(rep.l_o, l_o, rtol=1e-10)
    assert np.isclose(rep.l_l, l_l, rtol=1e-10)
    assert np.isclose(rep.total, rep.l_r + 0.7 * rep.l_q + 0.9 * (l_l + 1.3 * l_o), rtol=1e-10)


def test_omega_zero_is_plain_masked_vq_objective(rng):
    model = small_model()
    batch = random_batch(rng)
    out = model.siamese_forward(batch.x_clean, batch.x_overlaid, batch.x_natural)
    rep = total_loss(out, batch, LossWeights(omega=0.0))
    assert rep.total == rep.l_vq


def test_identical_arms_zero_siamese_terms(rng):
    model = small_model()
    x = rng.uniform(size=(2, 3, 8, 8))
    batch = TrainBatch(x, x.copy(), np.zeros((2, 8, 8), bool))
    out = model.siamese_forward(batch.x_clean, batch.x_overlaid)
    rep = total_loss(out, batch, LossWeights())
    assert rep.l_l == 0.0 and rep.l_o == 0.0
    assert rep.total == rep.l_vq


def test_mse_helper(rng):
    a, b = img(rng), img(rng)
    assert np.isclose(mse(a, Tensor(b)).item(), np.mean((a - b) ** 2))
