import copy
import math

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from facealbedo import synth, texture, vq
from facealbedo.embedder import IdentityEmbedder


class PixelEmbedder(nn.Module):
    """Embeds an image as its normalised top-left pixel, so tests can pick exact cosines."""

    def forward(self, x):
        return F.normalize(x[:, 0, 0, :], dim=-1)


def _img(*rgb):
    out = torch.zeros(1, 4, 4, 3)
    out[0, 0, 0] = torch.tensor(rgb, dtype=torch.float32)
    return out


def test_loss_id_examples():
    emb = PixelEmbedder()
    a = _img(1.0, 0.0, 0.0)
    assert texture.loss_id(a, a, emb).item() == pytest.approx(0.0, abs=1e-7)
    assert texture.loss_id(a, _img(0.0, 1.0, 0.0), emb).item() == pytest.approx(1.0, abs=1e-7)
    assert texture.loss_id(a, _img(-1.0, 0.0, 0.0), emb).item() == pytest.approx(2.0, abs=1e-7)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_loss_id_range_and_symmetry(seed):
    g = torch.Generator().manual_seed(seed)
    a, b = torch.randn(3, 4, 4, 3, generator=g), torch.randn(3, 4, 4, 3, generator=g)
    emb = PixelEmbedder()
    ab, ba = texture.loss_id(a, b, emb).item(), texture.loss_id(b, a, emb).item()
    assert 0.0 <= ab <= 2.0 + 1e-6
    assert ab == pytest.approx(ba, abs=1e-7)


def test_identity_embedder_outputs_unit_vectors():
    emb = IdentityEmbedder()
    e = emb(torch.rand(5, 32, 32, 3))
    assert e.shape == (5, 64)
    assert torch.allclose(e.norm(dim=-1), torch.ones(5), atol=1e-5)


def _zero_dd(d=8):
    dd = texture.DualDiscriminator(d)
    with torch.no_grad():
        for p in dd.parameters():
            p.zero_()
    return dd


def _adv_inputs(d=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (
        torch.randn(2, 4, 4, d, generator=g),
        torch.randn(2, 4, 4, d, generator=g),
        torch.rand(2, 32, 32, 3, generator=g),
        torch.rand(2, 32, 32, 3, generator=g),
    )


@pytest.mark.parametrize("form,gen,disc", [("nonsat", 2 * math.log(2), 4 * math.log(2)), ("hinge", 0.0, 4.0)])
def test_loss_adv2_at_indifferent_point(form, gen, disc):
    g, dl = texture.loss_adv2(*_adv_inputs(), _zero_dd(), form)
    assert g.item() == pytest.approx(gen, abs=1e-7)
    assert dl.item() == pytest.approx(disc, abs=1e-7)


class SignHead(nn.Module):
    """Scores ``scale * mean(x)`` per sample: confident on inputs of opposite sign."""

    def __init__(self, scale=50.0):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(scale))

    def forward(self, x):
        return self.scale * x.mean(dim=tuple(range(1, x.dim())))


def test_loss_adv2_perfect_discriminator():
    dd = texture.DualDiscriminator(8)
    dd.latent_disc, dd.image_disc = SignHead(), SignHead()
    ones = torch.ones(2, 4, 4, 8)
    img = torch.ones(2, 8, 8, 3)
    gen, disc = texture.loss_adv2(-ones, ones, img, -img, dd)
    assert disc.item() < 1e-10
    assert gen.item() > 50.0


def test_loss_adv2_swap_exchanges_roles():
    torch.manual_seed(3)
    dd = texture.DualDiscriminator(8)
    z_uv, z_tex, I_o, I_r = _adv_inputs(seed=1)
    gen_s, disc_s = texture.loss_adv2(z_tex, z_uv, I_r, I_o, dd)
    with torch.no_grad():
        expect_disc = vq.gan_disc_loss(dd.latent_disc(z_uv), dd.latent_disc(z_tex)) + vq.gan_disc_loss(
            dd.image_disc(I_r), dd.image_disc(I_o)
        )
        expect_gen = vq.gan_gen_loss(dd.latent_disc(z_tex)) + vq.gan_gen_loss(dd.image_disc(I_o))
    assert disc_s.item() == pytest.approx(expect_disc.item(), abs=1e-6)
    assert gen_s.item() == pytest.approx(expect_gen.item(), abs=1e-6)


def test_loss_adv2_gradient_routing():
    torch.manual_seed(0)
    dd = texture.DualDiscriminator(8)
    z_uv, z_tex, I_o, I_r = _adv_inputs()
    z_uv.requires_grad_(True)
    I_r.requires_grad_(True)
    gen, disc = texture.loss_adv2(z_uv, z_tex, I_o, I_r, dd)
    gen.backward(retain_graph=True)
    assert z_uv.grad is not None and I_r.grad is not None
    assert all(p.grad is None for p in dd.parameters())
    z_uv.grad = None
    disc.backward()
    assert z_uv.grad is None
    assert all(p.grad is not None for p in dd.parameters())


def test_ablated_heads_drop_their_terms():
    z_uv, z_tex, I_o, I_r = _adv_inputs()
    dd = _zero_dd()
    dd.use_image = False
    g, d = texture.loss_adv2(z_uv, z_tex, I_o, I_r, dd)
    assert g.item() == pytest.approx(math.log(2)) and d.item() == pytest.approx(2 * math.log(2))


def test_texture_total_weighted_sum():
    assert texture.texture_total(0.2, 0.05, 0.03, 1.0, texture.TextureConfig()) == pytest.approx(1.1)


@pytest.fixture(scope="module")
def stage1():
    torch.manual_seed(0)
    return vq.VQModel(vq.VQConfig(N=16, d=8)).eval()


def test_unwrap_deterministic_and_matches_stage1_at_init(stage1):
    tex = torch.tensor(np.stack([synth.gen_albedo(synth.gen_identity(i, 2), 32) for i in range(2)]))
    with torch.no_grad():
        a = texture.unwrap_texture(tex, stage1.encoder, stage1.codebook, stage1.decoder)
        b = texture.unwrap_texture(tex, stage1.encoder, stage1.codebook, stage1.decoder)
        ref, *_ = stage1(tex, track=False)
    assert torch.equal(a, b)
    assert torch.equal(a, ref)
    assert a.min() >= 0 and a.max() <= 1


def test_unwrap_needs_modules():
    with pytest.raises(RuntimeError):
        texture.unwrap_texture(torch.zeros(1, 32, 32, 3), None, None, None)


def _tstate(stage1):
    torch.manual_seed(1)
    enc = copy.deepcopy(stage1.encoder)
    dd = texture.DualDiscriminator(8)
    emb = IdentityEmbedder().eval()
    return texture.TextureState(
        enc, stage1.codebook, stage1.decoder, dd, emb,
        torch.optim.Adam(enc.parameters(), lr=1e-3), torch.optim.Adam(dd.parameters(), lr=1e-3),
        texture.TextureConfig(),
    )


def _face_batch(seed=0, B=2):
    rng = np.random.default_rng(seed)
    imgs, warps, rand = [], [], []
    for b in range(B):
        alb = synth.gen_albedo(synth.gen_identity(seed + b, b + 1), 32)
        v = int(rng.integers(0, synth.N_VIEWS))
        imgs.append(synth.render_observation(alb, synth.sample_lighting(rng), v, 32))
        warps.append(synth.make_warp(v, 32))
        rand.append(synth.make_warp(int(rng.integers(1, synth.N_VIEWS)), 32))
    tex = torch.tensor(np.stack([synth.gen_albedo(synth.gen_identity(50 + b, 3), 32) for b in range(B)]))
    return {"images": torch.tensor(np.stack(imgs)), "warps": warps, "random_warps": rand}, tex


def test_finetune_keeps_decoder_bit_identical(stage1):
    state = _tstate(stage1)
    before = {k: v.clone() for k, v in stage1.decoder.state_dict().items()}
    cb = stage1.codebook.weight.detach().clone()
    enc_before = texture.param_fingerprint(state.enc_uv)
    batch, tex = _face_batch()
    for _ in range(100):
        rep = texture.finetune_step(batch, tex, state)
    for k, v in stage1.decoder.state_dict().items():
        assert torch.equal(v, before[k])
    assert torch.equal(stage1.codebook.weight.detach(), cb)
    assert texture.param_fingerprint(state.enc_uv) != enc_before
    expect = texture.texture_total(rep["id"], rep["rec"], rep["lpips"], rep["adv"], state.cfg) + state.cfg.commit * rep["com"]
    assert rep["total"] == pytest.approx(expect, rel=1e-5)


def test_finetune_detects_frozen_drift(stage1):
    model = copy.deepcopy(stage1)
    state = _tstate(model)
    with torch.no_grad():
        model.decoder.net[0].bias.add_(1e-3)
    batch, tex = _face_batch()
    with pytest.raises(texture.FrozenParameterDrift):
        texture.finetune_step(batch, tex, state)


def test_boundary_energy_flags_seams():
    vis = synth.uv_visibility(1, 64)
    smooth = np.full((64, 64, 3), 0.5)
    assert texture.boundary_energy(smooth, vis) == 0.0
    seam = smooth.copy()
    seam[~vis] = 0.0
    assert texture.boundary_energy(seam, vis) > 0.01


def test_detail_energy_orders_sharpness():
    rng = np.random.default_rng(0)
    vis = np.ones((64, 64), dtype=bool)
    sharp = rng.uniform(0, 1, (64, 64, 3))
    blurred = ndimage.gaussian_filter(sharp, (2, 2, 0))
    assert texture.detail_energy(sharp, vis) > 10 * texture.detail_energy(blurred, vis)
    assert texture.detail_energy(np.full((64, 64, 3), 0.3), vis) == pytest.approx(0.0, abs=1e-20)


def test_masked_l1_ignores_masked_out_pixels():
    a = torch.zeros(1, 2, 2, 3)
    b = torch.zeros(1, 2, 2, 3)
    b[0, 1, 1] = 5.0
    m = torch.tensor([[[True, True], [True, False]]])
    assert texture.masked_l1(a, b, m).item() == 0.0
    assert texture.masked_l1(a, b, torch.ones(1, 2, 2, dtype=torch.bool)).item() == pytest.approx(5.0 / 4)
