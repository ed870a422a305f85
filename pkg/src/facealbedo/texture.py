"""Stage 2: fine-tune a face-to-UV encoder against a frozen codebook and decoder,
supervised by a latent-space and an image-space discriminator."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .render import warp_uv_to_image
from .vq import (
    NonFiniteLossError,
    PatchDiscriminator,
    _check_finite,
    gan_disc_loss,
    gan_gen_loss,
    quantize,
    straight_through,
    to_nchw,
)


class FrozenParameterDrift(RuntimeError):
    pass


@dataclass
class TextureConfig:
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 0.1
    commit: float = 0.25
    gan_form: str = "nonsat"
    use_latent_disc: bool = True
    use_image_disc: bool = True


class LatentDiscriminator(nn.Module):
    """Real/fake logits per latent cell of an ``(B, h, w, d)`` grid."""

    def __init__(self, d: int = 64, ch: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(d, ch, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(ch, 1, 3, padding=1),
        )

    def forward(self, z):
        return self.net(to_nchw(z))


class DualDiscriminator(nn.Module):
    def __init__(self, d: int = 64, use_latent: bool = True, use_image: bool = True):
        super().__init__()
        self.use_latent = use_latent
        self.use_image = use_image
        self.latent_disc = LatentDiscriminator(d)
        self.image_disc = PatchDiscriminator(3, ndf=32, n_layers=2)


def unwrap_texture(image: torch.Tensor, enc_uv, codebook, decoder) -> torch.Tensor:
    """Face images ``(B, H, W, 3)`` to UV textures via the frozen codebook and decoder."""
    if enc_uv is None or codebook is None or decoder is None:
        raise RuntimeError("unwrap_texture needs a loaded encoder, codebook and decoder")
    z = enc_uv(image)
    z_q, _ = quantize(z, codebook, track=False)
    return decoder(straight_through(z, z_q))


def cosine_distance(ea: torch.Tensor, eb: torch.Tensor) -> torch.Tensor:
    return 1.0 - F.cosine_similarity(ea, eb, dim=-1, eps=1e-8)


def loss_id(img: torch.Tensor, rendered: torch.Tensor, embedder) -> torch.Tensor:
    """Batch-mean ``1 - cos(embed(img), embed(rendered))``; lies in [0, 2]."""
    return cosine_distance(embedder(img), embedder(rendered)).mean()


def _scores(disc: nn.Module, x: torch.Tensor, grad_to_params: bool) -> torch.Tensor:
    if grad_to_params:
        return disc(x)
    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        return disc(x)
    finally:
        for p in disc.parameters():
            p.requires_grad_(True)


def loss_adv2(z_uv, z_texture, I_origin, I_random, dd: DualDiscriminator, form: str = "nonsat"):
    """Generator and discriminator losses of the dual discriminator.

    Latent head: genuine-texture latents are real, image-derived latents fake.
    Image head: original-view renders are real, random-view renders fake.
    The generator loss only carries gradient to the generator inputs; the
    discriminator loss only to the discriminator parameters.
    """
    gen = torch.zeros(())
    disc = torch.zeros(())
    if dd.use_latent:
        disc = disc + gan_disc_loss(dd.latent_disc(z_texture.detach()), dd.latent_disc(z_uv.detach()), form)
        gen = gen + gan_gen_loss(_scores(dd.latent_disc, z_uv, False), form)
    if dd.use_image:
        disc = disc + gan_disc_loss(dd.image_disc(I_origin.detach()), dd.image_disc(I_random.detach()), form)
        gen = gen + gan_gen_loss(_scores(dd.image_disc, I_random, False), form)
    return gen, disc


def texture_total(id_loss, rec, lpips, adv, cfg: TextureConfig):
    return id_loss + cfg.lambda1 * rec + cfg.lambda2 * lpips + cfg.lambda3 * adv


def warp_batch(tex: torch.Tensor, warps: list) -> torch.Tensor:
    return torch.stack([warp_uv_to_image(t, w) for t, w in zip(tex, warps)])


def masked_l1(a: torch.Tensor, b: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    m = masks[..., None].to(a.dtype).expand_as(a)
    return ((a - b).abs() * m).sum() / m.sum().clamp_min(1.0)


def param_fingerprint(*modules) -> str:
    h = hashlib.sha256()
    for mod in modules:
        for name, t in sorted(mod.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TextureState:
    enc_uv: nn.Module
    codebook: nn.Module
    decoder: nn.Module
    dd: DualDiscriminator
    embedder: nn.Module
    opt_enc: torch.optim.Optimizer
    opt_dd: torch.optim.Optimizer
    cfg: TextureConfig
    frozen_fingerprint: str = ""

    def __post_init__(self):
        for mod in (self.codebook, self.decoder, self.embedder):
            for p in mod.parameters():
                p.requires_grad_(False)
        if not self.frozen_fingerprint:
            self.frozen_fingerprint = param_fingerprint(self.codebook, self.decoder)


def finetune_step(face_batch: dict, texture_batch: torch.Tensor, state: TextureState) -> dict:
    """One encoder update and one dual-discriminator update.

    ``face_batch`` holds ``images`` ``(B, H, W, 3)``, ``warps`` (origin view per
    sample) and ``random_warps`` (a non-frontal view per sample).
    """
    cfg = state.cfg
    images = face_batch["images"]
    origin_warps, random_warps = face_batch["warps"], face_batch["random_warps"]
    masks = torch.stack([w.mask for w in origin_warps])

    z_uv = state.enc_uv(images)
    z_q, _ = quantize(z_uv, state.codebook, track=False)
    tex = state.decoder(straight_through(z_uv, z_q))
    I_origin = warp_batch(tex, origin_warps)
    I_random = warp_batch(tex, random_warps)
    with torch.no_grad():
        z_texture = state.enc_uv(texture_batch)

    # keeps the fine-tuned encoder's latents near the frozen codebook; without it they drift
    # in scale unboundedly and the latent head escalates with them
    com = F.mse_loss(z_uv, z_q.detach())
    id_term = loss_id(images, I_random, state.embedder)
    rec = masked_l1(images, I_origin, masks)
    lpips = state.embedder.perceptual(images, I_origin).mean()
    adv_gen, adv_disc = loss_adv2(z_uv, z_texture, I_origin, I_random, state.dd, cfg.gan_form)
    total = texture_total(id_term, rec, lpips, adv_gen, cfg) + cfg.commit * com
    report = {
        "com": com.item(),
        "id": id_term.item(),
        "rec": rec.item(),
        "lpips": lpips.item(),
        "adv": adv_gen.item(),
        "disc": adv_disc.item(),
        "total": total.item(),
    }
    _check_finite(report)

    state.opt_enc.zero_grad(set_to_none=True)
    total.backward()
    state.opt_enc.step()
    if adv_disc.requires_grad:
        state.opt_dd.zero_grad(set_to_none=True)
        adv_disc.backward()
        state.opt_dd.step()

    if param_fingerprint(state.codebook, state.decoder) != state.frozen_fingerprint:
        raise FrozenParameterDrift("codebook/decoder parameters changed during stage-2 training")
    return report


# ------------------------------------------------------- ablation statistics


def boundary_band(visible: np.ndarray, width: int = 3) -> np.ndarray:
    """Texels within ``width`` of the visibility edge, plus the outer UV ring."""
    vis = np.asarray(visible, dtype=bool)
    band = ndimage.binary_dilation(vis, iterations=width) & ~ndimage.binary_erosion(vis, iterations=width, border_value=1)
    ring = np.zeros_like(vis)
    ring[:width, :] = ring[-width:, :] = ring[:, :width] = ring[:, -width:] = True
    return band | ring


def _grad_energy(tex: np.ndarray) -> np.ndarray:
    gx = np.zeros(tex.shape[:2])
    gy = np.zeros(tex.shape[:2])
    gx[:, :-1] = ((tex[:, 1:] - tex[:, :-1]) ** 2).sum(-1)
    gy[:-1, :] = ((tex[1:, :] - tex[:-1, :]) ** 2).sum(-1)
    return gx + gy


def boundary_energy(tex, visible, width: int = 3) -> float:
    """Mean squared gradient magnitude over the seam band of a produced texture."""
    tex = np.asarray(tex, dtype=np.float64)
    return float(_grad_energy(tex)[boundary_band(visible, width)].mean())


def detail_energy(tex, visible, sigma: float = 1.0) -> float:
    """Mean high-pass energy ``|T - blur(T)|^2`` over visible texels."""
    tex = np.asarray(tex, dtype=np.float64)
    blur = ndimage.gaussian_filter(tex, sigma=(sigma, sigma, 0), mode="nearest")
    hp = ((tex - blur) ** 2).sum(-1)
    return float(hp[np.asarray(visible, dtype=bool)].mean())
