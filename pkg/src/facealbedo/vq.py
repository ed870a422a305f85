"""Texture codebook: encoder, nearest-neighbour quantizer, decoder, patch discriminator
and the stage-1 pretraining objective."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteLossError(FloatingPointError):
    """A training step produced a NaN/Inf loss; the step was not applied."""


@dataclass
class VQConfig:
    N: int = 256
    d: int = 64
    h: int = 8
    w: int = 8
    beta: float = 0.25
    lambda0: float = 0.8
    gan_form: str = "nonsat"  # or "hinge"
    disc_start: int = 0
    reseed_every: int = 2000

    def validate(self) -> None:
        if self.N < 2 or self.d < 1:
            raise ValueError("codebook needs N >= 2 entries of dimension d >= 1")
        if self.gan_form not in ("nonsat", "hinge"):
            raise ValueError(f"unknown gan_form {self.gan_form!r}")


def to_nchw(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2)


def to_nhwc(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)


class Codebook(nn.Module):
    def __init__(self, num_codes: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_codes, dim).uniform_(-1.0 / num_codes, 1.0 / num_codes))
        self.register_buffer("usage_counts", torch.zeros(num_codes, dtype=torch.long))

    @property
    def num_codes(self) -> int:
        return self.weight.shape[0]

    def reset_usage(self) -> None:
        self.usage_counts.zero_()

    @torch.no_grad()
    def reseed_dead(self, encodings: torch.Tensor, generator: torch.Generator | None = None) -> int:
        """Replace never-used entries with random rows of ``encodings`` (``(M, d)``)."""
        dead = torch.nonzero(self.usage_counts == 0).flatten()
        if dead.numel() == 0:
            return 0
        flat = encodings.reshape(-1, self.weight.shape[1])
        pick = torch.randperm(flat.shape[0], generator=generator)
        pick = pick.repeat(dead.numel() // flat.shape[0] + 1)[: dead.numel()]
        self.weight[dead] = flat[pick].to(self.weight.dtype)
        return int(dead.numel())


def nearest_code(z: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Index of the nearest entry per row of ``z`` (``(M, d)``); ties go to the lowest index."""
    diff = z.detach().double()[:, None, :] - entries.detach().double()[None, :, :]
    return torch.argmin((diff * diff).sum(-1), dim=1)


def quantize(z: torch.Tensor, codebook: Codebook, track: bool = True):
    """Snap every ``d``-vector of ``z`` (``(..., d)``) to its nearest codebook entry.

    Returns ``(z_q, indices)``; ``z_q`` carries gradient to the codebook only.
    """
    d = codebook.weight.shape[1]
    if z.shape[-1] != d:
        raise ValueError(f"latent dimension {z.shape[-1]} does not match codebook dimension {d}")
    flat = z.reshape(-1, d)
    idx = nearest_code(flat, codebook.weight)
    if track:
        with torch.no_grad():
            codebook.usage_counts += torch.bincount(idx, minlength=codebook.num_codes)
    z_q = codebook.weight[idx].reshape(z.shape)
    return z_q, idx.reshape(z.shape[:-1])


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, z, z_q):
        return z_q.detach().clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def straight_through(z: torch.Tensor, z_q: torch.Tensor) -> torch.Tensor:
    """Forward value exactly ``z_q``; backward passes the gradient to ``z`` unchanged."""
    if z.shape != z_q.shape:
        raise ValueError(f"shape mismatch: {tuple(z.shape)} vs {tuple(z_q.shape)}")
    return _StraightThrough.apply(z, z_q)


def loss_rec(I: torch.Tensor, I_hat: torch.Tensor) -> torch.Tensor:
    if I.shape != I_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(I.shape)} vs {tuple(I_hat.shape)}")
    return F.mse_loss(I_hat, I)


def loss_commit(z: torch.Tensor, z_q: torch.Tensor, beta: float = 0.25) -> torch.Tensor:
    """Codebook term (moves entries toward ``sg[z]``) plus ``beta`` times the encoder term."""
    codebook_term = F.mse_loss(z_q, z.detach())
    encoder_term = F.mse_loss(z, z_q.detach())
    return codebook_term + beta * encoder_term


def gan_gen_loss(fake_scores: torch.Tensor, form: str = "nonsat") -> torch.Tensor:
    if form == "hinge":
        return -fake_scores.mean()
    return F.softplus(-fake_scores).mean()


def gan_disc_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor, form: str = "nonsat") -> torch.Tensor:
    if form == "hinge":
        return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()
    return F.softplus(-real_scores).mean() + F.softplus(fake_scores).mean()


def pretrain_total(rec, com, adv, lambda0: float = 0.8):
    return rec + com + lambda0 * adv


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class Encoder(nn.Module):
    """Three stride-2 stages and one stride-1 stage: ``(B, H, W, 3) -> (B, H/8, W/8, d)``."""

    def __init__(self, d: int = 64, ch: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, ch // 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(ch // 2, ch, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(ch, ch, 3, stride=2, padding=1),
            ResBlock(ch),
            nn.SiLU(),
            nn.Conv2d(ch, d, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return to_nhwc(self.net(to_nchw(x)))


class Decoder(nn.Module):
    """``(B, h, w, d) -> (B, 8h, 8w, 3)`` with a sigmoid output in [0, 1]."""

    def __init__(self, d: int = 64, ch: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(d, ch, 3, padding=1),
            ResBlock(ch),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(ch, ch, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(ch, ch // 2, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(ch // 2, ch // 4, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(ch // 4, 3, 3, padding=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(to_nhwc(self.net(to_nchw(z))))


class PatchDiscriminator(nn.Module):
    """Returns a map of real/fake logits, one per receptive-field patch."""

    def __init__(self, in_ch: int = 3, ndf: int = 32, n_layers: int = 2, channels_last: bool = True):
        super().__init__()
        self.channels_last = channels_last
        layers = [nn.Conv2d(in_ch, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        nf = ndf
        for _ in range(1, n_layers):
            layers += [nn.Conv2d(nf, nf * 2, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            nf *= 2
        layers += [nn.Conv2d(nf, nf, 3, padding=1), nn.LeakyReLU(0.2), nn.Conv2d(nf, 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.channels_last:
            x = to_nchw(x)
        return self.net(x)


class VQModel(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = Encoder(cfg.d)
        self.codebook = Codebook(cfg.N, cfg.d)
        self.decoder = Decoder(cfg.d)

    def encode(self, x):
        return self.encoder(x)

    def decode_latent(self, z, track: bool = False):
        """Quantize ``z`` and decode it (straight-through so gradients reach ``z``)."""
        z_q, _ = quantize(z, self.codebook, track=track)
        return self.decoder(straight_through(z, z_q))

    def forward(self, x, track: bool = True):
        z = self.encoder(x)
        z_q, idx = quantize(z, self.codebook, track=track)
        x_hat = self.decoder(straight_through(z, z_q))
        return x_hat, z, z_q, idx


def _check_finite(report: dict) -> None:
    bad = {k: v for k, v in report.items() if not torch.isfinite(torch.as_tensor(v)).all()}
    if bad:
        raise NonFiniteLossError(f"non-finite loss terms, step aborted: {bad}")


def pretrain_step(batch, model: VQModel, disc: PatchDiscriminator, opt_g, opt_d, step: int = 0) -> dict:
    """One generator update and one discriminator update on ``batch`` (``(B, H, W, 3)``)."""
    cfg = model.cfg
    use_adv = step >= cfg.disc_start
    x_hat, z, z_q, _ = model(batch)
    rec = loss_rec(batch, x_hat)
    com = loss_commit(z, z_q, cfg.beta)
    if use_adv:
        for p in disc.parameters():
            p.requires_grad_(False)
        adv = gan_gen_loss(disc(x_hat), cfg.gan_form)
        for p in disc.parameters():
            p.requires_grad_(True)
    else:
        adv = torch.zeros((), dtype=rec.dtype)
    total = pretrain_total(rec, com, adv, cfg.lambda0)
    report = {"rec": rec.item(), "com": com.item(), "adv": adv.item(), "total": total.item()}
    _check_finite(report)
    opt_g.zero_grad(set_to_none=True)
    total.backward()
    opt_g.step()

    d_loss = torch.zeros(())
    if use_adv:
        d_loss = gan_disc_loss(disc(batch), disc(x_hat.detach()), cfg.gan_form)
        _check_finite({"disc": d_loss.item()})
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()
    report["disc"] = d_loss.item()
    return report
