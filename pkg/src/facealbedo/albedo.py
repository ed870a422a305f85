"""Stage 3: aggregate the texture latents of several images of one person into a shared
albedo latent with a learnable query, and train it through re-rendering with a
group identity loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .render import SH_C0, render, shade
from .texture import cosine_distance, masked_l1
from .vq import _check_finite, quantize, straight_through, to_nchw


class InsufficientGroupError(ValueError):
    """Fewer admissible candidates than the requested group size."""


@dataclass
class AlbedoConfig:
    eta1: float = 10.0
    eta2: float = 0.1
    n: int = 4
    tau: float = 0.2
    use_filter: bool = True
    use_gid: bool = True
    n_max: int = 8
    light_level: float = 0.95


def _attributes(c) -> np.ndarray:
    if isinstance(c, dict):
        return np.asarray(c["attributes_at_capture"], dtype=np.float64)
    return np.asarray(c, dtype=np.float64)


def filter_group(candidates, tau: float, n: int = 4, rng: np.random.Generator | None = None) -> list:
    """Pick ``n`` candidates whose pairwise attribute distances are all ``<= tau``.

    Candidates are scanned in their given order, or in a random order drawn
    from ``rng``; the first admissible subset in that order is returned.
    """
    cands = list(candidates)
    ids = {c["identity_id"] for c in cands if isinstance(c, dict) and "identity_id" in c}
    if len(ids) > 1:
        raise ValueError("filter_group candidates must share one identity")
    if len(cands) < n:
        raise InsufficientGroupError(f"need {n} candidates, got {len(cands)}")
    order = list(range(len(cands))) if rng is None else [int(i) for i in rng.permutation(len(cands))]
    attrs = np.stack([_attributes(cands[i]) for i in order])
    ok = np.linalg.norm(attrs[:, None] - attrs[None], axis=-1) <= tau

    def search(chosen, start):
        if len(chosen) == n:
            return chosen
        for j in range(start, len(order)):
            if all(ok[j, c] for c in chosen):
                found = search(chosen + [j], j + 1)
                if found is not None:
                    return found
        return None

    picked = search([], 0)
    if picked is None:
        raise InsufficientGroupError(f"no {n} candidates within attribute distance {tau}")
    return [cands[order[j]] for j in picked]


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scale: bool = True) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d)) v`` over the key axis (second to last)."""
    logits = q @ k.transpose(-1, -2)
    if scale:
        logits = logits / math.sqrt(q.shape[-1])
    return torch.softmax(logits, dim=-1) @ v


def aggregate_latents(latents: torch.Tensor, q: torch.Tensor, proj_k: nn.Module, proj_v: nn.Module, pos=None, scale: bool = True):
    """Cross-attend a query grid to every patch of every image.

    ``latents`` is ``(n, h, w, d)`` or batched ``(B, n, h, w, d)``; the result
    has shape ``(h*w, d)`` (or ``(B, h*w, d)``) whatever ``n`` is.
    """
    if latents.shape[-4] == 0:
        raise ValueError("aggregate_latents needs at least one latent grid")
    batched = latents.dim() == 5
    z = latents if batched else latents[None]
    B, n, h, w, d = z.shape
    z = z.reshape(B, n, h * w, d)
    keys = proj_k(z)
    if pos is not None:
        keys = keys + pos
    z_all_k = keys.reshape(B, n * h * w, d)
    z_all_v = proj_v(z).reshape(B, n * h * w, d)
    out = attention(q.expand(B, -1, -1), z_all_k, z_all_v, scale)
    return out if batched else out[0]


class AlbedoAggregator(nn.Module):
    """Learnable query latent, key/value projectors and a per-cell key position code."""

    def __init__(self, h: int = 8, w: int = 8, d: int = 64, sharpness: float = 8.0, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        basis, _ = torch.linalg.qr(torch.randn(max(h * w, d), max(h * w, d), generator=g))
        code = basis[: h * w, :d] * math.sqrt(sharpness * math.sqrt(d))
        self.h, self.w, self.d = h, w, d
        self.q = nn.Parameter(code.clone())
        self.pos = nn.Parameter(code.clone())
        self.proj_k = nn.Linear(d, d)
        self.proj_v = nn.Linear(d, d)
        with torch.no_grad():
            self.proj_k.weight.normal_(0.0, 0.01, generator=g)
            self.proj_k.bias.zero_()
            self.proj_v.weight.copy_(torch.eye(d))
            self.proj_v.bias.zero_()

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        a = aggregate_latents(latents, self.q, self.proj_k, self.proj_v, self.pos)
        return a.reshape(*a.shape[:-2], self.h, self.w, self.d)


def decode_albedo(a: torch.Tensor, codebook, decoder) -> torch.Tensor:
    """Quantize an albedo latent grid against the shared codebook and decode it."""
    if codebook is None or decoder is None:
        raise RuntimeError("decode_albedo needs the stage-1 codebook and decoder")
    single = a.dim() == 3
    if single:
        a = a[None]
    a_q, _ = quantize(a, codebook, track=False)
    out = decoder(straight_through(a, a_q))
    return out[0] if single else out


def group_weight(e_i: torch.Tensor, e_j: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between two identity embeddings."""
    if bool((torch.linalg.vector_norm(e_i, dim=-1) == 0).any() or (torch.linalg.vector_norm(e_j, dim=-1) == 0).any()):
        raise ValueError("group_weight is undefined for a zero embedding")
    return F.cosine_similarity(e_i, e_j, dim=-1)


def group_identity_loss(render_emb: torch.Tensor, image_emb: torch.Tensor, weights: torch.Tensor | None = None) -> torch.Tensor:
    """``(1/n^2) sum_ij w_ij (1 - cos(R_i, I_j))`` for embeddings ``(..., n, D)``.

    ``weights`` defaults to the detached pairwise cosine of the image embeddings.
    Leading batch dimensions are averaged.
    """
    if render_emb.shape != image_emb.shape:
        raise ValueError(f"count mismatch: {tuple(render_emb.shape)} vs {tuple(image_emb.shape)}")
    n = render_emb.shape[-2]
    if weights is None:
        weights = group_weight(image_emb[..., :, None, :], image_emb[..., None, :, :]).detach()
    dist = cosine_distance(render_emb[..., :, None, :], image_emb[..., None, :, :])
    return ((weights * dist).sum(dim=(-1, -2)) / n**2).mean()


def paired_identity_loss(render_emb: torch.Tensor, image_emb: torch.Tensor) -> torch.Tensor:
    """Per-image identity loss averaged over the group (no cross pairs)."""
    return cosine_distance(render_emb, image_emb).mean()


def loss_gid(renders: torch.Tensor, images: torch.Tensor, embedder, weights=None) -> torch.Tensor:
    if renders.shape != images.shape:
        raise ValueError("renders and images must pair up one to one")
    lead = renders.shape[:-3]
    er = embedder(renders.reshape(-1, *renders.shape[-3:])).reshape(*lead, -1)
    ei = embedder(images.reshape(-1, *images.shape[-3:])).reshape(*lead, -1)
    return group_identity_loss(er, ei, weights)


class LightEstimator(nn.Module):
    """Image ``(B, H, W, 3)`` to SH lighting ``(B, 3, 9)``, initialised to uniform ambient light."""

    def __init__(self, image_size: int = 64, level: float = 0.95, ch: int = 16):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, ch, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * ch, 2 * ch, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * ch, 2 * ch, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.out = nn.Linear(2 * ch * (image_size // 16) ** 2, 27)
        with torch.no_grad():
            self.out.weight.mul_(0.01)
            bias = torch.zeros(3, 9)
            bias[:, 0] = level / SH_C0
            self.out.bias.copy_(bias.flatten())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.net(to_nchw(x)).flatten(1)).reshape(-1, 3, 9)


def light_pretrain_step(estimator: LightEstimator, images: torch.Tensor, lights: torch.Tensor, warps: list,
                        optimizer: torch.optim.Optimizer) -> float:
    """One supervised step towards ground-truth SH lighting, scored as shading error inside each face mask.

    Stands in for starting from a pretrained light network: the re-rendering
    objective alone cannot tell a bright albedo under dim light from the reverse.
    """
    pred = estimator(images)
    masks = torch.stack([w.mask for w in warps])[..., None].to(images.dtype)
    diff = torch.stack([shade(w, p) - shade(w, g) for w, p, g in zip(warps, pred, lights)])
    loss = ((diff**2) * masks).sum() / (masks.sum() * 3).clamp_min(1.0)
    _check_finite({"light": loss.item()})
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


class AlbedoModel(nn.Module):
    """Trainable stage-3 parameters: query, projectors, key positions, light estimator."""

    def __init__(self, h: int = 8, w: int = 8, d: int = 64, image_size: int = 64, light_level: float = 0.95, seed: int = 0):
        super().__init__()
        self.aggregator = AlbedoAggregator(h, w, d, seed=seed)
        self.light = LightEstimator(image_size, light_level)


@dataclass
class AlbedoState:
    model: AlbedoModel
    encoder: nn.Module
    codebook: nn.Module
    decoder: nn.Module
    embedder: nn.Module
    optimizer: torch.optim.Optimizer | None
    cfg: AlbedoConfig = field(default_factory=AlbedoConfig)

    def __post_init__(self):
        for mod in (self.encoder, self.codebook, self.decoder, self.embedder):
            mod.eval()
            for p in mod.parameters():
                p.requires_grad_(False)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """Per-image texture latents; images are encoded one at a time so results do not depend on batching."""
        with torch.no_grad():
            return torch.cat([self.encoder(images[i : i + 1]) for i in range(images.shape[0])])


def albedo_total(gid, rec, lpips, cfg: AlbedoConfig):
    return gid + cfg.eta1 * rec + cfg.eta2 * lpips


def albedo_forward(state: AlbedoState, latents, images, warps):
    """Decode group albedos and re-render them under per-image estimated lights.

    ``latents`` ``(B, n, h, w, d)``, ``images`` ``(B, n, H, W, 3)``, ``warps`` a
    ``B x n`` nested list. Returns ``(albedo, lights, renders)``.
    """
    B, n = images.shape[:2]
    a = state.model.aggregator(latents)
    albedo = decode_albedo(a, state.codebook, state.decoder)
    lights = state.model.light(images.reshape(B * n, *images.shape[2:])).reshape(B, n, 3, 9)
    renders = torch.stack(
        [torch.stack([render(albedo[b], lights[b, i], warps[b][i]) for i in range(n)]) for b in range(B)]
    )
    return albedo, lights, renders


def train_step(group: dict, state: AlbedoState) -> dict:
    """One optimizer step on a batch of groups.

    ``group`` holds ``latents``, ``images``, ``warps`` and ``image_emb``
    (precomputed identity embeddings of the inputs, ``(B, n, D)``).
    """
    cfg = state.cfg
    images = group["images"]
    B, n = images.shape[:2]
    _, _, renders = albedo_forward(state, group["latents"], images, group["warps"])
    masks = torch.stack([torch.stack([w.mask for w in row]) for row in group["warps"]])
    rec = masked_l1(images, renders, masks)
    flat_r = renders.reshape(B * n, *renders.shape[2:])
    flat_i = images.reshape(B * n, *images.shape[2:])
    lpips = state.embedder.perceptual(flat_r, flat_i).mean()
    render_emb = state.embedder(flat_r).reshape(B, n, -1)
    image_emb = group["image_emb"]
    if cfg.use_gid:
        gid = group_identity_loss(render_emb, image_emb)
    else:
        gid = paired_identity_loss(render_emb, image_emb)
    total = albedo_total(gid, rec, lpips, cfg)
    report = {"gid": gid.item(), "rec": rec.item(), "lpips": lpips.item(), "total": total.item()}
    _check_finite(report)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    return report


def infer(images, state: AlbedoState):
    """Albedo map ``(Ht, Wt, 3)`` and per-image SH estimates ``(n, 3, 9)`` from 1..n_max images."""
    images = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images, dtype=torch.float32)
    if images.dim() != 4 or images.shape[0] == 0:
        raise ValueError("infer needs a non-empty stack of images (n, H, W, 3)")
    if images.shape[0] > state.cfg.n_max:
        raise ValueError(f"at most {state.cfg.n_max} images per inference call")
    with torch.no_grad():
        z = state.encode(images)
        a = state.model.aggregator(z)
        albedo = decode_albedo(a, state.codebook, state.decoder)
        lights = torch.cat([state.model.light(images[i : i + 1]) for i in range(images.shape[0])])
    return albedo, lights
