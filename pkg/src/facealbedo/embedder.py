"""Small identity embedder trained with a cosine-margin head on synthetic identities.

After training it is frozen and used for identity losses, the ID metric, and
(through its mid-layer activations) as a fixed perceptual distance.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .vq import to_nchw

EMBED_DIM = 64


class IdentityEmbedder(nn.Module):
    def __init__(self, dim: int = EMBED_DIM, ch: int = 32):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(3, ch, 3, stride=2, padding=1), nn.SiLU())
        self.mid = nn.Sequential(nn.Conv2d(ch, 2 * ch, 3, stride=2, padding=1), nn.SiLU())
        self.tail = nn.Sequential(
            nn.Conv2d(2 * ch, 2 * ch, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * ch, 4 * ch, 3, stride=2, padding=1),
            nn.SiLU(),
        )
        self.head = nn.Linear(4 * ch * 2, dim)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Mid-layer activations used by the perceptual distance (``x`` is ``(B, H, W, 3)``)."""
        f1 = self.stem(to_nchw(x))
        f2 = self.mid(f1)
        return [f1, f2]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.tail(self.features(x)[-1])
        pooled = torch.cat([f.mean(dim=(2, 3)), f.amax(dim=(2, 3))], dim=1)
        return F.normalize(self.head(pooled), dim=-1, eps=1e-8)

    embed = forward

    def perceptual(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-sample distance between channel-normalised activations (LPIPS-style, unweighted)."""
        total = 0
        for fa, fb in zip(self.features(a), self.features(b)):
            fa = F.normalize(fa, dim=1, eps=1e-6)
            fb = F.normalize(fb, dim=1, eps=1e-6)
            total = total + ((fa - fb) ** 2).sum(dim=1).mean(dim=(1, 2))
        return total

    def freeze(self) -> "IdentityEmbedder":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


class CosFaceHead(nn.Module):
    def __init__(self, dim: int, num_classes: int, margin: float = 0.25, scale: float = 16.0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, dim))
        nn.init.xavier_uniform_(self.weight)
        self.m = margin
        self.s = scale

    def forward(self, emb: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        cos = F.linear(emb, F.normalize(self.weight, dim=1))
        onehot = F.one_hot(labels, cos.shape[1]).to(cos.dtype)
        return F.cross_entropy(self.s * (cos - self.m * onehot), labels)


def train_embedder(
    images: np.ndarray,
    labels: np.ndarray,
    steps: int = 1500,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    log_fn=None,
) -> IdentityEmbedder:
    """Fit the embedder to classify ``labels`` from ``images`` (``(M, H, W, 3)``), then freeze it."""
    torch.manual_seed(seed)
    classes, y = np.unique(labels, return_inverse=True)
    model = IdentityEmbedder()
    head = CosFaceHead(EMBED_DIM, len(classes))
    opt = torch.optim.Adam(list(model.parameters()) + list(head.parameters()), lr=lr)
    x_all = torch.as_tensor(images, dtype=torch.float32)
    y_all = torch.as_tensor(y, dtype=torch.long)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        idx = torch.as_tensor(rng.integers(0, len(x_all), size=batch_size))
        x = x_all[idx]
        # brightness jitter keeps the embedding from keying on exposure alone
        gain = torch.as_tensor(rng.uniform(0.8, 1.2, size=(batch_size, 1, 1, 1)), dtype=torch.float32)
        x = torch.clamp(x * gain, 0, 1)
        loss = head(model(x), y_all[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log_fn is not None and step % 100 == 0:
            log_fn({"step": step, "loss": loss.item()})
    return model.freeze()
