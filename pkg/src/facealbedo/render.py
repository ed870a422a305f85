"""Differentiable image formation: SH shading, UV warping and Lambertian composition.

Rasters are channel-last: a texture or image is ``(..., H, W, 3)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

SH_C0 = 0.282095
SH_C1 = 0.488603
SH_C2 = 1.092548
SH_C3 = 0.315392
SH_C4 = 0.546274

SHADING_FLOOR = 1e-3
NORMAL_TOL = 1e-5


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float32)


def sh_basis(normals, check: bool = True) -> torch.Tensor:
    """Order-2 real SH basis ``[Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]``.

    ``normals`` has shape ``(..., 3)``; the result has shape ``(..., 9)``.
    """
    n = _as_tensor(normals)
    if check:
        norm = torch.linalg.vector_norm(n.detach().double(), dim=-1)
        if n.numel() and bool((norm - 1.0).abs().max() > NORMAL_TOL):
            raise ValueError("sh_basis expects unit normals (|n| = 1 +/- 1e-5)")
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return torch.stack(
        [
            torch.full_like(x, SH_C0),
            SH_C1 * y,
            SH_C1 * z,
            SH_C1 * x,
            SH_C2 * x * y,
            SH_C2 * y * z,
            SH_C3 * (3.0 * z * z - 1.0),
            SH_C2 * x * z,
            SH_C4 * (x * x - y * y),
        ],
        dim=-1,
    )


def ambient_lighting(level: float = 1.0, dtype=torch.float32) -> torch.Tensor:
    """SH coefficients giving spatially uniform shading equal to ``level``."""
    coeffs = torch.zeros(3, 9, dtype=dtype)
    coeffs[:, 0] = level / SH_C0
    return coeffs


def sh_quadratic_form(coeffs: np.ndarray):
    """Rewrite one channel's SH expansion as ``c + g.n + n^T A n``."""
    c = np.asarray(coeffs, dtype=np.float64)
    const = SH_C0 * c[0] - SH_C3 * c[6]
    g = SH_C1 * np.array([c[3], c[1], c[2]])
    a = np.zeros((3, 3))
    a[0, 0] = SH_C4 * c[8]
    a[1, 1] = -SH_C4 * c[8]
    a[2, 2] = 3.0 * SH_C3 * c[6]
    a[0, 1] = a[1, 0] = 0.5 * SH_C2 * c[4]
    a[1, 2] = a[2, 1] = 0.5 * SH_C2 * c[5]
    a[0, 2] = a[2, 0] = 0.5 * SH_C2 * c[7]
    return const, g, a


def shading_lower_bound(coeffs: np.ndarray) -> np.ndarray:
    """Per-channel lower bound of the unclamped SH shading over the unit sphere."""
    out = []
    for row in np.asarray(coeffs, dtype=np.float64).reshape(3, 9):
        const, g, a = sh_quadratic_form(row)
        out.append(const + np.linalg.eigvalsh(a)[0] - np.linalg.norm(g))
    return np.array(out)


@dataclass
class WarpField:
    """Per-pixel UV lookup, camera-frame unit normal and visibility for one viewpoint."""

    uv: torch.Tensor  # (H, W, 2), (u, v) in [0, 1]
    normals: torch.Tensor  # (H, W, 3)
    mask: torch.Tensor  # (H, W) bool

    def __post_init__(self):
        self.uv = _as_tensor(self.uv)
        self.normals = _as_tensor(self.normals)
        self.mask = _as_tensor(self.mask).bool()

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.mask.shape)

    def validate(self) -> None:
        m = self.mask
        if self.uv.shape[:2] != m.shape or self.normals.shape[:2] != m.shape:
            raise ValueError("warp field arrays disagree in raster shape")
        if bool((self.uv < 0).any() or (self.uv > 1).any()):
            raise ValueError("uv coordinates must lie in [0, 1]")
        norms = torch.linalg.vector_norm(self.normals[m].double(), dim=-1)
        if norms.numel() and bool((norms - 1).abs().max() > NORMAL_TOL):
            raise ValueError("normals must be unit length inside the mask")

    def to(self, dtype) -> "WarpField":
        return WarpField(self.uv.to(dtype), self.normals.to(dtype), self.mask)


def shade(warp: WarpField, light, eps: float = SHADING_FLOOR) -> torch.Tensor:
    """Clamped SH shading raster, zero outside the mask.

    ``light`` is ``(3, 9)`` or batched ``(B, 3, 9)``; output is ``(H, W, 3)``
    or ``(B, H, W, 3)`` respectively.
    """
    light = _as_tensor(light)
    normals = warp.normals.to(light.dtype)
    # masked-out normals may be arbitrary; the basis check only applies inside
    safe = torch.where(warp.mask[..., None], normals, torch.tensor([0.0, 0.0, 1.0], dtype=light.dtype))
    basis = sh_basis(safe)
    if light.dim() == 2:
        s = torch.einsum("hwk,ck->hwc", basis, light)
    else:
        s = torch.einsum("hwk,bck->bhwc", basis, light)
    s = torch.clamp(s, min=eps)
    return s * warp.mask[..., None].to(s.dtype)


def _bilinear_taps(uv: torch.Tensor, height: int, width: int):
    x = uv[..., 0].double() * (width - 1)
    y = uv[..., 1].double() * (height - 1)
    x0 = torch.clamp(torch.floor(x), 0, width - 1)
    y0 = torch.clamp(torch.floor(y), 0, height - 1)
    x1 = torch.clamp(x0 + 1, max=width - 1)
    y1 = torch.clamp(y0 + 1, max=height - 1)
    fx = (x - x0).clamp(0, 1)
    fy = (y - y0).clamp(0, 1)
    idx = [
        (y0 * width + x0).long(),
        (y0 * width + x1).long(),
        (y1 * width + x0).long(),
        (y1 * width + x1).long(),
    ]
    w = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]
    return idx, w


def warp_uv_to_image(tex, warp: WarpField) -> torch.Tensor:
    """Bilinearly sample ``tex`` (``(..., Ht, Wt, C)``) at the warp's UV coordinates.

    Texel centres sit at ``u * (Wt - 1)``, ``v * (Ht - 1)``; lookups past the
    edge clamp to the border. Pixels outside the mask are zero.
    """
    tex = _as_tensor(tex)
    ht, wt, ch = tex.shape[-3:]
    lead = tex.shape[:-3]
    flat = tex.reshape(*lead, ht * wt, ch)
    idx, w = _bilinear_taps(warp.uv, ht, wt)
    h, wd = warp.mask.shape
    out = 0
    for i, wi in zip(idx, w):
        gathered = flat.index_select(-2, i.reshape(-1)).reshape(*lead, h, wd, ch)
        out = out + gathered * wi.to(tex.dtype)[..., None]
    return out * warp.mask[..., None].to(tex.dtype)


def lambertian_compose(albedo, shading) -> torch.Tensor:
    albedo, shading = _as_tensor(albedo), _as_tensor(shading)
    if albedo.shape != shading.shape:
        raise ValueError(f"shape mismatch: {tuple(albedo.shape)} vs {tuple(shading.shape)}")
    return torch.clamp(albedo * shading, 0.0, 1.0)


def render(albedo_tex, light, warp: WarpField) -> torch.Tensor:
    """Warp a UV albedo into the view and light it."""
    return lambertian_compose(warp_uv_to_image(albedo_tex, warp), shade(warp, light))
