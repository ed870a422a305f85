"""Evaluation quantities: PSNR, SSIM, perceptual proxy, identity similarity and the FAIR suite."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .color import rgb_to_lab

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

# lower ITA edge of types I..V; type VI is everything below -30 degrees
ITA_EDGES = (55.0, 41.0, 28.0, 10.0, -30.0)
SKIN_TYPES = (1, 2, 3, 4, 5, 6)


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(a, b, mask=None) -> float:
    """PSNR in dB for [0, 1] rasters; identical inputs report ``PSNR_CAP``."""
    a, b = _np(a), _np(b)
    _check_shapes(a, b)
    sq = (a - b) ** 2
    if mask is not None:
        m = _np(mask).astype(bool)
        while m.ndim < sq.ndim:
            m = m[..., None]
        sq = sq[np.broadcast_to(m, sq.shape)]
    mse = float(sq.mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def to_gray(img) -> np.ndarray:
    img = _np(img)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def ssim(a, b, window: int = 8) -> float:
    """Mean SSIM over all ``window x window`` patches of the grayscale images."""
    a, b = to_gray(a), to_gray(b)
    _check_shapes(a, b)
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} smaller than SSIM window {window}")
    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    var_a = wa.var(axis=(-1, -2))
    var_b = wb.var(axis=(-1, -2))
    cov = (wa * wb).mean(axis=(-1, -2)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def ita(L, b):
    """Individual Typology Angle in degrees, ``atan((L - 50) / b)``.

    At ``b == 0`` the limit ``+/-90`` is returned by the sign of ``L - 50``
    (``0`` when ``L == 50``). Works elementwise on arrays.
    """
    L = np.asarray(L, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = L - 50.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.degrees(np.arctan(num / b))
    out = np.where(b == 0, 90.0 * np.sign(num), out)
    return float(out) if out.ndim == 0 else out


def skin_type(ita_deg: float) -> int:
    """Skin type 1..6 (I very light .. VI very dark); band edges go to the lighter type."""
    if not np.isfinite(ita_deg):
        raise ValueError("ITA must be finite")
    for t, edge in enumerate(ITA_EDGES, start=1):
        if ita_deg >= edge:
            return t
    return 6


def mean_skin_lab(albedo, mask=None) -> np.ndarray:
    lab = rgb_to_lab(np.clip(_np(albedo), 0, 1))
    if mask is not None:
        lab = lab[_np(mask).astype(bool)]
    return lab.reshape(-1, 3).mean(axis=0)


def albedo_ita(albedo, mask=None) -> float:
    L, _, b = mean_skin_lab(albedo, mask)
    return ita(L, b)


@dataclass
class FairReport:
    avg_ita_error: float
    per_type_ita_error: list  # six entries, None where the type has no samples
    bias: float
    score: float
    mae: float
    counts: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate_fair(per_sample_error, types, abs_errors_sum=0.0, abs_errors_count=1) -> FairReport:
    """Per-type means, avg = mean over present types, bias = population std across them."""
    per_sample_error = np.asarray(per_sample_error, dtype=np.float64)
    types = np.asarray(types)
    per_type, counts = [], []
    for t in SKIN_TYPES:
        sel = per_sample_error[types == t]
        counts.append(int(sel.size))
        if sel.size == 0:
            log.warning("skin type %d has no samples; excluded from bias", t)
            per_type.append(None)
        else:
            per_type.append(float(sel.mean()))
    present = np.array([v for v in per_type if v is not None])
    if present.size == 0:
        raise ValueError("fair_report needs at least one sample")
    avg = float(present.mean())
    bias = float(present.std())
    return FairReport(
        avg_ita_error=avg,
        per_type_ita_error=per_type,
        bias=bias,
        score=avg + bias,
        mae=float(abs_errors_sum / max(abs_errors_count, 1)),
        counts=counts,
    )


def fair_report(pred_albedos, gt_albedos, gt_types, masks=None) -> FairReport:
    if len(pred_albedos) != len(gt_albedos) or len(gt_albedos) != len(gt_types):
        raise ValueError("fair_report expects paired lists of equal length")
    if masks is None:
        masks = [None] * len(gt_albedos)
    errors, abs_sum, abs_count = [], 0.0, 0
    for pred, gt, m in zip(pred_albedos, gt_albedos, masks):
        pred, gt = _np(pred), _np(gt)
        _check_shapes(pred, gt)
        errors.append(abs(albedo_ita(pred, m) - albedo_ita(gt, m)))
        diff = np.abs(pred - gt)
        if m is not None:
            diff = diff[_np(m).astype(bool)]
        abs_sum += float(diff.sum())
        abs_count += diff.size
    return aggregate_fair(errors, gt_types, abs_sum, abs_count)


def identity_sim(a, b, embedder) -> float:
    """Cosine similarity of the embedder's identity vectors for two images."""
    with torch.no_grad():
        ea = embedder.embed(torch.as_tensor(_np(a), dtype=torch.float32)[None])
        eb = embedder.embed(torch.as_tensor(_np(b), dtype=torch.float32)[None])
    return float(torch.nn.functional.cosine_similarity(ea, eb, dim=-1)[0])


def perceptual_distance(a, b, embedder) -> float:
    with torch.no_grad():
        d = embedder.perceptual(
            torch.as_tensor(_np(a), dtype=torch.float32)[None],
            torch.as_tensor(_np(b), dtype=torch.float32)[None],
        )
    return float(d)
