"""Procedural identities with known albedo, SH lighting draws, an ellipsoid view bank,
and a persisted, re-renderable dataset."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from . import io
from .color import lab_to_rgb
from .render import SH_C0, SH_C1, WarpField, lambertian_compose, render, shade, shading_lower_bound

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
HEAD_AXES = (0.78, 1.0, 0.86)
PHI_MAX = math.radians(80.0)
THETA_MAX = math.radians(62.0)
IMAGE_EXTENT = 1.08
# (name, yaw degrees, pitch degrees)
VIEWS = (("frontal", 0.0, 0.0), ("yaw_left", 30.0, 0.0), ("yaw_right", -30.0, 0.0), ("pitch_up", 0.0, 20.0), ("pitch_down", 0.0, -20.0))
N_VIEWS = len(VIEWS)

# ITA ranges drawn for each skin type, kept inside the band with a margin
_ITA_DRAW = {1: (58.0, 68.0), 2: (43.5, 52.5), 3: (30.5, 38.5), 4: (13.0, 25.0), 5: (-25.0, 5.0), 6: (-52.0, -35.0)}


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: int
    base_tone: tuple  # (L*, a*, b*)
    feature_seed: int
    attributes: tuple  # (age-like drift channel, nuisance channel), each in [0, 1]
    skin_type: int

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IdentitySpec":
        return cls(
            identity_id=int(d["identity_id"]),
            base_tone=tuple(float(v) for v in d["base_tone"]),
            feature_seed=int(d["feature_seed"]),
            attributes=tuple(float(v) for v in d["attributes"]),
            skin_type=int(d["skin_type"]),
        )


def gen_identity(seed: int, skin_type_target: int, identity_id: int | None = None) -> IdentitySpec:
    if skin_type_target not in _ITA_DRAW:
        raise ValueError(f"skin_type_target must be in 1..6, got {skin_type_target}")
    rng = np.random.default_rng([int(seed), int(skin_type_target)])
    lo, hi = _ITA_DRAW[skin_type_target]
    while True:
        angle = rng.uniform(lo, hi)
        b = rng.uniform(8.0, 30.0)
        a = rng.uniform(8.0, 16.0)
        L = 50.0 + b * math.tan(math.radians(angle))
        if not 22.0 <= L <= 83.0:
            continue
        rgb = lab_to_rgb((L, a, b), clip=False)
        if np.all(rgb > 0.02) and np.all(rgb < 0.98):
            break
    return IdentitySpec(
        identity_id=int(seed if identity_id is None else identity_id),
        base_tone=(float(L), float(a), float(b)),
        feature_seed=int(rng.integers(0, 2**31 - 1)),
        attributes=(float(rng.uniform(0.25, 0.75)), float(rng.uniform(0.0, 1.0))),
        skin_type=int(skin_type_target),
    )


def _uv_grid(size: int):
    t = np.arange(size) / (size - 1)
    v, u = np.meshgrid(t, t, indexing="ij")
    return u, v


@dataclass
class _Features:
    low: tuple
    cheek: float
    blotches: list
    moles: list


def _draw_features(feature_seed: int) -> _Features:
    rng = np.random.default_rng(feature_seed)
    low = tuple(rng.uniform(-1.0, 1.0, size=3))
    cheek = float(rng.uniform(3.0, 8.0))
    blotches = []
    for _ in range(int(rng.integers(4, 8))):
        blotches.append(
            dict(
                c=rng.uniform(0.12, 0.88, size=2),
                sigma=float(rng.uniform(0.045, 0.09)),
                dL=float(rng.choice([-1, 1]) * rng.uniform(3.0, 7.0)),
                db=float(rng.uniform(-3.0, 3.0)),
            )
        )
    moles = []
    for _ in range(int(rng.integers(3, 7))):
        moles.append(
            dict(
                c=rng.uniform(0.15, 0.85, size=2),
                r=float(rng.uniform(0.018, 0.032)),
                dL=float(rng.uniform(14.0, 26.0)),
            )
        )
    return _Features(low, cheek, blotches, moles)


def _mole_weight(u, v, mole) -> np.ndarray:
    d = np.hypot(u - mole["c"][0], v - mole["c"][1]) / mole["r"]
    return np.clip(1.5 - d, 0.0, 1.0)


def _albedo_lab(spec: IdentitySpec, uv_size: int) -> np.ndarray:
    u, v = _uv_grid(uv_size)
    f = _draw_features(spec.feature_seed)
    L0, a0, b0 = spec.base_tone
    L = np.full_like(u, L0)
    a = np.full_like(u, a0)
    b = np.full_like(u, b0)
    # low-frequency shading of the skin tone, zero mean over the map
    L += 3.0 * f.low[0] * (v - 0.5) * 2 + 2.0 * f.low[1] * ((2 * u - 1) ** 2 - 1 / 3) * 3
    b += 1.5 * f.low[2] * (v - 0.5) * 2
    for cu in (0.3, 0.7):
        a += f.cheek * np.exp(-((u - cu) ** 2 + (v - 0.6) ** 2) / (2 * 0.1**2))
    for bl in f.blotches:
        g = np.exp(-((u - bl["c"][0]) ** 2 + (v - bl["c"][1]) ** 2) / (2 * bl["sigma"] ** 2))
        L += bl["dL"] * g
        b += bl["db"] * g
    for m in f.moles:
        w = _mole_weight(u, v, m)
        L -= m["dL"] * w * np.clip(L / 60.0, 0.35, 1.0)
        a += 3.0 * w
        b += 4.0 * w
    return np.stack([np.clip(L, 3.0, 97.0), a, b], axis=-1)


def gen_albedo(spec: IdentitySpec, uv_size: int = 64) -> np.ndarray:
    """Procedural UV albedo ``(uv_size, uv_size, 3)`` in [0, 1], float32."""
    if not 32 <= uv_size <= 256:
        raise ValueError(f"uv_size must be in 32..256, got {uv_size}")
    return lab_to_rgb(_albedo_lab(spec, uv_size)).astype(np.float32)


def skin_mask(spec: IdentitySpec, uv_size: int = 64) -> np.ndarray:
    """UV texels that are plain skin (away from moles)."""
    u, v = _uv_grid(uv_size)
    mask = np.ones(u.shape, dtype=bool)
    for m in _draw_features(spec.feature_seed).moles:
        mask &= np.hypot(u - m["c"][0], v - m["c"][1]) > 1.8 * m["r"]
    return mask


def apply_attribute_drift(albedo, drift, feature_seed: int) -> np.ndarray:
    """Darken and roughen an albedo by the age-like attribute drift ``|drift[0]|``."""
    albedo = np.asarray(albedo, dtype=np.float32)
    d = float(abs(drift[0]))
    if d == 0.0:
        return albedo
    noise = np.random.default_rng([feature_seed, 7]).normal(size=albedo.shape[:2] + (1,)).astype(np.float32)
    out = albedo * np.float32(1.0 - 0.6 * d) * (1.0 + np.float32(0.3 * d) * noise)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def sample_lighting(
    rng: np.random.Generator,
    ambient_floor: float = 0.15,
    ambient_only: bool = False,
    level: tuple = (0.7, 1.2),
    strength: tuple = (0.25, 0.7),
    band2_scale: float = 0.12,
    tint: float = 0.06,
) -> np.ndarray:
    """Draw ``(3, 9)`` SH coefficients whose shading is at least ``ambient_floor`` everywhere.

    Directions and band-2 weights come from sign-symmetric distributions, so
    bands 1 and 2 average to zero across draws.
    """
    if ambient_floor <= 0:
        raise ValueError("ambient_floor must be positive")
    lvl = rng.uniform(*level)
    tint_c = 1.0 + rng.uniform(-tint, tint, size=3)
    coeffs = np.zeros((3, 9))
    if not ambient_only:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        s = rng.uniform(*strength) * lvl
        band1 = s * np.array([d[1], d[2], d[0]]) / SH_C1
        band2 = rng.normal(0.0, band2_scale * lvl, size=5)
        coeffs[:, 1:4] = band1
        coeffs[:, 4:] = band2
        coeffs[:, 1:] *= tint_c[:, None]
    coeffs[:, 0] = lvl * tint_c / SH_C0
    deficit = np.maximum(ambient_floor - shading_lower_bound(coeffs), 0.0)
    coeffs[:, 0] += deficit / SH_C0
    return coeffs.astype(np.float32)


# ---------------------------------------------------------------- head proxy


def view_rotation(view_id: int) -> np.ndarray:
    _, yaw, pitch = VIEWS[view_id]
    cy, sy = math.cos(math.radians(yaw)), math.sin(math.radians(yaw))
    cp, sp = math.cos(math.radians(pitch)), math.sin(math.radians(pitch))
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    return ry @ rx


def _canonical_normal(p: np.ndarray) -> np.ndarray:
    n = p / np.array(HEAD_AXES) ** 2
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _uv_points(uv_size: int) -> np.ndarray:
    u, v = _uv_grid(uv_size)
    phi = (u - 0.5) * 2 * PHI_MAX
    theta = (0.5 - v) * 2 * THETA_MAX
    ax, ay, az = HEAD_AXES
    return np.stack([ax * np.cos(theta) * np.sin(phi), ay * np.sin(theta), az * np.cos(theta) * np.cos(phi)], axis=-1)


@lru_cache(maxsize=None)
def make_warp(view_id: int, image_size: int = 64) -> WarpField:
    """Orthographic ray cast of the ellipsoid head for one view of the bank."""
    rot = view_rotation(view_id)
    t = (np.arange(image_size) + 0.5) / image_size * 2 * IMAGE_EXTENT - IMAGE_EXTENT
    py, px = np.meshgrid(-t, t, indexing="ij")
    origin = np.stack([px, py, np.full_like(px, 10.0)], axis=-1) @ rot  # rot.T applied per row
    direction = np.array([0.0, 0.0, -1.0]) @ rot
    inv = 1.0 / np.array(HEAD_AXES) ** 2
    qa = np.sum(direction**2 * inv)
    qb = 2 * np.sum(origin * direction * inv, axis=-1)
    qc = np.sum(origin**2 * inv, axis=-1) - 1.0
    disc = qb**2 - 4 * qa * qc
    hit = disc > 0
    tt = (-qb - np.sqrt(np.where(hit, disc, 0.0))) / (2 * qa)
    p = origin + tt[..., None] * direction
    ax, ay, az = HEAD_AXES
    phi = np.arctan2(p[..., 0] / ax, p[..., 2] / az)
    theta = np.arcsin(np.clip(p[..., 1] / ay, -1, 1))
    u = phi / (2 * PHI_MAX) + 0.5
    v = 0.5 - theta / (2 * THETA_MAX)
    mask = hit & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    normals = _canonical_normal(p) @ rot.T
    uv = np.where(mask[..., None], np.stack([u, v], axis=-1), 0.0)
    normals = np.where(mask[..., None], normals, np.array([0.0, 0.0, 1.0]))
    return WarpField(uv.astype(np.float32), normals.astype(np.float32), mask)


@lru_cache(maxsize=None)
def uv_normals(view_id: int, uv_size: int = 64) -> np.ndarray:
    """Camera-frame normal of every UV texel under a view of the bank."""
    return (_canonical_normal(_uv_points(uv_size)) @ view_rotation(view_id).T).astype(np.float32)


def uv_visibility(view_id: int, uv_size: int = 64) -> np.ndarray:
    """Texels that face the camera (the ellipsoid is convex, so facing means visible)."""
    return uv_normals(view_id, uv_size)[..., 2] > 0.0


def uv_warp(view_id: int, uv_size: int = 64) -> WarpField:
    """A warp over the UV raster itself, carrying that view's texel normals."""
    u, v = _uv_grid(uv_size)
    return WarpField(
        np.stack([u, v], axis=-1).astype(np.float32),
        uv_normals(view_id, uv_size),
        np.ones((uv_size, uv_size), dtype=bool),
    )


def lit_texture(albedo, light, view_id: int) -> torch.Tensor:
    """UV texture with the lighting of ``view_id`` baked in."""
    albedo = torch.as_tensor(np.asarray(albedo), dtype=torch.float32)
    warp = uv_warp(view_id, albedo.shape[-2])
    return lambertian_compose(albedo, shade(warp, torch.as_tensor(light, dtype=torch.float32)))


def render_observation(albedo, light, view_id: int, image_size: int = 64) -> np.ndarray:
    albedo = torch.as_tensor(np.asarray(albedo), dtype=torch.float32)
    with torch.no_grad():
        img = render(albedo, torch.as_tensor(light, dtype=torch.float32), make_warp(view_id, image_size))
    return img.numpy()


# ------------------------------------------------------------------ dataset


@dataclass
class DatasetConfig:
    n_identities: int = 80
    images_per_identity: int = 8
    image_size: int = 64
    uv_size: int = 64
    test_fraction: float = 0.25
    val_fraction: float = 0.0
    outlier_rate: float = 0.15
    attribute_jitter: float = 0.02
    ambient_floor: float = 0.15
    seed: int = 0
    workers: int = 1

    def validate(self) -> None:
        if self.n_identities < 2:
            raise ValueError("need at least two identities")
        if self.images_per_identity < 6:
            raise ValueError("images_per_identity must be >= 6")
        if not 32 <= self.uv_size <= 256 or self.image_size < 16:
            raise ValueError("image_size/uv_size out of range")
        if not 0 < self.test_fraction < 1 or not 0 <= self.val_fraction < 1:
            raise ValueError("split fractions out of range")
        if self.test_fraction + self.val_fraction >= 1:
            raise ValueError("no identities left for training")


def _identity_seed(seed: int, identity_id: int) -> int:
    return int(np.random.SeedSequence([seed, identity_id]).generate_state(1)[0])


def _assign_splits(cfg: DatasetConfig) -> dict[int, str]:
    rng = np.random.default_rng([cfg.seed, 99])
    split = {}
    for t in range(6):
        ids = [i for i in range(cfg.n_identities) if i % 6 == t]
        ids = [ids[k] for k in rng.permutation(len(ids))]
        # round half up, and keep at least one test identity per type
        n_test = max(1, int(np.floor(len(ids) * cfg.test_fraction + 0.5))) if len(ids) > 1 else 0
        n_val = int(np.floor(len(ids) * cfg.val_fraction + 0.5))
        for k, i in enumerate(ids):
            split[i] = "test" if k < n_test else ("val" if k < n_test + n_val else "train")
    return split


def _capture_plan(cfg: DatasetConfig, spec: IdentitySpec):
    """Per-image view, lighting and attributes for one identity."""
    rng = np.random.default_rng([cfg.seed, spec.identity_id, 1])
    n = cfg.images_per_identity
    max_out = n - 6
    is_out = rng.random(n) < cfg.outlier_rate
    for k in np.flatnonzero(is_out)[max_out:]:
        is_out[k] = False
    plan = []
    for k in range(n):
        r = np.random.default_rng([cfg.seed, spec.identity_id, 2, k])
        view_id = int(r.integers(0, N_VIEWS))
        light = sample_lighting(r, cfg.ambient_floor)
        attrs = np.clip(np.array(spec.attributes) + r.normal(0, cfg.attribute_jitter, size=2), 0, 1)
        if is_out[k]:
            shift = r.uniform(0.35, 0.55)
            attrs[0] = attrs[0] + shift if attrs[0] + shift <= 1 else attrs[0] - shift
        plan.append(dict(view_id=view_id, light=light, attributes=attrs.astype(np.float64), outlier=bool(is_out[k])))
    return plan


def capture_albedo(gt_albedo, spec: IdentitySpec, attributes) -> np.ndarray:
    drift = np.asarray(attributes, dtype=np.float64) - np.asarray(spec.attributes)
    return apply_attribute_drift(gt_albedo, drift, spec.feature_seed)


def quantized(img) -> np.ndarray:
    return io.to_uint8(img).astype(np.float32) / 255.0


def build_dataset(cfg: DatasetConfig, out_dir) -> dict:
    """Generate, render and persist a dataset; returns the manifest dict.

    Everything is a pure function of ``cfg``; the manifest goes to
    ``out_dir/manifest.json`` and rasters under ``out_dir/data``.
    """
    cfg.validate()
    out = Path(out_dir)
    data = out / "data"
    views = []
    for v in range(N_VIEWS):
        w = make_warp(v, cfg.image_size)
        entry = {"name": VIEWS[v][0]}
        for key, arr in (("uv", w.uv.numpy()), ("normals", w.normals.numpy()), ("mask", w.mask.numpy().astype(np.uint8))):
            rel = f"data/views/view{v}_{key}.bin"
            io.save_array(out / rel, arr)
            entry[key] = rel
        views.append(entry)

    splits = _assign_splits(cfg)
    specs = [gen_identity(_identity_seed(cfg.seed, i), i % 6 + 1, identity_id=i) for i in range(cfg.n_identities)]

    def one_identity(spec: IdentitySpec):
        i = spec.identity_id
        gt = quantized(gen_albedo(spec, cfg.uv_size))
        io.save_png(data / f"identities/{i:04d}/albedo.png", gt)
        io.save_png(data / f"identities/{i:04d}/skin_mask.png", np.repeat(skin_mask(spec, cfg.uv_size)[..., None], 3, -1).astype(np.float32))
        records = []
        for k, cap in enumerate(_capture_plan(cfg, spec)):
            rid = i * cfg.images_per_identity + k
            img = render_observation(capture_albedo(gt, spec, cap["attributes"]), cap["light"], cap["view_id"], cfg.image_size)
            io.save_png(data / f"records/{rid:05d}.png", img)
            io.save_array(data / f"records/{rid:05d}_light.bin", cap["light"])
            records.append(
                {
                    "record_id": rid,
                    "identity_id": i,
                    "image_index": k,
                    "split": splits[i],
                    "view_id": cap["view_id"],
                    "image": f"data/records/{rid:05d}.png",
                    "lighting": f"data/records/{rid:05d}_light.bin",
                    "gt_albedo": f"data/identities/{i:04d}/albedo.png",
                    "attributes_at_capture": [float(x) for x in cap["attributes"]],
                    "outlier": cap["outlier"],
                    "skin_type": spec.skin_type,
                }
            )
        return records

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            per_identity = list(pool.map(one_identity, specs))
    else:
        per_identity = [one_identity(s) for s in specs]

    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "views": views,
        "identities": [
            {**s.to_dict(), "split": splits[s.identity_id], "skin_mask": f"data/identities/{s.identity_id:04d}/skin_mask.png"}
            for s in specs
        ],
        "splits": {name: sorted(i for i, s in splits.items() if s == name) for name in ("train", "val", "test")},
        "records": [r for recs in per_identity for r in recs],
    }
    io.write_json(out / "manifest.json", manifest)
    log.info("wrote %d records for %d identities to %s", len(manifest["records"]), len(specs), out)
    return manifest


class Dataset:
    """Read access to a persisted dataset through its manifest."""

    def __init__(self, root, manifest: dict | None = None):
        self.root = Path(root)
        self.manifest = manifest if manifest is not None else io.read_json(self.root / "manifest.json")
        if self.manifest.get("format_version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {self.manifest.get('format_version')!r}")
        self.config = DatasetConfig(**self.manifest["config"])
        self.records = self.manifest["records"]
        self.specs = {d["identity_id"]: IdentitySpec.from_dict(d) for d in self.manifest["identities"]}
        self._cache: dict = {}

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def split_ids(self, split: str) -> list[int]:
        return list(self.manifest["splits"][split])

    def records_of(self, identity_id: int) -> list[dict]:
        return [r for r in self.records if r["identity_id"] == identity_id]

    def records_in(self, split: str) -> list[dict]:
        return [r for r in self.records if r["split"] == split]

    def image(self, rec) -> np.ndarray:
        return self._cached(("img", rec["record_id"]), lambda: io.load_png(self.root / rec["image"]))

    def lighting(self, rec) -> np.ndarray:
        return self._cached(("light", rec["record_id"]), lambda: io.load_array(self.root / rec["lighting"]))

    def albedo(self, identity_id: int) -> np.ndarray:
        return self._cached(("albedo", identity_id), lambda: io.load_png(self.root / f"data/identities/{identity_id:04d}/albedo.png"))

    def skin_mask(self, identity_id: int) -> np.ndarray:
        return self._cached(
            ("mask", identity_id),
            lambda: io.load_png(self.root / f"data/identities/{identity_id:04d}/skin_mask.png")[..., 0] > 0.5,
        )

    def warp(self, view_id: int) -> WarpField:
        def load():
            v = self.manifest["views"][view_id]
            return WarpField(
                io.load_array(self.root / v["uv"]),
                io.load_array(self.root / v["normals"]),
                io.load_array(self.root / v["mask"]).astype(bool),
            )

        return self._cached(("warp", view_id), load)

    def capture_albedo(self, rec) -> np.ndarray:
        spec = self.specs[rec["identity_id"]]
        return capture_albedo(self.albedo(rec["identity_id"]), spec, rec["attributes_at_capture"])

    def rerender(self, rec) -> np.ndarray:
        albedo = torch.as_tensor(self.capture_albedo(rec))
        with torch.no_grad():
            return render(albedo, torch.as_tensor(self.lighting(rec)), self.warp(rec["view_id"])).numpy()

    def lit_texture(self, rec) -> np.ndarray:
        """Ground-truth UV texture of a record (capture albedo with its lighting baked in)."""
        with torch.no_grad():
            return lit_texture(self.capture_albedo(rec), self.lighting(rec), rec["view_id"]).numpy()
