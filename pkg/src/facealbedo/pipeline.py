"""Stage drivers behind the command line: data generation, the three training stages,
evaluation, reporting and resumption.

A run directory holds everything one run produces::

    config.echo  manifest.json  data/  logs/
    ckpt/{stage1,stage2,stage3,embedder}/checkpoint.zip
    eval/  report/

Randomness is derived from ``(seed, stage, step)`` so an interrupted stage
resumes onto exactly the batches an uninterrupted run would have drawn.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import io, synth
from .albedo import AlbedoConfig, AlbedoModel, AlbedoState, filter_group, infer, light_pretrain_step, train_step
from .config import RunConfig, dump_config, from_dict, to_dict
from .embedder import IdentityEmbedder, train_embedder
from .metrics import fair_report, identity_sim, perceptual_distance, psnr, ssim
from .render import lambertian_compose, shade, warp_uv_to_image
from .texture import (
    DualDiscriminator,
    TextureConfig,
    TextureState,
    boundary_energy,
    detail_energy,
    finetune_step,
    param_fingerprint,
    unwrap_texture,
)
from .vq import Encoder, PatchDiscriminator, VQConfig, VQModel, pretrain_step, quantize

log = logging.getLogger(__name__)

LOG_SCHEMA_VERSION = 1
STAGE_CODES = {"stage1": 1, "embedder": 2, "stage2": 3, "stage3": 4, "eval": 5, "pool": 6, "heldout": 7, "light": 8}
LIGHT_PRETRAIN_BATCH = 16
STAGE2_VARIANTS = {
    "dual": {},
    "latent_only": {"use_image_disc": False},
    "image_only": {"use_latent_disc": False},
}
STAGE3_VARIANTS = {
    "full": {},
    "baseline": {"use_filter": False, "use_gid": False},
    "filter_only": {"use_gid": False},
    "gid_only": {"use_filter": False},
}
DEFAULT_STAGE2 = "dual"
DEFAULT_STAGE3 = "full"


class MissingCheckpointError(RuntimeError):
    """An upstream stage has no finished checkpoint."""


class ResumeError(RuntimeError):
    """Nothing to resume in a run directory."""


# ------------------------------------------------------------ run directory


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def config_echo(self) -> Path:
        return self.root / "config.echo"

    def ckpt(self, stage: str, variant: str | None = None) -> Path:
        default = {"stage2": DEFAULT_STAGE2, "stage3": DEFAULT_STAGE3}.get(stage)
        name = stage if variant in (None, default) else f"{stage}-{variant}"
        return self.root / "ckpt" / name / "checkpoint.zip"

    def eval_dir(self, variant: str = DEFAULT_STAGE3) -> Path:
        base = self.root / "eval"
        return base if variant == DEFAULT_STAGE3 else base / "variants" / variant

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    def log_path(self, stage: str, variant: str | None = None) -> Path:
        return self.root / "logs" / (f"{stage}.jsonl" if not variant else f"{stage}-{variant}.jsonl")

    def dataset(self) -> synth.Dataset:
        if not self.manifest.is_file():
            raise MissingCheckpointError(f"no dataset manifest in {self.root}; run gen-data first")
        return synth.Dataset(self.root)


def write_config_echo(run: RunDir, cfg: RunConfig) -> None:
    run.root.mkdir(parents=True, exist_ok=True)
    run.config_echo.write_text(dump_config(cfg))


def append_log(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(json.dumps({"schema_version": LOG_SCHEMA_VERSION, **record}, sort_keys=True) + "\n")


# ------------------------------------------------------------------ seeding


def derive_seed(seed: int, stage: str, *extra: int) -> int:
    return int(np.random.SeedSequence([seed, STAGE_CODES[stage], *extra]).generate_state(1, dtype=np.uint64)[0] >> 1)


def step_rng(seed: int, stage: str, step: int, variant: str = "") -> np.random.Generator:
    return np.random.default_rng([seed, STAGE_CODES[stage], zlib.crc32(variant.encode()), step])


def _torch_gen(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(0, 2**62)))


def configure_torch(cfg: RunConfig) -> None:
    torch.set_num_threads(max(1, cfg.run.num_threads))


# ------------------------------------------------------ state (de)serializing


def module_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    head = prefix + "/"
    sd = {k[len(head) :]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(head)}
    if not sd:
        raise io.CheckpointError(f"checkpoint has no arrays for {prefix!r}")
    module.load_state_dict(sd)


def optim_arrays(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], dict]:
    sd = opt.state_dict()
    arrays = {}
    for pid, st in sd["state"].items():
        for key, val in st.items():
            arrays[f"{prefix}/{pid}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
    return arrays, {"param_groups": sd["param_groups"]}


def load_optim(prefix: str, opt: torch.optim.Optimizer, arrays: dict, meta: dict) -> None:
    head = prefix + "/"
    state: dict = {}
    for k, v in arrays.items():
        if k.startswith(head):
            pid, key = k[len(head) :].split("/", 1)
            state.setdefault(int(pid), {})[key] = torch.from_numpy(np.array(v))
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def _adam(params, lr: float, cfg: RunConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(cfg.optim.beta1, cfg.optim.beta2))


def _save_stage(path: Path, arrays: dict, meta: dict) -> None:
    io.save_checkpoint(path, arrays, meta)


def load_finished(path: Path, what: str) -> tuple[dict, dict]:
    if not path.is_file():
        raise MissingCheckpointError(f"missing {what} checkpoint: {path}")
    arrays, meta = io.load_checkpoint(path)
    if not meta.get("done", False):
        raise MissingCheckpointError(f"{what} checkpoint {path} is unfinished; run resume first")
    return arrays, meta


def _vq_config(cfg: RunConfig) -> VQConfig:
    return VQConfig(
        N=cfg.vq.N,
        d=cfg.vq.d,
        h=cfg.run.uv_size // 8,
        w=cfg.run.uv_size // 8,
        beta=cfg.vq.beta,
        lambda0=cfg.vq.lambda0,
        gan_form=cfg.vq.gan_form,
        disc_start=cfg.vq.disc_start,
        reseed_every=cfg.vq.reseed_every,
    )


def load_vq(run: RunDir) -> tuple[VQModel, dict]:
    arrays, meta = load_finished(run.ckpt("stage1"), "stage-1")
    cfg = from_dict(meta["config"])
    model = VQModel(_vq_config(cfg))
    load_module("model", model, arrays)
    model.eval()
    return model, meta


def load_embedder(run: RunDir) -> IdentityEmbedder:
    arrays, _ = load_finished(run.ckpt("embedder"), "embedder")
    emb = IdentityEmbedder()
    load_module("embedder", emb, arrays)
    return emb.freeze()


def load_stage2_encoder(run: RunDir, variant: str = DEFAULT_STAGE2) -> tuple[Encoder, dict]:
    arrays, meta = load_finished(run.ckpt("stage2", variant), f"stage-2 ({variant})")
    cfg = from_dict(meta["config"])
    enc = Encoder(cfg.vq.d)
    load_module("encoder", enc, arrays)
    enc.eval()
    return enc, arrays


# ------------------------------------------------------------------ gen-data


def gen_data(run: RunDir, cfg: RunConfig) -> dict:
    dcfg = synth.DatasetConfig(
        n_identities=cfg.data.n_identities,
        images_per_identity=cfg.data.images_per_identity,
        image_size=cfg.run.image_size,
        uv_size=cfg.run.uv_size,
        test_fraction=cfg.data.test_fraction,
        val_fraction=cfg.data.val_fraction,
        outlier_rate=cfg.data.outlier_rate,
        attribute_jitter=cfg.data.attribute_jitter,
        ambient_floor=cfg.data.ambient_floor,
        seed=cfg.run.seed,
        workers=cfg.data.workers,
    )
    write_config_echo(run, cfg)
    return synth.build_dataset(dcfg, run.root)


# ------------------------------------------------------------------- stage 1


def _stage1_pool(ds: synth.Dataset, cfg: RunConfig) -> list[int]:
    return ds.split_ids("train")[: cfg.vq.n_identities]


def stage1_batch(ds: synth.Dataset, ids: list[int], batch_size: int, rng: np.random.Generator) -> torch.Tensor:
    """A mix of ground-truth albedos, re-lit UV textures and face images."""
    out = []
    for _ in range(batch_size):
        i = ids[int(rng.integers(len(ids)))]
        kind = int(rng.integers(3))
        if kind == 0:
            out.append(ds.albedo(i))
        elif kind == 1:
            light = synth.sample_lighting(rng, ds.config.ambient_floor)
            with torch.no_grad():
                out.append(synth.lit_texture(ds.albedo(i), light, int(rng.integers(synth.N_VIEWS))).numpy())
        else:
            recs = ds.records_of(i)
            out.append(ds.image(recs[int(rng.integers(len(recs)))]))
    return torch.as_tensor(np.stack(out), dtype=torch.float32)


def stage1_heldout(ds: synth.Dataset, seed: int) -> torch.Tensor:
    """Held-out textures: each test identity's albedo and one re-lit texture of it."""
    rng = np.random.default_rng([seed, STAGE_CODES["heldout"]])
    ids = ds.split_ids("test")
    texs = [ds.albedo(i) for i in ids]
    with torch.no_grad():
        for i in ids:
            light = synth.sample_lighting(rng, ds.config.ambient_floor)
            texs.append(synth.lit_texture(ds.albedo(i), light, int(rng.integers(synth.N_VIEWS))).numpy())
    return torch.as_tensor(np.stack(texs), dtype=torch.float32)


def heldout_psnr(model: VQModel, held: torch.Tensor) -> float:
    with torch.no_grad():
        x_hat, *_ = model(held, track=False)
    return float(np.mean([psnr(held[k], x_hat[k]) for k in range(len(held))]))


def train_codebook(run: RunDir, cfg: RunConfig, stop_at: int | None = None, resume: bool = False) -> dict:
    configure_torch(cfg)
    ds = run.dataset()
    ids = _stage1_pool(ds, cfg)
    vcfg = _vq_config(cfg)
    torch.manual_seed(derive_seed(cfg.run.seed, "stage1"))
    model = VQModel(vcfg)
    disc = PatchDiscriminator()
    opt_g = _adam(model.parameters(), cfg.vq.lr, cfg)
    opt_d = _adam(disc.parameters(), cfg.vq.disc_lr, cfg)
    path = run.ckpt("stage1")
    start, elapsed = 0, 0.0
    if resume:
        arrays, meta = io.load_checkpoint(path)
        load_module("model", model, arrays)
        load_module("disc", disc, arrays)
        load_optim("opt_g", opt_g, arrays, meta["opt_g"])
        load_optim("opt_d", opt_d, arrays, meta["opt_d"])
        start, elapsed = meta["step"], meta.get("train_seconds", 0.0)

    def save(step: int, done: bool, extra: dict | None = None) -> None:
        arrays = {**module_arrays("model", model), **module_arrays("disc", disc)}
        a_g, m_g = optim_arrays("opt_g", opt_g)
        a_d, m_d = optim_arrays("opt_d", opt_d)
        meta = {"stage": "stage1", "step": step, "done": done, "config": to_dict(cfg), "opt_g": m_g, "opt_d": m_d,
                "train_seconds": elapsed, **(extra or {})}
        _save_stage(path, {**arrays, **a_g, **a_d}, meta)

    held = stage1_heldout(ds, cfg.run.seed) if cfg.vq.eval_every else None
    total = cfg.vq.steps
    end = total if stop_at is None else min(total, stop_at)
    t0 = time.perf_counter()
    step = start
    while step < end:
        rng = step_rng(cfg.run.seed, "stage1", step)
        batch = stage1_batch(ds, ids, cfg.vq.batch_size, rng)
        if step % vcfg.reseed_every == 0:
            # step 0 doubles as a data-dependent initialisation of every entry
            with torch.no_grad():
                n_dead = model.codebook.reseed_dead(model.encode(batch), _torch_gen(rng))
            model.codebook.reset_usage()
            if n_dead:
                append_log(run.log_path("stage1"), {"stage": "stage1", "step": step, "event": "reseed", "codes": n_dead})
        model.train()
        report = pretrain_step(batch, model, disc, opt_g, opt_d, step)
        append_log(run.log_path("stage1"), {"stage": "stage1", "step": step, **report})
        step += 1
        if cfg.vq.eval_every and step % cfg.vq.eval_every == 0:
            model.eval()
            append_log(run.log_path("stage1"), {"stage": "stage1", "step": step, "event": "heldout",
                                                "heldout_psnr": heldout_psnr(model, held)})
        if cfg.vq.max_minutes > 0 and elapsed + time.perf_counter() - t0 > 60 * cfg.vq.max_minutes:
            log.warning("stage-1 time budget reached at step %d", step)
            end = step
            total = step
            break
        if step % cfg.run.ckpt_every == 0 and step < end:
            elapsed_now = elapsed + time.perf_counter() - t0
            elapsed, t0 = elapsed_now, time.perf_counter()
            save(step, False)
    elapsed += time.perf_counter() - t0
    done = step >= total
    model.eval()
    summary = {"step": step, "done": done}
    if done:
        summary["heldout_psnr"] = heldout_psnr(model, stage1_heldout(ds, cfg.run.seed))
        used = int((model.codebook.usage_counts > 0).sum())
        summary["codes_used_since_reseed"] = used
        io.write_json(run.root / "eval" / "stage1.json", {"heldout_psnr": summary["heldout_psnr"], "steps": step})
    save(step, done, {"summary": summary})
    summary["train_seconds"] = elapsed
    return summary


# ----------------------------------------------------------------- embedder


def ensure_embedder(run: RunDir, cfg: RunConfig) -> IdentityEmbedder:
    path = run.ckpt("embedder")
    if path.is_file():
        return load_embedder(run)
    configure_torch(cfg)
    ds = run.dataset()
    recs = ds.records_in("train")
    images = np.stack([ds.image(r) for r in recs])
    labels = np.array([r["identity_id"] for r in recs])
    emb = train_embedder(
        images,
        labels,
        steps=cfg.embedder.steps,
        batch_size=cfg.embedder.batch_size,
        lr=cfg.embedder.lr,
        seed=derive_seed(cfg.run.seed, "embedder"),
        log_fn=lambda r: append_log(run.log_path("embedder"), {"stage": "embedder", **r}),
    )
    _save_stage(path, module_arrays("embedder", emb), {"stage": "embedder", "step": cfg.embedder.steps, "done": True,
                                                        "config": to_dict(cfg)})
    return emb


# ------------------------------------------------------------------- stage 2


def texture_pool(ds: synth.Dataset, size: int, seed: int) -> torch.Tensor:
    """Ground-truth UV textures of training identities under random lighting."""
    rng = np.random.default_rng([seed, STAGE_CODES["pool"]])
    ids = ds.split_ids("train")
    out = []
    with torch.no_grad():
        for k in range(size):
            i = ids[k % len(ids)]
            light = synth.sample_lighting(rng, ds.config.ambient_floor)
            out.append(synth.lit_texture(ds.albedo(i), light, int(rng.integers(synth.N_VIEWS))).numpy())
    return torch.as_tensor(np.stack(out))


def texture_config(cfg: RunConfig, variant: str) -> TextureConfig:
    if variant not in STAGE2_VARIANTS:
        raise ValueError(f"unknown stage-2 variant {variant!r}; choose from {sorted(STAGE2_VARIANTS)}")
    base = TextureConfig(
        lambda1=cfg.texture.lambda1,
        lambda2=cfg.texture.lambda2,
        lambda3=cfg.texture.lambda3,
        commit=cfg.texture.commit,
        gan_form=cfg.texture.gan_form,
        use_latent_disc=cfg.texture.use_latent_disc,
        use_image_disc=cfg.texture.use_image_disc,
    )
    return replace(base, **STAGE2_VARIANTS[variant])


def _random_view(origin: int, rng: np.random.Generator) -> int:
    """A view other than ``origin``; so real and fake renders share the same view marginal."""
    others = [v for v in range(synth.N_VIEWS) if v != origin]
    return others[int(rng.integers(len(others)))]


def train_texture(run: RunDir, cfg: RunConfig, variant: str = DEFAULT_STAGE2, stop_at: int | None = None,
                  resume: bool = False, freeze_check: bool = False) -> dict:
    configure_torch(cfg)
    tcfg = texture_config(cfg, variant)
    vq_model, _ = load_vq(run)
    ds = run.dataset()
    embedder = ensure_embedder(run, cfg)
    torch.manual_seed(derive_seed(cfg.run.seed, "stage2", zlib.crc32(variant.encode())))
    enc_uv = Encoder(cfg.vq.d)
    enc_uv.load_state_dict(vq_model.encoder.state_dict())
    dd = DualDiscriminator(cfg.vq.d, tcfg.use_latent_disc, tcfg.use_image_disc)
    opt_enc = _adam(enc_uv.parameters(), cfg.texture.lr, cfg)
    opt_dd = _adam(dd.parameters(), cfg.texture.disc_lr, cfg)
    state = TextureState(enc_uv, vq_model.codebook, vq_model.decoder, dd, embedder, opt_enc, opt_dd, tcfg)
    stage1_print = state.frozen_fingerprint
    path = run.ckpt("stage2", variant)
    start, elapsed = 0, 0.0
    if resume:
        arrays, meta = io.load_checkpoint(path)
        load_module("encoder", enc_uv, arrays)
        load_module("dd", dd, arrays)
        load_optim("opt_enc", opt_enc, arrays, meta["opt_enc"])
        load_optim("opt_dd", opt_dd, arrays, meta["opt_dd"])
        start, elapsed = meta["step"], meta.get("train_seconds", 0.0)

    def save(step: int, done: bool) -> None:
        arrays = {
            **module_arrays("encoder", enc_uv),
            **module_arrays("codebook", vq_model.codebook),
            **module_arrays("decoder", vq_model.decoder),
            **module_arrays("dd", dd),
        }
        a_e, m_e = optim_arrays("opt_enc", opt_enc)
        a_d, m_d = optim_arrays("opt_dd", opt_dd)
        meta = {"stage": "stage2", "variant": variant, "step": step, "done": done, "config": to_dict(cfg),
                "opt_enc": m_e, "opt_dd": m_d, "frozen_fingerprint": stage1_print,
                "train_seconds": elapsed + time.perf_counter() - t0}
        _save_stage(path, {**arrays, **a_e, **a_d}, meta)

    t0 = time.perf_counter()
    recs = ds.records_in("train")
    pool = texture_pool(ds, cfg.texture.pool_size, cfg.run.seed)
    total = cfg.texture.steps
    end = total if stop_at is None else min(total, stop_at)
    step = start
    B = cfg.texture.batch_size
    while step < end:
        rng = step_rng(cfg.run.seed, "stage2", step, variant)
        picks = [recs[int(k)] for k in rng.integers(0, len(recs), size=B)]
        face = {
            "images": torch.as_tensor(np.stack([ds.image(r) for r in picks])),
            "warps": [ds.warp(r["view_id"]) for r in picks],
            "random_warps": [ds.warp(_random_view(r["view_id"], rng)) for r in picks],
        }
        tex_batch = pool[torch.as_tensor(rng.integers(0, len(pool), size=B))]
        enc_uv.train()
        report = finetune_step(face, tex_batch, state)
        append_log(run.log_path("stage2", variant), {"stage": "stage2", "variant": variant, "step": step, **report})
        step += 1
        if step % cfg.run.ckpt_every == 0 and step < end:
            save(step, False)
    done = step >= total
    enc_uv.eval()
    save(step, done)
    summary = {"step": step, "done": done, "variant": variant}
    if freeze_check:
        summary["freeze_ok"] = freeze_check_pair(run.ckpt("stage1"), path)
    return summary


def freeze_check_pair(ckpt_a, ckpt_b) -> bool:
    """True when the codebook and decoder arrays of two checkpoints are bit-identical."""
    a, _ = io.load_checkpoint(ckpt_a)
    b, _ = io.load_checkpoint(ckpt_b)

    def frozen(arrays):
        out = {}
        for k, v in arrays.items():
            for head, alias in (("model/codebook.", "codebook/"), ("model/decoder.", "decoder/"),
                                ("codebook/", "codebook/"), ("decoder/", "decoder/")):
                if k.startswith(head):
                    name = alias + k[len(head):]
                    if name != "codebook/usage_counts":
                        out[name] = v
        return out

    fa, fb = frozen(a), frozen(b)
    if not fa or set(fa) != set(fb):
        return False
    return all(np.array_equal(fa[k], fb[k]) for k in fa)


def stage2_statistics(run: RunDir, variant: str = DEFAULT_STAGE2) -> dict:
    """Masked texture PSNR and the seam/detail statistics on every test record."""
    vq_model, _ = load_vq(run)
    enc, _ = load_stage2_encoder(run, variant)
    ds = run.dataset()
    rows = []
    with torch.no_grad():
        for rec in ds.records_in("test"):
            img = torch.as_tensor(ds.image(rec))[None]
            tex = unwrap_texture(img, enc, vq_model.codebook, vq_model.decoder)[0].numpy()
            vis = synth.uv_visibility(rec["view_id"], ds.config.uv_size)
            rows.append(
                {
                    "record_id": rec["record_id"],
                    "masked_psnr": psnr(tex, ds.lit_texture(rec), vis),
                    "boundary_energy": boundary_energy(tex, vis),
                    "detail_energy": detail_energy(tex, vis),
                }
            )
    return {
        "variant": variant,
        "mean_masked_psnr": float(np.mean([r["masked_psnr"] for r in rows])),
        "records": rows,
    }


# ------------------------------------------------------------------- stage 3


def albedo_config(cfg: RunConfig, variant: str) -> AlbedoConfig:
    if variant not in STAGE3_VARIANTS:
        raise ValueError(f"unknown stage-3 variant {variant!r}; choose from {sorted(STAGE3_VARIANTS)}")
    base = AlbedoConfig(
        eta1=cfg.albedo.eta1,
        eta2=cfg.albedo.eta2,
        n=cfg.albedo.n,
        tau=cfg.albedo.tau,
        use_filter=cfg.albedo.use_filter,
        use_gid=cfg.albedo.use_gid,
        n_max=cfg.albedo.n_max,
        light_level=cfg.albedo.light_level,
    )
    return replace(base, **STAGE3_VARIANTS[variant])


def build_albedo_state(run: RunDir, cfg: RunConfig, variant: str, with_optimizer: bool) -> AlbedoState:
    acfg = albedo_config(cfg, variant)
    vq_model, _ = load_vq(run)
    enc, _ = load_stage2_encoder(run)
    embedder = load_embedder(run)
    h = cfg.run.uv_size // 8
    model = AlbedoModel(h, h, cfg.vq.d, cfg.run.image_size, acfg.light_level,
                        seed=derive_seed(cfg.run.seed, "stage3", cfg.albedo.seed) % (2**31))
    groups = [{"params": list(model.aggregator.parameters())},
              {"params": list(model.light.parameters()), "lr": cfg.albedo.lr * cfg.albedo.light_lr_scale}]
    opt = _adam(groups, cfg.albedo.lr, cfg) if with_optimizer else None
    return AlbedoState(model, enc, vq_model.codebook, vq_model.decoder, embedder, opt, acfg)


def load_albedo_state(run: RunDir, variant: str = DEFAULT_STAGE3) -> AlbedoState:
    arrays, meta = load_finished(run.ckpt("stage3", variant), f"stage-3 ({variant})")
    state = build_albedo_state(run, from_dict(meta["config"]), variant, with_optimizer=False)
    load_module("albedo", state.model, arrays)
    state.model.eval()
    return state


def sample_group(ds: synth.Dataset, identity_id: int, acfg: AlbedoConfig, rng: np.random.Generator) -> list[dict]:
    cands = ds.records_of(identity_id)
    tau = acfg.tau if acfg.use_filter else math.inf
    return filter_group(cands, tau, acfg.n, rng)


def pretrain_light(ds: synth.Dataset, recs: list[dict], estimator: torch.nn.Module, cfg: RunConfig) -> list[float]:
    """Supervised light-estimator warm start on training images and their generator lighting."""
    opt = _adam(estimator.parameters(), cfg.albedo.light_pretrain_lr, cfg)
    estimator.train()
    losses = []
    for step in range(cfg.albedo.light_pretrain_steps):
        rng = step_rng(cfg.run.seed, "light", step, f"seed{cfg.albedo.seed}")
        picks = [recs[int(k)] for k in rng.integers(0, len(recs), size=LIGHT_PRETRAIN_BATCH)]
        images = torch.as_tensor(np.stack([ds.image(r) for r in picks]))
        lights = torch.as_tensor(np.stack([ds.lighting(r) for r in picks]), dtype=torch.float32)
        losses.append(light_pretrain_step(estimator, images, lights, [ds.warp(r["view_id"]) for r in picks], opt))
    return losses


def train_albedo(run: RunDir, cfg: RunConfig, variant: str = DEFAULT_STAGE3, stop_at: int | None = None,
                 resume: bool = False) -> dict:
    configure_torch(cfg)
    ds = run.dataset()
    state = build_albedo_state(run, cfg, variant, with_optimizer=True)
    acfg = state.cfg
    path = run.ckpt("stage3", variant)
    start, elapsed = 0, 0.0
    if resume:
        arrays, meta = io.load_checkpoint(path)
        load_module("albedo", state.model, arrays)
        load_optim("opt", state.optimizer, arrays, meta["opt"])
        start, elapsed = meta["step"], meta.get("train_seconds", 0.0)
    frozen_print = param_fingerprint(state.encoder, state.codebook, state.decoder, state.embedder)

    def save(step: int, done: bool) -> None:
        a_o, m_o = optim_arrays("opt", state.optimizer)
        meta = {"stage": "stage3", "variant": variant, "step": step, "done": done, "config": to_dict(cfg),
                "opt": m_o, "frozen_fingerprint": frozen_print, "train_seconds": elapsed + time.perf_counter() - t0}
        _save_stage(path, {**module_arrays("albedo", state.model), **a_o}, meta)

    recs = ds.records_in("train")
    latents = {r["record_id"]: z for r, z in zip(recs, state.encode(torch.as_tensor(np.stack([ds.image(r) for r in recs]))))}
    with torch.no_grad():
        embs = {r["record_id"]: state.embedder(torch.as_tensor(ds.image(r))[None])[0] for r in recs}
    ids = ds.split_ids("train")
    t0 = time.perf_counter()
    if start == 0:
        pretrain_light(ds, recs, state.model.light, cfg)
    total = cfg.albedo.steps
    end = total if stop_at is None else min(total, stop_at)
    step = start
    while step < end:
        # shared by all variants of one seed, so ablations see the same identity draws
        rng = step_rng(cfg.run.seed, "stage3", step, f"seed{cfg.albedo.seed}")
        groups = [sample_group(ds, ids[int(rng.integers(len(ids)))], acfg, rng) for _ in range(cfg.albedo.batch_size)]
        batch = {
            "latents": torch.stack([torch.stack([latents[r["record_id"]] for r in g]) for g in groups]),
            "images": torch.as_tensor(np.stack([np.stack([ds.image(r) for r in g]) for g in groups])),
            "warps": [[ds.warp(r["view_id"]) for r in g] for g in groups],
            "image_emb": torch.stack([torch.stack([embs[r["record_id"]] for r in g]) for g in groups]),
        }
        state.model.train()
        report = train_step(batch, state)
        append_log(run.log_path("stage3", variant), {"stage": "stage3", "variant": variant, "step": step, **report})
        step += 1
        if step % cfg.run.ckpt_every == 0 and step < end:
            save(step, False)
    if param_fingerprint(state.encoder, state.codebook, state.decoder, state.embedder) != frozen_print:
        raise RuntimeError("frozen stage-3 inputs changed during training")
    done = step >= total
    save(step, done)
    return {"step": step, "done": done, "variant": variant, "train_seconds": elapsed + time.perf_counter() - t0}


# ---------------------------------------------------------------- evaluation


def eval_inputs(ds: synth.Dataset, identity_id: int, n: int, tau: float) -> list[dict]:
    """The first ``n`` mutually consistent records of an identity, in stable order."""
    return filter_group(ds.records_of(identity_id), tau, n, rng=None)


def rerender(albedo: torch.Tensor, light: torch.Tensor, warp) -> torch.Tensor:
    return lambertian_compose(warp_uv_to_image(albedo, warp), shade(warp, light))


def evaluate(run: RunDir, variant: str = DEFAULT_STAGE3, write_outputs: bool = True) -> dict:
    ds = run.dataset()
    state = load_albedo_state(run, variant)
    _, meta = io.load_checkpoint(run.ckpt("stage3", variant))
    cfg = from_dict(meta["config"])
    configure_torch(cfg)
    n_values = cfg.eval.n_list()
    n_infer = cfg.eval.n_infer
    n_pick = max(n_values + [n_infer])
    test_ids = ds.split_ids("test")
    out_dir = run.eval_dir(variant)
    per_id, preds, gts, types, masks = [], [], [], [], []
    curve = {n: [] for n in n_values}
    lights_out = {}
    for i in test_ids:
        picks = eval_inputs(ds, i, n_pick, cfg.albedo.tau)
        images = np.stack([ds.image(r) for r in picks])
        gt = ds.albedo(i)
        mask = ds.skin_mask(i)
        for n in n_values:
            a_n, _ = infer(images[:n], state)
            curve[n].append(float(np.abs(a_n.numpy() - gt)[mask].mean()))
        albedo, lights = infer(images[:n_infer], state)
        a = albedo.numpy()
        renders = [rerender(albedo, lights[k], ds.warp(picks[k]["view_id"])).numpy() for k in range(n_infer)]
        single = [psnr(ds.lit_texture(r), gt) for r in picks[:n_infer]]
        per_id.append(
            {
                "identity_id": i,
                "skin_type": ds.specs[i].skin_type,
                "psnr": psnr(a, gt),
                "ssim": ssim(a, gt),
                "best_single_psnr": max(single),
                "id_sim": float(np.mean([identity_sim(renders[k], images[k], state.embedder) for k in range(n_infer)])),
                "perceptual": float(np.mean([perceptual_distance(renders[k], images[k], state.embedder) for k in range(n_infer)])),
                "render_psnr": float(np.mean([psnr(renders[k], images[k], ds.warp(picks[k]["view_id"]).mask) for k in range(n_infer)])),
            }
        )
        preds.append(a)
        gts.append(gt)
        types.append(ds.specs[i].skin_type)
        masks.append(mask)
        lights_out[i] = {"record_ids": [r["record_id"] for r in picks[:n_infer]],
                         "view_ids": [r["view_id"] for r in picks[:n_infer]],
                         "sh": lights.numpy().round(8).tolist()}
        if write_outputs:
            io.save_png(out_dir / "albedo" / f"{i:04d}.png", a)
    fair = fair_report(preds, gts, types, masks)

    def mean(key):
        return float(np.mean([r[key] for r in per_id]))

    metrics = {
        "variant": variant,
        "n_identities": len(test_ids),
        "n_infer": n_infer,
        "psnr": mean("psnr"),
        "ssim": mean("ssim"),
        "id_sim": mean("id_sim"),
        "perceptual": mean("perceptual"),
        "render_psnr": mean("render_psnr"),
        "delighting": {
            "pred_psnr": mean("psnr"),
            "best_single_psnr": mean("best_single_psnr"),
            "gain_db": mean("psnr") - mean("best_single_psnr"),
        },
        "fair": fair.to_dict(),
        "n_curve": {str(n): float(np.mean(v)) for n, v in curve.items()},
    }
    if write_outputs:
        io.write_json(out_dir / "metrics.json", metrics)
        io.write_json(out_dir / "lights.json", {str(k): v for k, v in lights_out.items()})
        _write_csv(out_dir / "per_identity.csv", per_id)
        _write_csv(out_dir / "n_curve.csv", [{"n": n, "mae": metrics["n_curve"][str(n)]} for n in n_values])
    return metrics


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


# -------------------------------------------------------------------- report


def report(run: RunDir) -> dict:
    """Image grid (input | texture | albedo | re-render) and the n-vs-error curve."""
    eval_dir = run.eval_dir()
    if not (eval_dir / "metrics.json").is_file():
        raise MissingCheckpointError(f"no evaluation outputs in {eval_dir}; run eval first")
    ds = run.dataset()
    vq_model, _ = load_vq(run)
    enc, _ = load_stage2_encoder(run)
    lights = io.read_json(eval_dir / "lights.json")
    rows = []
    with torch.no_grad():
        for i in ds.split_ids("test"):
            entry = lights[str(i)]
            rec = next(r for r in ds.records_of(i) if r["record_id"] == entry["record_ids"][0])
            img = ds.image(rec)
            tex = unwrap_texture(torch.as_tensor(img)[None], enc, vq_model.codebook, vq_model.decoder)[0].numpy()
            albedo = io.load_png(eval_dir / "albedo" / f"{i:04d}.png")
            # recomputed from the stored albedo and lighting, not read from a cache
            rr = rerender(torch.as_tensor(albedo), torch.as_tensor(entry["sh"][0], dtype=torch.float32), ds.warp(rec["view_id"]))
            rows.append(np.concatenate([img, tex, albedo, rr.numpy()], axis=1))
    out = run.report_dir
    out.mkdir(parents=True, exist_ok=True)
    io.save_png(out / "grid.png", np.concatenate(rows, axis=0))
    metrics = io.read_json(eval_dir / "metrics.json")
    curve = sorted((int(n), v) for n, v in metrics["n_curve"].items())
    _write_csv(out / "n_curve.csv", [{"n": n, "mae": v} for n, v in curve])
    _plot_curve(curve, out / "n_curve.png")
    summary = {
        "rows": len(rows),
        "psnr": metrics["psnr"],
        "ssim": metrics["ssim"],
        "fair_score": metrics["fair"]["score"],
        "delighting_gain_db": metrics["delighting"]["gain_db"],
    }
    io.write_json(out / "summary.json", summary)
    return summary


def _plot_curve(curve, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    ax.plot([n for n, _ in curve], [v for _, v in curve], marker="o")
    ax.set_xlabel("input images n")
    ax.set_ylabel("mean |pred - gt|")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# -------------------------------------------------------------------- resume


def resume(run: RunDir, stop_at: int | None = None) -> dict:
    """Continue the first unfinished stage checkpoint found in the run directory."""
    ckpts = sorted((run.root / "ckpt").glob("*/checkpoint.zip")) if (run.root / "ckpt").is_dir() else []
    if not ckpts:
        raise ResumeError(f"no checkpoints to resume in {run.root}")
    order = {"stage1": 0, "embedder": 1, "stage2": 2, "stage3": 3}
    metas = []
    for p in ckpts:
        _, meta = io.load_checkpoint(p)
        metas.append((order.get(meta.get("stage"), 9), p, meta))
    pending = [m for m in sorted(metas, key=lambda t: t[0]) if not m[2].get("done", False)]
    if not pending:
        return {"resumed": None, "message": "all checkpoints are finished"}
    _, path, meta = pending[0]
    cfg = from_dict(meta["config"])
    stage = meta["stage"]
    if stage == "stage1":
        out = train_codebook(run, cfg, stop_at=stop_at, resume=True)
    elif stage == "stage2":
        out = train_texture(run, cfg, meta.get("variant", DEFAULT_STAGE2), stop_at=stop_at, resume=True)
    elif stage == "stage3":
        out = train_albedo(run, cfg, meta.get("variant", DEFAULT_STAGE3), stop_at=stop_at, resume=True)
    else:
        raise ResumeError(f"cannot resume stage {stage!r}")
    return {"resumed": stage, "from_step": meta["step"], **out}


def last_loss(run: RunDir, stage: str, variant: str | None = None, key: str = "total") -> float:
    lines = run.log_path(stage, variant).read_text().splitlines()
    recs = [json.loads(l) for l in lines]
    return [r for r in recs if key in r][-1][key]


