"""Run configuration: sectioned key-value files with every default pre-filled."""
from __future__ import annotations

import configparser
import dataclasses
import io as _io
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    name: str = "default"
    seed: int = 0
    image_size: int = 64
    uv_size: int = 64
    num_threads: int = 1
    ckpt_every: int = 500


@dataclass
class DataSection:
    n_identities: int = 80
    images_per_identity: int = 8
    test_fraction: float = 0.25
    val_fraction: float = 0.0
    outlier_rate: float = 0.15
    attribute_jitter: float = 0.02
    ambient_floor: float = 0.15
    workers: int = 1


@dataclass
class OptimSection:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4


@dataclass
class VQSection:
    N: int = 256
    d: int = 64
    beta: float = 0.25
    lambda0: float = 0.8
    gan_form: str = "nonsat"
    disc_start: int = 0
    reseed_every: int = 2000
    steps: int = 2000
    lr: float = 1e-5
    disc_lr: float = 1e-5
    batch_size: int = 4
    n_identities: int = 50
    max_minutes: float = 0.0
    eval_every: int = 0


@dataclass
class EmbedderSection:
    steps: int = 1500
    lr: float = 2e-3
    batch_size: int = 64


@dataclass
class TextureSection:
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 0.1
    commit: float = 0.25
    gan_form: str = "nonsat"
    use_latent_disc: bool = True
    use_image_disc: bool = True
    pool_size: int = 200
    steps: int = 2000
    lr: float = 1e-5
    disc_lr: float = 1e-5
    batch_size: int = 4


@dataclass
class AlbedoSection:
    eta1: float = 10.0
    eta2: float = 0.1
    n: int = 4
    tau: float = 0.2
    use_filter: bool = True
    use_gid: bool = True
    n_max: int = 8
    steps: int = 2000
    lr: float = 1e-5
    batch_size: int = 4
    light_level: float = 0.95
    light_pretrain_steps: int = 500
    light_pretrain_lr: float = 1e-3
    light_lr_scale: float = 1.0
    seed: int = 0


@dataclass
class EvalSection:
    n_values: str = "1,2,3,4,6"
    n_infer: int = 4

    def n_list(self) -> list[int]:
        return [int(x) for x in self.n_values.split(",") if x.strip()]


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)
    vq: VQSection = field(default_factory=VQSection)
    embedder: EmbedderSection = field(default_factory=EmbedderSection)
    texture: TextureSection = field(default_factory=TextureSection)
    albedo: AlbedoSection = field(default_factory=AlbedoSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.albedo.n < 1 or self.albedo.n > self.albedo.n_max:
            raise ConfigError("albedo.n must lie in 1..n_max")
        if self.data.images_per_identity < 6:
            raise ConfigError("data.images_per_identity must be >= 6")
        if self.vq.N < 2 or self.vq.d < 1:
            raise ConfigError("vq.N must be >= 2 and vq.d >= 1")
        if self.run.image_size % 16 or self.run.uv_size % 8:
            raise ConfigError("image_size must be a multiple of 16 and uv_size of 8")
        if self.run.image_size != self.run.uv_size:
            raise ConfigError("the shared codebook needs image_size == uv_size")
        for name in ("vq", "texture"):
            if getattr(self, name).gan_form not in ("nonsat", "hinge"):
                raise ConfigError(f"{name}.gan_form must be 'nonsat' or 'hinge'")
        for name in ("vq", "texture", "albedo"):
            if getattr(self, name).steps < 0:
                raise ConfigError(f"{name}.steps must be >= 0")
        if self.albedo.light_pretrain_steps < 0:
            raise ConfigError("albedo.light_pretrain_steps must be >= 0")
        if self.albedo.light_lr_scale < 0:
            raise ConfigError("albedo.light_lr_scale must be >= 0")
        if max(self.eval.n_list(), default=0) > min(self.albedo.n_max, self.data.images_per_identity - 2):
            raise ConfigError("eval.n_values exceed available inlier images")


def _convert(raw: str, typ, key: str):
    typ = {"int": int, "float": float, "str": str, "bool": bool}.get(typ, typ) if isinstance(typ, str) else typ
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def apply_overrides(cfg: RunConfig, items: dict[str, dict[str, str]]) -> RunConfig:
    sections = {f.name: f for f in fields(RunConfig)}
    for sec, kv in items.items():
        if sec not in sections:
            raise ConfigError(f"unknown section [{sec}]")
        obj = getattr(cfg, sec)
        known = {f.name: f.type for f in fields(obj)}
        for key, raw in kv.items():
            if key not in known:
                raise ConfigError(f"unknown key {sec}.{key}")
            setattr(obj, key, _convert(raw, known[key], f"{sec}.{key}"))
    cfg.validate()
    return cfg


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    items = {sec: dict(parser.items(sec)) for sec in parser.sections()}
    return apply_overrides(base or RunConfig(), items)


def load_config(path=None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def parse_set_flags(pairs: list[str]) -> dict[str, dict[str, str]]:
    """``section.key=value`` command-line overrides."""
    out: dict[str, dict[str, str]] = {}
    for pair in pairs or []:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {pair!r}")
        lhs, value = pair.split("=", 1)
        sec, key = lhs.split(".", 1)
        out.setdefault(sec, {})[key] = value
    return out


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for f in fields(RunConfig):
        parser[f.name] = {k: str(v) for k, v in dataclasses.asdict(getattr(cfg, f.name)).items()}
    buf = _io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(d: dict) -> RunConfig:
    """Inverse of ``to_dict``; unknown keys raise ``ConfigError``."""
    return apply_overrides(RunConfig(), {sec: {k: str(v) for k, v in kv.items()} for sec, kv in d.items()})
