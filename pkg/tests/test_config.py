import pytest

from facealbedo.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    dump_config,
    from_dict,
    load_config,
    parse_config_text,
    parse_set_flags,
    to_dict,
)


def test_defaults_carry_published_hyperparameters():
    cfg = load_config(None)
    assert cfg.vq.lambda0 == 0.8
    assert (cfg.texture.lambda1, cfg.texture.lambda2, cfg.texture.lambda3) == (10.0, 10.0, 0.1)
    assert (cfg.albedo.eta1, cfg.albedo.eta2) == (10.0, 0.1)
    assert cfg.albedo.n == 4 and cfg.texture.pool_size == 200
    assert (cfg.optim.beta1, cfg.optim.beta2, cfg.optim.batch_size, cfg.optim.lr) == (0.9, 0.999, 4, 1e-5)
    assert cfg.vq.beta == 0.25 and cfg.albedo.tau == 0.2 and cfg.albedo.n_max == 8


def test_dump_parse_round_trip():
    cfg = apply_overrides(RunConfig(), {"vq": {"N": "64", "gan_form": "hinge"}, "albedo": {"use_gid": "false"}})
    again = parse_config_text(dump_config(cfg))
    assert to_dict(again) == to_dict(cfg)
    assert to_dict(from_dict(to_dict(cfg))) == to_dict(cfg)


def test_partial_file_keeps_other_defaults(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[vq]\nsteps = 10\n")
    cfg = load_config(p)
    assert cfg.vq.steps == 10 and cfg.vq.N == 256


def test_set_flags():
    assert parse_set_flags(["vq.N=8", "run.name=a=b"]) == {"vq": {"N": "8"}, "run": {"name": "a=b"}}
    with pytest.raises(ConfigError):
        parse_set_flags(["novalue"])
    with pytest.raises(ConfigError):
        parse_set_flags(["nosection=3"])


@pytest.mark.parametrize(
    "items",
    [
        {"bogus": {"x": "1"}},
        {"vq": {"bogus": "1"}},
        {"vq": {"N": "many"}},
        {"vq": {"N": "1"}},
        {"albedo": {"use_gid": "maybe"}},
        {"albedo": {"n": "9"}},
        {"vq": {"gan_form": "wasserstein"}},
        {"run": {"image_size": "40", "uv_size": "40"}},
        {"run": {"uv_size": "32"}},
        {"data": {"images_per_identity": "5"}},
        {"eval": {"n_values": "1,7"}},
        {"albedo": {"light_pretrain_steps": "-1"}},
        {"albedo": {"light_lr_scale": "-0.5"}},
    ],
)
def test_invalid_values_raise(items):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), items)


def test_missing_file_and_bad_syntax(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")
    with pytest.raises(ConfigError):
        parse_config_text("no section header\n")
