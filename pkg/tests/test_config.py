from __future__ import annotations

import pytest

from cushionlab.config import ConfigError, RunConfig


def test_defaults():
    cfg = RunConfig()
    assert cfg.search.tau == 0.5 and cfg.search.max_len == 16
    assert cfg.tune.lam == 0.01 and cfg.tune.epochs == 2
    assert cfg.quant.alpha == 0.8 and cfg.quant.act_bits == 8 and cfg.quant.group_size == 128
    assert cfg.search_config().seeds == ("bos", "newline")


def test_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.override("search.tau", "0.25")
    cfg.override("quant.smooth", "true")
    cfg.override("run.out_dir", "elsewhere")
    cfg.save(tmp_path / "run.cfg")
    back = RunConfig.load(tmp_path / "run.cfg")
    assert back == cfg
    assert back.dumps() == cfg.dumps()


def test_partial_file_keeps_defaults():
    cfg = RunConfig.loads("[tune]\nlam = 0.1\n")
    assert cfg.tune.lam == 0.1 and cfg.tune.epochs == 2


@pytest.mark.parametrize("text", ["[bogus]\nx = 1\n", "[tune]\nlambda = 0.1\n", "[tune]\nlam = lots\n",
                                  "[quant]\nsmooth = maybe\n", "no section\n"])
def test_rejects_bad_files(text):
    with pytest.raises(ConfigError):
        RunConfig.loads(text)


def test_override_errors():
    cfg = RunConfig()
    with pytest.raises(ConfigError):
        cfg.override("tune", "1")
    with pytest.raises(ConfigError):
        cfg.override("tune.nope", "1")


def test_library_objects_validate():
    cfg = RunConfig.loads("[quant]\nact_granularity = per-token\n")
    with pytest.raises(ConfigError):
        cfg.act_spec()  # static ranges need per-tensor
    cfg = RunConfig.loads("[search]\ntau = 0\n")
    with pytest.raises(ConfigError):
        cfg.search_config()


def test_quant_setup_mapping():
    cfg = RunConfig.loads("[quant]\nsmooth = true\nalpha = 0.5\n[run]\nseed = 3\n")
    setup = cfg.quant_setup()
    assert setup.smooth_alpha == 0.5 and setup.calib_seed == 4
    assert setup.act.is_static and setup.weight.symmetric
    assert cfg.model_config().arch == "llama-ish"
