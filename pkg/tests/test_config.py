import pytest

from thermoscan.config import PipelineConfig, config_to_text, load_config, parse_config
from thermoscan.errors import ConfigError


def test_defaults_round_trip():
    cfg = PipelineConfig()
    assert parse_config(config_to_text(cfg)) == cfg


def test_parse_overrides():
    cfg = parse_config("[simulate]\nduration = 2.5\nimu_noise = false\ncorrupt_scans = 3, 7\n[run]\ninit = static\n")
    assert cfg.simulate.duration == 2.5 and cfg.simulate.imu_noise is False
    assert cfg.simulate.corrupt_scans == (3, 7) and cfg.run.init == "static"
    assert parse_config(config_to_text(cfg)) == cfg


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[simulate]\nbogus = 1\n",
    "[simulate]\nduration = abc\n",
    "[simulate]\nscan_rate = 0\n",
    "[simulate]\nscene = forest\n",
    "[simulate]\nimu_noise = maybe\n",
    "[calibrate]\ncanny_low = 50\ncanny_high = 40\n",
    "[run]\nbin_px = 0\n",
    "[run]\ninit = magic\n",
    "no section header\n",
])
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config(tmp_path):
    assert load_config(None) == PipelineConfig()
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.cfg"))
    p = tmp_path / "a.cfg"
    p.write_text("[run]\nfusion_voxel = 0\n")
    assert load_config(str(p)).run.fusion_voxel == 0.0
