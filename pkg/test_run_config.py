import math

import pytest

from errors import ConfigError
from run_config import (RunConfig, clinical_scale, dump_config, format_number, load_config, parallel_map, parse_flat,
                        resolve_threads, save_config, write_csv)


def test_defaults():
    cfg = RunConfig()
    assert cfg.rl.gamma == 0.95 and cfg.rl.tail_k == 10
    assert cfg.rle.tau == pytest.approx(0.3 * math.log(2.0))
    assert cfg.clf.patch_edge == 31 and cfg.fcn.upsample == 2
    assert cfg.rl_seed() == 0 and cfg.clf_seed() == 0


def test_parse_flat_nests_keys():
    nested = parse_flat(["# comment", "", "seed=3", "rl.gamma=0.9", "phantom.dims=32,32,32"])
    assert nested == {"seed": "3", "rl": {"gamma": "0.9"}, "phantom": {"dims": ["32", "32", "32"]}}


def test_malformed_line_names_position(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("seed=1\nnonsense\n")
    with pytest.raises(ConfigError, match=":2:"):
        load_config(path)


@pytest.mark.parametrize("override", [
    "rl.bogus=1",
    "rl.gamma=2",
    "rl.window_edge=8",
    "fcn.upsample=3",
    "clf.patch_edge=13",
    "rle.tau=0.7",
    "seed=abc",
])
def test_invalid_values_are_config_errors(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("seed=4\nrl.gamma=0.8\n")
    cfg = load_config(path, ["rl.gamma=0.5", "rl.seed=9"])
    assert cfg.seed == 4 and cfg.rl.gamma == 0.5
    assert cfg.rl_seed() == 9 and cfg.clf_seed() == 4


def test_dump_and_load_round_trip(tmp_path):
    cfg = load_config(None, ["seed=7", "phantom.dims=32,40,48", "rle.rho=12.5", "output_dir=elsewhere"])
    path = save_config(cfg, tmp_path / "config.txt")
    assert load_config(path) == cfg
    text = dump_config(cfg)
    assert text.startswith("#") and "phantom.dims=32,40,48\n" in text and "rl.seed=none\n" in text


def test_clinical_scale_preset():
    base = RunConfig()
    cfg = clinical_scale(base)
    assert cfg.phantom.dims == (512, 512, 476) and cfg.phantom.spacing == (0.6, 0.6, 1.0)
    assert cfg.clf.patch_edge == 75 and cfg.rl.window_edge == 51 and cfg.rl.max_steps == 300
    assert base.clf.patch_edge == 31


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv("RLEDX_THREADS", raising=False)
    assert resolve_threads() == 1
    monkeypatch.setenv("RLEDX_THREADS", "3")
    assert resolve_threads() == 3
    assert resolve_threads(cfg=load_config(None, ["threads=2"])) == 2
    assert resolve_threads(5, load_config(None, ["threads=2"])) == 5
    monkeypatch.setenv("RLEDX_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads()
    with pytest.raises(ConfigError):
        resolve_threads(0)


def test_csv_number_format(tmp_path):
    assert format_number(0.1234567) == "0.123457"
    assert format_number(float("nan")) == "nan"
    assert format_number(3) == "3"
    path = write_csv(tmp_path / "out" / "t.csv", ["a", "b"], [[1, 2.5], ["x", 1e-9]])
    assert path.read_text() == "a,b\n1,2.5\nx,1e-09\n"


def test_parallel_map_keeps_order():
    assert parallel_map(lambda v: v * v, range(10), threads=3) == [v * v for v in range(10)]
    assert parallel_map(str, [], threads=4) == []
