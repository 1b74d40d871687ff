import copy
import json
from pathlib import Path

import pytest

from mfglab.config import PANELS, canonical, config_hash, dumps_canonical, load, validate
from mfglab.errors import ConfigError
from mfglab.scenarios import list_scenarios, scenario_path

GOLDEN = Path(__file__).parent / "golden"

MINIMAL = {
    "schema_version": 1,
    "domain": {"kind": "interval", "bounds": [-1, 1]},
    "time": {"nodes": 11},
    "model": {"lagrangian": {"kind": "quadratic"}, "coupling": {"form": "zero"}, "terminal": "linear:a=[1]"},
    "m0": {"kind": "grid", "n": 4},
}


def raw(name):
    return json.loads(Path(str(scenario_path(name))).read_text())


def with_change(path, value):
    cfg = copy.deepcopy(MINIMAL)
    node = cfg
    for key in path[:-1]:
        node = node.setdefault(key, {})
    node[path[-1]] = value
    return cfg


def test_bundled_scenarios():
    assert list_scenarios() == ["decoupled-1d", "drift-disk-2d", "monotone-kernel-1d", "trapped-1d"]
    with pytest.raises(KeyError):
        scenario_path("nope")


@pytest.mark.parametrize("name", ["decoupled-1d", "drift-disk-2d", "monotone-kernel-1d", "trapped-1d"])
def test_canonical_golden(name):
    assert dumps_canonical(raw(name)) == (GOLDEN / f"{name}.canonical.json").read_text()


@pytest.mark.parametrize("name", ["decoupled-1d", "drift-disk-2d", "monotone-kernel-1d", "trapped-1d"])
def test_canonical_idempotent(name):
    once = canonical(raw(name))
    assert canonical(once) == once
    assert config_hash(once) == config_hash(raw(name))
    assert set(once["panels"]) <= set(PANELS)


def test_defaults_filled():
    cfg = canonical(MINIMAL)
    assert cfg["time"]["T"] == 1.0
    assert cfg["seed"] == 0
    assert cfg["fixed_point"]["K_max"] == 100
    assert cfg["panels"] == {}


def test_hash_stable_and_sensitive():
    h = config_hash(MINIMAL)
    assert len(h) == 64 and h == config_hash(copy.deepcopy(MINIMAL))
    # key order and int/float spelling do not matter
    reordered = dict(reversed(list(MINIMAL.items())))
    assert config_hash(reordered) == h
    assert config_hash(with_change(("domain", "bounds"), [-1.0, 1.0])) == h
    assert config_hash(with_change(("time", "nodes"), 12)) != h
    assert config_hash(with_change(("seed",), 1)) != h


@pytest.mark.parametrize("path,value,where", [
    (("time", "nodes"), 1, "time.nodes"),
    (("fixed_point", "tol"), -1.0, "fixed_point.tol"),
    (("model", "terminal"), "cubic:a=1", "model.terminal"),
    (("domain", "bounds"), [1, -1], "domain.bounds"),
    (("panels", "semiconcavity"), {"k_min": 7, "k_max": 4}, "panels.semiconcavity.k_min"),
    (("panels", "bogus"), {}, "panels.bogus"),
])
def test_config_error_paths(path, value, where):
    with pytest.raises(ConfigError) as info:
        validate(with_change(path, value))
    assert info.value.path == where


def test_sample_needs_seed():
    cfg = copy.deepcopy(MINIMAL)
    cfg["m0"] = {"kind": "sample", "n": 10, "density": "uniform"}
    with pytest.raises(ConfigError) as info:
        validate(cfg)
    assert info.value.path == "seed"
    cfg["seed"] = 3
    validate(cfg)


def test_load_rejects_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load(p)
    p.write_text(json.dumps(MINIMAL))
    assert load(p) == canonical(MINIMAL)
