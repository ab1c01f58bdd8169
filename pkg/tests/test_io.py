import csv
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sharptail.errors import ConfigError
from sharptail.io import (ArtifactManifest, MissingArrayError, config_hash, export_plot_data, read_array,
                          resolve_config, run_pipeline, write_arrays)

OU_CFG = {"problem": {"name": "ou"}, "z": 1.0, "eps": [0.25, 0.1], "instanton": {"n_t": 400},
          "spectrum": {"m": 5}, "tube": {"times": [0.5]}}


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5),
                  elements=st.floats(allow_nan=True, allow_infinity=True)))
def test_array_round_trip(tmp_path_factory, a):
    d = tmp_path_factory.mktemp("arr")
    entries = write_arrays(d / "data.bin", {"pad": np.arange(3.0), "a": a})
    assert entries[1]["offset"] == 24 and entries[1]["encoding"] == "little-endian row-major"
    b = read_array(entries[1], d)
    assert b.shape == a.shape and b.tobytes() == np.ascontiguousarray(a).tobytes()


def test_truncated_array(tmp_path):
    e = write_arrays(tmp_path / "data.bin", {"a": np.ones(10)})[0]
    (tmp_path / "data.bin").write_bytes(b"\0" * 16)
    with pytest.raises(MissingArrayError):
        read_array(e, tmp_path)


def test_hash_ignores_key_order():
    a = {"problem": {"name": "ou", "params": {}}, "z": 1.0, "eps": [0.5]}
    b = json.loads(json.dumps({"eps": [0.5], "z": 1.0, "problem": {"params": {}, "name": "ou"}}))
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash({**a, "z": 1.5})


@pytest.mark.parametrize("bad", [
    {"problem": {"name": "ou"}, "z": 1.0, "bogus": 1},
    {"problem": {"name": "lorenz"}, "z": 1.0},
    {"problem": {"name": "ou"}},
    {"problem": {"name": "ou"}, "z": 1.0, "eps": [-0.1]},
    {"problem": {"name": "model2d", "params": {"a": 1}}, "z": 1.0},
])
def test_invalid_config_writes_nothing(tmp_path, bad):
    out = tmp_path / "run"
    with pytest.raises(ConfigError):
        run_pipeline(bad, out)
    assert not out.exists()


def test_defaults_filled():
    cfg = resolve_config({"problem": {"name": "model2d"}, "z": 3.0})
    assert cfg["instanton"]["scheme"] == "euler_if" and cfg["instanton"]["n_t"] == 2000
    assert cfg["spectrum"]["m"] == 200
    assert resolve_config(cfg) == cfg


@pytest.fixture(scope="module")
def ou_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ou")
    return run_pipeline(OU_CFG, out), out


def test_ou_manifest_matches_analytic(ou_run):
    man, out = ou_run
    s = man.scalars
    a = s["analytic"]["0.25"]
    assert s["I_F"] == pytest.approx(a["I_F"], rel=1e-4)
    assert s["C_F_riccati"] == pytest.approx(a["C_F"], rel=1e-4)
    assert s["C_F_fredholm"] == pytest.approx(a["C_F"], rel=1e-4)
    assert s["tail_prob"][0] == pytest.approx(
        np.sqrt(0.25 / (2 * np.pi)) * a["C_F"] * np.exp(-a["I_F"] / 0.25), rel=1e-3)
    man.check()
    loaded = ArtifactManifest.load(out)
    assert loaded.scalars == json.loads(json.dumps(man.to_dict(), default=float))["scalars"]
    assert np.array_equal(loaded.array("eta"), man.array("eta"))


def test_rerun_reuses_cache(ou_run):
    man, out = ou_run
    blob = next(out.glob("cache/instanton-*/data.bin")).read_bytes()
    again = run_pipeline(OU_CFG, out)
    assert all(again.stages[s]["cached"] for s in ("instanton", "spectrum", "riccati", "tube"))
    assert again.scalars["I_F"] == man.scalars["I_F"]
    assert again.scalars["tail_prob"] == man.scalars["tail_prob"]
    cfg = json.loads(json.dumps(OU_CFG))
    cfg["spectrum"]["m"] = 6
    third = run_pipeline(cfg, out)
    assert third.stages["instanton"]["cached"] and not third.stages["spectrum"]["cached"]
    assert next(out.glob("cache/instanton-*/data.bin")).read_bytes() == blob


def test_fresh_run_is_bitwise_reproducible(tmp_path, ou_run):
    man, out = ou_run
    fresh = run_pipeline(OU_CFG, tmp_path)
    assert not fresh.stages["instanton"]["cached"]
    for e in man.arrays:
        assert np.array_equal(fresh.array(e["name"]), man.array(e["name"]), equal_nan=True)


def test_export(ou_run, tmp_path):
    man, _ = ou_run
    paths = export_plot_data(man, out_dir=tmp_path, eps=[0.25])
    names = {p.stem for p in paths}
    assert names == {"eigen_decay", "det_convergence", "tail_vs_z", "tube_slices"}
    rows = list(csv.DictReader(open(tmp_path / "tail_vs_z.csv")))
    assert len(rows) == 1 and float(rows[0]["tail"]) == pytest.approx(man.scalars["tail_prob"][0], rel=1e-12)
    rows = list(csv.DictReader(open(tmp_path / "tube_slices.csv")))
    assert [r["t"] for r in rows] == ["0.5", "1.0"]
    with pytest.raises(ConfigError):
        export_plot_data(man, which="nope", out_dir=tmp_path)


def test_export_missing_array(tmp_path):
    cfg = {**OU_CFG, "tube": {"enabled": False}}
    man = run_pipeline(cfg, tmp_path)
    with pytest.raises(MissingArrayError, match="tube_times"):
        export_plot_data(man, which="tube_slices")
