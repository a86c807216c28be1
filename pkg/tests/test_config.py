import json

import numpy as np
import pytest

from mbvi.config import DEFAULTS, free_mask, load_config, read_observations_csv, resolve
from mbvi.errors import ConfigError
from mbvi.models import gbm_model

BASE = {
    "model": {"family": "linear", "gamma": [[0.5]], "mu": [1.0], "sigma": [[0.3]]},
    "grid": {"t_end": 2.0, "max_dt": 0.1},
    "initial": {"x0": [0.0]},
    "observations": {"times": [0.5, 1.0], "noise_sd": 0.2},
}


def with_(**sections):
    raw = json.loads(json.dumps(BASE))
    for k, v in sections.items():
        if isinstance(v, dict):
            raw.setdefault(k, {}).update(v)
        else:
            raw[k] = v
    return raw


def test_defaults_filled_in():
    rc = resolve(BASE)
    assert rc.seed == 0 and rc.workers == 1 and rc.out == "out"
    assert rc.section("simulate")["refine"] == DEFAULTS["simulate"]["refine"]
    assert rc.section("amortize")["layers"] == 6
    assert rc.optimizer.alpha == 1.2 and rc.optimizer.beta == 0.5
    np.testing.assert_array_equal(rc.H, [[1.0]])
    # noise_sd becomes a covariance
    np.testing.assert_allclose(rc.noise_cov, [[0.04]])
    assert rc.section("observations")["noise_sd"] is None
    # dt is capped at 1% of the span
    assert rc.grid.n_steps == 100
    d = rc.to_dict()
    d["seed"] = 99
    assert rc.seed == 0


def test_overrides():
    rc = resolve(BASE, {"seed": 7, "out": "elsewhere", "workers": None, "optimizer.maxiter": 12})
    assert rc.seed == 7 and rc.out == "elsewhere" and rc.optimizer.maxiter == 12


@pytest.mark.parametrize("raw", [
    with_(bogus=1),
    with_(grid={"typo": 1}),
    with_(optimizer={"stepsize": 0.1}),
    with_(optimizer={"method": "lbfgs"}),
    with_(optimizer={"alpha": 0.5}),
    with_(workers=0),
    with_(seed="x"),
    with_(initial={"x0": None}),
    with_(observations={"noise_sd": None}),
    with_(observations={"noise_cov": [[-1.0]], "noise_sd": None}),
    with_(observations={"H": [[1.0, 0.0]]}),
    with_(observations={"times": [0.5, 3.0]}),
    with_(grid={"t_end": None}),
    with_(grid={"n_steps": 3, "max_dt": None}),
    with_(model={"family": "nope"}),
    with_(infer={"free": ["theta"]}),
    with_(infer={"n_runs": 0}),
    with_(amortize={"layers": 0}),
    with_(amortize={"epochs": 1.5}),
    with_(benchmark={"n_init": 0}),
    {"grid": {"t_end": 1.0}},
    [1, 2],
])
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        resolve(raw)


def test_grid_from_n_steps():
    rc = resolve(with_(grid={"n_steps": 8, "max_dt": None}))
    assert rc.grid.n_steps == 8 and rc.section("grid")["n_steps"] == 8


def test_noise_cov_diagonal_shorthand():
    raw = with_(observations={"noise_sd": None, "noise_cov": [0.5]})
    np.testing.assert_array_equal(resolve(raw).noise_cov, [[0.5]])


def test_infer_free_and_gbm_init():
    raw = {
        "model": {"family": "gbm", "r": [0.0, 0.0], "sigma": [0.1, 0.2], "corr": [[1, 0.3], [0.3, 1]]},
        "grid": {"t_end": 1.0, "n_steps": 10},
        "initial": {"x0": 1.0},
        "observations": {"times": [1.0], "noise_sd": 0.01},
        "infer": {"free": "R", "init": {"sigma": [0.2, 0.2], "corr": [[1, 0], [0, 1]]}},
    }
    rc = resolve(raw)
    assert rc.section("infer")["free"] == ["R"]
    np.testing.assert_array_equal(rc.x0, [1.0, 1.0])
    init = rc.section("infer")["init"]
    R = np.asarray(init["R"])
    np.testing.assert_allclose(R @ R.T, 0.04 * np.eye(2))
    model = gbm_model([0.0, 0.0], np.eye(2))
    np.testing.assert_array_equal(free_mask(model, ["R"]), [False, False, True, True, True, True])
    np.testing.assert_array_equal(free_mask(model, ["r"]), [True, True, False, False, False, False])
    assert free_mask(model, "all").all()


def test_load_toml_and_json(tmp_path):
    t = tmp_path / "a.toml"
    t.write_text('seed = 3\n[model]\nfamily = "double_well"\n')
    assert load_config(t) == {"seed": 3, "model": {"family": "double_well"}}
    j = tmp_path / "a.json"
    j.write_text(json.dumps(BASE))
    assert load_config(j) == BASE
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 3\n")
    with pytest.raises(ConfigError, match="line 1"):
        load_config(bad)
    badj = tmp_path / "bad.json"
    badj.write_text('{"seed": }')
    with pytest.raises(ConfigError, match="line 1"):
        load_config(badj)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")


def test_read_observations_csv(tmp_path):
    H = np.array([[1.0, 0.0], [0.0, 1.0]])
    S = 0.01 * np.eye(2)
    p = tmp_path / "obs.csv"
    p.write_text("t,y1,y2\n0.5,1.0,2.0\n\n1.0,1.5,2.5\n")
    obs = read_observations_csv(p, H, S)
    np.testing.assert_array_equal(obs.times, [0.5, 1.0])
    np.testing.assert_array_equal(obs.values, [[1.0, 2.0], [1.5, 2.5]])
    cases = {
        "t,y1\n0.5,1.0\n": "line 1",
        "t,y1,y2\n0.5,1.0\n": "line 2",
        "t,y1,y2\n0.5,1.0,2.0\n1.0,a,2.0\n": "line 3",
        "": "empty",
    }
    for text, msg in cases.items():
        p.write_text(text)
        with pytest.raises(ConfigError, match=msg):
            read_observations_csv(p, H, S)
    with pytest.raises(ConfigError):
        read_observations_csv(tmp_path / "none.csv", H, S)


@pytest.mark.parametrize("name", ["linear", "double_well", "gbm", "lotka_volterra", "amortized_ou"])
def test_shipped_configs_resolve(name):
    import pathlib

    path = pathlib.Path(__file__).resolve().parents[1] / "configs" / f"{name}.toml"
    rc = resolve(load_config(path))
    assert rc.model.dim == rc.x0.size
