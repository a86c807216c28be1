"""Run configuration: TOML (or JSON) files resolved into validated settings.

A config holds a ``[model]`` section (see :func:`mbvi.models.model_from_config`)
and optional ``[grid]``, ``[initial]``, ``[observations]``, ``[simulate]``,
``[optimizer]``, ``[infer]``, ``[amortize]`` and ``[benchmark]`` sections,
plus top-level ``seed``, ``workers`` and ``out``. :func:`resolve` fills in
defaults and checks everything before any computation starts; the
resolved mapping is what run summaries embed.
"""

from __future__ import annotations

import copy
import json
import os
import sys
from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .errors import ConfigError, ValidationError
from .models import model_from_config
from .ode import TimeGrid
from .optimize import OptimizerConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = ["RunConfig", "load_config", "resolve", "read_observations_csv", "free_mask", "DEFAULTS"]

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "out": "out",
    "grid": {"t0": 0.0, "t_end": None, "n_steps": None, "max_dt": None},
    "initial": {"x0": None},
    "observations": {"file": None, "times": [], "H": None, "noise_sd": None, "noise_cov": None},
    "simulate": {"refine": 10},
    "optimizer": {"method": "batch", "steps_per_obs": 50},
    "infer": {"free": "all", "init": None, "n_runs": 1},
    "amortize": {
        "n_train": 200, "n_test": 10, "layers": 6, "epochs": 50, "batch_size": 15, "lr": 1e-3,
        "weight_decay": 1e-3, "optimizer": "adam", "standardize_inputs": True, "reference_maxiter": 200,
    },
    "benchmark": {"n_init": 10, "init_scale": 0.1, "maxiter": 100},
}

_SECTIONS = ("model", "grid", "initial", "observations", "simulate", "optimizer", "infer", "amortize", "benchmark")
_TOP = ("seed", "workers", "out")
_OPT_FIELDS = {f.name for f in fields(OptimizerConfig)}


def load_config(path) -> dict:
    """Parse a TOML (or ``.json``) config file into a plain mapping."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if path.endswith(".json"):
        try:
            return json.loads(raw.decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    try:
        return tomllib.loads(raw.decode("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _merge(base, extra, where):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if k not in out and where not in ("optimizer", "amortize"):
            raise ConfigError(f"unknown key {k!r} in [{where}]")
        out[k] = v
    return out


def _as_list(a):
    return np.asarray(a, dtype=float).tolist()


@dataclass(frozen=True)
class RunConfig:
    """Resolved settings plus the objects built from them."""

    data: dict
    model: object
    grid: TimeGrid
    optimizer: OptimizerConfig

    @property
    def seed(self):
        return int(self.data["seed"])

    @property
    def workers(self):
        return int(self.data["workers"])

    @property
    def out(self):
        return self.data["out"]

    @property
    def x0(self):
        return np.asarray(self.data["initial"]["x0"], dtype=float)

    @property
    def times(self):
        return np.asarray(self.data["observations"]["times"], dtype=float)

    @property
    def H(self):
        return np.asarray(self.data["observations"]["H"], dtype=float)

    @property
    def noise_cov(self):
        return np.asarray(self.data["observations"]["noise_cov"], dtype=float)

    def section(self, name):
        return self.data[name]

    def to_dict(self):
        return copy.deepcopy(self.data)


def resolve(raw: dict, overrides: Optional[dict] = None) -> RunConfig:
    """Validate ``raw`` (plus CLI ``overrides``) and fill in defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    raw = copy.deepcopy(raw)
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if "." in k:
            sec, key = k.split(".", 1)
            raw.setdefault(sec, {})[key] = v
        else:
            raw[k] = v
    for k in raw:
        if k not in _SECTIONS and k not in _TOP:
            raise ConfigError(f"unknown config key {k!r}")
    if "model" not in raw:
        raise ConfigError("config needs a [model] section")
    data = {k: raw.get(k, DEFAULTS[k]) for k in _TOP}
    try:
        data["seed"] = int(data["seed"])
        data["workers"] = int(data["workers"])
    except (TypeError, ValueError):
        raise ConfigError("seed and workers must be integers") from None
    if data["workers"] < 1:
        raise ConfigError("workers must be at least 1")
    data["out"] = str(data["out"])
    for sec in _SECTIONS[1:]:
        data[sec] = _merge(DEFAULTS[sec], raw.get(sec, {}), sec)

    try:
        model = model_from_config(raw["model"])
    except ValidationError as exc:
        raise ConfigError(f"[model]: {exc}") from None
    data["model"] = model.to_config()
    n = model.dim

    ini = data["initial"]
    if ini["x0"] is None:
        raise ConfigError("[initial] needs x0")
    x0 = np.broadcast_to(np.asarray(ini["x0"], dtype=float), (n,))
    ini["x0"] = _as_list(x0)

    obs = data["observations"]
    times = np.sort(np.atleast_1d(np.asarray(obs["times"], dtype=float)))
    obs["times"] = _as_list(times)
    H = np.eye(n) if obs["H"] is None else np.atleast_2d(np.asarray(obs["H"], dtype=float))
    if H.shape[1] != n:
        raise ConfigError(f"[observations] H has {H.shape[1]} columns for a {n}-dimensional model")
    p = H.shape[0]
    obs["H"] = H.tolist()
    if obs["noise_cov"] is not None:
        S = np.asarray(obs["noise_cov"], dtype=float)
        if S.size == p:
            S = np.diag(S.ravel())
        S = S.reshape(p, p)
    elif obs["noise_sd"] is not None:
        S = np.diag(np.broadcast_to(np.asarray(obs["noise_sd"], dtype=float) ** 2, (p,)))
    else:
        raise ConfigError("[observations] needs noise_sd or noise_cov")
    if not np.allclose(S, S.T) or np.linalg.eigvalsh(0.5 * (S + S.T)).min() < 0:
        raise ConfigError("[observations] noise covariance must be symmetric PSD")
    obs["noise_cov"] = S.tolist()
    obs["noise_sd"] = None

    g = data["grid"]
    if g["t_end"] is None:
        raise ConfigError("[grid] needs t_end")
    try:
        if g["n_steps"] is not None:
            grid = TimeGrid(float(g["t0"]), float(g["t_end"]), int(g["n_steps"]))
            for t in times:
                grid.node_index(t)
        else:
            grid = TimeGrid.for_observations(g["t0"], g["t_end"], times, max_dt=g["max_dt"])
    except ValidationError as exc:
        raise ConfigError(f"[grid]: {exc}") from None
    if times.size and (times.min() < grid.t0 or times.max() > grid.t_end):
        raise ConfigError("observation times lie outside the grid")
    g.update(t0=grid.t0, t_end=grid.t_end, n_steps=grid.n_steps)

    o = data["optimizer"]
    if o["method"] not in ("batch", "online"):
        raise ConfigError("[optimizer] method must be 'batch' or 'online'")
    opt_kw = {k: v for k, v in o.items() if k not in ("method", "steps_per_obs")}
    bad = set(opt_kw) - _OPT_FIELDS
    if bad:
        raise ConfigError(f"unknown [optimizer] keys {sorted(bad)}")
    ocfg = OptimizerConfig(**opt_kw)
    data["optimizer"] = {"method": o["method"], "steps_per_obs": int(o["steps_per_obs"]), **ocfg.to_dict()}

    inf = data["infer"]
    free = inf["free"]
    if free != "all":
        free = [free] if isinstance(free, str) else list(free)
        unknown = [f for f in free if not any(name == f or name.startswith(f + "_") for name in model.param_names)]
        if unknown:
            raise ConfigError(f"[infer] free names {unknown} match no parameter of {model.param_names}")
        inf["free"] = free
    if inf["init"] is not None:
        try:
            base = dict(data["model"])
            if base["family"] == "gbm" and ("sigma" in inf["init"] or "corr" in inf["init"]):
                base.pop("R")
            init_model = model_from_config({**base, **inf["init"]})
        except ValidationError as exc:
            raise ConfigError(f"[infer] init: {exc}") from None
        inf["init"] = init_model.to_config()
    if int(inf["n_runs"]) < 1:
        raise ConfigError("[infer] n_runs must be positive")

    am = data["amortize"]
    for k in ("n_train", "n_test", "layers", "epochs", "batch_size", "reference_maxiter"):
        if int(am[k]) != am[k] or am[k] < (0 if k == "n_test" else 1):
            raise ConfigError(f"[amortize] {k} must be a positive integer")

    bm = data["benchmark"]
    if int(bm["n_init"]) < 1 or int(bm["maxiter"]) < 1 or float(bm["init_scale"]) < 0:
        raise ConfigError("[benchmark] needs n_init >= 1, maxiter >= 1, init_scale >= 0")
    return RunConfig(data, model, grid, ocfg)


def free_mask(model, free):
    """Boolean mask over ``model.param_names`` selected by ``free``."""
    if free == "all":
        return np.ones(model.n_theta, bool)
    return np.array([any(nm == f or nm.startswith(f + "_") for f in free) for nm in model.param_names])


def read_observations_csv(path, H, noise_cov):
    """Read ``t,y1,...,yp`` rows into an :class:`~mbvi.variational.ObservationSet`."""
    from .variational import ObservationSet

    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read observations {path}: {exc}") from None
    if not lines:
        raise ConfigError(f"{path}: empty file")
    head = [h.strip() for h in lines[0].split(",")]
    p = np.atleast_2d(H).shape[0]
    want = ["t"] + [f"y{i + 1}" for i in range(p)]
    if head != want:
        raise ConfigError(f"{path}: line 1: header {','.join(head)!r}, expected {','.join(want)!r}")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != p + 1:
            raise ConfigError(f"{path}: line {ln}: expected {p + 1} fields, got {len(parts)}")
        try:
            rows.append([float(x) for x in parts])
        except ValueError:
            raise ConfigError(f"{path}: line {ln}: non-numeric field") from None
    arr = np.array(rows, dtype=float).reshape(-1, p + 1)
    return ObservationSet(arr[:, 0], arr[:, 1:], np.atleast_2d(H), noise_cov)
