"""Command line: ``mbvi {simulate,smooth,infer,amortize,benchmark-grad,compare}``.

Every command reads a TOML/JSON config (``--config``), writes CSV files
and a ``summary.json`` that embeds the resolved config into ``--out``.
Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import __version__
from .amortize import TrainingConfig, save_net
from .closure import MomentPair, triu_pairs
from .config import free_mask, load_config, read_observations_csv, resolve
from .errors import IllConditioned, MBVIError, NumericalError, ValidationError
from .experiments import amortized_experiment, benchmark_grad, gbm_summary, infer_many, simulate_dataset, smooth
from .models import model_from_config
from .optimize import OptimizerConfig
from .sample import exact_linear_smoother
from .variational import ControlPath, ControlSpec, MomentTrajectory, ObservationSet

FMT = "%.17g"


class InputError(ValidationError):
    """Bad files or arguments on the command line."""


def _fmt(x):
    return FMT % float(x)


def write_csv(path, header, rows):
    """Write rows with 17 significant digits and a fixed header."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_csv(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    if not lines:
        raise InputError(f"{path}: empty file")
    header = lines[0].split(",")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            raise InputError(f"{path}: line {ln}: non-numeric field") from None
        if len(rows[-1]) != len(header):
            raise InputError(f"{path}: line {ln}: expected {len(header)} fields")
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def write_summary(out, command, rc, extra):
    """``summary.json`` (``compare.json`` for the compare command)."""
    summary = {"command": command, "version": __version__, "config": rc.to_dict(), **extra}
    name = "compare.json" if command == "compare" else "summary.json"
    with open(os.path.join(out, name), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(summary), fh, indent=2, sort_keys=True)
        fh.write("\n")


def moment_header(n):
    return ["t"] + [f"m{i + 1}" for i in range(n)] + [f"M{i + 1}{j + 1}" for i, j in triu_pairs(n)]


def write_moments(path, traj):
    write_csv(path, moment_header(traj.n), np.column_stack([traj.grid.nodes, traj.values]))


def write_controls(path, u: ControlPath, spec: ControlSpec):
    n, m = spec.n, spec.n_features
    # u index p = j n + a: feature j of state component a
    head = ["t_start", "t_end"] + [f"v{a + 1}_{j}" for j in range(m) for a in range(n)]
    t = u.grid.nodes
    write_csv(path, head, np.column_stack([t[:-1], t[1:], u.u]))


def write_trace(path, trace, accepted=None):
    acc = [1.0] + [1.0 if a else 0.0 for a in accepted] if accepted is not None else [1.0] * len(trace)
    write_csv(path, ["iteration", "J", "accepted"], [(i, J, a) for i, (J, a) in enumerate(zip(trace, acc))])


def _observations(rc, args):
    path = args.obs or rc.section("observations")["file"]
    if path is None:
        return None
    obs = read_observations_csv(path, rc.H, rc.noise_cov)
    for t in obs.times:
        rc.grid.node_index(t)
    return obs


def _need_obs(rc, args):
    obs = _observations(rc, args)
    if obs is None:
        if rc.times.size:
            _, sets = simulate_dataset(rc.model, rc.x0, rc.grid, rc.times, rc.H, rc.noise_cov, rc.seed,
                                       refine=rc.section("simulate")["refine"])
            return sets[0], "simulated"
        return ObservationSet.empty(rc.model.dim, rc.H.shape[0]), "none"
    return obs, "file"


def cmd_simulate(rc, args):
    ens, sets = simulate_dataset(rc.model, rc.x0, rc.grid, rc.times, rc.H, rc.noise_cov, rc.seed,
                                 refine=rc.section("simulate")["refine"])
    n = rc.model.dim
    write_csv(os.path.join(rc.out, "path.csv"), ["t"] + [f"x{i + 1}" for i in range(n)],
              np.column_stack([ens.grid.nodes, ens.path(0)]))
    obs = sets[0]
    p = obs.dim_obs
    write_csv(os.path.join(rc.out, "observations.csv"), ["t"] + [f"y{i + 1}" for i in range(p)],
              np.column_stack([obs.times, obs.values]) if len(obs) else np.zeros((0, p + 1)))
    return {"n_observations": len(obs), "positivity_floors": ens.diagnostics.get("positivity_floors", 0)}


def cmd_smooth(rc, args):
    obs, source = _need_obs(rc, args)
    o = rc.section("optimizer")
    phi0 = MomentPair.point_mass(rc.x0)
    res = smooth(rc.model, phi0, obs, rc.grid, rc.optimizer, o["method"], o["steps_per_obs"])
    spec = ControlSpec.for_model(rc.model)
    write_moments(os.path.join(rc.out, "moments.csv"), res.phi_star)
    write_controls(os.path.join(rc.out, "controls.csv"), res.u_star, spec)
    write_trace(os.path.join(rc.out, "objective.csv"), res.objective_trace, res.accepted)
    diag = {k: v for k, v in res.diagnostics.items() if k not in ("step_sizes", "rounds")}
    return {"J": res.J, "observations": source, "n_observations": len(obs), "diagnostics": diag}


def cmd_infer(rc, args):
    inf = rc.section("infer")
    truth = rc.model
    start = truth if inf["init"] is None else model_from_config(inf["init"])
    free = free_mask(start, inf["free"])
    phi0 = MomentPair.point_mass(rc.x0)
    obs = _observations(rc, args)
    if obs is not None:
        datasets, source = [obs], "file"
    else:
        _, datasets = simulate_dataset(truth, rc.x0, rc.grid, rc.times, rc.H, rc.noise_cov, rc.seed,
                                       n=int(inf["n_runs"]), refine=rc.section("simulate")["refine"])
        source = "simulated"
    results = infer_many(start, phi0, datasets, rc.grid, rc.optimizer, free, rc.workers)
    names = list(start.param_names)
    rows = [[r, it] + list(th) for r, res in enumerate(results) for it, th in enumerate(res["theta_trace"])]
    write_csv(os.path.join(rc.out, "theta.csv"), ["run", "outer"] + names, rows)
    rows = [[r, i, v] for r, res in enumerate(results) for i, v in enumerate(res["objective_trace"])]
    write_csv(os.path.join(rc.out, "objective.csv"), ["run", "iteration", "J"], rows)
    # moments and controls of the first run
    write_moments(os.path.join(rc.out, "moments.csv"), results[0]["moments"])
    write_controls(os.path.join(rc.out, "controls.csv"), results[0]["u"], ControlSpec.for_model(start))
    out = {"observations": source, "runs": len(results), "param_names": names,
           "theta_final": [r["theta"] for r in results], "J_final": [r["objective_trace"][-1] for r in results],
           "diagnostics": [r["diagnostics"] for r in results]}
    if truth.family == "gbm":
        summ = [gbm_summary(start.with_theta(r["theta"])) for r in results]
        out["sigma_final"] = [s for s, _ in summ]
        out["corr_final"] = [c for _, c in summ]
    return out


def cmd_amortize(rc, args):
    am = rc.section("amortize")
    tkeys = ("epochs", "batch_size", "lr", "weight_decay", "optimizer", "beta1", "beta2", "eps", "shuffle")
    tcfg = TrainingConfig(seed=rc.seed, **{k: am[k] for k in tkeys if k in am})
    ref = OptimizerConfig(**{**rc.optimizer.to_dict(), "maxiter": int(am["reference_maxiter"])})
    res = amortized_experiment(rc.model, rc.x0, rc.grid, rc.times, rc.H, rc.noise_cov, rc.seed,
                               int(am["n_train"]), int(am["n_test"]), tcfg, int(am["layers"]),
                               bool(am["standardize_inputs"]), ref, rc.section("simulate")["refine"])
    write_csv(os.path.join(rc.out, "loss.csv"), ["epoch", "mean_J"],
              [(e + 1, v) for e, v in enumerate(res["loss_trace"])])
    write_csv(os.path.join(rc.out, "held_out.csv"),
              ["sample", "J_prior", "J_net", "J_opt", "E_prior", "E_net", "E_opt"],
              [[i] + list(r) for i, r in enumerate(res["held_out"])])
    save_net(res["net"], os.path.join(rc.out, "network.npz"))
    h = res["held_out"]
    return {"loss_trace": res["loss_trace"], "layer_sizes": res["net"].sizes,
            "mean_energy_net": float(h[:, 4].mean()) if len(h) else None,
            "mean_energy_opt": float(h[:, 5].mean()) if len(h) else None}


def cmd_benchmark_grad(rc, args):
    bm = rc.section("benchmark")
    obs, source = _need_obs(rc, args)
    out = benchmark_grad(rc.model, MomentPair.point_mass(rc.x0), obs, rc.grid, rc.optimizer,
                         int(bm["n_init"]), float(bm["init_scale"]), int(bm["maxiter"]), rc.seed)
    it = np.arange(1, int(bm["maxiter"]) + 1)
    col = "mean_log_J" if out["log"] else "mean_J"
    write_csv(os.path.join(rc.out, "benchmark.csv"), ["iteration", f"ngd_{col}", f"rgd_{col}"],
              np.column_stack([it, out["ngd"][1:], out["rgd"][1:]]))
    mid = len(it) // 2
    return {"observations": source, "log": out["log"], "initial": [out["ngd"][0], out["rgd"][0]],
            "midpoint_iteration": int(it[mid - 1]) if mid else 0,
            "midpoint": [out["ngd"][mid], out["rgd"][mid]] if mid else None,
            "final": [out["ngd"][-1], out["rgd"][-1]]}


def cmd_compare(rc, args):
    if rc.model.family != "linear":
        raise InputError("compare needs a linear model (the exact smoother is for OU processes)")
    obs, source = _need_obs(rc, args)
    path = args.moments or os.path.join(rc.out, "moments.csv")
    header, arr = read_csv(path)
    n = rc.model.dim
    if header != moment_header(n):
        raise InputError(f"{path}: line 1: unexpected header")
    if arr.shape[0] != rc.grid.n_steps + 1 or not np.allclose(arr[:, 0], rc.grid.nodes, atol=1e-9 * rc.grid.span):
        raise InputError(f"{path}: rows do not match the configured grid")
    g, mu, s = rc.model.unpack()
    exact = exact_linear_smoother(g, mu, s, MomentPair.point_mass(rc.x0), obs, rc.grid)
    write_moments(os.path.join(rc.out, "exact_moments.csv"), exact)
    m_err = np.abs(arr[:, 1:1 + n] - exact.means) / np.maximum(np.abs(exact.means), 1e-300)
    approx = MomentTrajectory(rc.grid, arr[:, 1:], n)
    v_err = np.abs(approx.variances[1:] - exact.variances[1:]) / exact.variances[1:]
    rtol = float(args.rtol)
    ok = bool(m_err.max() <= rtol and v_err.max() <= rtol)
    print(f"max relative error: mean {m_err.max():.3e}, variance {v_err.max():.3e} (rtol {rtol:g})")
    return {"observations": source, "max_rel_err_mean": float(m_err.max()), "max_rel_err_var": float(v_err.max()), "rtol": rtol,
            "within_rtol": ok, "_exit": 0 if ok else 1}


COMMANDS = {
    "simulate": cmd_simulate,
    "smooth": cmd_smooth,
    "infer": cmd_infer,
    "amortize": cmd_amortize,
    "benchmark-grad": cmd_benchmark_grad,
    "compare": cmd_compare,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="mbvi", description="Moment-based variational smoothing of SDEs.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML or JSON run configuration")
        p.add_argument("--obs", help="observations CSV (t,y1,...,yp); overrides the config")
        p.add_argument("--out", help="output directory (default from config)")
        p.add_argument("--seed", type=int, help="random seed (default from config)")
        p.add_argument("--workers", type=int, help="worker processes for independent runs")
        if name == "compare":
            p.add_argument("--moments", help="moments CSV to check (default OUT/moments.csv)")
            p.add_argument("--rtol", type=float, default=1e-2, help="relative tolerance (default 1e-2)")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        rc = resolve(load_config(args.config), {"seed": args.seed, "workers": args.workers, "out": args.out})
        os.makedirs(rc.out, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IllConditioned)
            extra = COMMANDS[args.command](rc, args)
        code = int(extra.pop("_exit", 0))
        write_summary(rc.out, args.command, rc, extra)
        return code
    except NumericalError as exc:
        print(f"mbvi {args.command}: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (MBVIError, ValueError, OSError) as exc:
        print(f"mbvi {args.command}: invalid input: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
