"""Command-line driver: ``obstaclenet {train,pretrain,sweep,scaling,greenland,oracle}``.

Every option can also come from a JSON config file (``--config``) whose keys
are the option names with dashes replaced by underscores. Flags override the
file. The effective configuration is written to ``<out>/config.json`` and can
be fed back through ``--config`` to repeat the run.

Exit codes: 0 success, 1 domain or runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import geodata, metrics, oracle, problems, reports
from .energy import SpecError, sample_batch
from .nnet import StructureError, init, load_checkpoint, save_checkpoint, evaluate
from .optim import EvalGrid, TrainConfig, TrainingError, fit_mse, pretrain, train

log = logging.getLogger("obstaclenet")

TABLE1_PAIRS = [(100.0, 100.0), (500.0, 100.0), (1000.0, 500.0), (4000.0, 4000.0), (5000.0, 4000.0)]

COMMON = {
    "out": "runs/out",
    "seed": 0,
    "iters": 2000,
    "lr": 5e-4,
    "breakpoints": [500, 750],
    "n_interior": 1024,
    "n_boundary": 256,
    "width": 128,
    "depth": 5,
    "layer_norm": True,
    "init": "uniform",
    "sampling": "auto",
    "deterministic": True,
    "fixed_batch": False,
    "pool_size": None,
    "eval_every": 10,
    "checkpoint_every": 0,
    "init_checkpoint": None,
}

DEFAULTS = {
    "train": {**COMMON, "problem": None, "alpha": None, "beta": None,
              "bedrock": None, "thickness": None, "surface": None, "synthetic": None, "downsample": 1,
              "p": 3.0, "drift": "zero"},
    "pretrain": {**COMMON, "problem": None, "bedrock": None, "synthetic": None, "downsample": 1},
    "sweep": {**COMMON, "problem": "mms1d-p2", "pairs": [list(p) for p in TABLE1_PAIRS]},
    "scaling": {**COMMON, "problem": "mms1d-p2", "alpha": None, "beta": None,
                "counts": [2 ** k for k in range(6, 15)], "seeds": [0, 1, 2]},
    "greenland": {**COMMON, "width": 320, "depth": 15, "iters": 22000, "pretrain_iters": 2000,
                  "alpha": 4000.0, "beta": 4000.0, "p": 3.0, "bedrock": None, "thickness": None,
                  "surface": None, "synthetic": None, "downsample": 8, "drift": "zero",
                  "benchmark": True, "benchmark_samples": 65536},
    "oracle": {"out": "runs/oracle", "problem": None, "cells": None, "tol": None,
               "alpha": None, "beta": None, "p": None},
}


class UsageError(Exception):
    pass


# -- argument parsing -------------------------------------------------------------

def _bool(s):
    if isinstance(s, bool):
        return s
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _pairs(s):
    out = []
    for chunk in s.split(";"):
        if chunk.strip():
            a, b = chunk.split(",")
            out.append([float(a), float(b)])
    return out


_TYPES = {
    "seed": int, "iters": int, "lr": float, "n_interior": int, "n_boundary": int,
    "width": int, "depth": int, "layer_norm": _bool, "deterministic": _bool,
    "fixed_batch": _bool, "pool_size": int, "eval_every": int, "checkpoint_every": int,
    "alpha": float, "beta": float, "p": float, "downsample": int, "pretrain_iters": int,
    "cells": int, "tol": float, "benchmark": _bool, "benchmark_samples": int,
    "pairs": _pairs, "counts": lambda s: [int(v) for v in s.split(",")],
    "seeds": lambda s: [int(v) for v in s.split(",")], "breakpoints": lambda s: [int(v) for v in s.split(",")],
}

_HELP = {
    "problem": "mms1d-p2, mms2d-p3, mms2d-p4, or grid (with --bedrock/--thickness)",
    "pairs": "alpha,beta pairs separated by ';'",
    "counts": "comma-separated interior sample counts (pool sizes)",
    "seeds": "comma-separated seeds, one run per count and seed",
    "synthetic": "ROWSxCOLS: generate synthetic grids instead of reading files",
    "drift": "zero or bedrock (use the bedrock gradient as drift)",
    "init": "he (Gaussian weights, zero biases) or uniform (weights and biases U(+-1/sqrt(fan_in)))",
    "sampling": "auto, uniform, stratified, or grid (fixed midpoint grid); auto picks grid in 1-D, uniform otherwise",
}


def build_parser():
    parser = argparse.ArgumentParser(prog="obstaclenet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in DEFAULTS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        for key in defaults:
            flag = "--" + key.replace("_", "-")
            sp.add_argument(flag, dest=key, default=None, type=_TYPES.get(key, str),
                            help=_HELP.get(key))
    return parser


def resolve_config(command, args):
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            with open(args.config) as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        file_cfg.pop("command", None)
        unknown = sorted(set(file_cfg) - set(cfg))
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        cfg.update(file_cfg)
    for key in DEFAULTS[command]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _sampling(cfg, dim):
    mode = str(cfg["sampling"])
    if mode == "auto":
        return "grid" if dim == 1 else "uniform"
    return mode


def _train_config(cfg, out, seed=None, dim=2):
    return TrainConfig(
        iterations=int(cfg["iters"]), base_lr=float(cfg["lr"]),
        breakpoints=tuple(cfg["breakpoints"]), n_interior=int(cfg["n_interior"]),
        n_boundary=int(cfg["n_boundary"]), seed=int(cfg["seed"] if seed is None else seed),
        deterministic=bool(cfg["deterministic"]), fixed_batch=bool(cfg["fixed_batch"]),
        pool_size=cfg["pool_size"], sampling=_sampling(cfg, dim), eval_every=max(1, int(cfg["eval_every"])),
        checkpoint_every=int(cfg["checkpoint_every"]),
        checkpoint_path=os.path.join(out, "checkpoint.npz") if out else None)


def _network(cfg, dim, seed):
    if cfg.get("init_checkpoint"):
        net = load_checkpoint(cfg["init_checkpoint"])
        if net.input_dim != dim:
            raise StructureError(f"checkpoint expects {net.input_dim}-D input, problem is {dim}-D")
        return net
    sizes = [dim] + [int(cfg["width"])] * int(cfg["depth"]) + [1]
    return init(seed, sizes, layer_norm=bool(cfg["layer_norm"]), scheme=str(cfg["init"]))


def _snapshot(cfg, command):
    os.makedirs(cfg["out"], exist_ok=True)
    reports.write_json({"command": command, **cfg}, os.path.join(cfg["out"], "config.json"))


# -- problems -----------------------------------------------------------------------

@dataclasses.dataclass
class _Resolved:
    spec: object
    mms: object = None
    grid: object = None  # GridProblem


def _load_grids(cfg, need_thickness=True):
    if cfg.get("synthetic"):
        try:
            rows, cols = (int(v) for v in str(cfg["synthetic"]).lower().split("x"))
        except ValueError:
            raise UsageError("--synthetic expects ROWSxCOLS")
        bed, thick, surf = geodata.synthetic_ice_sheet(rows, cols, seed=int(cfg["seed"]))
    else:
        if not cfg.get("bedrock"):
            raise UsageError("a bedrock grid is required (--bedrock or --synthetic)")
        bed = geodata.parse_grid(cfg["bedrock"])
        geodata.check_range(bed, "bedrock")
        thick = surf = None
        if need_thickness:
            if not cfg.get("thickness"):
                raise UsageError("a thickness grid is required (--thickness)")
            if not os.path.exists(cfg["thickness"]):
                raise FileNotFoundError(f"thickness grid not found: {cfg['thickness']}")
            thick = geodata.parse_grid(cfg["thickness"])
            geodata.check_range(thick, "thickness")
        if cfg.get("surface"):
            surf = geodata.parse_grid(cfg["surface"])
            geodata.check_range(surf, "surface")
    f = int(cfg.get("downsample") or 1)
    bed = geodata.downsample(bed, f)
    thick = geodata.downsample(thick, f) if thick is not None else None
    surf = geodata.downsample(surf, f) if surf is not None else None
    return bed, thick, surf


def _resolve_problem(cfg):
    name = cfg.get("problem")
    if not name:
        raise UsageError("--problem is required")
    if name == "grid":
        bed, thick, surf = _load_grids(cfg)
        alpha = 4000.0 if cfg.get("alpha") is None else cfg["alpha"]
        beta = 4000.0 if cfg.get("beta") is None else cfg["beta"]
        gp = geodata.build_problem(bed, thick, cfg.get("p", 3.0), alpha, beta, surface=surf,
                                   drift=cfg.get("drift", "zero"))
        return _Resolved(gp.spec, grid=gp)
    try:
        mms = problems.get_problem(name, cfg.get("alpha"), cfg.get("beta"))
    except KeyError as exc:
        raise UsageError(str(exc.args[0]))
    return _Resolved(mms.spec, mms=mms)


def _eval_grid(mms):
    pts = metrics.eval_grid_points(mms.spec.dim)
    return EvalGrid(pts, mms.exact(pts))


# -- subcommands ----------------------------------------------------------------------

def cmd_train(cfg):
    prob = _resolve_problem(cfg)
    out = cfg["out"]
    _snapshot(cfg, "train")
    net = _network(cfg, prob.spec.dim, int(cfg["seed"]))
    tcfg = _train_config(cfg, out, dim=prob.spec.dim)
    grid = _eval_grid(prob.mms) if prob.mms is not None else None
    sampler = prob.grid.sampler if prob.grid is not None else None
    try:
        report = train(net, prob.spec, tcfg, grid, sampler=sampler)
    except TrainingError as exc:
        if exc.report is not None:
            reports.write_report_csv(exc.report, os.path.join(out, "report.csv"))
        raise
    bench = None
    if prob.grid is not None:
        bench = _benchmark(prob.grid, int(cfg["seed"]), int(cfg["n_interior"]), int(cfg["n_boundary"]))
    reports.write_report_csv(report, os.path.join(out, "report.csv"), benchmark=bench)
    summary = _summary(report, cfg)
    if prob.mms is not None:
        pts = grid.points
        pred = evaluate(net, pts)
        err = metrics.l1_error(pred, grid.exact, pts, sample_count=tcfg.n_interior)
        reports.write_field_csv(pts, pred, os.path.join(out, "field.csv"), extra={"exact": grid.exact})
        summary["error"] = {"l1": err.l1, "relative": err.relative,
                            "resolution": list(err.resolution), "sample_count": err.sample_count}
    else:
        _dump_grid_fields(net, prob.grid, out)
        summary["benchmark"] = bench.as_tuple()
    reports.write_json(summary, os.path.join(out, "summary.json"))
    log.info("train: final losses %s", report.breakdown(report.iterations - 1) if report.iterations else None)
    if "error" in summary:
        print(f"relative L1 error {summary['error']['relative']:.4e}")
    return summary


def _summary(report, cfg):
    last = report.breakdown(report.iterations - 1).as_tuple() if report.iterations else None
    return {"status": report.status, "iterations": report.iterations, "seed": report.seed,
            "final_losses": last, "final_error": report.final_error,
            "wall_clock": report.wall_clock, "checkpoint": report.checkpoint}


def cmd_pretrain(cfg):
    out = cfg["out"]
    if cfg.get("problem") and cfg["problem"] != "grid":
        prob = _resolve_problem(cfg)
        spec = prob.spec
        target, lower, upper, sampler = spec.obstacle, spec.lower, spec.upper, None
    else:
        bed, _, _ = _load_grids(cfg, need_thickness=False)
        field = geodata.NormalizedField(bed)
        target, lower, upper = field, np.zeros(2), field.upper
        sampler = _masked_sampler(field, bed.mask)
    _snapshot(cfg, "pretrain")
    net = _network(cfg, len(np.atleast_1d(lower)), int(cfg["seed"]))
    history = []
    pretrain(net, target, _train_config(cfg, None, dim=len(np.atleast_1d(lower))), lower, upper, sampler=sampler, history=history)
    save_checkpoint(net, os.path.join(out, "pretrained.npz"))
    reports.write_table([(i, repr(v)) for i, v in enumerate(history)], ["iteration", "mse"],
                        os.path.join(out, "pretrain.csv"))
    summary = {"final_mse": history[-1] if history else None,
               "checkpoint": os.path.join(out, "pretrained.npz")}
    reports.write_json(summary, os.path.join(out, "summary.json"))
    return summary


def _masked_sampler(field, mask):
    def sampler(rng, n):
        return geodata.masked_sample(rng, n, mask, field.h, np.zeros(2), field.upper)
    return sampler


def sweep_seeds(pairs, seed):
    """First occurrence of a pair uses ``seed``; repeats get fresh seeds."""
    seen = {}
    seeds = []
    for pair in pairs:
        key = tuple(float(v) for v in pair)
        k = seen.get(key, 0)
        seen[key] = k + 1
        seeds.append(int(seed) + 1000 * k)
    return seeds


def cmd_sweep(cfg):
    pairs = cfg["pairs"]
    if not pairs:
        raise UsageError("sweep needs at least one alpha,beta pair")
    out = cfg["out"]
    _snapshot(cfg, "sweep")
    rows = []
    for i, ((alpha, beta), seed) in enumerate(zip(pairs, sweep_seeds(pairs, cfg["seed"]))):
        row = {"alpha": alpha, "beta": beta, "seed": seed, "relative_error": "", "status": "ok"}
        try:
            mms = problems.get_problem(cfg["problem"], alpha, beta)
            net = _network(cfg, mms.spec.dim, seed)
            run_dir = os.path.join(out, f"run{i:02d}")
            report = train(net, mms.spec, _train_config(cfg, run_dir, seed, mms.spec.dim),
                           _eval_grid(mms))
            reports.write_report_csv(report, os.path.join(run_dir, "report.csv"))
            row["relative_error"] = repr(report.final_error)
        except (TrainingError, SpecError, ValueError) as exc:
            row["status"] = f"failed: {exc}"
            log.warning("sweep cell alpha=%g beta=%g failed: %s", alpha, beta, exc)
        rows.append(row)
        print(f"alpha={alpha:g} beta={beta:g} seed={seed} error={row['relative_error'] or 'n/a'}")
    reports.write_table(rows, ["alpha", "beta", "relative_error", "seed", "status"],
                        os.path.join(out, "table.csv"))
    return rows


def cmd_scaling(cfg):
    prob = _resolve_problem(cfg)
    if prob.mms is None:
        raise UsageError("scaling needs a manufactured problem")
    out = cfg["out"]
    _snapshot(cfg, "scaling")
    hidden = (int(cfg["width"]),) * int(cfg["depth"])
    run = metrics.training_runner(prob.mms, _train_config(cfg, None, dim=prob.spec.dim), hidden, scheme=str(cfg["init"]))
    res = metrics.scaling_study(run, cfg["counts"], cfg["seeds"])
    reports.write_table([(n, s, repr(e)) for n, s, e in res.rows], ["N", "seed", "relative_error"],
                        os.path.join(out, "scaling.csv"))
    summary = {"slope": res.slope, "counts": res.counts, "mean_errors": res.mean_errors,
               "failed": [list(f) for f in res.failed]}
    reports.write_json(summary, os.path.join(out, "summary.json"))
    print(f"fitted slope {res.slope:.3f}")
    return summary


def _benchmark(gp, seed, n_interior, n_boundary):
    batch = sample_batch(gp.spec, n_interior, n_boundary, seed + 104729, None, gp.sampler)
    return geodata.data_benchmark_losses(gp.spec, gp.benchmark, batch)


def _dump_grid_fields(net, gp, out):
    bed = gp.bedrock.grid
    pts = gp.bedrock.node_coords()
    u = evaluate(net, pts)
    surf = gp.bedrock.from_unit_values(u).reshape(bed.nrows, bed.ncols)
    thick = surf - bed.values
    for name, vals in (("surface", surf), ("thickness", thick)):
        g = geodata.Grid(bed.ncols, bed.nrows, bed.cell_size, bed.origin,
                         bed.nodata if bed.nodata is not None else -9999.0,
                         np.where(gp.mask, 0.0, vals), gp.mask.copy())
        geodata.write_grid(g, os.path.join(out, f"predicted_{name}.asc"))
    reports.write_field_csv(pts, u, os.path.join(out, "field.csv"),
                            extra={"bedrock": gp.bedrock(pts), "data": gp.benchmark(pts)})


def cmd_greenland(cfg):
    if cfg.get("benchmark") and not cfg.get("synthetic") and not cfg.get("thickness"):
        raise UsageError("benchmark lines need a thickness grid (--thickness)")
    bed, thick, surf = _load_grids(cfg)
    gp = geodata.build_problem(bed, thick, cfg["p"], cfg["alpha"], cfg["beta"], surface=surf,
                               drift=cfg["drift"])
    out = cfg["out"]
    _snapshot(cfg, "greenland")
    seed = int(cfg["seed"])
    net = _network(cfg, 2, seed)
    pcfg = _train_config({**cfg, "iters": cfg["pretrain_iters"]}, None)
    history = []
    pretrain(net, gp.bedrock, pcfg, gp.spec.lower, gp.spec.upper, sampler=gp.sampler, history=history)
    save_checkpoint(net, os.path.join(out, "pretrained.npz"))
    reports.write_table([(i, repr(v)) for i, v in enumerate(history)], ["iteration", "mse"],
                        os.path.join(out, "pretrain.csv"))
    pts = gp.bedrock.node_coords()[~gp.mask.reshape(-1)]
    pre_mse = fit_mse(net, gp.bedrock, pts)
    bench = None
    if cfg["benchmark"]:
        bench = _benchmark(gp, seed, int(cfg["benchmark_samples"]), int(cfg["n_boundary"]))
    report = train(net, gp.spec, _train_config(cfg, out), sampler=gp.sampler)
    reports.write_report_csv(report, os.path.join(out, "report.csv"), benchmark=bench)
    _dump_grid_fields(net, gp, out)
    summary = _summary(report, cfg)
    summary.update({"pretrain_mse": pre_mse, "value_scale": gp.value_scale,
                    "benchmark": bench.as_tuple() if bench else None,
                    "grid_shape": [bed.nrows, bed.ncols]})
    if report.iterations:
        tail = report.losses[-100:]
        summary["trailing_losses"] = [float(v) for v in tail.mean(axis=0)]
    reports.write_json(summary, os.path.join(out, "summary.json"))
    print(f"pretrain MSE {pre_mse:.3e}; final losses {summary['final_losses']}; benchmark {summary['benchmark']}")
    return summary


def cmd_oracle(cfg):
    prob = _resolve_problem(cfg)
    if prob.mms is None:
        raise UsageError("oracle needs a manufactured problem")
    spec = prob.spec
    exact_known = True
    if cfg.get("p") is not None:
        p = float(cfg["p"])
        if p < 2:
            raise UsageError(f"the oracle solvers need p >= 2, got {p:g}")
        if p != spec.p:
            # a different exponent changes the problem; the manufactured solution no longer applies
            spec = dataclasses.replace(spec, p=p)
            exact_known = False
    out = cfg["out"]
    _snapshot(cfg, "oracle")
    cells = cfg.get("cells") or (1024 if spec.dim == 1 else 128)
    grid = oracle.make_grid(spec, cells)
    if spec.dim == 1 and spec.p == 2:
        u = oracle.solve_psor_1d(grid, tol=cfg.get("tol") or 1e-10)
    else:
        u = oracle.solve_pgd(grid, spec, tol=cfg.get("tol") or 1e-8)
    pts = grid.points()
    summary = {"cells": cells, "p": spec.p}
    extra = None
    if exact_known:
        exact = prob.mms.exact(pts)
        err = metrics.l1_error(u.reshape(-1), exact, pts)
        max_err = float(np.max(np.abs(u.reshape(-1) - exact)))
        summary.update({"max_error": max_err, "l1": err.l1, "relative": err.relative})
        extra = {"exact": exact}
        print(f"max error {max_err:.4e}")
    reports.write_field_csv(pts, u.reshape(-1), os.path.join(out, "oracle.csv"), extra=extra)
    reports.write_json(summary, os.path.join(out, "summary.json"))
    return summary


COMMANDS = {"train": cmd_train, "pretrain": cmd_pretrain, "sweep": cmd_sweep, "scaling": cmd_scaling,
            "greenland": cmd_greenland, "oracle": cmd_oracle}

DOMAIN_ERRORS = (problems.DomainError, SpecError, TrainingError, oracle.OracleError,
                 geodata.GridParseError, StructureError, ValueError, OSError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
