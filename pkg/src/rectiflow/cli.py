"""Command-line surface: train -> reflow -> sample -> eval -> bench.

Every command writes its delimited outputs plus rendered figures next to
them, and exactly one JSON manifest beside the primary output. Exit code 0
means all outputs were written; failures print one ``error: ...`` line to
stderr.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import subprocess
import sys

import numpy as np

from . import __version__, plots
from .data import fixed_dataset, load_dataset_csv, make_distribution, make_toy_mel
from .errors import RectiflowError
from .flow import rectify, train, write_loss_csv
from .fusion import BundleBatch, load_bundle_csv
from .metrics import (
    MetricReport,
    bench,
    config_fingerprint,
    conversion_accuracy,
    energy_distance,
    one_step_gap,
    straightness,
    write_bench_csv,
    write_metric_csv,
)
from .persistence import (
    load_checkpoint,
    save_checkpoint,
    toy_mel_config_from_file,
    toy_mel_descriptor,
    toy_mel_from_descriptor,
    train_config_from_file,
    fusion_config_from_file,
)
from .solvers import SolverConfig, sample, write_trajectory_csv

EVAL_METRICS = ("straightness", "energy", "onestep-gap", "conversion")


def build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return f"rectiflow-{__version__}"


def write_manifest(primary_out, command: str, config: dict, seed: int, outputs: list, started: str) -> str:
    path = f"{primary_out}.manifest.json"
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": [str(p) for p in outputs],
        "build_id": build_id(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _resolve_data(name: str, config_path: str | None):
    """Data source from a known name or a dataset CSV path."""
    if name == "toy_mel":
        if config_path is None:
            raise RectiflowError("toy_mel requires --config with data.* keys")
        cfg = toy_mel_config_from_file(config_path)
        src = make_toy_mel(cfg)
        return src, toy_mel_descriptor(cfg)
    if name in ("two_gaussians", "two_moons", "checkerboard"):
        return make_distribution(name), {"name": name}
    if os.path.exists(name):
        return fixed_dataset(load_dataset_csv(name), name="csv"), {"name": "csv", "path": name}
    raise RectiflowError(
        f"unknown data source '{name}' (expected two_gaussians, two_moons, checkerboard, "
        f"toy_mel, or a dataset CSV path)"
    )


def _rebuild_source(ckpt):
    desc = ckpt.data_descriptor()
    name = desc.get("name")
    if name == "toy_mel":
        return make_toy_mel(toy_mel_from_descriptor(desc))
    if name in ("two_gaussians", "two_moons", "checkerboard"):
        return make_distribution(name)
    if name == "csv":
        return fixed_dataset(load_dataset_csv(desc["path"]), name="csv")
    raise RectiflowError("checkpoint does not record a reconstructible data source")


def _solver_from_args(args) -> SolverConfig:
    if args.solver == "euler":
        if args.steps is None:
            raise RectiflowError("euler solver requires --steps")
        if args.atol is not None or args.rtol is not None:
            raise RectiflowError("--atol/--rtol apply to rk45 only")
        return SolverConfig(kind="euler", n_steps=args.steps, record_trajectory=bool(args.dump_traj))
    if args.solver == "rk45":
        if args.steps is not None:
            raise RectiflowError("rk45 is adaptive: --steps is not accepted")
        atol = args.atol if args.atol is not None else 1e-5
        rtol = args.rtol if args.rtol is not None else 1e-5
        return SolverConfig(kind="rk45", atol=atol, rtol=rtol, record_trajectory=bool(args.dump_traj))
    raise RectiflowError(f"unknown solver '{args.solver}'")


def _parse_solver_token(token: str, atol: float, rtol: float) -> SolverConfig:
    token = token.strip()
    if token == "rk45":
        return SolverConfig(kind="rk45", atol=atol, rtol=rtol)
    if token.startswith("euler-"):
        return SolverConfig(kind="euler", n_steps=int(token.split("-", 1)[1]))
    raise RectiflowError(f"unknown solver token '{token}' (use euler-N or rk45)")


# -- commands -------------------------------------------------------------------


def cmd_train(args) -> int:
    started = _now()
    config = train_config_from_file(args.config, seed_override=args.seed)
    fusion_cfg = fusion_config_from_file(args.config)
    source, descriptor = _resolve_data(args.data, args.config)
    if source.dim != config.dim:
        raise RectiflowError(f"config dim {config.dim} != data source dim {source.dim}")
    if (fusion_cfg is not None) != (config.condition == "fused"):
        raise RectiflowError("fusion config present iff condition = fused")

    result = train(config, source, fusion_config=fusion_cfg)
    out = args.out
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_checkpoint(
        result.model,
        out,
        train_config=config,
        fusion=result.fusion,
        data_descriptor=descriptor,
    )
    loss_csv = f"{out}.loss.csv"
    write_loss_csv(result.history, loss_csv)
    loss_png = f"{out}.loss.png"
    plots.save_loss_curve(result.history, loss_png)
    outputs = [out, loss_csv, loss_png]
    write_manifest(out, "train", {"config": args.config, "data": args.data}, config.seed, outputs, started)
    print(f"wrote {out} (round {result.model.rectification_round}), {loss_csv}, {loss_png}")
    return 0


def cmd_reflow(args) -> int:
    started = _now()
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.train_config()
    if args.seed is not None:
        config.seed = args.seed
    solver = _parse_solver_token(args.solver, args.atol, args.rtol)
    cond_source = None
    if ckpt.model.cond_dim > 0:
        cond_source = _rebuild_source(ckpt)

    seed = config.seed
    rng_probe = np.random.default_rng(seed)
    s_before = straightness(
        ckpt.model, args.probe_n, rng_probe, fusion=ckpt.fusion, cond_source=cond_source
    )
    result, dataset = rectify(
        ckpt.model,
        config,
        n_pairs=args.n,
        solver_config=solver,
        fusion=ckpt.fusion,
        cond_source=cond_source,
    )
    result.model.rectification_round = ckpt.model.rectification_round + 1
    rng_probe = np.random.default_rng(seed)
    s_after = straightness(
        result.model, args.probe_n, rng_probe, fusion=result.fusion, cond_source=cond_source
    )

    out = args.out
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_checkpoint(
        result.model,
        out,
        train_config=config,
        fusion=result.fusion,
        data_descriptor=ckpt.data_descriptor(),
    )
    s_csv = f"{out}.straightness.csv"
    fp = config_fingerprint("reflow", seed, args.n, solver.label())
    write_metric_csv(
        [
            MetricReport("straightness_before", s_before, args.probe_n, seed, fp),
            MetricReport("straightness_after", s_after, args.probe_n, seed, fp),
        ],
        s_csv,
    )
    s_png = f"{out}.straightness.png"
    plots.save_straightness_compare(s_before, s_after, s_png)
    outputs = [out, s_csv, s_png]
    write_manifest(
        out,
        "reflow",
        {"ckpt": args.ckpt, "n": args.n, "solver": solver.label()},
        seed,
        outputs,
        started,
    )
    print(
        f"wrote {out} (round {result.model.rectification_round}); "
        f"straightness {s_before:.4f} -> {s_after:.4f}"
    )
    return 0


def cmd_sample(args) -> int:
    started = _now()
    ckpt = load_checkpoint(args.ckpt)
    solver = _solver_from_args(args)
    rng = np.random.default_rng(args.seed)
    bundles = None
    cond_source = None
    if ckpt.model.cond_dim > 0:
        if args.cond is not None:
            bundles = BundleBatch.from_bundles([load_bundle_csv(args.cond)])
        else:
            cond_source = _rebuild_source(ckpt)
    elif args.cond is not None:
        raise RectiflowError("--cond given but the checkpoint is unconditional")

    result = sample(
        ckpt.model, args.n, solver, rng, fusion=ckpt.fusion, cond_source=cond_source, bundles=bundles
    )
    out = args.out
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    from .data import save_dataset_csv

    save_dataset_csv(result.samples, out)
    png = f"{out}.png"
    plots.save_samples(result.samples, png, title=f"{solver.label()} samples (nfe={result.nfe})")
    outputs = [out, png]
    if args.dump_traj:
        write_trajectory_csv(result.trajectory, args.dump_traj)
        traj_png = f"{args.dump_traj}.png"
        plots.save_trajectories(result.trajectory, traj_png, title=f"{solver.label()} trajectories")
        outputs += [args.dump_traj, traj_png]
    write_manifest(
        out,
        "sample",
        {"ckpt": args.ckpt, "solver": solver.label(), "n": args.n},
        args.seed,
        outputs,
        started,
    )
    print(f"wrote {out} ({args.n} samples, nfe={result.nfe}, {result.wall_time_s:.3f}s)")
    return 0


def cmd_eval(args) -> int:
    started = _now()
    ckpt = load_checkpoint(args.ckpt)
    if args.metric not in EVAL_METRICS:
        raise RectiflowError(
            f"unknown metric '{args.metric}'; valid metrics: {', '.join(EVAL_METRICS)}"
        )
    rng = np.random.default_rng(args.seed)
    source = _rebuild_source(ckpt)
    cond_source = source if ckpt.model.cond_dim > 0 else None
    fp = config_fingerprint(args.metric, args.ckpt, args.n, args.seed)

    if args.metric == "straightness":
        value = straightness(ckpt.model, args.n, rng, fusion=ckpt.fusion, cond_source=cond_source)
    elif args.metric == "energy":
        res = sample(
            ckpt.model,
            args.n,
            SolverConfig(kind="rk45", atol=1e-5, rtol=1e-5),
            rng,
            fusion=ckpt.fusion,
            cond_source=cond_source,
        )
        value = energy_distance(res.samples, source.sample(args.n, rng))
    elif args.metric == "onestep-gap":
        value = one_step_gap(
            ckpt.model, source, args.n, rng, fusion=ckpt.fusion, cond_source=cond_source
        )
    else:  # conversion
        if ckpt.model.cond_dim == 0 or cond_source is None:
            raise RectiflowError("conversion requires a conditional toy_mel checkpoint")
        value = conversion_accuracy(ckpt.model, ckpt.fusion, cond_source, args.n, rng)

    report = MetricReport(args.metric, value, args.n, args.seed, fp)
    write_metric_csv([report], args.out, append=True)
    write_manifest(
        args.out, "eval", {"ckpt": args.ckpt, "metric": args.metric, "n": args.n}, args.seed, [args.out], started
    )
    print(f"{args.metric} = {value!r} (n={args.n}, seed={args.seed}) -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    started = _now()
    ckpt = load_checkpoint(args.ckpt)
    if args.repeats < 3:
        raise RectiflowError(f"--repeats must be >= 3, got {args.repeats}")
    configs = [_parse_solver_token(tok, args.atol, args.rtol) for tok in args.solvers.split(",")]
    cond_source = _rebuild_source(ckpt) if ckpt.model.cond_dim > 0 else None
    rows = bench(
        ckpt.model,
        configs,
        n=args.n,
        rng_seed=args.seed,
        repeats=args.repeats,
        fusion=ckpt.fusion,
        cond_source=cond_source,
    )
    write_bench_csv(rows, args.out)
    png = f"{args.out}.png"
    plots.save_bench_bars(rows, png)
    write_manifest(
        args.out,
        "bench",
        {"ckpt": args.ckpt, "solvers": args.solvers, "n": args.n, "repeats": args.repeats},
        args.seed,
        [args.out, png],
        started,
    )
    for r in rows:
        print(f"{r.method}: iter={r.iters} nfe={r.nfe} median={r.seconds_median:.4f}s")
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rectiflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a round-1 flow on a data source")
    t.add_argument("--config", required=True, help="key=value run config")
    t.add_argument("--data", required=True, help="two_gaussians|two_moons|checkerboard|toy_mel|CSV path")
    t.add_argument("--out", required=True, help="checkpoint output path")
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reflow", help="rectify a trained flow (round k -> k+1)")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--n", type=int, default=8192, help="number of generated coupling pairs")
    r.add_argument("--solver", default="rk45", help="euler-N or rk45 (pair generation)")
    r.add_argument("--atol", type=float, default=1e-5)
    r.add_argument("--rtol", type=float, default=1e-5)
    r.add_argument("--probe-n", type=int, default=512, help="trajectories for the straightness report")
    r.add_argument("--seed", type=int, default=None, help="overrides the recorded training seed")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reflow)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--solver", choices=("euler", "rk45"), required=True)
    s.add_argument("--steps", type=int, default=None, help="euler step count")
    s.add_argument("--atol", type=float, default=None)
    s.add_argument("--rtol", type=float, default=None)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--cond", default=None, help="condition bundle CSV (conditional models)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="samples CSV path")
    s.add_argument("--dump-traj", default=None, help="also dump the trajectory CSV here")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="compute one metric of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--metric", required=True, help="|".join(EVAL_METRICS))
    e.add_argument("--n", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="metric CSV (appends)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="sampling wall-time / NFE table")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--solvers", default="euler-1,euler-30,rk45")
    b.add_argument("--n", type=int, default=256)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--atol", type=float, default=1e-5)
    b.add_argument("--rtol", type=float, default=1e-5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RectiflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: file: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
