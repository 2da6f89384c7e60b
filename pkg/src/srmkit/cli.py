"""Command-line entry points.

Exit codes: 0 success or satisfied, 1 constraint unsatisfied, 2 input error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gridworld as gw
from . import reward_model as rm
from .config import ConfigError, ExperimentConfig, load_config, seed_from_env
from .constraints import compile_constraint, satisfied, sign_constraint
from .core import SrmError, run
from .dsl import SrmParseError, load, load_asset
from .expr import EvalError
from .inference import CSV_HEADER, algorithm1, train_ppo

EXIT_OK, EXIT_UNSAT, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("srmkit")


class InputError(Exception):
    pass


class TrainingFailure(RuntimeError):
    pass


def _parse_h(text: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.replace(" ", "").split(",") if x], dtype=np.float64)
    except ValueError:
        raise InputError(f"cannot parse hole assignment {text!r}; expected comma-separated numbers") from None


def _parse_seeds(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise InputError(f"no seeds in {text!r}")
    return out


def _load_srm(path):
    if path is None:
        return load_asset("doorkey.srm")
    try:
        return load(path)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen_demos(args) -> int:
    seed = args.seed if args.seed is not None else seed_from_env()
    config = gw.GridConfig(size=args.size, max_steps=args.max_steps, binary_reward=args.binary)
    out = Path(args.out)
    if not out.parent.exists():
        raise InputError(f"output directory does not exist: {out.parent}")
    demos = gw.demonstrate(config, args.n, seed)
    gw.write_trajectories(out, demos)
    mean_len = float(np.mean([len(t) for t in demos]))
    print(f"wrote {len(demos)} trajectories to {out} (mean length {mean_len:.1f})")
    return EXIT_OK


def cmd_check_constraints(args) -> int:
    srm = _load_srm(args.srm)
    h = _parse_h(args.h)
    if len(h) != srm.n_holes:
        raise InputError(f"assignment has {len(h)} values, machine declares {srm.n_holes} holes {srm.holes}")
    c = sign_constraint(srm) if args.sign_only else srm.constraint
    if c is None or not c.atoms:
        print("no constraint declared")
        return EXIT_OK
    lcs = compile_constraint(c, srm.holes)
    ok, u = satisfied(lcs, h)
    print(f"{'atom':<12} {'residual':>12}  status")
    for row, r in zip(lcs.rows, u):
        bad = r >= 0 if row.strict else r > 0
        print(f"{row.name:<12} {r:>12.6g}  {'VIOLATED' if bad else 'ok'}")
    if ok:
        print("satisfied")
        return EXIT_OK
    names = sorted({row.name for row, r in zip(lcs.rows, u) if (r >= 0 if row.strict else r > 0)})
    print("unsatisfied: " + ", ".join(names))
    return EXIT_UNSAT


def cmd_eval_srm(args) -> int:
    srm = _load_srm(args.srm)
    h = _parse_h(args.h)
    if len(h) != srm.n_holes:
        raise InputError(f"assignment has {len(h)} values, machine declares {srm.n_holes} holes {srm.holes}")
    try:
        trajs = gw.read_trajectories(args.trajectories)
    except OSError as e:
        raise InputError(f"cannot read {args.trajectories}: {e.strerror}") from None
    for i, tau in enumerate(trajs):
        res = run(srm, tau, h)
        print(f"trajectory {i}: total {res.total:.6g}")
        print("  path    " + " ".join(res.path))
        print("  rewards " + " ".join(f"{r:.6g}" for r in res.rewards))
    return EXIT_OK


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.srm:
        cfg.srm = Path(args.srm)
    if args.demos:
        cfg.demos = Path(args.demos)
    if args.out:
        cfg.out = Path(args.out)
    if args.size is not None:
        cfg.size = args.size
    if args.mode:
        cfg.mode = args.mode
    if args.preset:
        cfg.preset = args.preset
    if args.iterations is not None:
        cfg.train["iterations"] = args.iterations
    if args.no_constraint:
        cfg.train["use_constraint"] = False
    if args.sign_only:
        cfg.train["sign_only"] = True
    cfg.check()
    return cfg


def cmd_train(args) -> int:
    cfg = _experiment(args)
    seeds = _parse_seeds(args.seed) if args.seed is not None else [seed_from_env()]
    srm = _load_srm(cfg.srm)
    grid = cfg.grid()
    cfg.out.mkdir(parents=True, exist_ok=True)
    for seed in seeds:
        tc = cfg.train_config(seed=seed)
        stem = cfg.out / f"{cfg.mode}_seed{seed}"
        with open(f"{stem}.csv", "w", encoding="utf-8") as fh:
            fh.write(CSV_HEADER + "\n")

            def emit(rep):
                fh.write(rep.csv_row() + "\n")
                fh.flush()

            demos = None
            if cfg.mode == "algo1":
                if cfg.demos is not None:
                    try:
                        demos = gw.read_trajectories(cfg.demos, grid)
                    except (OSError, ValueError) as e:
                        raise InputError(f"cannot load demonstrations: {e}") from None
                else:
                    demos = gw.demonstrate(grid, args.n_demos, seed)
            try:
                if cfg.mode == "baseline":
                    result = train_ppo(grid, tc, on_report=emit)
                else:
                    result = algorithm1(srm, grid, demos, tc, on_report=emit)
            except ValueError as e:
                raise TrainingFailure(str(e)) from e
        rm.save_table(f"{stem}_policy.jsonl", result.policy.logits, "policy_logits")
        if cfg.mode == "algo1":
            rm.save_table(f"{stem}_reward_model.jsonl", result.model.logits, "reward_model_logits")
            with open(f"{stem}_sampler.jsonl", "w", encoding="utf-8") as fh:
                s = result.sampler
                fh.write(json.dumps({"holes": list(srm.holes), "mu": s.mu.tolist(),
                                     "logvar": s.logvar.tolist(), "b": s.b}) + "\n")
        last = result.reports[-1] if result.reports else None
        summary = f"seed {seed}: {len(result.reports)} iterations, {result.frames} frames"
        if last is not None:
            summary += f", last avg return {last.avg_return:.3f}"
        if cfg.mode == "algo1":
            summary += ", mu " + " ".join(f"{x:.3f}" for x in result.sampler.mu)
        print(summary)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srmkit", description="Symbolic reward machines with learned holes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="write expert demonstrations as line-delimited JSON")
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--size", type=int, default=6)
    g.add_argument("--max-steps", type=int, default=None)
    g.add_argument("--binary", action="store_true", help="0/1 success reward")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_demos)

    c = sub.add_parser("check-constraints", help="evaluate a machine's constraint at an assignment")
    c.add_argument("srm", nargs="?", help="machine file (default: bundled DoorKey)")
    c.add_argument("--h", required=True, help="comma-separated hole values")
    c.add_argument("--sign-only", action="store_true", help="use the non-relational constraint variant")
    c.set_defaults(func=cmd_check_constraints)

    e = sub.add_parser("eval-srm", help="run a concretized machine over trajectories")
    e.add_argument("srm", nargs="?", help="machine file (default: bundled DoorKey)")
    e.add_argument("--h", required=True, help="comma-separated hole values")
    e.add_argument("--trajectories", required=True)
    e.set_defaults(func=cmd_eval_srm)

    t = sub.add_parser("train", help="run the inference loop or the default-reward baseline")
    t.add_argument("--config")
    t.add_argument("--mode", choices=("algo1", "baseline"))
    t.add_argument("--preset", choices=("desk", "paper"))
    t.add_argument("--seed", help="seed, list (0,2) or range (0..4)")
    t.add_argument("--srm")
    t.add_argument("--demos")
    t.add_argument("--n-demos", type=int, default=10)
    t.add_argument("--out")
    t.add_argument("--size", type=int)
    t.add_argument("--iterations", type=int)
    t.add_argument("--no-constraint", action="store_true")
    t.add_argument("--sign-only", action="store_true")
    t.set_defaults(func=cmd_train)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SrmParseError as e:
        for d in e.diagnostics:
            print(str(d), file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ConfigError, SrmError, EvalError, gw.BadGeometry) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as e:
        # malformed data files surface as ValueError from the readers
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except gw.PlanFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, FloatingPointError, ArithmeticError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
