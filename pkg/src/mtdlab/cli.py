"""Command line entry point ``mtd``.

Exit codes: 0 success, 2 invalid configuration or failed validation,
3 experiment failure (divergence, infeasible design, solver trouble).
"""
import argparse
import json
import os
import sys

import numpy as np

from . import design_opt as dopt
from . import harness as hs
from .model_core import DivergenceError

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3
CI_TRIALS = 100


def _load(args):
    cfg = hs.ScenarioConfig.load(args.config)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.trials is not None:
        kw["trials"] = args.trials
    if args.ci:
        kw["trials"] = min(kw.get("trials", cfg.trials), CI_TRIALS)
    if args.out_dir is not None:
        kw["out_dir"] = args.out_dir
    if args.workers is not None:
        kw["workers"] = args.workers
    if getattr(args, "svg", False):
        kw["svg"] = True
    return cfg.replace(**kw) if kw else cfg


def cmd_simulate(args):
    cfg = _load(args)
    if cfg.mtd == "hybrid":
        raise hs.ConfigError("switched plants run through `mtd hybrid identify`")
    res = hs.run_experiment(cfg)
    onset = hs.AttackSpec.from_dict(cfg.attack).start_step if cfg.attack.get("kind", "none") != "none" else None
    print(f"trials {res.n_trials} (diverged {res.n_diverged}), threshold {res.threshold:.3f}")
    if onset is not None and 0 < onset < cfg.horizon:
        pre, post = res.g_mean[:onset], res.g_mean[onset:]
        print(f"mean g pre-attack {pre.mean():.3f}, post-attack {post.mean():.3f}, "
              f"post steps above threshold {np.mean(post > res.threshold):.3f}")
    else:
        print(f"mean g {res.g_mean.mean():.3f}, alarm rate {res.alarm_rate.mean():.5f}")
    return EXIT_OK


def cmd_design(args):
    cfg = _load(args)
    if cfg.mtd in ("none", "hybrid"):
        raise hs.ConfigError("design programs need the extended plant")
    probs = hs.design_problems(cfg)
    if args.kind not in ("actuator", "coupling", "nonlinearity"):
        raise hs.ConfigError(f"unknown design kind {args.kind!r}")
    sol = dopt.solve_sdp(probs[args.kind])
    if args.baseline:
        if args.kind == "coupling":
            mm = probs["_mean_model"]
            sol = dopt.baseline_iid_coupling(probs["_blocks"], mm.dist_Abar.mean, mm.dist_Cbar.mean,
                                             probs["_bounds"], sol.objective)
        elif args.kind == "nonlinearity":
            phi = dopt.baseline_iid_nonlinearity(probs["_bounds"].M_G)
            sol = dopt.DesignSolution({"phi": phi, "Sigma_G": phi * np.eye(len(probs["_bounds"].M_G))}, phi, {},
                                      "optimal")
        else:
            raise hs.ConfigError("the actuator design has no IID baseline")
    text = json.dumps(sol.to_dict(), indent=2)
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        suffix = "_baseline" if args.baseline else ""
        sol.save(os.path.join(cfg.out_dir, f"design_{args.kind}{suffix}.json"))
    print(text)
    return EXIT_OK


def cmd_bound(args):
    cfg = _load(args)
    if cfg.mtd not in ("extended", "nonlinear"):
        raise hs.ConfigError("the tracking bound needs the extended plant")
    steps, g, bound, _ = hs.bound_experiment(cfg, n_particles=args.particles)
    print(f"steps {steps[0]}..{steps[-1]}: mean g >= bound at {np.mean(g >= bound):.3f} of steps")
    if args.fim:
        rows, _ = hs.fim_experiment(cfg)
        for c, nl, lin, dn, ok, _lo in rows:
            print(f"c={c}: |I_NL|={nl:.4g} |I_L|={lin:.4g} |delta|={dn:.4g} psd={ok}")
    return EXIT_OK


def cmd_hybrid(args):
    from .hybrid_mtd import validate_recommendations
    cfg = _load(args)
    if args.action == "validate":
        sc, _ = hs.hybrid_scenario(cfg)
        rep = validate_recommendations(sc.modes)
        print(rep.table())
        return EXIT_OK if rep.ok else EXIT_INVALID
    out = hs.run_identification(cfg)
    print(f"trials {cfg.trials}, attacked {[s + 1 for s in out['sensors']]}: "
          f"exact identification {out['exact_rate']:.3f}, false identification {out['false_rate']:.3f}")
    return EXIT_OK


def cmd_preset(args):
    if args.name != "quadtank":
        raise hs.ConfigError(f"unknown preset {args.name!r}")
    cfg = hs.preset_quadtank(args.mtd)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.trials is not None:
        kw["trials"] = args.trials
    if args.ci:
        kw["trials"] = min(kw.get("trials", cfg.trials), CI_TRIALS)
    if args.out_dir is not None:
        kw["out_dir"] = args.out_dir
    cfg = cfg.replace(**kw) if kw else cfg
    print(cfg.to_json())
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--trials", type=int, help="number of Monte Carlo trials")
    common.add_argument("--out-dir", help="directory for CSV/JSON outputs")
    common.add_argument("--ci", action="store_true", help=f"cap trials at {CI_TRIALS}")
    common.add_argument("--workers", type=int, help="parallel worker processes")

    p = argparse.ArgumentParser(prog="mtd", description="moving target defense experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run a Monte Carlo experiment")
    s.add_argument("config")
    s.add_argument("--svg", action="store_true", help="also write SVG line charts (needs matplotlib)")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("design", parents=[common], help="solve one covariance design program")
    d.add_argument("kind", choices=["actuator", "coupling", "nonlinearity"])
    d.add_argument("config")
    d.add_argument("--baseline", action="store_true", help="scaled-identity baseline instead")
    d.set_defaults(func=cmd_design)

    b = sub.add_parser("bound", parents=[common], help="tracking lower bound on the detection statistic")
    b.add_argument("config")
    b.add_argument("--particles", type=int, default=2000)
    b.add_argument("--fim", action="store_true", help="also report attacker information for c = 1, 2, 3")
    b.set_defaults(func=cmd_bound)

    h = sub.add_parser("hybrid", parents=[common], help="switched-plant checks")
    h.add_argument("action", choices=["validate", "identify"])
    h.add_argument("config")
    h.set_defaults(func=cmd_hybrid)

    pr = sub.add_parser("preset", parents=[common], help="print a benchmark configuration")
    pr.add_argument("name", choices=["quadtank"])
    pr.add_argument("--mtd", default="extended", choices=list(hs.MTD_KINDS))
    pr.set_defaults(func=cmd_preset)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        return args.func(args)
    # LinAlgError subclasses ValueError, so failures are matched first
    except (hs.ExperimentFailure, DivergenceError, np.linalg.LinAlgError, FloatingPointError,
            dopt.SdpInfeasible, dopt.SdpUnbounded, dopt.SdpNumericalError) as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (hs.ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"invalid: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
