"""Command-line entry point: ``frlhf {simulate,serve,client,bounds,sweep}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

from frlhf.environments.mdp import EnvironmentSpec
from frlhf.federation.server import run_federation
from frlhf.federation.transport import FederationServer, parse_address, run_client_loop
from frlhf.harness.config import ConfigError, ExperimentConfig
from frlhf.harness.runner import build_trainers, run_scenario
from frlhf.theory import BoundConstants, convergence_terms, sample_complexity

log = logging.getLogger("frlhf.cli")

# LocalConfig fields settable from the client command line
_LOCAL_FLAGS = {
    "tau": int,
    "eta": float,
    "batch_size": int,
    "lam": float,
    "learner_kind": str,
    "horizon": int,
    "h_max": float,
    "clip_norm": float,
    "optimizer": str,
    "alpha": float,
    "epsilon": float,
}


def _load_config(path: str, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path)
    changes = {k: v for k, v in overrides.items() if v is not None}
    if not changes:
        return cfg
    try:
        return cfg.replace(**changes)
    except ValueError as exc:
        raise ConfigError("", str(exc)) from None


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False))


def _report(outcome) -> int:
    s = outcome.summary
    for name, ok in sorted(s["assertions"].items()):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"results in {outcome.output_dir}")
    return outcome.exit_code


def cmd_simulate(args) -> int:
    cfg = _load_config(
        args.config,
        seeds=tuple(args.seeds) if args.seeds else None,
        workers=args.workers,
        transport=args.transport,
    )
    return _report(run_scenario(cfg, args.out))


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config, seeds=tuple(args.seeds) if args.seeds else None)
    sweep = cfg.sweep
    if args.lambdas:
        try:
            sweep = dataclasses.replace(sweep, lambdas=tuple(sorted(args.lambdas)))
        except ValueError as exc:
            raise ConfigError("sweep.lambdas", str(exc)) from None
    cfg = cfg.replace(scenario="lambda_sweep", sweep=sweep)
    return _report(run_scenario(cfg, args.out))


def cmd_bounds(args) -> int:
    c = BoundConstants.load(args.constants)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        terms = convergence_terms(c)
    doc = {
        "constants": c.to_dict(),
        "terms": {"rounds": float(terms.rounds), "variance": float(terms.variance), "feedback": float(terms.feedback)},
        "bound": float(terms.total),
        "warnings": [str(w.message) for w in caught],
    }
    if args.epsilon is not None:
        sc = sample_complexity(c, args.epsilon)
        doc["sample_complexity"] = {
            "epsilon": args.epsilon,
            "N": float(sc.N),
            "K_min": float(sc.K_min),
            "T_min": float(sc.T_min),
            "clients": sc.clients,
            "rounds": sc.rounds,
            "lambda_hmax_cap": float(sc.lambda_hmax_cap),
            "k_clamped": sc.k_clamped,
            "feedback_budget_met": c.lam * c.h_max <= sc.lambda_hmax_cap,
        }
    _print_json(doc)
    return 0


def cmd_serve(args) -> int:
    cfg = _load_config(args.config, K=args.K, T=args.T, strategy=args.strategy)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    theta0, _ = build_trainers(cfg, seed)
    with FederationServer(parse_address(args.listen), cfg.K, timeout=args.timeout) as server:
        host, port = server.address
        print(f"listening on {host}:{port} for {cfg.K} clients", flush=True)
        handles = server.accept_clients()
        log.info("all %d clients connected", cfg.K)
        result = run_federation(theta0, handles, cfg.T, cfg.strategy)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_records(out / "rounds.jsonl")
    (out / "theta_final.json").write_text(json.dumps(result.theta_final.tolist()) + "\n")
    print(f"{cfg.T} rounds done; records in {out / 'rounds.jsonl'}")
    return 0


def cmd_client(args) -> int:
    cfg = _load_config(args.config, K=args.K)
    local = {name: getattr(args, name) for name in _LOCAL_FLAGS if getattr(args, name) is not None}
    if local:
        try:
            cfg = cfg.replace(local=dataclasses.replace(cfg.local, **local))
        except ValueError as exc:
            raise ConfigError("local", str(exc)) from None
    if not 0 <= args.id < cfg.K:
        raise ConfigError("K", f"client id {args.id} outside 0..{cfg.K - 1}")
    env = EnvironmentSpec.load(args.env) if args.env else None
    seed = cfg.seeds[0] if args.seed is None else args.seed
    _, trainers = build_trainers(cfg, seed, env)
    n = run_client_loop(parse_address(args.connect), trainers[args.id], timeout=args.timeout)
    print(f"client {args.id}: served {n} rounds")
    return 0


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frlhf", description="Federated RLHF simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="run a scenario config")
    sp.add_argument("config")
    sp.add_argument("--out", help="output directory (default: config output_dir)")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--transport", choices=("inproc", "socket"))
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="lambda sweep on the quadratic feedback family")
    sp.add_argument("--config", required=True)
    sp.add_argument("--lambdas", type=_float_list)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("bounds", help="evaluate the convergence bound for a constants file")
    sp.add_argument("constants")
    sp.add_argument("--epsilon", type=float, help="target accuracy for the sample-complexity outputs")
    sp.set_defaults(func=cmd_bounds)

    sp = sub.add_parser("serve", help="run the federation server over TCP")
    sp.add_argument("--listen", required=True, help="HOST:PORT")
    sp.add_argument("--config", required=True)
    sp.add_argument("--K", type=int)
    sp.add_argument("--T", type=int)
    sp.add_argument("--strategy")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default="results/serve")
    sp.add_argument("--timeout", type=float, default=300.0)
    sp.set_defaults(func=cmd_serve)

    sp = sub.add_parser("client", help="run one federation client over TCP")
    sp.add_argument("--connect", required=True, help="HOST:PORT")
    sp.add_argument("--id", type=int, required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--env", help="environment JSON replacing the client MDP")
    sp.add_argument("--K", type=int, help="federation size; must match the server")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--timeout", type=float, default=300.0)
    for name, tp in _LOCAL_FLAGS.items():
        sp.add_argument("--" + name.replace("_", "-"), dest=name, type=tp)
    sp.set_defaults(func=cmd_client)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter("%(name)s: %(message)s"))
    # level lives on the handler: the run.log sidecar lowers the package logger to INFO
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, handlers=[console])
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
