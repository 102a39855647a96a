"""Command-line client for the structural-alignment service.

Every subcommand builds the same request model the HTTP API accepts and
either executes it in-process (default) or posts it to a running server
(--server URL). Exit codes: 0 success, 2 configuration/input error,
3 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from tsa.errors import (
    CheckpointError,
    ConfigError,
    NumericError,
    ParseError,
    TsaError,
)
from tsa.service import schemas as s

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _positive_fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} not in [0, 1]")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsa",
        description="Structural alignment for graph test-time adaptation",
    )
    parser.add_argument("--workdir", default=".", help="artifact root (default: cwd)")
    parser.add_argument("--server", default=None,
                        help="base URL of a running service; default is in-process")
    parser.add_argument("--log-level", default=None,
                        help="override TSA_LOG_LEVEL (debug/info/warning/error)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a synthetic benchmark graph")
    p.add_argument("--condition", default=None)
    p.add_argument("--spec", dest="spec_file", default=None,
                   help="TOML spec file overriding any field")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true")

    p = sub.add_parser("pretrain", help="train a source model")
    p.add_argument("--graph", required=True)
    p.add_argument("--config", dest="config_file", default=None)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("adapt", help="adapt a frozen model to a target graph")
    p.add_argument("--model", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--refine", choices=("tent", "t3a", "lame"), default="t3a")
    p.add_argument("--rho1", type=_positive_fraction, default=1.0)
    p.add_argument("--rho2", type=_positive_fraction, default=1.0)
    p.add_argument("--alpha-lr", type=float, default=0.01)
    p.add_argument("--alpha-epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-gamma", action="store_true", help="disable edge reweighting")
    p.add_argument("--no-alpha", action="store_true", help="disable mixing-weight updates")
    p.add_argument("--uniform-source-prior", action="store_true")
    p.add_argument("--soft-counts", action="store_true")
    p.add_argument("--tent-lr", type=float, default=0.01)
    p.add_argument("--tent-steps", type=int, default=1)
    p.add_argument("--t3a-M", dest="t3a_m", type=int, default=20)
    p.add_argument("--t3a-space", choices=("penultimate", "encoder"), default="penultimate")
    p.add_argument("--lame-knn", type=int, default=5)
    p.add_argument("--lame-iters", type=int, default=10)
    p.add_argument("--out", default=None, help="result JSON path")
    p.add_argument("--trace", default=None, help="trace JSON path")

    p = sub.add_parser("evaluate", help="score a result file against graph labels")
    p.add_argument("--result", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--metric", choices=("accuracy", "f1_binary", "f1_macro"),
                   default="accuracy")

    p = sub.add_parser("diagnose", help="shift metrics for a source/target pair")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--num-bins", type=int, default=5)
    p.add_argument("--out", default=None)
    p.add_argument("--emit-embeddings", default=None)

    p = sub.add_parser("experiment", help="run a seed-sweep comparison")
    p.add_argument("--config", dest="config_file", required=True)
    p.add_argument("--out", default=None, help="output basename for tables")
    p.add_argument("--format", dest="formats", action="append",
                   choices=("json", "csv", "markdown"), default=None)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)

    return parser


def _request_for(args) -> tuple[str, "object"]:
    if args.command == "generate":
        return "/generate", s.GenerateRequest(
            condition=args.condition, spec_file=args.spec_file,
            seed=args.seed, out=args.out, binary=args.binary,
        )
    if args.command == "pretrain":
        return "/pretrain", s.PretrainRequest(
            graph=args.graph, config_file=args.config_file,
            split_seed=args.split_seed, out=args.out,
        )
    if args.command == "adapt":
        return "/adapt", s.AdaptRequest(
            model=args.model, graph=args.graph, refine=args.refine,
            rho1=args.rho1, rho2=args.rho2,
            alpha_lr=args.alpha_lr, alpha_epochs=args.alpha_epochs, seed=args.seed,
            gamma_enabled=not args.no_gamma, alpha_enabled=not args.no_alpha,
            uniform_source_prior=args.uniform_source_prior, soft_counts=args.soft_counts,
            tent_lr=args.tent_lr, tent_steps=args.tent_steps,
            t3a_m=args.t3a_m, t3a_space=args.t3a_space,
            lame_knn=args.lame_knn, lame_iters=args.lame_iters,
            out=args.out, trace=args.trace,
        )
    if args.command == "evaluate":
        return "/evaluate", s.EvaluateRequest(
            result=args.result, graph=args.graph, metric=args.metric,
        )
    if args.command == "diagnose":
        return "/diagnose", s.DiagnoseRequest(
            source=args.source, target=args.target, model=args.model,
            num_bins=args.num_bins, out=args.out,
            emit_embeddings=args.emit_embeddings,
        )
    if args.command == "experiment":
        return "/experiment", s.ExperimentRequest(
            config_file=args.config_file, out=args.out,
            formats=args.formats or ["json"],
        )
    raise ConfigError(f"unhandled command {args.command}")


def _dispatch_local(route: str, req, workdir: Path) -> dict:
    from tsa.service import handlers

    fn = {
        "/generate": handlers.handle_generate,
        "/pretrain": handlers.handle_pretrain,
        "/adapt": handlers.handle_adapt,
        "/evaluate": handlers.handle_evaluate,
        "/diagnose": handlers.handle_diagnose,
        "/experiment": handlers.handle_experiment,
    }[route]
    return fn(req, workdir).model_dump()


def _dispatch_remote(route: str, req, server: str) -> dict:
    import httpx

    url = server.rstrip("/") + route
    resp = httpx.post(url, json=req.model_dump(), timeout=None)
    if resp.status_code >= 400:
        body = resp.json() if resp.headers.get("content-type", "").startswith(
            "application/json") else {"detail": resp.text}
        err = body.get("error", "")
        if err in ("ConfigError", "ParseError") or resp.status_code == 422:
            raise ConfigError(body.get("detail", resp.text))
        if err in ("NumericError", "TrainingError", "AdaptationError"):
            raise NumericError(body.get("detail", resp.text))
        raise TsaError(f"{resp.status_code}: {body.get('detail', resp.text)}")
    return resp.json()


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log_level or os.environ.get("TSA_LOG_LEVEL", "warning")).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "serve":
        import uvicorn

        from tsa.service import create_app

        uvicorn.run(create_app(args.workdir), host=args.host, port=args.port)
        return 0
    try:
        route, req = _request_for(args)
        if args.server:
            payload = _dispatch_remote(route, req, args.server)
        else:
            workdir = Path(args.workdir).resolve()
            workdir.mkdir(parents=True, exist_ok=True)
            payload = _dispatch_local(route, req, workdir)
    except (ConfigError, ParseError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except TsaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(payload, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
