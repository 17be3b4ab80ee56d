"""Command-line client for the shiftmatch service.

The CLI only assembles a configuration (key=value file plus flag
overrides), sends it to the service, and prints the response. By default
requests are dispatched to an in-process application instance over the
ASGI transport; ``--server URL`` targets a running server instead.

Exit codes: 0 ok, 2 configuration error, 3 numeric error,
4 acceptance-threshold failure.
"""

from __future__ import annotations

import argparse
import asyncio
import sys

import httpx

from . import __version__
from .errors import ConfigError
from .pipeline import apply_overrides, ExperimentConfig, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_THRESHOLD = 4


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="path to a key=value experiment config")
    parser.add_argument("--methods", help="comma-separated method list")
    parser.add_argument("--out", help="output directory for reports")
    parser.add_argument("--eps", type=float, help="relative ridge for test-side inverses")
    parser.add_argument("--spec", choices=["kron", "full", "channel-joint", "meanvar"],
                        help="covariance structure at spatial sites")
    parser.add_argument("--placement", choices=["pre", "post", "input-only"],
                        help="matching site placement")
    parser.add_argument("--seed", type=int, help="experiment seed")
    parser.add_argument("--samples", help="directory for weight/statistics files")
    parser.add_argument("--server", help="base URL of a running service (default: in-process)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftmatch",
                                     description="train, match, and evaluate ensembles")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("train", "train an ensemble and write weight files"),
        ("stats", "acquire per-sample training statistics"),
        ("eval", "run the method x corruption x intensity grid"),
        ("theory", "run the stationary-corruption removal checks"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def gather_config(args: argparse.Namespace) -> dict:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {
        key: getattr(args, key)
        for key in ("methods", "out", "eps", "spec", "placement", "seed", "samples")
        if getattr(args, key, None) is not None
    }
    cfg = apply_overrides(cfg, overrides)
    from dataclasses import asdict

    return asdict(cfg)


class ServiceClient:
    """Posts JSON to a remote server, or to the in-process app over ASGI."""

    def __init__(self, server: str | None):
        self.server = server

    def post(self, path: str, payload: dict) -> httpx.Response:
        if self.server:
            with httpx.Client(base_url=self.server, timeout=None) as client:
                return client.post(path, json=payload)

        async def _dispatch() -> httpx.Response:
            from .service import app

            transport = httpx.ASGITransport(app=app)
            async with httpx.AsyncClient(transport=transport, timeout=None,
                                         base_url="http://shiftmatch.internal") as client:
                return await client.post(path, json=payload)

        return asyncio.run(_dispatch())


def _post(client: ServiceClient, path: str, payload: dict) -> dict:
    response = client.post(path, payload)
    if response.status_code >= 400:
        try:
            detail = response.json()
        except ValueError:
            detail = {"detail": response.text}
        print(f"error ({response.status_code}): {detail.get('detail', detail)}", file=sys.stderr)
        sys.exit(EXIT_CONFIG if response.status_code < 500 else EXIT_NUMERIC)
    return response.json()


def cmd_train(client: ServiceClient, config: dict) -> int:
    result = _post(client, "/train", {"config": config})
    for sample_id, acc in result["clean_accuracy"].items():
        print(f"{sample_id}: clean accuracy {acc:.4f}")
    print(f"wrote {len(result['weight_files'])} weight files to {config['samples']}")
    return EXIT_OK


def cmd_stats(client: ServiceClient, config: dict, methods: list[str] | None) -> int:
    result = _post(client, "/stats", {"config": config, "methods": methods})
    print(f"wrote {len(result['stats_files'])} statistics files to {config['samples']}")
    return EXIT_OK


def cmd_eval(client: ServiceClient, config: dict, methods: list[str] | None) -> int:
    result = _post(client, "/eval", {"config": config, "methods": methods})
    for row in result["rows"]:
        print(f"{row['method']:>16} {row['corruption']:>10}:{row['intensity']} "
              f"acc={row['accuracy']:.4f} nll={row['nll']:.4f}")
    print(f"report: {result['csv_path']}")
    return EXIT_OK


def cmd_theory(client: ServiceClient, config: dict) -> int:
    result = _post(client, "/theory", {"config": config})
    for row in result["rows"]:
        mark = "pass" if row["passed"] else "FAIL"
        print(f"{row['mode']:>10} {row['corruption']:>9}: error {row['error']:.3e} "
              f"(threshold {row['threshold']:g}) {mark}")
    if not result["passed"]:
        print("threshold exceeded", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        from .service import app

        uvicorn.run(app, host=args.host, port=args.port)
        return EXIT_OK
    try:
        config = gather_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    methods = None
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    client = ServiceClient(args.server)
    if args.command == "train":
        return cmd_train(client, config)
    if args.command == "stats":
        return cmd_stats(client, config, methods)
    if args.command == "eval":
        return cmd_eval(client, config, methods)
    if args.command == "theory":
        return cmd_theory(client, config)
    raise AssertionError(f"unhandled command {args.command}")  # pragma: no cover


if __name__ == "__main__":
    sys.exit(main())
