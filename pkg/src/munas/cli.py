"""Command-line client of the engine service.

Every command talks to the HTTP API: against a remote server when
``--server`` (or MUNAS_SERVER) is set, otherwise against an in-process
instance of the same FastAPI application.  Exit codes: 0 success, 1 config
or document errors, 2 evaluator failure, 130 interrupt (after the running
job flushed a checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time

from .config import load_engine_config, engine_config_to_obj, read_history_points
from .errors import CorruptCheckpoint, MunasError, ParseError, ValidationError
from .evolution import restore

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_EVALUATOR = 2
EXIT_INTERRUPT = 130

_TERMINAL = {"completed", "interrupted", "failed_config", "failed_evaluator"}
_EXIT_BY_STATUS = {
    "completed": EXIT_OK,
    "interrupted": EXIT_INTERRUPT,
    "failed_config": EXIT_CONFIG,
    "failed_evaluator": EXIT_EVALUATOR,
}

log = logging.getLogger("munas.cli")


class EngineClient:
    """Thin HTTP client; in-process ASGI when no server address is given."""

    def __init__(self, server: str | None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=60.0)
        else:
            from fastapi.testclient import TestClient

            from .service.app import app

            self._client = TestClient(app)

    def post(self, path: str, payload: dict):
        return self._client.post(path, json=payload)

    def get(self, path: str):
        return self._client.get(path)


def _shape_str(shape: list[int]) -> str:
    return "x".join(str(v) for v in shape)


def cmd_analyze(args, client: EngineClient) -> int:
    try:
        document = open(args.architecture).read()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    dims = args.input.split("x")
    if len(dims) != 3:
        print("error: --input must look like HxWxC", file=sys.stderr)
        return EXIT_CONFIG
    h, w, c = (int(v) for v in dims)
    response = client.post("/analyze", {
        "architecture": document,
        "input": {"height": h, "width": w, "channels": c, "num_classes": args.classes},
        "add_aliasing": not args.no_add_aliasing,
        "node_cap": args.node_cap,
    })
    if response.status_code != 200:
        print(f"error: {response.json().get('detail')}", file=sys.stderr)
        return EXIT_CONFIG
    body = response.json()
    out = sys.stdout
    if args.format == "csv":
        writer = csv.writer(out)
        writer.writerow(["step", "node_id", "kind", "output_shape", "allocated_bytes",
                         "freed_bytes", "resident_bytes", "params_bytes", "macs"])
        for row in body["schedule"]:
            writer.writerow([row["step"], row["node_id"], row["kind"],
                             _shape_str(row["output_shape"]), row["allocated_bytes"],
                             row["freed_bytes"], row["resident_bytes"],
                             row["params_bytes"], row["macs"]])
        return EXIT_OK
    profile = body["profile"]
    print(f"peak_memory_bytes: {profile['peak_memory_bytes']}")
    print(f"model_size_bytes:  {profile['model_size_bytes']}")
    print(f"macs:              {profile['macs']}")
    print()
    print(f"{'step':>4}  {'node':>4}  {'kind':<15} {'shape':<12} {'alloc':>8} {'freed':>8} {'resident':>9}")
    for row in body["schedule"]:
        print(f"{row['step']:>4}  {row['node_id']:>4}  {row['kind']:<15} "
              f"{_shape_str(row['output_shape']):<12} {row['allocated_bytes']:>8} "
              f"{row['freed_bytes']:>8} {row['resident_bytes']:>9}")
    print()
    print(f"{'node':>4}  {'kind':<15} {'shape':<12} {'params':>8} {'macs':>10}")
    for row in body["layers"]:
        print(f"{row['node_id']:>4}  {row['kind']:<15} {_shape_str(row['output_shape']):<12} "
              f"{row['params_bytes']:>8} {row['macs']:>10}")
    return EXIT_OK


def _load_points(path: str) -> list[dict]:
    if path.endswith(".csv"):
        return [
            {"id": cid, "error": v.error, "peak_memory_bytes": v.peak_memory_bytes,
             "model_size_bytes": v.model_size_bytes, "macs": v.macs}
            for cid, v in read_history_points(path)
        ]
    state = restore(open(path, "rb").read())
    return [
        {"id": r.candidate_id, "error": r.objectives.error,
         "peak_memory_bytes": r.objectives.peak_memory_bytes,
         "model_size_bytes": r.objectives.model_size_bytes, "macs": r.objectives.macs}
        for r in state.history if r.status == "ok"
    ]


def cmd_pareto(args, client: EngineClient) -> int:
    try:
        points = _load_points(args.source)
    except (OSError, ParseError, CorruptCheckpoint, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    response = client.post("/pareto", {"points": points})
    if response.status_code != 200:
        print(f"error: {response.json().get('detail')}", file=sys.stderr)
        return EXIT_CONFIG
    front = response.json()["front"]
    columns = ["id", "error", "peak_memory_bytes", "model_size_bytes", "macs"]
    if args.output:
        with open(args.output, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns)
            writer.writeheader()
            writer.writerows(front)
    writer = csv.DictWriter(sys.stdout, fieldnames=columns)
    writer.writeheader()
    writer.writerows(front)
    return EXIT_OK


def cmd_search(args, client: EngineClient) -> int:
    try:
        cfg = load_engine_config(args.config)
    except (OSError, ParseError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    payload = {
        "config": engine_config_to_obj(cfg),
        "resume_from": args.resume,
        "parallel": args.parallel,
        "seed": args.seed,
    }
    response = client.post("/search/jobs", payload)
    if response.status_code != 200:
        print(f"error: {response.json().get('detail')}", file=sys.stderr)
        return EXIT_CONFIG
    job_id = response.json()["job_id"]
    log.info("started %s (output: %s)", job_id, cfg.output_dir)
    last_round = -1
    try:
        while True:
            info = client.get(f"/search/jobs/{job_id}").json()
            if info["completed_rounds"] != last_round:
                last_round = info["completed_rounds"]
                log.info("round %d/%d, archive %d", last_round, info["total_rounds"],
                         info["archive_size"])
            if info["status"] in _TERMINAL:
                break
            time.sleep(args.poll_interval)
    except KeyboardInterrupt:
        log.warning("interrupt: stopping %s and flushing a checkpoint", job_id)
        client.post(f"/search/jobs/{job_id}/stop", {})
        while True:
            info = client.get(f"/search/jobs/{job_id}").json()
            if info["status"] in _TERMINAL:
                break
            time.sleep(args.poll_interval)
        return EXIT_INTERRUPT
    if info.get("error"):
        print(f"error: {info['error']}", file=sys.stderr)
    return _EXIT_BY_STATUS.get(info["status"], EXIT_EVALUATOR)


def cmd_serve(args, _client=None) -> int:
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="munas", description=__doc__)
    parser.add_argument("--server", default=os.environ.get("MUNAS_SERVER"),
                        help="engine service URL; default: run in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run a search from a config file")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--parallel", type=int, default=None, help="max parallel evaluations")
    p.add_argument("--resume", default=None, help="checkpoint file to resume from")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--poll-interval", type=float, default=0.1, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("analyze", help="profile an architecture document")
    p.add_argument("architecture")
    p.add_argument("--input", required=True, help="input tensor as HxWxC")
    p.add_argument("--classes", type=int, default=10, help="classifier width (default 10)")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.add_argument("--no-add-aliasing", action="store_true",
                   help="disable in-place add merges in the memory planner")
    p.add_argument("--node-cap", type=int, default=64)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("pareto", help="non-dominated set of a history CSV or checkpoint")
    p.add_argument("source")
    p.add_argument("-o", "--output", default=None, help="also write the front to a CSV file")
    p.set_defaults(func=cmd_pareto)

    p = sub.add_parser("serve", help="run the engine service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=9150)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("MUNAS_LOG", "INFO").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return cmd_serve(args)
    client = EngineClient(args.server)
    try:
        return args.func(args, client)
    except MunasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
