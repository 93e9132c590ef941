"""Reference evaluation worker wrapping the deterministic proxy evaluator.

Speaks the munas-eval/1 protocol over stdio or TCP.  Useful for loopback
protocol tests and as a minimal template for real workers.  Run with
``python -m munas.stub_worker --stdio`` or ``--tcp PORT``.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys

from .arch import InputSpec
from .errors import ProtocolError
from .evaluators.proxy import proxy_evaluate
from .objectives import BoundsConfig
from .protocol import (
    PROTOCOL_VERSION,
    STATUS_ERROR,
    STATUS_OK,
    EvalResponse,
    decode_request,
    encode_response,
)

# Default bounds drive the surrogate accuracy formula; override via flags.
DEFAULT_BOUNDS = BoundsConfig(
    error_bound=0.035, peak_memory_bound=2560.0, model_size_bound=4608.0, macs_bound=30e6)


def make_handler(bounds: BoundsConfig, input_spec: InputSpec):
    """Line-level request handler, also usable with LoopbackTransport."""

    def handle(line: str) -> str:
        try:
            req = decode_request(line)
        except ProtocolError as exc:
            resp = EvalResponse(request_id=_request_id_of(line), status=STATUS_ERROR,
                                message=str(exc))
            return encode_response(resp)
        try:
            result = proxy_evaluate(req.architecture, req.sparsity_target, bounds, input_spec)
            resp = EvalResponse(
                request_id=req.request_id,
                status=STATUS_OK,
                val_accuracy=result.val_accuracy,
                test_accuracy=result.test_accuracy,
                pruned_architecture=result.pruned_template,
                achieved_sparsity=result.achieved_sparsity,
            )
        except Exception as exc:  # a worker must never crash its serve loop
            resp = EvalResponse(request_id=req.request_id, status=STATUS_ERROR, message=str(exc))
        return encode_response(resp)

    return handle


def _request_id_of(line: str) -> int:
    try:
        return int(json.loads(line).get("request_id", -1))
    except Exception:
        return -1


def serve_stdio(handler):
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        sys.stdout.write(handler(line) + "\n")
        sys.stdout.flush()


def serve_tcp(handler, port: int):
    server = socket.create_server(("127.0.0.1", port))
    while True:
        conn, _ = server.accept()
        reader = conn.makefile("r", encoding="utf-8")
        writer = conn.makefile("w", encoding="utf-8")
        for line in reader:
            line = line.strip()
            if not line:
                continue
            writer.write(handler(line) + "\n")
            writer.flush()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="proxy-backed evaluation worker")
    mode = parser.add_mutually_exclusive_group(required=True)
    mode.add_argument("--stdio", action="store_true")
    mode.add_argument("--tcp", type=int, metavar="PORT")
    parser.add_argument("--input", default="28x28x1x10",
                        help="input as HxWxCxNUM_CLASSES (default 28x28x1x10)")
    parser.add_argument("--error-bound", type=float, default=DEFAULT_BOUNDS.error_bound)
    parser.add_argument("--peak-memory-bound", type=float, default=DEFAULT_BOUNDS.peak_memory_bound)
    parser.add_argument("--model-size-bound", type=float, default=DEFAULT_BOUNDS.model_size_bound)
    parser.add_argument("--macs-bound", type=float, default=DEFAULT_BOUNDS.macs_bound)
    args = parser.parse_args(argv)
    h, w, c, k = (int(v) for v in args.input.split("x"))
    input_spec = InputSpec(height=h, width=w, channels=c, num_classes=k)
    bounds = BoundsConfig(
        error_bound=args.error_bound,
        peak_memory_bound=args.peak_memory_bound,
        model_size_bound=args.model_size_bound,
        macs_bound=args.macs_bound,
    )
    handler = make_handler(bounds, input_spec)
    if args.stdio:
        serve_stdio(handler)
    else:
        serve_tcp(handler, args.tcp)
    return 0


if __name__ == "__main__":
    sys.exit(main())
