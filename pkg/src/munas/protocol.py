"""Wire protocol for delegating evaluations to external workers.

Messages are newline-delimited JSON objects, one per line, UTF-8, each
carrying the protocol version tag.  Unknown fields are ignored for forward
compatibility.  A client may keep several requests outstanding on one
transport; responses are matched by request id.
"""

from __future__ import annotations

import json
import queue
import socket
import subprocess
import threading
from dataclasses import dataclass

from .arch import ArchitectureTemplate, template_from_obj, template_to_obj
from .errors import EvalTimeout, ProtocolError, TransportClosed
from .evaluators import AugmentConfig, EvalResult, OptimizerConfig, PruningConfig, TrainConfig

PROTOCOL_VERSION = "munas-eval/1"

STATUS_OK = "ok"
STATUS_DIVERGED = "diverged"
STATUS_ERROR = "error"


@dataclass(frozen=True)
class EvalRequest:
    request_id: int
    architecture: ArchitectureTemplate
    sparsity_target: float
    train_config: TrainConfig | None
    dataset_name: str


@dataclass(frozen=True)
class EvalResponse:
    request_id: int
    status: str
    val_accuracy: float | None = None
    test_accuracy: float | None = None
    pruned_architecture: ArchitectureTemplate | None = None
    achieved_sparsity: float | None = None
    message: str | None = None


def train_config_to_obj(cfg: TrainConfig | None):
    if cfg is None:
        return None
    return {
        "optimizer": {
            "kind": cfg.optimizer.kind,
            "lr_schedule": [list(pair) for pair in cfg.optimizer.lr_schedule],
            "momentum": cfg.optimizer.momentum,
            "weight_decay": cfg.optimizer.weight_decay,
        },
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "pruning": {
            "target_sparsity": cfg.pruning.target_sparsity,
            "prune_start_epoch": cfg.pruning.prune_start_epoch,
            "prune_end_epoch": cfg.pruning.prune_end_epoch,
            "mask_update_every_steps": cfg.pruning.mask_update_every_steps,
        },
        "augmentation": {
            "shift_pixels": cfg.augmentation.shift_pixels,
            "flip_lr": cfg.augmentation.flip_lr,
        },
        "seed": cfg.seed,
        "dropout_rate": cfg.dropout_rate,
    }


def train_config_from_obj(obj) -> TrainConfig | None:
    if obj is None:
        return None
    opt = obj["optimizer"]
    pruning = obj.get("pruning", {})
    aug = obj.get("augmentation", {})
    return TrainConfig(
        optimizer=OptimizerConfig(
            kind=opt["kind"],
            lr_schedule=tuple((int(e), float(lr)) for e, lr in opt["lr_schedule"]),
            momentum=opt.get("momentum", 0.9),
            weight_decay=opt.get("weight_decay", 0.0),
        ),
        epochs=obj["epochs"],
        batch_size=obj["batch_size"],
        pruning=PruningConfig(
            target_sparsity=pruning.get("target_sparsity", 0.0),
            prune_start_epoch=pruning.get("prune_start_epoch", 0),
            prune_end_epoch=pruning.get("prune_end_epoch", 0),
            mask_update_every_steps=pruning.get("mask_update_every_steps"),
        ),
        augmentation=AugmentConfig(
            shift_pixels=aug.get("shift_pixels", 0),
            flip_lr=aug.get("flip_lr", False),
        ),
        seed=obj.get("seed", 0),
        dropout_rate=obj.get("dropout_rate", 0.0),
    )


def encode_request(req: EvalRequest) -> str:
    return json.dumps({
        "version": PROTOCOL_VERSION,
        "type": "request",
        "request_id": req.request_id,
        "architecture": template_to_obj(req.architecture),
        "sparsity_target": req.sparsity_target,
        "train_config": train_config_to_obj(req.train_config),
        "dataset_name": req.dataset_name,
    })


def encode_response(resp: EvalResponse) -> str:
    return json.dumps({
        "version": PROTOCOL_VERSION,
        "type": "response",
        "request_id": resp.request_id,
        "status": resp.status,
        "val_accuracy": resp.val_accuracy,
        "test_accuracy": resp.test_accuracy,
        "pruned_architecture":
            template_to_obj(resp.pruned_architecture) if resp.pruned_architecture else None,
        "achieved_sparsity": resp.achieved_sparsity,
        "message": resp.message,
    })


def _parse_line(line: str) -> dict:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed message: {exc.msg}", line=line) from exc
    if not isinstance(obj, dict):
        raise ProtocolError("message must be a JSON object", line=line)
    if obj.get("version") != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {obj.get('version')!r}", line=line)
    return obj


def decode_request(line: str) -> EvalRequest:
    obj = _parse_line(line)
    if obj.get("type") != "request":
        raise ProtocolError(f"expected a request, got {obj.get('type')!r}", line=line)
    for key in ("request_id", "architecture", "sparsity_target", "dataset_name"):
        if key not in obj:
            raise ProtocolError(f"request missing field '{key}'", line=line)
    try:
        architecture = template_from_obj(obj["architecture"])
    except Exception as exc:
        raise ProtocolError(f"request architecture invalid: {exc}", line=line) from exc
    return EvalRequest(
        request_id=obj["request_id"],
        architecture=architecture,
        sparsity_target=float(obj["sparsity_target"]),
        train_config=train_config_from_obj(obj.get("train_config")),
        dataset_name=obj["dataset_name"],
    )


def decode_response(line: str) -> EvalResponse:
    obj = _parse_line(line)
    if obj.get("type") != "response":
        raise ProtocolError(f"expected a response, got {obj.get('type')!r}", line=line)
    if "request_id" not in obj or "status" not in obj:
        raise ProtocolError("response missing request_id/status", line=line)
    status = obj["status"]
    if status not in (STATUS_OK, STATUS_DIVERGED, STATUS_ERROR):
        raise ProtocolError(f"unknown status {status!r}", line=line)
    pruned = None
    if status == STATUS_OK:
        for key in ("val_accuracy", "pruned_architecture", "achieved_sparsity"):
            if obj.get(key) is None:
                raise ProtocolError(f"ok response missing field '{key}'", line=line)
        try:
            pruned = template_from_obj(obj["pruned_architecture"])
        except Exception as exc:
            raise ProtocolError(f"response architecture invalid: {exc}", line=line) from exc
    return EvalResponse(
        request_id=obj["request_id"],
        status=status,
        val_accuracy=obj.get("val_accuracy"),
        test_accuracy=obj.get("test_accuracy"),
        pruned_architecture=pruned,
        achieved_sparsity=obj.get("achieved_sparsity"),
        message=obj.get("message"),
    )


class ProcessTransport:
    """Child process speaking the protocol over its stdio pipes."""

    def __init__(self, command: list[str]):
        self.command = command
        self._proc = subprocess.Popen(
            command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1)

    def send_line(self, line: str):
        try:
            self._proc.stdin.write(line + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, ValueError) as exc:
            raise TransportClosed(f"worker process closed stdin: {exc}") from exc

    def recv_line(self) -> str | None:
        line = self._proc.stdout.readline()
        return line.rstrip("\n") if line else None

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
            except Exception:
                pass
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()


class TcpTransport:
    def __init__(self, host: str, port: int, connect_timeout: float = 10.0):
        self._sock = socket.create_connection((host, port), timeout=connect_timeout)
        self._sock.settimeout(None)
        self._reader = self._sock.makefile("r", encoding="utf-8")
        self._writer = self._sock.makefile("w", encoding="utf-8")

    def send_line(self, line: str):
        try:
            self._writer.write(line + "\n")
            self._writer.flush()
        except OSError as exc:
            raise TransportClosed(f"tcp connection lost: {exc}") from exc

    def recv_line(self) -> str | None:
        line = self._reader.readline()
        return line.rstrip("\n") if line else None

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


class LoopbackTransport:
    """In-process worker: each sent request line is answered by `handler`."""

    def __init__(self, handler):
        self._handler = handler
        self._queue: queue.Queue = queue.Queue()

    def send_line(self, line: str):
        self._queue.put(self._handler(line))

    def recv_line(self) -> str | None:
        return self._queue.get()  # None sentinel marks closure

    def close(self):
        self._queue.put(None)


class EvalClient:
    """Demultiplexes responses by request id over a shared transport."""

    def __init__(self, transport, timeout: float = 600.0):
        self.transport = transport
        self.timeout = timeout
        self._write_lock = threading.Lock()
        self._cond = threading.Condition()
        self._responses: dict[int, EvalResponse] = {}
        self._closed: Exception | None = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        while True:
            try:
                line = self.transport.recv_line()
            except Exception as exc:
                self._fail(TransportClosed(str(exc)))
                return
            if line is None:
                self._fail(TransportClosed("transport reached end of stream"))
                return
            if not line.strip():
                continue
            try:
                resp = decode_response(line)
            except ProtocolError as exc:
                self._fail(exc)
                return
            with self._cond:
                self._responses[resp.request_id] = resp
                self._cond.notify_all()

    def _fail(self, exc: Exception):
        with self._cond:
            self._closed = exc
            self._cond.notify_all()

    def evaluate(self, req: EvalRequest) -> EvalResponse:
        with self._write_lock:
            self.transport.send_line(encode_request(req))
        deadline = self.timeout
        with self._cond:
            ok = self._cond.wait_for(
                lambda: req.request_id in self._responses or self._closed is not None,
                timeout=deadline)
            if req.request_id in self._responses:
                return self._responses.pop(req.request_id)
            if self._closed is not None:
                raise self._closed
            raise EvalTimeout(f"request {req.request_id} timed out after {deadline}s")

    def close(self):
        self.transport.close()


class RemoteEvaluator:
    """Evaluator contract adapter over an EvalClient; reconnects once per call."""

    def __init__(self, make_transport, train_config: TrainConfig | None, dataset_name: str,
                 timeout: float = 600.0):
        self._make_transport = make_transport
        self.train_config = train_config
        self.dataset_name = dataset_name
        self.timeout = timeout
        self._client: EvalClient | None = None
        self._next_id = 0
        self._id_lock = threading.Lock()

    def _ensure_client(self) -> EvalClient:
        if self._client is None:
            self._client = EvalClient(self._make_transport(), timeout=self.timeout)
        return self._client

    def _drop_client(self):
        if self._client is not None:
            try:
                self._client.close()
            except Exception:
                pass
            self._client = None

    def evaluate(self, template: ArchitectureTemplate, sparsity_target: float) -> EvalResult:
        from .errors import EvaluatorFailure, TrainDiverged

        with self._id_lock:
            self._next_id += 1
            request_id = self._next_id
        req = EvalRequest(
            request_id=request_id,
            architecture=template,
            sparsity_target=sparsity_target,
            train_config=self.train_config,
            dataset_name=self.dataset_name,
        )
        try:
            resp = self._ensure_client().evaluate(req)
        except (TransportClosed, EvalTimeout, ProtocolError) as exc:
            self._drop_client()
            raise EvaluatorFailure(f"remote evaluation failed: {exc}") from exc
        if resp.status == STATUS_DIVERGED:
            raise TrainDiverged(resp.message or "worker reported divergence")
        if resp.status != STATUS_OK:
            raise EvaluatorFailure(resp.message or "worker reported an error")
        return EvalResult(
            val_accuracy=resp.val_accuracy,
            pruned_template=resp.pruned_architecture,
            achieved_sparsity=resp.achieved_sparsity,
            train_seconds=0.0,
            test_accuracy=resp.test_accuracy,
        )

    def close(self):
        self._drop_client()
