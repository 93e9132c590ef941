"""Background search jobs owned by the service process."""

from __future__ import annotations

import itertools
import json
import logging
import threading
from pathlib import Path

from ..config import EngineConfig, build_evaluator, engine_config_to_obj, export_archive, write_history_csv
from ..errors import EvaluatorFailure, GenerationExhausted, MunasError, ParseError, ValidationError
from ..evolution import checkpoint, restore, run_search

log = logging.getLogger("munas.jobs")

CHECKPOINT_NAME = "checkpoint.munas"


class SearchJob:
    def __init__(self, job_id: str, cfg: EngineConfig, resume_from: str | None):
        self.job_id = job_id
        self.cfg = cfg
        self.resume_from = resume_from
        self.stop_event = threading.Event()
        self.lock = threading.Lock()
        self.status = "running"
        self.completed_rounds = 0
        self.population_size = 0
        self.archive_size = 0
        self.evaluations = 0
        self.error: str | None = None
        self._last_checkpoint_round = -1
        self.thread = threading.Thread(target=self._run, daemon=True)

    def start(self):
        self.thread.start()

    def stop(self):
        self.stop_event.set()

    def _write_checkpoint(self, state):
        out = Path(self.cfg.output_dir) / CHECKPOINT_NAME
        out.write_bytes(checkpoint(state))

    def _on_round(self, state):
        with self.lock:
            self.completed_rounds = state.completed_rounds
            self.population_size = len(state.population)
            self.archive_size = len(state.archive)
            self.evaluations = len(state.history)
        every = max(1, self.cfg.checkpoint_every)
        if (state.completed_rounds > 0
                and state.completed_rounds % every == 0
                and state.completed_rounds != self._last_checkpoint_round):
            self._last_checkpoint_round = state.completed_rounds
            self._write_checkpoint(state)

    def _run(self):
        try:
            out_dir = Path(self.cfg.output_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "engine-config.json").write_text(
                json.dumps(engine_config_to_obj(self.cfg), indent=2) + "\n")
            state = None
            if self.resume_from:
                state = restore(Path(self.resume_from).read_bytes())
            evaluator = build_evaluator(self.cfg)
            result = run_search(
                self.cfg.search, self.cfg.input, evaluator,
                state=state, on_round=self._on_round, stop_event=self.stop_event)
            self._write_checkpoint(result.state)
            write_history_csv(out_dir / "history.csv", result.state.history)
            export_archive(out_dir, result.state)
            with self.lock:
                self._on_round(result.state)
                self.status = "interrupted" if result.interrupted else "completed"
        except (ValidationError, ParseError, FileNotFoundError) as exc:
            log.error("job %s config error: %s", self.job_id, exc)
            with self.lock:
                self.status = "failed_config"
                self.error = str(exc)
        except (EvaluatorFailure, GenerationExhausted) as exc:
            log.error("job %s evaluator failure: %s", self.job_id, exc)
            with self.lock:
                self.status = "failed_evaluator"
                self.error = str(exc)
        except MunasError as exc:
            log.error("job %s failed: %s", self.job_id, exc)
            with self.lock:
                self.status = "failed_evaluator"
                self.error = str(exc)
        except Exception as exc:  # keep the service alive on unexpected bugs
            log.exception("job %s crashed", self.job_id)
            with self.lock:
                self.status = "failed_evaluator"
                self.error = f"{type(exc).__name__}: {exc}"

    def info(self) -> dict:
        with self.lock:
            return {
                "job_id": self.job_id,
                "status": self.status,
                "completed_rounds": self.completed_rounds,
                "total_rounds": self.cfg.search.total_rounds,
                "population_size": self.population_size,
                "archive_size": self.archive_size,
                "evaluations": self.evaluations,
                "output_dir": str(self.cfg.output_dir),
                "error": self.error,
            }


class JobManager:
    def __init__(self):
        self._jobs: dict[str, SearchJob] = {}
        self._counter = itertools.count(1)
        self._lock = threading.Lock()

    def create(self, cfg: EngineConfig, resume_from: str | None = None) -> SearchJob:
        with self._lock:
            job_id = f"job-{next(self._counter)}"
            job = SearchJob(job_id, cfg, resume_from)
            self._jobs[job_id] = job
        job.start()
        return job

    def get(self, job_id: str) -> SearchJob | None:
        return self._jobs.get(job_id)

    def all_jobs(self) -> list[SearchJob]:
        return list(self._jobs.values())
