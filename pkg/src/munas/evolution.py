"""Aging-evolution search loop with checkpointing and parallel dispatch.

A single coordinator owns the population (a FIFO of evaluated candidates),
the Pareto archive, the history log and the RNG.  Evaluations may run on a
worker pool; results are applied serially in completion order, and eviction
of the oldest member happens only when a result lands.  Serial runs are bit
reproducible from the seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import queue
import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .arch import ArchitectureTemplate, InputSpec, template_from_obj, template_to_obj, validate_structure
from .errors import (
    CorruptCheckpoint,
    EvaluatorFailure,
    GraphTooLarge,
    LayerCollapsed,
    LoweringError,
    NoApplicableMorphism,
    TrainDiverged,
)
from .evaluators import EvalResult, Evaluator, TrainConfig
from .graph import lower
from .objectives import BoundsConfig, ObjectiveVector, ParetoArchive, ScalarGoal, sample_goal, scalarize
from .resources import DEFAULT_NODE_CAP, profile
from .space import SearchSpaceConfig, perturb_sparsity, random_architecture, random_morphism

CHECKPOINT_VERSION = "munas-ckpt/1"

log = logging.getLogger("munas.search")


@dataclass
class Candidate:
    id: int
    template: ArchitectureTemplate
    sparsity_target: float
    birth_round: int
    parent_id: int | None = None
    morphism: str | None = None
    objectives: ObjectiveVector | None = None
    pruned_template: ArchitectureTemplate | None = None
    val_accuracy: float | None = None


@dataclass(frozen=True)
class HistoryRecord:
    round_index: int
    candidate_id: int
    parent_id: int | None
    morphism: str | None
    lambdas: tuple[float, float, float, float] | None
    sparsity: float
    status: str  # "ok" or "failed"
    objectives: ObjectiveVector | None = None
    goal_value: float | None = None
    evicted_id: int | None = None


@dataclass
class SearchConfig:
    bounds: BoundsConfig
    space: SearchSpaceConfig = field(default_factory=SearchSpaceConfig)
    train: TrainConfig | None = None
    population_size: int = 100
    sample_size: int = 25
    total_rounds: int = 2000
    max_parallel_evaluations: int = 1
    seed: int = 0
    peak_memory_node_cap: int = DEFAULT_NODE_CAP
    add_aliasing: bool = True

    def validate(self):
        if not 1 <= self.sample_size <= self.population_size:
            raise ValueError("sample_size must be in [1, population_size]")
        if self.total_rounds < 0:
            raise ValueError("total_rounds must be non-negative")


@dataclass
class SearchState:
    config_hash: str
    completed_rounds: int
    next_id: int
    rng_state: object
    population: list[Candidate]
    archive: ParetoArchive
    history: list[HistoryRecord]
    archive_candidates: dict[int, Candidate] = field(default_factory=dict)


@dataclass
class SearchResult:
    state: SearchState
    interrupted: bool = False

    @property
    def archive(self) -> ParetoArchive:
        return self.state.archive

    @property
    def history(self) -> list[HistoryRecord]:
        return self.state.history

    @property
    def population(self) -> list[Candidate]:
        return self.state.population


def config_fingerprint(cfg: SearchConfig, input_spec: InputSpec) -> str:
    # total_rounds is deliberately excluded: resuming a checkpoint with a
    # larger round budget is a legitimate continuation of the same stream.
    blob = json.dumps(
        {
            "bounds": vars(cfg.bounds),
            "space": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(cfg.space).items()},
            "population_size": cfg.population_size,
            "sample_size": cfg.sample_size,
            "seed": cfg.seed,
            "input": vars(input_spec),
        },
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


_CANDIDATE_ERRORS = (TrainDiverged, LayerCollapsed, GraphTooLarge, LoweringError, EvaluatorFailure)


@dataclass
class _PendingJob:
    candidate: Candidate
    round_index: int
    goal: ScalarGoal | None
    retries_left: int = 1


class _Coordinator:
    def __init__(self, cfg: SearchConfig, input_spec: InputSpec, evaluator: Evaluator,
                 state: SearchState, on_round=None, stop_event: threading.Event | None = None):
        self.cfg = cfg
        self.input_spec = input_spec
        self.evaluator = evaluator
        self.state = state
        self.on_round = on_round
        self.stop_event = stop_event or threading.Event()
        self.rng = random.Random()
        self.rng.setstate(_rng_state_from(state.rng_state))

    # -- evaluation --

    def _evaluate(self, candidate: Candidate) -> tuple[EvalResult, ObjectiveVector]:
        result = self.evaluator.evaluate(candidate.template, candidate.sparsity_target)
        pruned = result.pruned_template
        check = validate_structure(pruned, self.input_spec)
        if not check.ok:
            raise EvaluatorFailure(f"pruned architecture invalid: {check.violations[0]}")
        graph = lower(pruned, self.input_spec)
        prof = profile(graph, self.cfg.add_aliasing, self.cfg.peak_memory_node_cap)
        objectives = ObjectiveVector(
            error=1.0 - result.val_accuracy,
            peak_memory_bytes=prof.peak_memory_bytes,
            model_size_bytes=prof.model_size_bytes,
            macs=prof.macs,
        )
        return result, objectives

    def _run_job(self, job: _PendingJob):
        while True:
            try:
                return job, self._evaluate(job.candidate), None
            except _CANDIDATE_ERRORS as exc:
                if job.retries_left > 0:
                    job.retries_left -= 1
                    log.warning("evaluation of candidate %d failed (%s); retrying once",
                                job.candidate.id, exc)
                    continue
                return job, None, exc

    # -- state mutation (coordinator thread only) --

    def _apply(self, job: _PendingJob, outcome, error) -> None:
        cand = job.candidate
        if error is not None:
            log.warning("candidate %d failed permanently: %s", cand.id, error)
            self.state.history.append(HistoryRecord(
                round_index=job.round_index,
                candidate_id=cand.id,
                parent_id=cand.parent_id,
                morphism=cand.morphism,
                lambdas=job.goal.lambdas if job.goal else None,
                sparsity=cand.sparsity_target,
                status="failed",
            ))
            if job.round_index > 0:
                self.state.completed_rounds = max(self.state.completed_rounds, job.round_index)
            self._notify()
            return
        result, objectives = outcome
        cand.objectives = objectives
        cand.pruned_template = result.pruned_template
        cand.val_accuracy = result.val_accuracy
        self.state.population.append(cand)
        evicted_id = None
        if len(self.state.population) > self.cfg.population_size:
            evicted = self.state.population.pop(0)  # FIFO: the oldest member
            evicted_id = evicted.id
        delta = self.state.archive.insert(cand.id, objectives)
        if delta.accepted:
            self.state.archive_candidates[cand.id] = cand
            for evicted_member in delta.evicted:
                self.state.archive_candidates.pop(evicted_member, None)
        self.state.history.append(HistoryRecord(
            round_index=job.round_index,
            candidate_id=cand.id,
            parent_id=cand.parent_id,
            morphism=cand.morphism,
            lambdas=job.goal.lambdas if job.goal else None,
            sparsity=cand.sparsity_target,
            status="ok",
            objectives=objectives,
            goal_value=scalarize(job.goal, objectives) if job.goal else None,
            evicted_id=evicted_id,
        ))
        if job.round_index > 0:
            self.state.completed_rounds = max(self.state.completed_rounds, job.round_index)
        self._notify()

    def _notify(self):
        self.state.rng_state = self.rng.getstate()
        if self.on_round is not None:
            self.on_round(self.state)

    # -- candidate preparation --

    def _prepare_initial(self) -> _PendingJob:
        template = random_architecture(self.cfg.space, self.input_spec, self.rng)
        sparsity = self.rng.uniform(*self.cfg.space.sparsity_range)
        cand = Candidate(
            id=self.state.next_id, template=template, sparsity_target=sparsity, birth_round=0)
        self.state.next_id += 1
        return _PendingJob(candidate=cand, round_index=0, goal=None)

    def _prepare_round(self, round_index: int) -> _PendingJob:
        goal = sample_goal(self.cfg.bounds, self.rng, round_index)
        sampled = self.rng.sample(self.state.population, self.cfg.sample_size)
        parent = min(sampled, key=lambda c: (scalarize(goal, c.objectives), c.id))
        morphism, child_template = random_morphism(
            parent.template, self.cfg.space, self.input_spec, self.rng)
        sparsity = perturb_sparsity(parent.sparsity_target, self.cfg.space, self.rng)
        cand = Candidate(
            id=self.state.next_id,
            template=child_template,
            sparsity_target=sparsity,
            birth_round=round_index,
            parent_id=parent.id,
            morphism=morphism.describe(),
        )
        self.state.next_id += 1
        return _PendingJob(candidate=cand, round_index=round_index, goal=goal)

    # -- driving loops --

    def run(self) -> bool:
        """Returns True when interrupted before completing all rounds."""
        if self.cfg.max_parallel_evaluations <= 1:
            return self._run_serial()
        return self._run_parallel()

    def _run_serial(self) -> bool:
        failures = 0
        while len(self.state.population) < self.cfg.population_size:
            if self.stop_event.is_set():
                return True
            job = self._prepare_initial()
            job, outcome, error = self._run_job(job)
            if error is not None:
                failures += 1
                if failures > 2 * self.cfg.population_size:
                    raise EvaluatorFailure("initial population evaluation keeps failing")
                self._apply(job, None, error)
                continue
            self._apply(job, outcome, None)
        for round_index in range(self.state.completed_rounds + 1, self.cfg.total_rounds + 1):
            if self.stop_event.is_set():
                return True
            try:
                job = self._prepare_round(round_index)
            except NoApplicableMorphism as exc:
                self.state.completed_rounds = round_index
                log.warning("round %d skipped: %s", round_index, exc)
                self._notify()
                continue
            job, outcome, error = self._run_job(job)
            self._apply(job, outcome, error)
        return False

    def _run_parallel(self) -> bool:
        results: queue.Queue = queue.Queue()
        interrupted = False
        with ThreadPoolExecutor(max_workers=self.cfg.max_parallel_evaluations) as pool:
            in_flight = 0
            init_needed = self.cfg.population_size - len(self.state.population)
            init_failures = 0

            def submit(job: _PendingJob):
                nonlocal in_flight
                in_flight += 1
                pool.submit(lambda j=job: results.put(self._run_job(j)))

            # seed the population first; parallel but applied in completion order
            while init_needed > 0 or in_flight > 0:
                if self.stop_event.is_set():
                    interrupted = True
                    init_needed = 0
                while init_needed > 0 and in_flight < self.cfg.max_parallel_evaluations:
                    submit(self._prepare_initial())
                    init_needed -= 1
                if in_flight == 0:
                    break
                job, outcome, error = results.get()
                in_flight -= 1
                if error is not None:
                    init_failures += 1
                    if init_failures > 2 * self.cfg.population_size:
                        raise EvaluatorFailure("initial population evaluation keeps failing")
                    self._apply(job, None, error)
                    if not interrupted:
                        init_needed += 1  # population must reach P
                    continue
                self._apply(job, outcome, None)
            if interrupted or self.stop_event.is_set():
                return True

            next_round = self.state.completed_rounds + 1
            while next_round <= self.cfg.total_rounds or in_flight > 0:
                if self.stop_event.is_set():
                    interrupted = True
                    next_round = self.cfg.total_rounds + 1
                while (next_round <= self.cfg.total_rounds
                       and in_flight < self.cfg.max_parallel_evaluations):
                    try:
                        submit(self._prepare_round(next_round))
                    except NoApplicableMorphism as exc:
                        log.warning("round %d skipped: %s", next_round, exc)
                    next_round += 1
                if in_flight == 0:
                    break
                job, outcome, error = results.get()
                in_flight -= 1
                self._apply(job, outcome, error)
        return interrupted


def fresh_state(cfg: SearchConfig, input_spec: InputSpec) -> SearchState:
    rng = random.Random(cfg.seed)
    return SearchState(
        config_hash=config_fingerprint(cfg, input_spec),
        completed_rounds=0,
        next_id=0,
        rng_state=rng.getstate(),
        population=[],
        archive=ParetoArchive(),
        history=[],
        archive_candidates={},
    )


def run_search(
    cfg: SearchConfig,
    input_spec: InputSpec,
    evaluator: Evaluator,
    state: SearchState | None = None,
    on_round=None,
    stop_event: threading.Event | None = None,
) -> SearchResult:
    """Run (or resume) a search to cfg.total_rounds selection rounds."""
    cfg.validate()
    if state is None:
        state = fresh_state(cfg, input_spec)
    else:
        expected = config_fingerprint(cfg, input_spec)
        if state.config_hash != expected:
            raise CorruptCheckpoint(
                f"checkpoint config hash {state.config_hash} does not match current config {expected}")
    coordinator = _Coordinator(cfg, input_spec, evaluator, state, on_round, stop_event)
    interrupted = coordinator.run()
    state.rng_state = coordinator.rng.getstate()
    return SearchResult(state=state, interrupted=interrupted)


# --- checkpoint encoding ---


def _objectives_to_obj(v: ObjectiveVector | None):
    if v is None:
        return None
    return [v.error, v.peak_memory_bytes, v.model_size_bytes, v.macs]


def _objectives_from_obj(obj) -> ObjectiveVector | None:
    if obj is None:
        return None
    return ObjectiveVector(float(obj[0]), int(obj[1]), int(obj[2]), int(obj[3]))


def _candidate_to_obj(c: Candidate) -> dict:
    return {
        "id": c.id,
        "template": template_to_obj(c.template),
        "sparsity_target": c.sparsity_target,
        "birth_round": c.birth_round,
        "parent_id": c.parent_id,
        "morphism": c.morphism,
        "objectives": _objectives_to_obj(c.objectives),
        "pruned_template": template_to_obj(c.pruned_template) if c.pruned_template else None,
        "val_accuracy": c.val_accuracy,
    }


def _candidate_from_obj(obj: dict) -> Candidate:
    return Candidate(
        id=obj["id"],
        template=template_from_obj(obj["template"]),
        sparsity_target=obj["sparsity_target"],
        birth_round=obj["birth_round"],
        parent_id=obj.get("parent_id"),
        morphism=obj.get("morphism"),
        objectives=_objectives_from_obj(obj.get("objectives")),
        pruned_template=template_from_obj(obj["pruned_template"]) if obj.get("pruned_template") else None,
        val_accuracy=obj.get("val_accuracy"),
    )


def _record_to_obj(r: HistoryRecord) -> dict:
    return {
        "round": r.round_index,
        "candidate_id": r.candidate_id,
        "parent_id": r.parent_id,
        "morphism": r.morphism,
        "lambdas": list(r.lambdas) if r.lambdas else None,
        "sparsity": r.sparsity,
        "status": r.status,
        "objectives": _objectives_to_obj(r.objectives),
        "goal_value": r.goal_value,
        "evicted_id": r.evicted_id,
    }


def _record_from_obj(obj: dict) -> HistoryRecord:
    return HistoryRecord(
        round_index=obj["round"],
        candidate_id=obj["candidate_id"],
        parent_id=obj.get("parent_id"),
        morphism=obj.get("morphism"),
        lambdas=tuple(obj["lambdas"]) if obj.get("lambdas") else None,
        sparsity=obj["sparsity"],
        status=obj["status"],
        objectives=_objectives_from_obj(obj.get("objectives")),
        goal_value=obj.get("goal_value"),
        evicted_id=obj.get("evicted_id"),
    )


def checkpoint(state: SearchState) -> bytes:
    rng_state = state.rng_state
    payload = {
        "version": CHECKPOINT_VERSION,
        "config_hash": state.config_hash,
        "completed_rounds": state.completed_rounds,
        "next_id": state.next_id,
        "rng_state": [rng_state[0], list(rng_state[1]), rng_state[2]],
        "population": [_candidate_to_obj(c) for c in state.population],
        "archive": [[cid, _objectives_to_obj(v)] for cid, v in state.archive.members()],
        "archive_candidates": [_candidate_to_obj(c) for c in state.archive_candidates.values()],
        "history": [_record_to_obj(r) for r in state.history],
    }
    return (json.dumps(payload) + "\n").encode("utf-8")


def _rng_state_from(obj) -> tuple:
    if isinstance(obj, tuple):
        return obj
    return (obj[0], tuple(obj[1]), obj[2])


def restore(data: bytes) -> SearchState:
    try:
        payload = json.loads(data.decode("utf-8"))
        if payload.get("version") != CHECKPOINT_VERSION:
            raise CorruptCheckpoint(
                f"unsupported checkpoint version {payload.get('version')!r}")
        rng_state = payload["rng_state"]
        return SearchState(
            config_hash=payload["config_hash"],
            completed_rounds=payload["completed_rounds"],
            next_id=payload["next_id"],
            rng_state=(rng_state[0], tuple(rng_state[1]), rng_state[2]),
            population=[_candidate_from_obj(o) for o in payload["population"]],
            archive=ParetoArchive([(cid, _objectives_from_obj(v)) for cid, v in payload["archive"]]),
            history=[_record_from_obj(o) for o in payload["history"]],
            archive_candidates={
                obj["id"]: _candidate_from_obj(obj)
                for obj in payload.get("archive_candidates", [])
            },
        )
    except CorruptCheckpoint:
        raise
    except Exception as exc:
        raise CorruptCheckpoint(f"cannot restore checkpoint: {exc}") from exc
