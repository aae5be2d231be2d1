"""Primary-replica orchestration over a virtual clock.

Each replica loops: pick the most promising buffered candidate, train it
epoch by epoch (one HPO round per epoch) until early stopping, max epoch or
the wall-clock budget, then append a :class:`HistoryRecord` to the shared
history.  Candidate generation for the next trial happens while the current
one trains, so the buffer is refilled right after a trial is picked.

Time never sleeps: every replica carries a virtual clock advanced by the
executor-reported epoch seconds.  The default schedule is single-threaded and
always advances the replica with the earliest clock, which makes runs
reproducible byte for byte.
"""
from __future__ import annotations

import hashlib
import heapq
import logging
import math
import random
import re
import shlex
import subprocess
import tempfile
import threading
from dataclasses import asdict, dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Protocol, Sequence

from . import graph as G
from .errors import CommandFailed, ConfigError, ExecutorFailure, ParseError
from .graph import ArchitectureGraph, build_resnet50
from .hpo import WARMUP_ROUNDS, HpoObservation, HyperParams, predict_warmup_error, suggest
from .morph import ArchFeatures, HistoryRecord, acquisition_score, propose_candidates, with_morph_kernel
from .opcount import IMAGENET, ZERO, DatasetDescriptor, OpCount, count_image_bp, count_image_fp, epoch_ops
from .runlog import LogEvent, RunLog

log = logging.getLogger(__name__)

IMPROVEMENT_THRESHOLD = 1e-4
ERROR_TAU_EPOCHS = 8.0
ERROR_START = 0.9
ERROR_FLOOR_RANGE = (0.18, 0.35)
ERROR_NOISE = 0.005


@dataclass(frozen=True)
class ClusterConfig:
    replica_count: int = 1
    accelerators_per_replica: int = 8
    peak_ops_per_accelerator: float = 1.25e14
    efficiency: float = 0.5
    epoch_overhead_seconds: float = 60.0
    run_budget_seconds: float = 36000.0
    max_epoch: int = 60
    patience: int = 5
    rng_seed: int = 0
    shared_history: bool = True
    buffer_size: int = 4

    def __post_init__(self):
        for name in ("replica_count", "accelerators_per_replica", "max_epoch", "patience", "buffer_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not self.peak_ops_per_accelerator > 0:
            raise ConfigError("peak_ops_per_accelerator must be positive")
        if not 0 < self.efficiency <= 1:
            raise ConfigError("efficiency must lie in (0, 1]")
        if self.epoch_overhead_seconds < 0:
            raise ConfigError("epoch_overhead_seconds must be non-negative")
        if not self.run_budget_seconds > 0:
            raise ConfigError("run_budget_seconds must be positive")

    @property
    def replica_throughput(self) -> float:
        """Sustained ops/second of one replica (data parallel across its accelerators)."""
        return self.accelerators_per_replica * self.peak_ops_per_accelerator * self.efficiency


class TrialStatus(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    EARLY_STOPPED = "EarlyStopped"
    MAX_EPOCH = "MaxEpochReached"
    BUDGET_CUT = "BudgetCut"


class StopDecision(str, Enum):
    CONTINUE = "Continue"
    EARLY_STOPPED = "EarlyStopped"
    MAX_EPOCH = "MaxEpochReached"


@dataclass
class Trial:
    digest: str
    architecture_ref: str
    hyperparams: HyperParams
    graph: ArchitectureGraph
    replica_id: int = 0
    epoch_trace: list[tuple[int, float, float]] = field(default_factory=list)
    completed_ops: OpCount = ZERO
    status: TrialStatus = TrialStatus.PENDING
    observations: list[HpoObservation] = field(default_factory=list)
    round_hyperparams: list[HyperParams] = field(default_factory=list)
    active_graph: ArchitectureGraph | None = None
    wall_seconds: float = 0.0
    warmup_history: tuple = ()

    @property
    def epochs_run(self) -> int:
        return len(self.epoch_trace)

    @property
    def best_error(self) -> float:
        return min(e for _, e, _ in self.epoch_trace)

    def best_hyperparams(self) -> HyperParams:
        i = min(range(len(self.epoch_trace)), key=lambda j: self.epoch_trace[j][1])
        return self.round_hyperparams[i]


class Executor(Protocol):
    def run_epoch(self, trial: Trial, epoch: int, rng_seed: int) -> tuple[float, float]:
        """Train ``trial.active_graph`` for one epoch; return (validation error, wall seconds)."""
        ...


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (``hash()`` is salted)."""
    h = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:8], "big") >> 1


@lru_cache(maxsize=8192)
def cached_epoch_ops(graph: ArchitectureGraph, data: DatasetDescriptor) -> int:
    return epoch_ops(graph, data)


@lru_cache(maxsize=8192)
def _epoch_count(graph: ArchitectureGraph, data: DatasetDescriptor) -> OpCount:
    fp = count_image_fp(graph)
    bp = count_image_bp(graph)
    return (fp + bp) * data.train_images + fp * data.val_images


def early_stop_decision(epoch_trace: Sequence, patience: int, max_epoch: int) -> StopDecision:
    """Decide after the latest epoch whether a trial keeps training.

    ``epoch_trace`` holds validation errors, or ``(epoch, error, ...)`` tuples.
    Max epoch wins; otherwise the trial stops early when the best error has
    not dropped by at least 1e-4 over the last ``patience`` epochs.
    """
    if not epoch_trace:
        raise ValueError("epoch_trace must be non-empty")
    errors = [e[1] if isinstance(e, (tuple, list)) else e for e in epoch_trace]
    if len(errors) >= max_epoch:
        return StopDecision.MAX_EPOCH
    if len(errors) <= patience:
        return StopDecision.CONTINUE
    before = min(errors[:-patience])
    if min(errors[-patience:]) > before - IMPROVEMENT_THRESHOLD:
        return StopDecision.EARLY_STOPPED
    return StopDecision.CONTINUE


def epoch_wall_seconds(ops: int, device: ClusterConfig) -> float:
    return ops / device.replica_throughput + device.epoch_overhead_seconds


def error_floor(digest: str, hp: HyperParams, rng_seed: int) -> float:
    lo, hi = ERROR_FLOOR_RANGE
    u = random.Random(derive_seed("floor", rng_seed, digest, hp.batch_size, hp.kernel_size)).random()
    return lo + (hi - lo) * u


def simulated_run_epoch(
    trial: Trial, epoch: int, device: ClusterConfig, rng_seed: int, data: DatasetDescriptor = IMAGENET
) -> tuple[float, float]:
    """Deterministic stand-in for one epoch of real training.

    Wall time is the epoch's analytical ops over the replica's sustained
    throughput plus a fixed per-epoch overhead.  The error decays
    exponentially from 0.9 towards a per-(architecture, hyperparams) floor
    with small uniform noise.
    """
    if epoch < 1:
        raise ValueError("epoch indices start at 1")
    g = trial.active_graph or trial.graph
    wall = epoch_wall_seconds(cached_epoch_ops(g, data), device)
    floor = error_floor(trial.digest, trial.hyperparams, rng_seed)
    noise_rng = random.Random(derive_seed("noise", rng_seed, trial.digest, trial.hyperparams, epoch))
    err = floor + (ERROR_START - floor) * math.exp(-epoch / ERROR_TAU_EPOCHS)
    err += noise_rng.uniform(-ERROR_NOISE, ERROR_NOISE)
    return min(0.999, max(0.001, err)), wall


class SimulatedExecutor:
    def __init__(self, device: ClusterConfig, data: DatasetDescriptor = IMAGENET):
        self.device = device
        self.data = data

    def run_epoch(self, trial: Trial, epoch: int, rng_seed: int) -> tuple[float, float]:
        return simulated_run_epoch(trial, epoch, self.device, rng_seed, self.data)


_RESULT_RE = {
    "error": re.compile(r"\berror=([^\s,;]+)"),
    "seconds": re.compile(r"\bseconds=([^\s,;]+)"),
}


def parse_command_output(text: str) -> tuple[float, float]:
    values = {}
    for key, rx in _RESULT_RE.items():
        m = rx.search(text)
        if not m:
            raise ParseError(f"command output lacks '{key}=<float>': {text[:200]!r}")
        try:
            values[key] = float(m.group(1))
        except ValueError:
            raise ParseError(f"non-numeric {key}: {m.group(1)!r}") from None
    if not 0.0 < values["error"] < 1.0:
        raise ParseError(f"error {values['error']} outside (0, 1)")
    if not values["seconds"] > 0:
        raise ParseError(f"seconds {values['seconds']} must be positive")
    return values["error"], values["seconds"]


def command_executor_run_epoch(trial: Trial, epoch: int, command_template: str, workdir=None, extra=None):
    """Run one epoch through an external command.

    The template may use ``{arch_file} {epoch} {batch_size} {kernel_size}
    {out_file}`` plus any keys in ``extra``.  The command must write
    ``error=<float> seconds=<float>`` to ``{out_file}``.
    """
    own_tmp = None
    if workdir is None:
        own_tmp = tempfile.TemporaryDirectory(prefix="automl-bench-")
        workdir = own_tmp.name
    try:
        wd = Path(workdir)
        wd.mkdir(parents=True, exist_ok=True)
        g = trial.active_graph or trial.graph
        arch_file = wd / f"{g.digest}.arch"
        if not arch_file.exists():
            G.save(g, arch_file)
        out_file = wd / f"{trial.digest}.e{epoch}.out"
        fields_ = {
            "arch_file": str(arch_file),
            "epoch": epoch,
            "batch_size": trial.hyperparams.batch_size,
            "kernel_size": trial.hyperparams.kernel_size,
            "out_file": str(out_file),
            **(extra or {}),
        }
        try:
            argv = [tok.format(**fields_) for tok in shlex.split(command_template)]
        except (KeyError, IndexError, ValueError) as exc:
            raise ExecutorFailure(f"bad command template {command_template!r}: {exc}") from None
        log.debug("epoch command: %s", argv)
        try:
            proc = subprocess.run(argv, capture_output=True, text=True)
        except OSError as exc:
            raise CommandFailed(f"cannot run {argv[0]!r}: {exc}") from None
        if proc.returncode != 0:
            raise CommandFailed(f"command exited with {proc.returncode}: {proc.stderr.strip()[:500]}")
        try:
            text = out_file.read_text()
        except OSError:
            raise ParseError(f"command did not write {out_file}") from None
        return parse_command_output(text)
    finally:
        if own_tmp is not None:
            own_tmp.cleanup()


class CommandExecutor:
    def __init__(self, command_template: str, workdir=None, extra: dict | None = None):
        for key in ("{arch_file}", "{out_file}"):
            if key not in command_template:
                raise ConfigError(f"command_template must reference {key}")
        self.command_template = command_template
        self.workdir = workdir
        self.extra = dict(extra or {})

    def run_epoch(self, trial: Trial, epoch: int, rng_seed: int) -> tuple[float, float]:
        return command_executor_run_epoch(trial, epoch, self.command_template, self.workdir, self.extra)


class HistoryStore:
    """Append-only shared history; snapshots are immutable tuples."""

    def __init__(self):
        self._records: list[HistoryRecord] = []
        self._digests: set[str] = set()
        self._lock = threading.Lock()

    def append(self, record: HistoryRecord) -> None:
        with self._lock:
            if record.digest in self._digests:
                raise ValueError(f"duplicate history digest {record.digest}")
            self._records.append(record)
            self._digests.add(record.digest)

    def snapshot(self, until: float | None = None, replica: int | None = None) -> tuple[HistoryRecord, ...]:
        recs = tuple(self._records)
        if until is not None:
            recs = tuple(r for r in recs if r.completed_at <= until)
        if replica is not None:
            recs = tuple(r for r in recs if r.replica_id == replica)
        return recs

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(tuple(self._records))


@dataclass
class _Replica:
    id: int
    clock: float = 0.0
    buffer: list[ArchitectureGraph] = field(default_factory=list)
    trial: Trial | None = None
    trials_started: int = 0


class BenchmarkRun:
    """One benchmark run; call :meth:`run` once and read the returned :class:`RunLog`."""

    def __init__(
        self,
        config: ClusterConfig,
        executor: Executor | None = None,
        data: DatasetDescriptor = IMAGENET,
        workdir=None,
        base: ArchitectureGraph | None = None,
        default_hyperparams: HyperParams = HyperParams(),
        header: dict | None = None,
    ):
        self.config = config
        self.data = data
        self.executor = executor if executor is not None else SimulatedExecutor(config, data)
        self.workdir = Path(workdir) if workdir is not None else None
        self.base = base if base is not None else build_resnet50(data.image_shape, 1000)
        self.defaults = default_hyperparams
        self.history = HistoryStore()
        self.trials: list[Trial] = []
        self._claimed: set[str] = set()
        self._events: list[tuple[float, int, int, LogEvent]] = []
        self._seq = 0
        self._lock = threading.RLock()
        self._threaded = False
        self.header = header if header is not None else {"cluster": asdict(config), "rng_seed": config.rng_seed}

    # -- bookkeeping -----------------------------------------------------------

    def _emit(self, ev: LogEvent) -> None:
        with self._lock:
            self._events.append((ev.ts_seconds, ev.replica_id, self._seq, ev))
            self._seq += 1

    def _arch_ref(self, digest: str) -> str:
        if self.workdir is None:
            return f"buffer/{digest}.arch"
        return str(self.workdir / "buffer" / f"{digest}.arch")

    def _snapshot(self, rep: _Replica) -> tuple[HistoryRecord, ...]:
        until = None if self._threaded else rep.clock
        replica = None if self.config.shared_history else rep.id
        return self.history.snapshot(until=until, replica=replica)

    # -- replica activities ----------------------------------------------------

    def _refill(self, rep: _Replica, snap) -> None:
        want = self.config.buffer_size - len(rep.buffer)
        if want <= 0:
            return
        exclude = self._claimed | {g.digest for g in rep.buffer}
        seed = derive_seed("propose", self.config.rng_seed, rep.id, rep.trials_started)
        fresh = propose_candidates(snap, self.base, want, seed, exclude=exclude)
        for g in fresh:
            self._propose(rep, g)
        rep.buffer.extend(fresh)

    def _propose(self, rep: _Replica, g: ArchitectureGraph) -> None:
        if self.workdir is not None:
            path = Path(self._arch_ref(g.digest))
            path.parent.mkdir(parents=True, exist_ok=True)
            G.save(g, path)
        self._emit(LogEvent(rep.clock, rep.id, g.digest, "proposed"))

    def _start_trial(self, rep: _Replica) -> None:
        with self._lock:
            snap = self._snapshot(rep)
            known = self._claimed | {r.digest for r in snap}
            rep.buffer = [g for g in rep.buffer if g.digest not in known]
            if self.base.digest not in known:
                # the seed architecture is trained once, by the first free replica
                pick = self.base
                self._propose(rep, pick)
            else:
                if not rep.buffer:
                    self._refill(rep, snap)
                scores = [acquisition_score(snap, g) for g in rep.buffer]
                pick = rep.buffer.pop(max(range(len(scores)), key=lambda i: (scores[i], -i)))
            self._claimed.add(pick.digest)
            rep.trials_started += 1
            trial = Trial(pick.digest, self._arch_ref(pick.digest), self.defaults, pick, replica_id=rep.id)
            trial.status = TrialStatus.RUNNING
            trial.warmup_history = snap
            rep.trial = trial
            self.trials.append(trial)
            # generation for the next trial overlaps this one's training
            self._refill(rep, snap)

    def _next_hyperparams(self, trial: Trial) -> HyperParams:
        if not trial.observations:
            return self.defaults
        seed = derive_seed("hpo", self.config.rng_seed, trial.digest)
        return suggest(trial.observations, seed)

    def _run_epoch(self, rep: _Replica) -> None:
        trial = rep.trial
        epoch = trial.epochs_run + 1
        hp = self._next_hyperparams(trial)
        trial.hyperparams = hp
        trial.active_graph = with_morph_kernel(trial.graph, hp.kernel_size)
        ops = cached_epoch_ops(trial.active_graph, self.data)
        try:
            err, wall = self.executor.run_epoch(trial, epoch, self.config.rng_seed)
        except ExecutorFailure:
            self._stop(rep, TrialStatus.BUDGET_CUT)
            raise
        if not (0.0 < err < 1.0) or not wall > 0:
            self._stop(rep, TrialStatus.BUDGET_CUT)
            raise ExecutorFailure(f"executor returned error={err}, seconds={wall}")
        rep.clock += wall
        trial.wall_seconds += wall
        trial.epoch_trace.append((epoch, err, rep.clock))
        trial.round_hyperparams.append(hp)
        trial.completed_ops = trial.completed_ops + _epoch_count(trial.active_graph, self.data)

        predicted = len(trial.observations) < WARMUP_ROUNDS
        hpo_err = predict_warmup_error(trial.warmup_history, hp) if predicted else err
        trial.observations.append(HpoObservation(hp, hpo_err, predicted))
        self._emit(LogEvent(
            rep.clock, rep.id, trial.digest, "epoch", epoch, err, ops, wall,
            {"batch_size": hp.batch_size, "kernel_size": hp.kernel_size,
             "hpo_error": hpo_err, "predicted": predicted},
        ))

        decision = early_stop_decision(trial.epoch_trace, self.config.patience, self.config.max_epoch)
        if decision is not StopDecision.CONTINUE:
            self._finish(rep, TrialStatus(decision.value))

    def _stop(self, rep: _Replica, status: TrialStatus) -> None:
        trial = rep.trial
        trial.status = status
        best = trial.best_error if trial.epoch_trace else None
        self._emit(LogEvent(rep.clock, rep.id, trial.digest, "stopped", trial.epochs_run, best, 0,
                            trial.wall_seconds, {"status": status.value}))
        rep.trial = None

    def _finish(self, rep: _Replica, status: TrialStatus) -> None:
        trial = rep.trial
        self._stop(rep, status)
        record = HistoryRecord(
            digest=trial.digest,
            architecture_ref=trial.architecture_ref,
            hyperparams=trial.best_hyperparams(),
            best_error=trial.best_error,
            per_image_ops=count_image_fp(trial.graph) + count_image_bp(trial.graph),
            epochs_run=trial.epochs_run,
            wall_seconds=trial.wall_seconds,
            replica_id=rep.id,
            completed_at=rep.clock,
            features=ArchFeatures.of(trial.graph),
            graph=trial.graph,
        )
        self.history.append(record)
        hp = record.hyperparams
        self._emit(LogEvent(rep.clock, rep.id, trial.digest, "recorded", trial.epochs_run, record.best_error, 0,
                            trial.wall_seconds, {"batch_size": hp.batch_size, "kernel_size": hp.kernel_size,
                                                 "replica_trials": rep.trials_started}))

    def _step(self, rep: _Replica) -> bool:
        """Advance one replica by one epoch; False once its budget is spent."""
        if rep.clock >= self.config.run_budget_seconds:
            if rep.trial is not None:
                self._stop(rep, TrialStatus.BUDGET_CUT)
            return False
        if rep.trial is None:
            self._start_trial(rep)
        self._run_epoch(rep)
        return True

    # -- schedules -------------------------------------------------------------

    def run(self, threaded: bool = False) -> RunLog:
        replicas = [_Replica(i) for i in range(self.config.replica_count)]
        if threaded:
            self._threaded = True
            self._run_threaded(replicas)
        else:
            heap = [(r.clock, r.id) for r in replicas]
            heapq.heapify(heap)
            while heap:
                _, rid = heapq.heappop(heap)
                rep = replicas[rid]
                if self._step(rep):
                    heapq.heappush(heap, (rep.clock, rid))
        self._events.sort(key=lambda t: t[:3])
        return RunLog(dict(self.header), [t[3] for t in self._events])

    def _run_threaded(self, replicas) -> None:
        errors: list[BaseException] = []

        def loop(rep):
            try:
                while self._step(rep):
                    pass
            except BaseException as exc:  # surfaced after join
                errors.append(exc)

        threads = [threading.Thread(target=loop, args=(r,), name=f"replica-{r.id}") for r in replicas]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]


def run_benchmark(config: ClusterConfig, executor: Executor | None = None, **kwargs) -> RunLog:
    """Run the benchmark with the deterministic schedule and return its log."""
    threaded = kwargs.pop("threaded", False)
    return BenchmarkRun(config, executor, **kwargs).run(threaded=threaded)
