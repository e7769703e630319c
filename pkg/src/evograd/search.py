"""Search loop over a thread worker pool, run log persistence, resume and reporting."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .dsl import Vocab, check_feasible, parse_equation
from .evolution import (
    Candidate,
    EvoConfig,
    Population,
    init_population,
    mutate,
    record_result,
    select_parent,
    top_k,
)
from .tasks import TaskSpec, generate
from .trainer import FitnessRecord, TrainConfig, train_and_evaluate

log = logging.getLogger(__name__)

WORKERS_ENV = "EVOGRAD_WORKERS"
LOG_FIELDS = ("iter", "eq", "key", "parent", "val_acc", "test_acc", "epochs", "failed", "reason", "seed", "ts")
REPORT_COLUMNS = ("rank", "equation", "val_mean", "val_std", "test_mean", "test_std", "failed")
# Consecutive duplicate children tolerated before the vocabulary counts as exhausted.
MAX_DUPLICATE_STREAK = 10_000


class JobMismatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class SearchJob:
    evo: EvoConfig = field(default_factory=EvoConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    budget: int = 100
    workers: int = 1
    output: str = "search.jsonl"
    seed: int = 0

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be at least 1")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def to_dict(self) -> dict:
        return {
            "evo": self.evo.to_dict(),
            "train": self.train.to_dict(),
            "task": self.task.to_dict(),
            "budget": self.budget,
            "workers": self.workers,
            "output": self.output,
            "seed": self.seed,
        }

    def hash(self) -> str:
        """Digest of everything that determines results (not budget, workers or output)."""
        d = self.to_dict()
        for volatile in ("budget", "workers", "output"):
            d.pop(volatile)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# -- config file -------------------------------------------------------------

def _split_list(value: str) -> list[str]:
    return [v.strip() for v in value.split(",") if v.strip()]


def _bool(value: str) -> bool:
    if value.lower() in ("1", "true", "yes", "on"):
        return True
    if value.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


_TRAIN_TYPES = {
    "epochs": int, "batch_size": int, "lr": float, "schedule": str, "optimizer": str, "momentum": float,
    "seed": int, "hidden": lambda v: tuple(int(h) for h in _split_list(v)), "activation": str,
    "early_stop": _bool, "early_stop_fraction": float, "early_stop_margin": float,
}
_TASK_TYPES = {
    "kind": str, "n_train": int, "n_val": int, "n_test": int, "noise": float, "seed": int,
    "n_classes": int, "paths": lambda v: tuple(_split_list(v)),
}
_EVO_TYPES = {
    "p": float, "n_elite": int, "retries": int, "init": str, "init_count": int,
    "k_distribution": lambda v: {int(k): float(p) for k, p in (item.split(":") for item in _split_list(v))},
    "seeds": lambda v: tuple(s.strip() for s in v.split(";") if s.strip()),
}
_VOCAB_KEYS = ("operands", "stats", "unaries", "binaries", "steps")
_TOP_TYPES = {"budget": int, "workers": int, "output": str, "seed": int}


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def job_from_settings(settings: dict[str, str]) -> SearchJob:
    """Build a job from flat keys such as ``train.lr``, ``task.kind``, ``vocab.operands``."""
    groups: dict[str, dict] = {"train": {}, "task": {}, "evo": {}, "vocab": {}, "top": {}}
    tables = {"train": _TRAIN_TYPES, "task": _TASK_TYPES, "evo": _EVO_TYPES, "top": _TOP_TYPES}
    for key, value in settings.items():
        group, _, name = key.rpartition(".")
        group = group or "top"
        if group == "vocab":
            if name not in _VOCAB_KEYS:
                raise ValueError(f"unknown config key {key!r}")
            groups["vocab"][name] = _split_list(value)
            continue
        table = tables.get(group)
        if table is None or name not in table:
            raise ValueError(f"unknown config key {key!r}")
        groups[group][name] = table[name](value)
    vocab = Vocab.from_dict(groups["vocab"])
    evo = EvoConfig(vocab=vocab, **groups["evo"])
    return SearchJob(evo=evo, train=TrainConfig(**groups["train"]), task=TaskSpec(**groups["task"]),
                     **groups["top"])


def load_job(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> SearchJob:
    settings = parse_config_text(Path(path).read_text()) if path else {}
    settings.update(overrides or {})
    job = job_from_settings(settings)
    if os.environ.get(WORKERS_ENV):
        job = replace(job, workers=int(os.environ[WORKERS_ENV]))
    return job


def job_from_dict(d: dict) -> SearchJob:
    """Inverse of :meth:`SearchJob.to_dict`."""
    evo = dict(d["evo"])
    evo["vocab"] = Vocab.from_dict(evo["vocab"])
    evo["k_distribution"] = {int(k): v for k, v in evo["k_distribution"].items()}
    return SearchJob(
        evo=EvoConfig(**evo),
        train=TrainConfig(**d["train"]),
        task=TaskSpec(**d["task"]),
        budget=d["budget"], workers=d["workers"], output=d["output"], seed=d["seed"],
    )


# -- run log ---------------------------------------------------------------

def _record_line(iteration: int, cand: Candidate) -> str:
    f = cand.fitness
    rec = {
        "iter": iteration, "eq": str(cand.equation), "key": cand.key, "parent": cand.parent,
        "val_acc": f.val_acc, "test_acc": f.test_acc, "epochs": f.epochs, "failed": f.failed,
        "reason": f.reason, "seed": f.seed, "ts": time.time(),
    }
    return json.dumps(rec) + "\n"


@dataclass
class LogContents:
    header: dict | None
    records: list[dict]
    skipped: int = 0
    # Byte length of the valid prefix; appends must start here.
    valid_bytes: int = 0


def read_log(path: str | os.PathLike) -> LogContents:
    """Parse a run log, stopping at the first corrupt line."""
    path = Path(path)
    if not path.exists():
        return LogContents(None, [])
    raw = path.read_bytes()
    lines = raw.split(b"\n")
    header, records, offset = None, [], 0
    for i, line in enumerate(lines):
        if i == len(lines) - 1 and line == b"":
            break
        complete = i < len(lines) - 1
        try:
            obj = json.loads(line) if complete else None
        except ValueError:
            obj = None
        valid = isinstance(obj, dict) and (("header" in obj) if header is None else all(k in obj for k in LOG_FIELDS))
        if not valid:
            skipped = sum(1 for rest in lines[i:] if rest.strip())
            if skipped:
                log.warning("run log %s: stopping at line %d, %d line(s) skipped", path, i + 1, skipped)
            return LogContents(header, records, skipped, offset)
        if header is None:
            header = obj
        else:
            records.append(obj)
        offset += len(line) + 1
    return LogContents(header, records, 0, offset)


def candidate_from_record(rec: dict) -> Candidate:
    fitness = FitnessRecord(
        key=rec["key"], val_acc=rec["val_acc"], test_acc=rec["test_acc"], epochs=rec["epochs"],
        failed=rec["failed"], reason=rec["reason"], seed=rec["seed"],
    )
    return Candidate(parse_equation(rec["eq"]), rec["key"], fitness, rec["iter"], rec["parent"])


def population_from_records(records: list[dict]) -> Population:
    pop = Population()
    for rec in records:
        record_result(pop, candidate_from_record(rec))
    return pop


def resume(log_path: str | os.PathLike, job: SearchJob) -> tuple[Population, int]:
    """Rebuild the population from a log; returns it with the next iteration number."""
    contents = read_log(log_path)
    if contents.header is None:
        return Population(), 0
    if contents.header.get("job_hash") != job.hash():
        raise JobMismatchError(f"{log_path} was written by a different job configuration")
    pop = population_from_records(contents.records)
    next_iter = contents.records[-1]["iter"] + 1 if contents.records else 0
    return pop, next_iter


class _RunLog:
    def __init__(self, path: Path, job: SearchJob, keep_bytes: int | None):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        if keep_bytes:
            with open(path, "r+b") as fh:
                fh.truncate(keep_bytes)
            self.fh = open(path, "a", encoding="utf-8")
        else:
            self.fh = open(path, "w", encoding="utf-8")
            header = {"header": True, "job_hash": job.hash(), "job": job.to_dict()}
            self.fh.write(json.dumps(header) + "\n")
            self.fh.flush()

    def append(self, iteration: int, cand: Candidate) -> None:
        self.fh.write(_record_line(iteration, cand))
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


# -- search ------------------------------------------------------------------

def _evaluate(cand: Candidate, data, config: TrainConfig) -> FitnessRecord:
    return train_and_evaluate(cand.equation, data, config)


def run_search(
    job: SearchJob,
    *,
    resume_log: bool = False,
    stop: threading.Event | None = None,
    progress=None,
) -> tuple[Population, Path]:
    """Evaluate the starting population, then ``job.budget`` mutated children.

    Setting ``stop`` stops dispatching; in-flight evaluations are drained and
    logged before returning.
    """
    path = Path(job.output)
    data = generate(job.task)
    evo = job.evo
    pop, next_iter, keep = Population(), 0, None
    if resume_log:
        contents = read_log(path)
        if contents.header is not None:
            pop, next_iter = resume(path, job)
            keep = contents.valid_bytes
    runlog = _RunLog(path, job, keep)

    init_rng = np.random.default_rng([job.seed, 0])
    seeded = init_population(evo, init_rng)
    init_seeds = init_rng.integers(2**31, size=len(seeded))
    pending = [
        (c, int(s)) for c, s in zip(seeded, init_seeds) if c.key not in pop
    ]
    n_init_done = len(seeded) - len(pending)
    dispatched = max(0, next_iter - n_init_done) if resume_log else 0
    loop_rng = np.random.default_rng([job.seed, 1, next_iter])
    seen = set(pop.candidates)
    iteration = next_iter
    duplicate_streak = 0
    inflight: dict[Future, tuple[int, Candidate, int]] = {}
    order = 0

    def next_candidate():
        nonlocal dispatched, duplicate_streak
        if pending:
            return pending.pop(0)
        if dispatched >= job.budget or not pop.ranked():
            return None
        while duplicate_streak < MAX_DUPLICATE_STREAK:
            parent = select_parent(pop, loop_rng, evo.p, evo.n_elite)
            child, _ = mutate(parent.equation, evo, loop_rng)
            seed = int(loop_rng.integers(2**31))
            cand = Candidate.of(child, parent=parent.key)
            if cand.key in seen:
                duplicate_streak += 1
                continue
            duplicate_streak = 0
            dispatched += 1
            return cand, seed
        log.warning("vocabulary exhausted after %d consecutive duplicates", duplicate_streak)
        return None

    config = job.train
    try:
        with ThreadPoolExecutor(max_workers=job.workers) as pool:
            while True:
                while len(inflight) < job.workers and not (stop is not None and stop.is_set()):
                    nxt = next_candidate()
                    if nxt is None:
                        break
                    cand, seed = nxt
                    seen.add(cand.key)
                    fut = pool.submit(_evaluate, cand, data, replace(config, seed=seed))
                    inflight[fut] = (order, cand, seed)
                    order += 1
                if not inflight:
                    break
                done, _ = wait(inflight, return_when=FIRST_COMPLETED)
                for fut in sorted(done, key=lambda f: inflight[f][0]):
                    _, cand, seed = inflight.pop(fut)
                    try:
                        fitness = fut.result()
                    except Exception as exc:  # worker crash marks the candidate failed
                        log.exception("evaluation of %s crashed", cand.key)
                        fitness = FitnessRecord(cand.key, 0.0, None, 0, True, f"worker error: {exc}", seed)
                    cand.fitness = fitness
                    cand.generation = iteration
                    record_result(pop, cand)
                    runlog.append(iteration, cand)
                    iteration += 1
                    if progress is not None:
                        progress(iteration, cand, pop)
    finally:
        runlog.close()
    return pop, path


# -- reporting ---------------------------------------------------------------

@dataclass
class ReportEntry:
    equation: str
    val_accs: list[float]
    test_accs: list[float]
    failed: bool = False

    @property
    def val_mean(self) -> float:
        return float(np.mean(self.val_accs))

    @property
    def val_std(self) -> float:
        return float(np.std(self.val_accs))

    @property
    def test_mean(self) -> float:
        return float(np.mean(self.test_accs))

    @property
    def test_std(self) -> float:
        return float(np.std(self.test_accs))

    def to_dict(self) -> dict:
        return {
            "equation": self.equation, "val_accs": self.val_accs, "test_accs": self.test_accs,
            "val_mean": self.val_mean, "val_std": self.val_std,
            "test_mean": self.test_mean, "test_std": self.test_std, "failed": self.failed,
        }


def rerun_top(
    pop: Population,
    job: SearchJob,
    k: int = 100,
    repeats: int = 5,
    workers: int | None = None,
) -> list[ReportEntry]:
    """Re-evaluate the best ``k`` candidates with ``repeats`` fresh seeds each.

    Each repeat trains once on the train split (validation accuracy) and once
    on train+val (test accuracy). Entries are sorted by mean validation accuracy.
    """
    data = generate(job.task)
    chosen = top_k(pop, k)
    seeds = [job.seed * 1000 + 10_000 + r for r in range(repeats)]
    tasks = [(c, s, full) for c in chosen for s in seeds for full in (False, True)]

    def run(task):
        cand, seed, full = task
        return train_and_evaluate(cand.equation, data, replace(job.train, seed=seed), full_train=full)

    with ThreadPoolExecutor(max_workers=workers or job.workers) as ex:
        results = list(ex.map(run, tasks))

    entries = []
    for i, cand in enumerate(chosen):
        rs = results[i * 2 * repeats:(i + 1) * 2 * repeats]
        val = [r.val_acc for r in rs[0::2]]
        test = [r.test_acc if r.test_acc is not None else 0.0 for r in rs[1::2]]
        entries.append(ReportEntry(str(cand.equation), val, test, any(r.failed for r in rs)))
    entries.sort(key=lambda e: -e.val_mean)
    return entries


def write_report(entries: list[ReportEntry], path: str | os.PathLike) -> tuple[Path, Path]:
    """Write the CSV report and a JSON sidecar carrying the per-rerun values."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for rank, e in enumerate(entries, start=1):
            writer.writerow([rank, e.equation, repr(e.val_mean), repr(e.val_std),
                             repr(e.test_mean), repr(e.test_std), int(e.failed)])
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps([e.to_dict() for e in entries], indent=1))
    return path, sidecar


def validate_log(path: str | os.PathLike) -> list[str]:
    """Schema and feasibility problems found in a run log (empty if clean)."""
    contents = read_log(path)
    problems = []
    if contents.header is None:
        return ["missing header"]
    for rec in contents.records:
        try:
            e = parse_equation(rec["eq"])
            check_feasible(e)
        except ValueError as exc:
            problems.append(f"iter {rec['iter']}: {exc}")
            continue
        if not 0.0 <= rec["val_acc"] <= 1.0:
            problems.append(f"iter {rec['iter']}: accuracy out of range")
    iters = [rec["iter"] for rec in contents.records]
    if iters and iters != list(range(iters[0], iters[0] + len(iters))):
        problems.append("iteration numbers are not consecutive")
    return problems
