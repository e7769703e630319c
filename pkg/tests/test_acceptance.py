"""Acceptance criteria, one check per criterion.

Run with ``pytest tests/test_acceptance.py -s`` or ``python3 tests/test_acceptance.py``;
either way one PASS/FAIL line is printed per criterion.
"""

from __future__ import annotations

import json
import math
import os
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from evograd.dsl import (
    ShapeEnv,
    Vocab,
    check_feasible,
    parse_equation,
    random_equation,
    serialize_equation,
    slot_diff,
)
from evograd.evolution import Candidate, EvoConfig, Population, mutate, select_parent
from evograd.search import (
    SearchJob,
    load_job,
    population_from_records,
    read_log,
    rerun_top,
    resume,
    run_search,
    validate_log,
)
from evograd.tasks import TaskSpec, chance_accuracy, generate
from evograd.trainer import (
    FitnessRecord,
    MlpModel,
    Schedule,
    TrainConfig,
    backward_reference,
    backward_with_equation,
    builtin_equations,
    finite_difference_grad,
    forward,
    lr_at,
    train_and_evaluate,
)

ROOT = Path(__file__).resolve().parents[1]
SPIRALS_CONFIG = ROOT / "configs" / "spirals.cfg"
FAST_TASK = TaskSpec("blobs", n_train=128, n_val=64, n_test=64)
FAST_TRAIN = TrainConfig(epochs=2, hidden=(8,))


def _report(number: int, title: str, passed: bool, detail: str) -> None:
    print(f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {title}: {detail}", flush=True)


def _rel_err(got, want) -> float:
    """Largest per-array error, relative to that array's largest magnitude."""
    return max(float(np.max(np.abs(g - w)) / max(np.max(np.abs(w)), 1e-300)) for g, w in zip(got, want))


def _strip_ts(path) -> list[str]:
    lines = Path(path).read_text().splitlines()
    out = [lines[0]]
    for line in lines[1:]:
        rec = json.loads(line)
        rec.pop("ts")
        out.append(json.dumps(rec, sort_keys=True))
    return out


# -- criteria ----------------------------------------------------------------

def criterion_1():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    problems = []
    for name, e in builtin_equations().items():
        text = serialize_equation(e)
        if parse_equation(text) != e:
            problems.append(f"{name} round trip")
        check_feasible(e)
        for _ in range(200):
            dims = [int(d) for d in rng.integers(1, 513, size=5)]
            if check_feasible(e, ShapeEnv(*dims)) != (dims[0], dims[2]):
                problems.append(f"{name} widths {dims}")
    elapsed = time.perf_counter() - start
    ok = not problems and elapsed < 1.0
    return ok, f"3 builtins parse/round-trip/shape-check, {len(problems)} problems, {elapsed:.3f}s (< 1s)"


def criterion_2():
    start = time.perf_counter()
    worst_eq = worst_fd = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        model = MlpModel.init((2, 16, 16, 2), "tanh", rng)
        x = rng.standard_normal((16, 2))
        y = rng.integers(0, 2, 16)
        cache = forward(model, x, y)
        ref = backward_reference(model, cache)
        got = backward_with_equation(model, cache, builtin_equations()["backprop"])
        worst_eq = max(worst_eq, _rel_err(got.arrays(), ref.arrays()))
        worst_fd = max(worst_fd, _rel_err(ref.arrays(), finite_difference_grad(model, x, y).arrays()))
    elapsed = time.perf_counter() - start
    ok = worst_eq <= 1e-12 and worst_fd <= 1e-5 and elapsed < 30
    return ok, (f"equation vs reference {worst_eq:.2e} (<= 1e-12), reference vs finite differences "
                f"{worst_fd:.2e} (<= 1e-5), {elapsed:.1f}s (< 30s)")


def criterion_3():
    start = time.perf_counter()
    eqs = builtin_equations()
    lrs = (0.01, 0.1, 0.5)
    blobs = generate(TaskSpec("blobs"))
    moons = generate(TaskSpec("two_moons"))

    def tuned(e, data, epochs):
        recs = [train_and_evaluate(e, data, TrainConfig(epochs=epochs, lr=lr, early_stop=False)) for lr in lrs]
        best = max(range(len(lrs)), key=lambda i: recs[i].val_acc)
        return recs[best].val_acc, lrs[best]

    bp_acc, bp_lr = tuned(eqs["backprop"], blobs, 20)
    fa_acc, _ = tuned(eqs["feedback_alignment"], moons, 50)
    dfa_acc, _ = tuned(eqs["dfa"], moons, 50)
    zero = train_and_evaluate("sub(ident(g), ident(g))", blobs, TrainConfig(epochs=20, lr=bp_lr))
    chance = chance_accuracy(blobs.y_val, blobs.n_classes)
    elapsed = time.perf_counter() - start
    checks = {
        "backprop": bp_acc >= 0.97,
        "fa": fa_acc >= 0.85,
        "dfa": dfa_acc >= 0.85,
        "zero": abs(zero.val_acc - chance) <= 0.1,
        "time": elapsed < 120,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"backprop blobs {bp_acc:.3f} (lr {bp_lr}, >= 0.97); FA moons {fa_acc:.3f}, DFA moons {dfa_acc:.3f} "
              f"(>= 0.85); zero-update blobs {zero.val_acc:.3f} vs chance {chance:.3f} (+-0.1, "
              f"{zero.reason or 'ran to completion'}); {elapsed:.1f}s (< 120s)")
    if failed:
        detail += f"; failing: {', '.join(failed)}"
    return not failed, detail


def criterion_4():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    cfg = EvoConfig()
    infeasible = wrong_diff = fallbacks = 0
    for i in range(10000):
        parent = random_equation(rng, cfg.vocab, 1 + i % 3)
        child, fell_back = mutate(parent, cfg, rng)
        try:
            check_feasible(child)
        except ValueError:
            infeasible += 1
        if fell_back:
            fallbacks += 1
        elif slot_diff(parent, child) != 1:
            wrong_diff += 1
    elapsed = time.perf_counter() - start
    ok = infeasible == 0 and wrong_diff == 0 and elapsed < 60
    return ok, (f"10000 children: {infeasible} infeasible, {wrong_diff} non-fallback children not differing "
                f"in exactly 1 slot, {fallbacks} fallbacks, {elapsed:.1f}s (< 60s)")


def criterion_5():
    rng = np.random.default_rng(5)
    pop = Population()
    while len(pop) < 100:
        c = Candidate.of(random_equation(rng, Vocab(), 1))
        if c.key not in pop:
            c.fitness = FitnessRecord(c.key, float(rng.random()))
            pop.add(c)
    elite = {c.key for c in pop.elites(10)}
    draws = 100_000
    hits = sum(select_parent(pop, rng, 0.7, 10).key in elite for _ in range(draws))
    freq = hits / draws
    return abs(freq - 0.7) <= 0.02, f"elite-draw frequency {freq:.4f} over {draws} draws (0.70 +- 0.02)"


def criterion_6(seeds=(0, 1, 2)):
    start = time.perf_counter()
    lines, passed = [], 0
    with tempfile.TemporaryDirectory() as tmp:
        for seed in seeds:
            job = load_job(SPIRALS_CONFIG, {"seed": str(seed), "workers": "8",
                                            "output": str(Path(tmp) / f"spirals{seed}.jsonl")})
            best_trace = []
            run_search(job, progress=lambda i, cand, pop: best_trace.append(pop.best().score))
            records = read_log(job.output).records
            init_best = max(r["val_acc"] for r in records if r["parent"] is None)
            final = max(r["val_acc"] for r in records)
            monotone = all(b >= a for a, b in zip(best_trace, best_trace[1:]))
            gain = final - init_best
            ok = monotone and gain >= 0.05 and len(records) == 500
            passed += ok
            lines.append(f"seed {seed}: {len(records)} evals, initial best {init_best:.3f} -> {final:.3f} "
                         f"(+{gain:.3f}){'' if monotone else ', best-so-far decreased'}")
    elapsed = time.perf_counter() - start
    ok = passed == len(seeds) and elapsed < 1800
    return ok, f"{passed}/{len(seeds)} seeds gain >= 0.05 [{'; '.join(lines)}], {elapsed:.0f}s (< 1800s)"


def criterion_7():
    with tempfile.TemporaryDirectory() as tmp:
        job = SearchJob(train=FAST_TRAIN, task=FAST_TASK, budget=10, workers=2, output=f"{tmp}/log.jsonl")
        pop, _ = run_search(job)
        k = 5
        entries = rerun_top(pop, job, k=k, repeats=5)
    worst = 0.0
    for e in entries:
        for values, mean, std in ((e.val_accs, e.val_mean, e.val_std), (e.test_accs, e.test_mean, e.test_std)):
            worst = max(worst, abs(mean - float(np.mean(values))), abs(std - float(np.std(values))))
    shape_ok = len(entries) == k and all(len(e.val_accs) == len(e.test_accs) == 5 for e in entries)
    return shape_ok and worst <= 1e-12, f"{len(entries)} entries x 5 reruns, mean/std deviation {worst:.1e} (<= 1e-12)"


def _reference_parse(path):
    """Independent reading of a log: every complete JSON line after the header."""
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n")
    complete, tail = lines[:-1], lines[-1]
    records, bad = [], []
    for i, line in enumerate(complete[1:], start=2):
        try:
            records.append(json.loads(line))
        except ValueError:
            bad.append(i)
    return records, bad, tail


def criterion_8():
    with tempfile.TemporaryDirectory() as tmp:
        log = Path(tmp) / "killed.jsonl"
        args = [sys.executable, "-m", "evograd.cli", "search", "--budget", "3000", "--workers", "4",
                "--output", str(log), "--set", "train.epochs=2", "--set", "train.hidden=8",
                "--set", "task.n_train=128", "--set", "task.n_val=64", "--set", "task.n_test=64"]
        env = dict(os.environ, PYTHONPATH=str(ROOT / "src") + os.pathsep + os.environ.get("PYTHONPATH", ""))
        proc = subprocess.Popen(args, env=env, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        deadline = time.time() + 300
        while time.time() < deadline:
            if log.exists() and log.read_bytes().count(b"\n") >= 101:
                break
            time.sleep(0.05)
        proc.send_signal(signal.SIGKILL)
        proc.wait()

        reference, bad_lines, tail = _reference_parse(log)
        contents = read_log(log)
        job = load_job(None, {"budget": "3000", "workers": "4", "output": str(log), "train.epochs": "2",
                              "train.hidden": "8", "task.n_train": "128", "task.n_val": "64", "task.n_test": "64"})
        pop, next_iter = resume(log, job)
        expected: dict[str, tuple[float, int]] = {}
        for rec in reference:
            acc, n = expected.get(rec["key"], (-1.0, 0))
            expected[rec["key"]] = (max(acc, rec["val_acc"]), n + 1)
        got = {c.key: (c.fitness.val_acc, c.encounters) for c in pop}
        identical = got == expected and pop.snapshot() == population_from_records(reference).snapshot()
        lost = len(reference) - len(contents.records)

        # The budget counts mutation children; the first 3 records are the seeded builtins.
        run_search(replace(job, budget=len(reference) - 3 + 20), resume_log=True)
        after = read_log(log)
        iters = [r["iter"] for r in after.records]
        continued = (validate_log(log) == [] and after.skipped == 0
                     and iters == list(range(len(reference) + 20)))
    ok = len(reference) >= 100 and not bad_lines and lost == 0 and identical and continued
    partial = "a partial final line" if tail else "no partial line"
    return ok, (f"killed after {len(reference)} records ({partial}); {len(bad_lines)} corrupt complete lines, "
                f"{lost} records lost; resumed population identical to reference parse: {identical}; "
                f"continued log valid: {continued} ({len(after.records)} records)")


def criterion_9():
    with tempfile.TemporaryDirectory() as tmp:
        job = SearchJob(train=FAST_TRAIN, task=FAST_TASK, budget=50, workers=1, output=f"{tmp}/a.jsonl", seed=9)
        run_search(job)
        first = _strip_ts(job.output)
        os.remove(job.output)
        run_search(job)
        second = _strip_ts(job.output)
    same = first == second
    return same, f"two single-worker runs with seed 9: {len(first) - 1} records each, identical modulo ts: {same}"


def criterion_10():
    total, peak = 1000, 0.1
    values = {
        "step 0": (lr_at(Schedule.COSINE_WARMUP, 0, total, peak), 0.0),
        "10% mark": (lr_at(Schedule.COSINE_WARMUP, 100, total, peak), peak),
        "end": (lr_at(Schedule.COSINE_WARMUP, total, total, peak), 0.0),
    }
    worst = max(abs(got - want) for got, want in values.values())
    parts = ", ".join(f"{k} {v[0]:.3g}" for k, v in values.items())
    return worst <= 1e-12 and not math.isnan(worst), f"{parts}; max deviation {worst:.1e} (<= 1e-12)"


CRITERIA = [
    (1, "DSL fidelity", criterion_1),
    (2, "gradient-oracle equivalence", criterion_2),
    (3, "trainability ladder", criterion_3),
    (4, "mutation soundness", criterion_4),
    (5, "selection statistics", criterion_5),
    (6, "search efficacy", criterion_6),
    (7, "protocol fidelity", criterion_7),
    (8, "persistence", criterion_8),
    (9, "determinism", criterion_9),
    (10, "schedule correctness", criterion_10),
]


@pytest.mark.parametrize(
    "number, title, check",
    [pytest.param(*c, id=f"criterion_{c[0]}", marks=[pytest.mark.slow] if c[0] == 6 else []) for c in CRITERIA],
)
def test_criterion(number, title, check, capsys):
    passed, detail = check()
    with capsys.disabled():
        print()
        _report(number, title, passed, detail)
    assert passed, detail


if __name__ == "__main__":
    results = []
    for number, title, check in CRITERIA:
        passed, detail = check()
        _report(number, title, passed, detail)
        results.append(passed)
    print(f"{sum(results)}/{len(results)} criteria passed")
    sys.exit(0 if all(results) else 1)
