"""Command-line entry point: ``evograd {search,train,eval,report,baselines}``."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from dataclasses import replace

from .dsl import EquationError, check_feasible, format_shape, parse_equation
from .search import (
    JobMismatchError,
    job_from_dict,
    load_job,
    population_from_records,
    read_log,
    rerun_top,
    run_search,
    write_report,
)
from .tasks import TaskSpec, generate
from .trainer import TrainConfig, builtin_equations, train_and_evaluate

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", default="blobs", help="blobs, two_moons, spirals")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--optimizer", default="sgd", choices=["sgd", "momentum"])
    p.add_argument("--schedule", default="constant", choices=["constant", "cosine_warmup"])
    p.add_argument("--hidden", default="32,32", help="comma-separated hidden widths")
    p.add_argument("--activation", default="relu", choices=["relu", "tanh"])
    p.add_argument("--seed", type=int, default=0)


def _train_config(args) -> TrainConfig:
    hidden = tuple(int(h) for h in args.hidden.split(",") if h.strip())
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, optimizer=args.optimizer,
        schedule=args.schedule, hidden=hidden, activation=args.activation, seed=args.seed,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="evograd", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("search", help="run an evolutionary search")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--budget", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--output")
    p.add_argument("--resume", action="store_true", help="continue an existing log")

    p = sub.add_parser("train", help="train once with an equation and print its fitness")
    p.add_argument("--equation", required=True)
    _add_train_flags(p)

    p = sub.add_parser("eval", help="parse and shape-check an equation")
    p.add_argument("--equation", required=True)

    p = sub.add_parser("report", help="rerun the top equations of a search log")
    p.add_argument("--log", required=True)
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default="report.csv")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("baselines", help="train the builtin equations and compare")
    _add_train_flags(p)
    return parser


def _parse_equation_or_usage(text: str):
    try:
        return parse_equation(text)
    except EquationError as exc:
        raise UsageError(f"cannot parse equation: {exc}") from exc


def cmd_eval(args) -> int:
    e = _parse_equation_or_usage(args.equation)
    try:
        shape = check_feasible(e)
    except EquationError as exc:
        print(str(e))
        print(f"infeasible: {exc}")
        return EXIT_RUNTIME
    print(str(e))
    print(f"feasible, shape {format_shape(shape)}")
    return EXIT_OK


def cmd_train(args) -> int:
    e = _parse_equation_or_usage(args.equation)
    data = generate(TaskSpec(args.task, seed=args.seed))
    rec = train_and_evaluate(e, data, _train_config(args))
    print(f"equation  {e}")
    print(f"val_acc   {rec.val_acc:.4f}")
    print(f"epochs    {rec.epochs}")
    print(f"failed    {rec.failed}{' (' + rec.reason + ')' if rec.reason else ''}")
    print(f"wall      {rec.wall:.2f}s")
    return EXIT_OK


def cmd_baselines(args) -> int:
    data = generate(TaskSpec(args.task, seed=args.seed))
    config = replace(_train_config(args), early_stop=False)
    print(f"{'equation':<20} {'val_acc':>8} {'test_acc':>8}  text")
    for name, e in builtin_equations().items():
        rec = train_and_evaluate(e, data, config)
        full = train_and_evaluate(e, data, config, full_train=True)
        print(f"{name:<20} {rec.val_acc:>8.4f} {full.test_acc or 0.0:>8.4f}  {e}")
    return EXIT_OK


def cmd_search(args) -> int:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag in ("budget", "workers", "seed", "output"):
        value = getattr(args, flag)
        if value is not None:
            overrides[flag] = str(value)
    try:
        job = load_job(args.config, overrides)
    except (ValueError, KeyError, OSError) as exc:
        raise UsageError(f"bad configuration: {exc}") from exc

    stop = threading.Event()

    def on_signal(signum, frame):
        logging.getLogger(__name__).warning("signal %d: draining in-flight evaluations", signum)
        stop.set()

    previous = signal.signal(signal.SIGINT, on_signal)
    signal.signal(signal.SIGTERM, on_signal)

    def progress(i, cand, pop):
        best = pop.best()
        logging.getLogger(__name__).info("iter %d val_acc %.4f best %.4f  %s", i, cand.fitness.val_acc,
                                         best.score, cand.equation)

    try:
        pop, path = run_search(job, resume_log=args.resume, stop=stop, progress=progress)
    except JobMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        signal.signal(signal.SIGINT, previous)
    best = pop.best()
    print(f"log       {path}")
    print(f"evaluated {len(pop)}")
    if best is not None:
        print(f"best      {best.score:.4f}  {best.equation}")
    return EXIT_OK


def cmd_report(args) -> int:
    contents = read_log(args.log)
    if contents.header is None:
        print(f"error: {args.log} has no header", file=sys.stderr)
        return EXIT_RUNTIME
    job = job_from_dict(contents.header["job"])
    pop = population_from_records(contents.records)
    entries = rerun_top(pop, job, k=args.k, repeats=args.repeats, workers=args.workers)
    csv_path, json_path = write_report(entries, args.out)
    for rank, e in enumerate(entries, start=1):
        flag = "  FAILED" if e.failed else ""
        print(f"{rank:>3} val {e.val_mean:.4f}±{e.val_std:.4f} test {e.test_mean:.4f}±{e.test_std:.4f}"
              f"  {e.equation}{flag}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


COMMANDS = {"search": cmd_search, "train": cmd_train, "eval": cmd_eval, "report": cmd_report,
            "baselines": cmd_baselines}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
