"""Population, parent selection and slot mutation for the equation search."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dsl import (
    Equation,
    EquationError,
    Leaf,
    ShapeError,
    Unary,
    Vocab,
    canonical_key,
    check_feasible,
    is_feasible,
    parse_equation,
    random_equation,
    slots,
)
from .trainer import FitnessRecord, builtin_equations


@dataclass(frozen=True)
class EvoConfig:
    p: float = 0.7
    n_elite: int = 1000
    # Categorical distribution over the number of slot swaps per mutation.
    k_distribution: dict[int, float] = field(default_factory=lambda: {1: 1.0})
    retries: int = 100
    init: str = "seeded"
    init_count: int = 100
    # Equation texts for seeded init; empty means the three builtins.
    seeds: tuple[str, ...] = ()
    vocab: Vocab = field(default_factory=Vocab)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.n_elite < 1:
            raise ValueError("n_elite must be at least 1")
        if any(k < 1 for k in self.k_distribution) or abs(sum(self.k_distribution.values()) - 1.0) > 1e-9:
            raise ValueError("k_distribution must be over k >= 1 and sum to 1")
        if self.init not in ("seeded", "random"):
            raise ValueError("init must be 'seeded' or 'random'")
        object.__setattr__(self, "seeds", tuple(self.seeds))

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "n_elite": self.n_elite,
            "k_distribution": {str(k): v for k, v in sorted(self.k_distribution.items())},
            "retries": self.retries,
            "init": self.init,
            "init_count": self.init_count,
            "seeds": list(self.seeds),
            "vocab": self.vocab.to_dict(),
        }


@dataclass
class Candidate:
    equation: Equation
    key: str
    fitness: FitnessRecord | None = None
    generation: int = 0
    parent: str | None = None
    encounters: int = 1

    @classmethod
    def of(cls, equation: Equation, **kw) -> "Candidate":
        return cls(equation, canonical_key(equation), **kw)

    @property
    def score(self) -> float:
        return self.fitness.val_acc if self.fitness is not None else float("-inf")


class Population:
    """Candidates keyed by canonical key, with a cached fitness ranking."""

    def __init__(self, candidates=()):
        self.candidates: dict[str, Candidate] = {}
        self._order: dict[str, int] = {}
        self._ranked: list[Candidate] | None = None
        for c in candidates:
            self.add(c)

    def __len__(self) -> int:
        return len(self.candidates)

    def __contains__(self, key: str) -> bool:
        return key in self.candidates

    def __iter__(self):
        return iter(self.candidates.values())

    def add(self, candidate: Candidate) -> None:
        if candidate.key in self.candidates:
            raise KeyError(f"duplicate candidate {candidate.key}")
        self._order[candidate.key] = len(self._order)
        self.candidates[candidate.key] = candidate
        self._ranked = None

    def ranked(self) -> list[Candidate]:
        """Evaluated candidates, best first; ties go to the earlier generation."""
        if self._ranked is None:
            evaluated = [c for c in self.candidates.values() if c.fitness is not None]
            self._ranked = sorted(evaluated, key=lambda c: (-c.score, c.generation, self._order[c.key]))
        return self._ranked

    def elites(self, n: int) -> list[Candidate]:
        return self.ranked()[:n]

    def best(self) -> Candidate | None:
        ranked = self.ranked()
        return ranked[0] if ranked else None

    def snapshot(self) -> dict:
        """Comparable view of the population (no wall-clock fields)."""
        return {
            k: (str(c.equation), c.fitness, c.generation, c.parent, c.encounters)
            for k, c in sorted(self.candidates.items())
        }


def init_population(config: EvoConfig, rng: np.random.Generator) -> Population:
    """Unevaluated starting population, either seeded equations or random samples."""
    pop = Population()
    if config.init == "seeded":
        if config.seeds:
            equations = [parse_equation(text) for text in config.seeds]
        else:
            equations = list(builtin_equations().values())
        for e in equations:
            try:
                check_feasible(e)
            except ShapeError as exc:
                raise ValueError(f"seed equation {e} is infeasible: {exc}") from exc
            c = Candidate.of(e)
            if c.key not in pop:
                pop.add(c)
        return pop
    vocab = config.vocab
    attempts = 0
    while len(pop) < config.init_count:
        attempts += 1
        if attempts > 100 * config.init_count:
            raise RuntimeError("vocabulary too small for the requested random population")
        steps = vocab.steps[int(rng.integers(len(vocab.steps)))]
        c = Candidate.of(random_equation(rng, vocab, steps))
        if c.key not in pop:
            pop.add(c)
    return pop


def select_parent(pop: Population, rng: np.random.Generator, p: float = 0.7, n_elite: int = 1000) -> Candidate:
    """Uniform over the top ``n_elite`` with probability ``p``, else uniform over the rest."""
    ranked = pop.ranked()
    if not ranked:
        raise ValueError("no evaluated candidates to select from")
    elite, rest = ranked[:n_elite], ranked[n_elite:]
    use_elite = rng.random() < p
    pool = elite if (use_elite and elite) or not rest else rest
    return pool[int(rng.integers(len(pool)))]


def _alternatives(e: Equation, slot: tuple[int, str], vocab: Vocab) -> bool:
    """Whether the vocabulary offers a different value for this slot."""
    s, name = slot
    current = getattr(e.steps[s], name)
    if name == "f":
        return any(b != current for b in vocab.binaries)
    if name in ("u1", "u2"):
        if any(t != current.tag for t in vocab.unary_tags):
            return True
        return any(p != current.param for p in vocab.params_for(current.tag))
    return any(k != current.kind for k in vocab.operands) or any(st != current.stat for st in vocab.stats)


def _other(rng: np.random.Generator, options, current):
    options = [o for o in options if o != current]
    return options[int(rng.integers(len(options)))]


def _swap_unary(rng, current: Unary, vocab: Vocab) -> Unary:
    tags = vocab.unary_tags
    params = vocab.params_for(current.tag) if current.tag in tags else ()
    can_param = any(p != current.param for p in params)
    can_tag = any(t != current.tag for t in tags)
    if can_param and (not can_tag or rng.random() < 0.5):
        return Unary(current.tag, _other(rng, params, current.param))
    tag = _other(rng, tags, current.tag)
    ps = vocab.params_for(tag)
    return Unary(tag, ps[int(rng.integers(len(ps)))])


def _swap_leaf(rng, current: Leaf, vocab: Vocab) -> Leaf:
    can_stat = any(s != current.stat for s in vocab.stats)
    can_kind = any(k != current.kind for k in vocab.operands)
    if can_stat and (not can_kind or rng.random() < 0.5):
        return Leaf(current.kind, _other(rng, vocab.stats, current.stat))
    kind = _other(rng, vocab.operands, current.kind)
    return Leaf(kind, vocab.stats[int(rng.integers(len(vocab.stats)))])


def _swap(rng, e: Equation, slot: tuple[int, str], vocab: Vocab) -> Equation:
    s, name = slot
    step = e.steps[s]
    current = getattr(step, name)
    if name == "f":
        new = _other(rng, vocab.binaries, current)
    elif name in ("u1", "u2"):
        new = _swap_unary(rng, current, vocab)
    else:
        new = _swap_leaf(rng, current, vocab)
    steps = list(e.steps)
    steps[s] = replace(step, **{name: new})
    return Equation(tuple(steps))


def mutate(e: Equation, config: EvoConfig, rng: np.random.Generator) -> tuple[Equation, bool]:
    """Apply k single-slot swaps, restarting from ``e`` until the child is feasible.

    Returns ``(child, fell_back)``; after ``config.retries`` failed attempts
    the child is a fresh random equation and ``fell_back`` is True.
    """
    vocab = config.vocab
    ks = sorted(config.k_distribution)
    probs = np.array([config.k_distribution[k] for k in ks])
    mutable = [sl for sl in slots(e) if _alternatives(e, sl, vocab)]
    if mutable:
        for _ in range(config.retries):
            k = ks[int(rng.choice(len(ks), p=probs))]
            child = e
            for _ in range(k):
                options = [sl for sl in slots(child) if _alternatives(child, sl, vocab)]
                slot = options[int(rng.integers(len(options)))]
                try:
                    child = _swap(rng, child, slot, vocab)
                except EquationError:
                    child = None
                    break
            if child is not None and child != e and is_feasible(child):
                return child, False
    steps = vocab.steps[int(rng.integers(len(vocab.steps)))]
    return random_equation(rng, vocab, steps), True


def record_result(pop: Population, candidate: Candidate) -> Population:
    """Insert an evaluated candidate; a duplicate key keeps the better fitness."""
    if candidate.fitness is None:
        raise ValueError("candidate has no fitness record")
    existing = pop.candidates.get(candidate.key)
    if existing is None:
        pop.add(candidate)
        return pop
    if existing.fitness is None:
        existing.fitness = candidate.fitness
        existing.generation = candidate.generation
        existing.parent = candidate.parent
    else:
        existing.encounters += 1
        if candidate.fitness.val_acc > existing.fitness.val_acc:
            existing.fitness = candidate.fitness
    pop._ranked = None
    return pop


def top_k(pop: Population, k: int) -> list[Candidate]:
    if k < 1:
        raise ValueError("k must be at least 1")
    return pop.ranked()[:k]
