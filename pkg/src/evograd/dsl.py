"""Update-equation language: data model, text format, sampling and shape checking.

An equation is a chain of 1 to 3 steps. Each step computes
``f(u1(op1), u2(op2))``; from the second step on, ``op1`` is the previous
step's result (``prev``). The final result replaces the backward signal at a
hidden layer's pre-activation.

Text form::

    keep_left(ident(g), ident(g))
    mul_elem(mnorm_fro(g), clip[1.0](h)) |> add(ident(prev), scale[0.5](fa.rmean))
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Union

import numpy as np

Param = Union[float, str, None]


class Operand(enum.Enum):
    W = "w"
    SGN_W = "sgn_w"
    R = "r"
    S = "s"
    R_L = "r_l"
    H_PRE = "h_pre"
    H = "h"
    H_PRE_NEXT = "h_pre_next"
    B_L = "b_l"
    B_NEXT = "b_next"
    GRAD_H = "grad_h"
    GRAD_HPRE = "g"
    FA = "fa"
    FA_ACT = "fa_act"
    DFA = "dfa"
    DFA_ACT = "dfa_act"
    PREV = "prev"


class Stat(enum.Enum):
    RAW = ""
    RUN_MEAN = "rmean"
    RUN_STD = "rstd"
    RUN_NORM = "rnorm"


class UnaryTag(enum.Enum):
    IDENT = "ident"
    TRANSPOSE = "transpose"
    RECIP = "recip"
    ABS = "abs"
    NEG = "neg"
    GT0 = "gt0"
    RELU = "relu"
    SIGN = "sign"
    SQRT_ABS = "sqrt_abs"
    SIGN_SQRT = "sign_sqrt"
    SQUARE = "square"
    SIGN_SQUARE = "sign_square"
    CUBE = "cube"
    SCALE = "scale"
    SHIFT = "shift"
    ADD_NOISE = "add_noise"
    MUL_NOISE = "mul_noise"
    DROPOUT = "dropout"
    CLIP = "clip"
    VNORM = "vnorm"
    CNORM = "cnorm"
    RNORM = "rnorm"
    MNORM = "mnorm"
    RUN_NORMALIZE = "run_norm"


class Binary(enum.Enum):
    ADD = "add"
    SUB = "sub"
    MUL_ELEM = "mul_elem"
    DIV_ELEM = "div_elem"
    MATMUL = "matmul"
    KEEP_LEFT = "keep_left"
    MIN = "min"
    MAX = "max"


COMMUTATIVE = frozenset({Binary.ADD, Binary.MUL_ELEM, Binary.MIN, Binary.MAX})

# Legal parameters. Bracketed tags take a number (`clip[0.1]`); norm tags
# take a suffix (`vnorm_2`, `mnorm_fro`).
BRACKET_PARAMS: dict[UnaryTag, tuple[float, ...]] = {
    UnaryTag.SCALE: (-2.0, -1.0, -0.5, 0.5, 2.0),
    UnaryTag.SHIFT: (-10.0, -2.0, -1.0, -0.5, -0.1, -0.01, 0.01, 0.1, 0.5, 1.0, 2.0, 10.0),
    UnaryTag.ADD_NOISE: (0.01, 0.1, 0.5, 1.0),
    UnaryTag.MUL_NOISE: (0.01, 0.1, 0.5, 1.0),
    UnaryTag.DROPOUT: (0.01, 0.1, 0.3),
    UnaryTag.CLIP: (0.01, 0.1, 0.5, 1.0),
}
VECTOR_ORDERS = ("0", "1", "2", "ninf", "inf")
SUFFIX_PARAMS: dict[UnaryTag, tuple[str, ...]] = {
    UnaryTag.VNORM: VECTOR_ORDERS,
    UnaryTag.CNORM: VECTOR_ORDERS,
    UnaryTag.RNORM: VECTOR_ORDERS,
    UnaryTag.MNORM: ("fro", "1", "ninf", "inf"),
}


def legal_params(tag: UnaryTag) -> tuple:
    """Parameter values allowed for ``tag``; ``(None,)`` for plain unaries."""
    if tag in BRACKET_PARAMS:
        return BRACKET_PARAMS[tag]
    if tag in SUFFIX_PARAMS:
        return SUFFIX_PARAMS[tag]
    return (None,)


class EquationError(ValueError):
    """Structurally invalid equation."""


class DSLSyntaxError(EquationError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}")


class ShapeError(EquationError):
    def __init__(self, message: str, step: int | None = None):
        self.step = step
        where = f"step {step}: " if step is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class Leaf:
    kind: Operand
    stat: Stat = Stat.RAW

    def __post_init__(self):
        if self.kind is Operand.PREV and self.stat is not Stat.RAW:
            raise EquationError("running-statistic variants are not allowed on prev")

    def __str__(self) -> str:
        if self.stat is Stat.RAW:
            return self.kind.value
        return f"{self.kind.value}.{self.stat.value}"


@dataclass(frozen=True)
class Unary:
    tag: UnaryTag
    param: Param = None

    def __post_init__(self):
        param = self.param
        if self.tag in BRACKET_PARAMS and param is not None and not isinstance(param, str):
            param = float(param)
            object.__setattr__(self, "param", param)
        if param not in legal_params(self.tag):
            raise EquationError(f"parameter {param!r} outside legal set for {self.tag.value}")

    def __str__(self) -> str:
        if self.tag in BRACKET_PARAMS:
            return f"{self.tag.value}[{self.param!r}]"
        if self.tag in SUFFIX_PARAMS:
            return f"{self.tag.value}_{self.param}"
        return self.tag.value


@dataclass(frozen=True)
class Step:
    op1: Leaf
    u1: Unary
    op2: Leaf
    u2: Unary
    f: Binary

    def __str__(self) -> str:
        return f"{self.f.value}({self.u1}({self.op1}), {self.u2}({self.op2}))"


@dataclass(frozen=True)
class Equation:
    steps: tuple[Step, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not 1 <= len(self.steps) <= 3:
            raise EquationError(f"equation must have 1 to 3 steps, got {len(self.steps)}")
        for s, step in enumerate(self.steps):
            if step.op2.kind is Operand.PREV:
                raise EquationError(f"step {s + 1}: prev is only allowed as the first operand")
            if s == 0 and step.op1.kind is Operand.PREV:
                raise EquationError("PREV not allowed in step 1")
            if s > 0 and step.op1.kind is not Operand.PREV:
                raise EquationError(f"step {s + 1}: first operand must be prev")

    def __str__(self) -> str:
        return serialize_equation(self)


# -- text format -----------------------------------------------------------

_UNARY_NAMES: dict[str, Unary | UnaryTag] = {}
for _tag in UnaryTag:
    if _tag in SUFFIX_PARAMS:
        for _p in SUFFIX_PARAMS[_tag]:
            _UNARY_NAMES[f"{_tag.value}_{_p}"] = Unary(_tag, _p)
    elif _tag in BRACKET_PARAMS:
        _UNARY_NAMES[_tag.value] = _tag
    else:
        _UNARY_NAMES[_tag.value] = Unary(_tag)
_OPERANDS = {op.value: op for op in Operand}
_STATS = {st.value: st for st in Stat if st is not Stat.RAW}
_BINARIES = {b.value: b for b in Binary}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<pipe>\|>)|(?P<num>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)|(?P<punct>[(),\[\].]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise DSLSyntaxError(f"unexpected character {text[start]!r}", start, text)
        kind = m.lastgroup
        value = m.group(kind)
        tokens.append((kind, value, m.start(kind)))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind: str, value: str | None = None, expected: str | None = None):
        tok_kind, tok_value, pos = self.tokens[self.i]
        if tok_kind != kind or (value is not None and tok_value != value):
            want = expected or repr(value if value is not None else kind)
            got = "end of input" if tok_kind == "end" else repr(tok_value)
            raise DSLSyntaxError(f"expected {want}, got {got}", pos, self.text)
        self.i += 1
        return tok_value, pos

    def equation(self) -> Equation:
        steps = [self.step(0)]
        while self.peek()[0] == "pipe":
            self.i += 1
            steps.append(self.step(len(steps)))
        self.take("end", expected="'|>' or end of input")
        if len(steps) > 3:
            raise DSLSyntaxError("at most 3 steps allowed", self.tokens[-1][2], self.text)
        return Equation(tuple(steps))

    def step(self, index: int) -> Step:
        name, pos = self.take("name", expected="binary function")
        if name not in _BINARIES:
            raise DSLSyntaxError(f"unknown binary function {name!r}", pos, self.text)
        self.take("punct", "(")
        u1, op1, op1_pos = self.application()
        self.take("punct", ",")
        u2, op2, op2_pos = self.application()
        self.take("punct", ")")
        if op1.kind is Operand.PREV and index == 0:
            raise DSLSyntaxError("PREV not allowed in step 1", op1_pos, self.text)
        if op1.kind is not Operand.PREV and index > 0:
            raise DSLSyntaxError(f"step {index + 1} must use prev as its first operand", op1_pos, self.text)
        if op2.kind is Operand.PREV:
            raise DSLSyntaxError("prev is only allowed as the first operand", op2_pos, self.text)
        return Step(op1, u1, op2, u2, _BINARIES[name])

    def application(self) -> tuple[Unary, Leaf, int]:
        name, pos = self.take("name", expected="unary function")
        entry = _UNARY_NAMES.get(name)
        if entry is None:
            raise DSLSyntaxError(f"unknown unary function {name!r}", pos, self.text)
        if isinstance(entry, UnaryTag):
            self.take("punct", "[", expected=f"'[' parameter for {name}")
            num, num_pos = self.take("num", expected="number")
            value = float(num)
            if value not in BRACKET_PARAMS[entry]:
                raise DSLSyntaxError(
                    f"parameter {num} outside legal set for {name} {BRACKET_PARAMS[entry]}", num_pos, self.text
                )
            self.take("punct", "]")
            unary = Unary(entry, value)
        else:
            unary = entry
        self.take("punct", "(")
        leaf, leaf_pos = self.leaf()
        self.take("punct", ")")
        return unary, leaf, leaf_pos

    def leaf(self) -> tuple[Leaf, int]:
        name, pos = self.take("name", expected="operand")
        if name not in _OPERANDS:
            raise DSLSyntaxError(f"unknown operand {name!r}", pos, self.text)
        kind = _OPERANDS[name]
        stat = Stat.RAW
        tok_kind, tok_value, _ = self.peek()
        if tok_kind == "punct" and tok_value == ".":
            self.i += 1
            sname, spos = self.take("name", expected="rmean, rstd or rnorm")
            if sname not in _STATS:
                raise DSLSyntaxError(f"unknown statistic {sname!r}", spos, self.text)
            if kind is Operand.PREV:
                raise DSLSyntaxError("statistic variants are not allowed on prev", spos, self.text)
            stat = _STATS[sname]
        return Leaf(kind, stat), pos


def parse_equation(text: str) -> Equation:
    """Parse the text form. Raises :class:`DSLSyntaxError` with a position."""
    return _Parser(text).equation()


def serialize_equation(e: Equation) -> str:
    return " |> ".join(str(step) for step in e.steps)


def _normalized_step(step: Step) -> Step:
    if step.f in COMMUTATIVE and step.op1.kind is not Operand.PREV:
        left, right = f"{step.u1}({step.op1})", f"{step.u2}({step.op2})"
        if right < left:
            return Step(step.op2, step.u2, step.op1, step.u1, step.f)
    return step


def canonical_key(e: Equation) -> str:
    """Dedup key: the text form with commutative leaf-only steps ordered."""
    return " |> ".join(str(_normalized_step(s)) for s in e.steps)


# -- shapes ----------------------------------------------------------------

Shape = tuple


@dataclass(frozen=True)
class ShapeEnv:
    """Dimension values for one layer; symbolic names by default.

    Distinct symbols never compare equal, so anything accepted symbolically
    is feasible for every concrete assignment of widths.
    """

    batch: object = "B"
    n_prev: object = "n_{i-1}"
    n: object = "n_i"
    n_next: object = "n_{i+1}"
    n_out: object = "n_L"

    def operand_shape(self, leaf: Leaf) -> Shape:
        if leaf.stat in (Stat.RUN_MEAN, Stat.RUN_STD):
            return (1, 1)
        k = leaf.kind
        if k in (Operand.W, Operand.SGN_W, Operand.R, Operand.S):
            return (self.n_prev, self.n)
        if k is Operand.R_L:
            return (self.n_out, self.n)
        if k in (Operand.H_PRE_NEXT, Operand.B_NEXT):
            return (self.batch, self.n_next)
        if k is Operand.B_L:
            return (self.batch, self.n_out)
        if k is Operand.PREV:
            raise ShapeError("prev has no fixed shape")
        return (self.batch, self.n)

    @property
    def target(self) -> Shape:
        return (self.batch, self.n)


def format_shape(shape: Shape) -> str:
    return "×".join(str(d) for d in shape)


def _unary_shape(u: Unary, shape: Shape) -> Shape:
    if u.tag is UnaryTag.TRANSPOSE:
        return (shape[1], shape[0])
    return shape


def _binary_shape(f: Binary, a: Shape, b: Shape, step: int) -> Shape:
    if f is Binary.KEEP_LEFT:
        return a
    if f is Binary.MATMUL:
        if a[1] != b[0]:
            raise ShapeError(
                f"matmul inner dimensions differ ({format_shape(a)} · {format_shape(b)})", step
            )
        return (a[0], b[1])
    if a == b or b == (1, 1):
        return a
    if a == (1, 1):
        return b
    raise ShapeError(f"{f.value} shape mismatch ({format_shape(a)} vs {format_shape(b)})", step)


def check_feasible(e: Equation, env: ShapeEnv | None = None) -> Shape:
    """Infer the result shape; raise :class:`ShapeError` if infeasible."""
    env = env or ShapeEnv()
    current = None
    for s, step in enumerate(e.steps, start=1):
        a = current if step.op1.kind is Operand.PREV else env.operand_shape(step.op1)
        a = _unary_shape(step.u1, a)
        b = _unary_shape(step.u2, env.operand_shape(step.op2))
        current = _binary_shape(step.f, a, b, s)
    if current != env.target:
        raise ShapeError(
            f"final shape {format_shape(current)} does not match {format_shape(env.target)}"
        )
    return current


def is_feasible(e: Equation, env: ShapeEnv | None = None) -> bool:
    try:
        check_feasible(e, env)
    except ShapeError:
        return False
    return True


# -- vocabularies and sampling ---------------------------------------------

LEAF_OPERANDS = tuple(op for op in Operand if op is not Operand.PREV)
ALL_UNARIES = tuple(Unary(tag, p) for tag in UnaryTag for p in legal_params(tag))


@dataclass(frozen=True)
class Vocab:
    """Allowed components per category.

    ``unaries`` lists fully parameterized unaries; sampling picks a tag
    uniformly and then one of that tag's listed parameters.
    """

    operands: tuple[Operand, ...] = LEAF_OPERANDS
    stats: tuple[Stat, ...] = tuple(Stat)
    unaries: tuple[Unary, ...] = ALL_UNARIES
    binaries: tuple[Binary, ...] = tuple(Binary)
    steps: tuple[int, ...] = (1, 2, 3)
    _by_tag: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("operands", "stats", "unaries", "binaries", "steps"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
            if not getattr(self, name):
                raise ValueError(f"vocabulary category {name!r} is empty")
        if Operand.PREV in self.operands:
            raise ValueError("prev is implicit and cannot be listed as an operand")
        if any(s not in (1, 2, 3) for s in self.steps):
            raise ValueError("step counts must be in 1..3")
        by_tag: dict[UnaryTag, list] = {}
        for u in dict.fromkeys(self.unaries):
            by_tag.setdefault(u.tag, []).append(u.param)
        object.__setattr__(self, "_by_tag", {t: tuple(ps) for t, ps in by_tag.items()})

    @property
    def unary_tags(self) -> tuple[UnaryTag, ...]:
        return tuple(self._by_tag)

    def params_for(self, tag: UnaryTag) -> tuple:
        return self._by_tag[tag]

    def to_dict(self) -> dict:
        return {
            "operands": [o.value for o in self.operands],
            "stats": [s.name.lower() for s in self.stats],
            "unaries": [str(u) for u in self.unaries],
            "binaries": [b.value for b in self.binaries],
            "steps": list(self.steps),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        kw = {}
        if "operands" in d:
            kw["operands"] = tuple(_OPERANDS[o] for o in d["operands"])
        if "stats" in d:
            kw["stats"] = tuple(Stat[s.upper()] for s in d["stats"])
        if "unaries" in d:
            kw["unaries"] = tuple(u for name in d["unaries"] for u in parse_unaries(name))
        if "binaries" in d:
            kw["binaries"] = tuple(_BINARIES[b] for b in d["binaries"])
        if "steps" in d:
            kw["steps"] = tuple(int(s) for s in d["steps"])
        return cls(**kw)


def parse_unaries(name: str) -> list[Unary]:
    """Resolve a unary spelling; a bare parameterized tag expands to all its values.

    >>> [str(u) for u in parse_unaries("dropout")]
    ['dropout[0.01]', 'dropout[0.1]', 'dropout[0.3]']
    """
    name = name.strip()
    m = re.fullmatch(r"([a-z_]+)\[([^\]]+)\]", name)
    if m:
        return [Unary(UnaryTag(m.group(1)), float(m.group(2)))]
    if name in SUFFIX_PARAMS_BY_VALUE:
        tag = SUFFIX_PARAMS_BY_VALUE[name]
        return [Unary(tag, p) for p in SUFFIX_PARAMS[tag]]
    entry = _UNARY_NAMES.get(name)
    if entry is None:
        raise ValueError(f"unknown unary {name!r}")
    if isinstance(entry, UnaryTag):
        return [Unary(entry, p) for p in BRACKET_PARAMS[entry]]
    return [entry]


SUFFIX_PARAMS_BY_VALUE = {tag.value: tag for tag in SUFFIX_PARAMS}


def _choice(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def sample_leaf(rng: np.random.Generator, vocab: Vocab) -> Leaf:
    return Leaf(_choice(rng, vocab.operands), _choice(rng, vocab.stats))


def sample_unary(rng: np.random.Generator, vocab: Vocab) -> Unary:
    tag = _choice(rng, vocab.unary_tags)
    return Unary(tag, _choice(rng, vocab.params_for(tag)))


def _sample_step(rng: np.random.Generator, vocab: Vocab, first: bool) -> Step:
    op1 = sample_leaf(rng, vocab) if first else Leaf(Operand.PREV)
    u1 = sample_unary(rng, vocab)
    op2 = sample_leaf(rng, vocab)
    u2 = sample_unary(rng, vocab)
    return Step(op1, u1, op2, u2, _choice(rng, vocab.binaries))


class InfeasibleVocabError(RuntimeError):
    pass


def random_equation(
    rng: np.random.Generator,
    vocab: Vocab | None = None,
    steps: int = 1,
    env: ShapeEnv | None = None,
    retries: int = 1000,
) -> Equation:
    """Sample slots uniformly, resampling whole equations until feasible."""
    vocab = vocab or Vocab()
    if not 1 <= steps <= 3:
        raise ValueError("steps must be in 1..3")
    for _ in range(retries):
        e = Equation(tuple(_sample_step(rng, vocab, s == 0) for s in range(steps)))
        if is_feasible(e, env):
            return e
    raise InfeasibleVocabError(f"no feasible equation in vocab after {retries} attempts")


# Flat slot addressing used by mutation: (step index, slot name).
SLOT_NAMES = ("op1", "u1", "op2", "u2", "f")


def slots(e: Equation) -> list[tuple[int, str]]:
    """Mutable slots; the forced ``prev`` operand of later steps is excluded."""
    out = []
    for s in range(len(e.steps)):
        for name in SLOT_NAMES:
            if s > 0 and name == "op1":
                continue
            out.append((s, name))
    return out


def slot_diff(a: Equation, b: Equation) -> int:
    """Number of slots that differ between two equations of equal length."""
    if len(a.steps) != len(b.steps):
        raise ValueError("equations have different step counts")
    return sum(
        getattr(sa, name) != getattr(sb, name)
        for sa, sb in zip(a.steps, b.steps)
        for name in SLOT_NAMES
    )

