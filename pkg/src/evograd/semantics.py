"""Concrete evaluation of update equations on numpy matrices."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .dsl import Binary, Equation, Leaf, Operand, Stat, Unary, UnaryTag

DIV_EPS = 1e-8
NORM_EPS = 1e-12
VAR_EPS = 1e-8
DECAY = 0.9


class EvaluationError(ArithmeticError):
    """An equation produced a non-finite or mis-shaped backward signal."""


@dataclass(frozen=True)
class RunningStats:
    mean: float = 0.0
    var: float = 0.0
    initialized: bool = False
    decay: float = DECAY


def update_running_stats(stats: RunningStats, x: np.ndarray) -> RunningStats:
    """EMA of the mean and of the squared deviation from the updated mean.

    The first update adopts the batch statistics directly.
    """
    batch_mean = float(np.mean(x))
    if not stats.initialized:
        return replace(stats, mean=batch_mean, var=float(np.mean((x - batch_mean) ** 2)), initialized=True)
    r = stats.decay
    mean = r * stats.mean + (1.0 - r) * batch_mean
    var = r * stats.var + (1.0 - r) * float(np.mean((x - mean) ** 2))
    return replace(stats, mean=mean, var=var)


def guard(x: np.ndarray) -> np.ndarray:
    """Push entries away from zero by DIV_EPS, keeping the sign (0 maps to +eps)."""
    return np.where(x >= 0, np.maximum(x, DIV_EPS), np.minimum(x, -DIV_EPS))


def _order(param: str):
    return {"ninf": -np.inf, "inf": np.inf, "fro": "fro"}.get(param) or int(param)


def _standardize(x: np.ndarray, stats: RunningStats) -> np.ndarray:
    return (x - stats.mean) / np.sqrt(stats.var + VAR_EPS)


def eval_unary(u: Unary, x: np.ndarray, rng: np.random.Generator, stats: RunningStats | None = None) -> np.ndarray:
    """Apply one unary function.

    ``stats`` feeds ``run_norm``; without it the batch's own statistics are used.
    """
    tag, p = u.tag, u.param
    if tag is UnaryTag.IDENT:
        return x
    if tag is UnaryTag.TRANSPOSE:
        return x.T
    if tag is UnaryTag.RECIP:
        return 1.0 / guard(x)
    if tag is UnaryTag.ABS:
        return np.abs(x)
    if tag is UnaryTag.NEG:
        return -x
    if tag is UnaryTag.GT0:
        return (x > 0).astype(np.float64)
    if tag is UnaryTag.RELU:
        return np.maximum(x, 0.0)
    if tag is UnaryTag.SIGN:
        return np.sign(x)
    if tag is UnaryTag.SQRT_ABS:
        return np.sqrt(np.abs(x))
    if tag is UnaryTag.SIGN_SQRT:
        return np.sign(x) * np.sqrt(np.abs(x))
    if tag is UnaryTag.SQUARE:
        return x * x
    if tag is UnaryTag.SIGN_SQUARE:
        return np.sign(x) * x * x
    if tag is UnaryTag.CUBE:
        return x * x * x
    if tag is UnaryTag.SCALE:
        return p * x
    if tag is UnaryTag.SHIFT:
        return x + p
    if tag is UnaryTag.ADD_NOISE:
        return x + p * rng.standard_normal(x.shape)
    if tag is UnaryTag.MUL_NOISE:
        return x * (1.0 + p * rng.standard_normal(x.shape))
    if tag is UnaryTag.DROPOUT:
        keep = rng.random(x.shape) >= p
        return np.where(keep, x / (1.0 - p), 0.0)
    if tag is UnaryTag.CLIP:
        return np.clip(x, -p, p)
    if tag is UnaryTag.VNORM:
        return x / (np.linalg.norm(x.ravel(), _order(p)) + NORM_EPS)
    if tag is UnaryTag.CNORM:
        return x / (np.linalg.norm(x, _order(p), axis=0, keepdims=True) + NORM_EPS)
    if tag is UnaryTag.RNORM:
        return x / (np.linalg.norm(x, _order(p), axis=1, keepdims=True) + NORM_EPS)
    if tag is UnaryTag.MNORM:
        return x / (np.linalg.norm(x, _order(p)) + NORM_EPS)
    if tag is UnaryTag.RUN_NORMALIZE:
        if stats is None:
            stats = update_running_stats(RunningStats(), x)
        return _standardize(x, stats)
    raise ValueError(f"unhandled unary {tag}")


def _elementwise_ok(x: np.ndarray, y: np.ndarray) -> bool:
    return x.shape == y.shape or x.shape == (1, 1) or y.shape == (1, 1)


def eval_binary(f: Binary, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if f is Binary.KEEP_LEFT:
        return x
    if f is Binary.MATMUL:
        if x.shape[1] != y.shape[0]:
            raise EvaluationError(f"matmul shape mismatch {x.shape} · {y.shape}")
        return x @ y
    if not _elementwise_ok(x, y):
        raise EvaluationError(f"{f.value} shape mismatch {x.shape} vs {y.shape}")
    if f is Binary.ADD:
        return x + y
    if f is Binary.SUB:
        return x - y
    if f is Binary.MUL_ELEM:
        return x * y
    if f is Binary.DIV_ELEM:
        return x / guard(y)
    if f is Binary.MIN:
        return np.minimum(x, y)
    if f is Binary.MAX:
        return np.maximum(x, y)
    raise ValueError(f"unhandled binary {f}")


def propagate(b_next: np.ndarray, w_next: np.ndarray, act_deriv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Chain-rule step through layer i+1: returns (grad wrt h_i, grad wrt h^p_i)."""
    grad_h = b_next @ w_next.T
    return grad_h, grad_h * act_deriv


@dataclass
class BackwardContext:
    """Operand values at one hidden layer during one backward pass.

    ``stats`` belongs to the training run (one dict per layer) and is updated
    in place by :func:`eval_equation`.
    """

    values: dict[Operand, np.ndarray]
    stats: dict[str, RunningStats] = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def build(
        cls,
        *,
        w: np.ndarray,
        r: np.ndarray,
        s: np.ndarray,
        r_l: np.ndarray,
        h_pre: np.ndarray,
        h: np.ndarray,
        h_pre_next: np.ndarray,
        b_l: np.ndarray,
        b_next: np.ndarray,
        w_next: np.ndarray,
        r_next: np.ndarray,
        act_deriv: np.ndarray,
        stats: dict[str, RunningStats] | None = None,
        rng: np.random.Generator | None = None,
    ) -> "BackwardContext":
        """Derive the propagated operands from layer-local quantities.

        ``w_next``/``r_next`` are the forward weight and fixed feedback matrix
        of layer i+1 (shape n_i×n_{i+1}).
        """
        grad_h, grad_hpre = propagate(b_next, w_next, act_deriv)
        fa = b_next @ r_next.T
        dfa = b_l @ r_l
        values = {
            Operand.W: w,
            Operand.SGN_W: np.sign(w),
            Operand.R: r,
            Operand.S: s,
            Operand.R_L: r_l,
            Operand.H_PRE: h_pre,
            Operand.H: h,
            Operand.H_PRE_NEXT: h_pre_next,
            Operand.B_L: b_l,
            Operand.B_NEXT: b_next,
            Operand.GRAD_H: grad_h,
            Operand.GRAD_HPRE: grad_hpre,
            Operand.FA: fa,
            Operand.FA_ACT: fa * act_deriv,
            Operand.DFA: dfa,
            Operand.DFA_ACT: dfa * act_deriv,
        }
        return cls(values, {} if stats is None else stats, rng or np.random.default_rng(0))


def random_context(
    rng: np.random.Generator,
    batch: int,
    n_prev: int,
    n: int,
    n_next: int,
    n_out: int,
    *,
    eq_rng: np.random.Generator | None = None,
) -> BackwardContext:
    """A context with Gaussian entries and tanh-style derivatives, for testing."""
    g = rng.standard_normal
    h_pre = g((batch, n))
    return BackwardContext.build(
        w=g((n_prev, n)),
        r=g((n_prev, n)),
        s=(rng.random((n_prev, n)) < 0.5).astype(np.float64),
        r_l=g((n_out, n)),
        h_pre=h_pre,
        h=np.tanh(h_pre),
        h_pre_next=g((batch, n_next)),
        b_l=g((batch, n_out)),
        b_next=g((batch, n_next)),
        w_next=g((n, n_next)),
        r_next=g((n, n_next)),
        act_deriv=1.0 - np.tanh(h_pre) ** 2,
        rng=eq_rng,
    )


class _Pass:
    """Running-statistics bookkeeping for one evaluation: each key updates once."""

    def __init__(self, ctx: BackwardContext):
        self.ctx = ctx
        self.seen: set[str] = set()

    def stats(self, key: str, x: np.ndarray) -> RunningStats:
        if key not in self.seen:
            self.seen.add(key)
            self.ctx.stats[key] = update_running_stats(self.ctx.stats.get(key, RunningStats()), x)
        return self.ctx.stats[key]

    def leaf(self, leaf: Leaf) -> np.ndarray:
        raw = self.ctx.values[leaf.kind]
        if leaf.stat is Stat.RAW:
            return raw
        st = self.stats(leaf.kind.value, raw)
        if leaf.stat is Stat.RUN_MEAN:
            return np.array([[st.mean]])
        if leaf.stat is Stat.RUN_STD:
            return np.array([[np.sqrt(st.var)]])
        return _standardize(raw, st)


def eval_equation(e: Equation, ctx: BackwardContext) -> np.ndarray:
    """Fold the steps left to right; raise :class:`EvaluationError` on non-finite output."""
    run = _Pass(ctx)
    result = None
    with np.errstate(all="ignore"):
        for step in e.steps:
            if step.op1.kind is not Operand.PREV:
                run.stats(step.op1.kind.value, ctx.values[step.op1.kind])
            run.stats(step.op2.kind.value, ctx.values[step.op2.kind])
        for s, step in enumerate(e.steps, start=1):
            if step.op1.kind is Operand.PREV:
                a, key1 = result, f"prev@{s}"
            else:
                a, key1 = run.leaf(step.op1), str(step.op1)
            b, key2 = run.leaf(step.op2), str(step.op2)
            a = _apply(run, step.u1, a, key1)
            b = _apply(run, step.u2, b, key2)
            result = eval_binary(step.f, a, b)

    target = ctx.values[Operand.H_PRE].shape
    if result.shape != target:
        raise EvaluationError(f"result shape {result.shape} does not match {target}")
    if not np.all(np.isfinite(result)):
        raise EvaluationError("non-finite backward signal")
    return result


def _apply(run: _Pass, u: Unary, x: np.ndarray, key: str) -> np.ndarray:
    stats = run.stats(key, x) if u.tag is UnaryTag.RUN_NORMALIZE else None
    return eval_unary(u, x, run.ctx.rng, stats)
