"""From-scratch MLP whose hidden-layer backward signal comes from an update equation."""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .dsl import Equation, ShapeError, canonical_key, check_feasible, parse_equation
from .semantics import BackwardContext, EvaluationError, RunningStats, eval_equation, propagate
from .tasks import Dataset, chance_accuracy


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"


class Schedule(str, enum.Enum):
    CONSTANT = "constant"
    COSINE_WARMUP = "cosine_warmup"


class OptimizerKind(str, enum.Enum):
    SGD = "sgd"
    MOMENTUM = "momentum"


def activate(kind: Activation, x: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(x, 0.0)
    return np.tanh(x)


def activation_deriv(kind: Activation, h_pre: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Local derivative dh/dh^p; the ReLU derivative at 0 is 0."""
    if kind is Activation.RELU:
        return (h_pre > 0).astype(np.float64)
    return 1.0 - h * h


@dataclass
class MlpModel:
    widths: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    # Fixed random matrices, one per layer: Gaussian and Bernoulli shaped
    # like the weight, and Gaussian n_L×n_i for hidden layers (None for output).
    feedback_r: list[np.ndarray]
    feedback_s: list[np.ndarray]
    feedback_rl: list[np.ndarray | None]
    activation: Activation = Activation.RELU

    @classmethod
    def init(cls, widths, activation=Activation.RELU, rng: np.random.Generator | None = None) -> "MlpModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        n_out = widths[-1]
        weights, biases, fr, fs, frl = [], [], [], [], []
        for n_in, n in zip(widths[:-1], widths[1:]):
            weights.append(rng.standard_normal((n_in, n)) / math.sqrt(n_in))
            biases.append(np.zeros(n))
        for j, (n_in, n) in enumerate(zip(widths[:-1], widths[1:])):
            fr.append(rng.standard_normal((n_in, n)) / math.sqrt(n_in))
            fs.append((rng.random((n_in, n)) < 0.5).astype(np.float64))
            last = j == len(widths) - 2
            frl.append(None if last else rng.standard_normal((n_out, n)) / math.sqrt(n_out))
        return cls(widths, weights, biases, fr, fs, frl, Activation(activation))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass
class LayerCache:
    x: np.ndarray
    labels: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]
    probs: np.ndarray
    loss: float

    @property
    def logits(self) -> np.ndarray:
        return self.pre[-1]


@dataclass
class Deltas:
    """Mean-over-batch weight and bias updates, one entry per layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: MlpModel, x: np.ndarray, labels: np.ndarray) -> LayerCache:
    """Row-batch forward pass: h^p_i = h_{i-1} W_i + bias_i, h_i = act(h^p_i); output is linear."""
    if x.ndim != 2 or x.shape[1] != model.widths[0]:
        raise ValueError(f"input shape {x.shape} does not match width {model.widths[0]}")
    if len(labels) != len(x):
        raise ValueError("label count does not match batch size")
    pre, post = [], []
    h = x
    for j, (w, b) in enumerate(zip(model.weights, model.biases)):
        hp = h @ w + b
        h = hp if j == model.n_layers - 1 else activate(model.activation, hp)
        pre.append(hp)
        post.append(h)
    probs = softmax(pre[-1])
    picked = probs[np.arange(len(labels)), labels]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    return LayerCache(x, labels, pre, post, probs, loss)


def output_error(cache: LayerCache) -> np.ndarray:
    """Per-example gradient of the cross-entropy wrt the logits (softmax - onehot)."""
    b = cache.probs.copy()
    b[np.arange(len(cache.labels)), cache.labels] -= 1.0
    return b


def _deltas_from_signals(cache: LayerCache, signals: list[np.ndarray]) -> Deltas:
    batch = len(cache.x)
    inputs = [cache.x, *cache.post[:-1]]
    return Deltas(
        [h.T @ b / batch for h, b in zip(inputs, signals)],
        [b.sum(axis=0) / batch for b in signals],
    )


def backward_reference(model: MlpModel, cache: LayerCache) -> Deltas:
    """Analytic chain-rule gradients of the mean loss."""
    signals = [None] * model.n_layers
    signals[-1] = output_error(cache)
    for j in range(model.n_layers - 2, -1, -1):
        deriv = activation_deriv(model.activation, cache.pre[j], cache.post[j])
        _, signals[j] = propagate(signals[j + 1], model.weights[j + 1], deriv)
    return _deltas_from_signals(cache, signals)


def backward_with_equation(
    model: MlpModel,
    cache: LayerCache,
    equation: Equation,
    stats: list[dict[str, RunningStats]] | None = None,
    rng: np.random.Generator | None = None,
) -> Deltas:
    """Backward pass where every hidden layer's signal is ``equation`` evaluated in context.

    The output layer keeps the analytic error. ``stats`` holds one running
    statistics dict per layer and is updated in place. Raises
    :class:`EvaluationError` if the equation produces non-finite values.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if stats is None:
        stats = [{} for _ in range(model.n_layers)]
    signals = [None] * model.n_layers
    signals[-1] = output_error(cache)
    b_l = signals[-1]
    for j in range(model.n_layers - 2, -1, -1):
        ctx = BackwardContext.build(
            w=model.weights[j],
            r=model.feedback_r[j],
            s=model.feedback_s[j],
            r_l=model.feedback_rl[j],
            h_pre=cache.pre[j],
            h=cache.post[j],
            h_pre_next=cache.pre[j + 1],
            b_l=b_l,
            b_next=signals[j + 1],
            w_next=model.weights[j + 1],
            r_next=model.feedback_r[j + 1],
            act_deriv=activation_deriv(model.activation, cache.pre[j], cache.post[j]),
            stats=stats[j],
            rng=rng,
        )
        signals[j] = eval_equation(equation, ctx)
    return _deltas_from_signals(cache, signals)


def central_difference(fn, param: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param`` in place."""
    grad = np.zeros_like(param, dtype=np.float64)
    flat, gflat = param.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = fn()
        flat[k] = orig - eps
        down = fn()
        flat[k] = orig
        gflat[k] = (up - down) / (2 * eps)
    return grad


def finite_difference_grad(model: MlpModel, x: np.ndarray, labels: np.ndarray, eps: float = 1e-5) -> Deltas:
    """Central differences of the mean loss for every weight and bias."""
    if model.n_params() > 5000:
        raise ValueError("model too large for finite differences")
    params = [*model.weights, *model.biases]
    out = [central_difference(lambda: forward(model, x, labels).loss, p, eps) for p in params]
    n = model.n_layers
    return Deltas(out[:n], out[n:])


class Optimizer:
    """SGD with optional heavy-ball momentum: v <- mu v + d; p <- p - lr v."""

    def __init__(self, momentum: float = 0.0):
        self.momentum = momentum
        self.velocity: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], deltas: list[np.ndarray], lr: float) -> None:
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, d, v in zip(params, deltas, self.velocity):
            if d.shape != p.shape:
                raise ValueError(f"delta shape {d.shape} does not match parameter {p.shape}")
            v *= self.momentum
            v += d
            p -= lr * v


def lr_at(schedule: Schedule, step: int, total_steps: int, peak: float) -> float:
    """Learning rate at ``step``; cosine_warmup ramps linearly over the first 10% then decays."""
    if Schedule(schedule) is Schedule.CONSTANT:
        return peak
    warmup = 0.1 * total_steps
    if step <= warmup:
        return peak * step / warmup if warmup > 0 else peak
    t = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.1
    schedule: Schedule = Schedule.CONSTANT
    optimizer: OptimizerKind = OptimizerKind.SGD
    momentum: float = 0.9
    seed: int = 0
    hidden: tuple[int, ...] = (32, 32)
    activation: Activation = Activation.RELU
    early_stop: bool = True
    early_stop_fraction: float = 0.25
    early_stop_margin: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "schedule", Schedule(self.schedule))
        object.__setattr__(self, "optimizer", OptimizerKind(self.optimizer))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "schedule": self.schedule.value,
            "optimizer": self.optimizer.value,
            "momentum": self.momentum,
            "seed": self.seed,
            "hidden": list(self.hidden),
            "activation": self.activation.value,
            "early_stop": self.early_stop,
            "early_stop_fraction": self.early_stop_fraction,
            "early_stop_margin": self.early_stop_margin,
        }


@dataclass
class FitnessRecord:
    key: str
    val_acc: float
    test_acc: float | None = None
    epochs: int = 0
    failed: bool = False
    reason: str = ""
    seed: int = 0
    wall: float = field(default=0.0, compare=False)


def accuracy(model: MlpModel, x: np.ndarray, labels: np.ndarray) -> float:
    h = x
    for j, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if j < model.n_layers - 1:
            h = activate(model.activation, h)
    return float(np.mean(np.argmax(h, axis=1) == labels))


def train_and_evaluate(
    equation: Equation | str,
    data: Dataset,
    config: TrainConfig,
    *,
    full_train: bool = False,
) -> FitnessRecord:
    """Train a fresh model with ``equation`` driving the hidden-layer backward pass.

    With ``full_train`` the model trains on train+val, early stopping is off
    and the test accuracy is filled in.
    """
    start = time.perf_counter()
    if isinstance(equation, str):
        equation = parse_equation(equation)
    key = canonical_key(equation)
    check_feasible(equation)

    init_seq, shuffle_seq, eq_seq = np.random.SeedSequence(config.seed).spawn(3)
    widths = (data.n_features, *config.hidden, data.n_classes)
    model = MlpModel.init(widths, config.activation, np.random.default_rng(init_seq))
    shuffle_rng = np.random.default_rng(shuffle_seq)
    eq_rng = np.random.default_rng(eq_seq)
    stats = [{} for _ in range(model.n_layers)]
    momentum = config.momentum if config.optimizer is OptimizerKind.MOMENTUM else 0.0
    opt = Optimizer(momentum)
    params = [*model.weights, *model.biases]

    x, y = data.x_train, data.y_train
    if full_train:
        x = np.concatenate([x, data.x_val])
        y = np.concatenate([y, data.y_val])
    n = len(x)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    chance = chance_accuracy(data.y_val, data.n_classes)
    check_epoch = math.ceil(config.epochs * config.early_stop_fraction)

    def record(val_acc, epochs, failed=False, reason=""):
        test_acc = None
        if full_train and not failed:
            with np.errstate(all="ignore"):
                test_acc = accuracy(model, data.x_test, data.y_test)
        return FitnessRecord(key, val_acc, test_acc, epochs, failed, reason, config.seed,
                             time.perf_counter() - start)

    val_acc = 0.0
    step = 0
    with np.errstate(all="ignore"):
        for epoch in range(1, config.epochs + 1):
            order = shuffle_rng.permutation(n)
            for lo in range(0, n, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                cache = forward(model, x[idx], y[idx])
                if not math.isfinite(cache.loss):
                    return record(val_acc, epoch - 1, True, f"epoch {epoch}: non-finite loss")
                try:
                    deltas = backward_with_equation(model, cache, equation, stats, eq_rng)
                except EvaluationError as exc:
                    return record(val_acc, epoch - 1, True, f"epoch {epoch}: {exc}")
                opt.step(params, deltas.arrays(), lr_at(config.schedule, step, total, config.lr))
                step += 1
            if not all(np.all(np.isfinite(p)) for p in params):
                return record(val_acc, epoch - 1, True, f"epoch {epoch}: non-finite weights")
            val_acc = accuracy(model, data.x_val, data.y_val)
            if (config.early_stop and not full_train and epoch == check_epoch and epoch < config.epochs
                    and val_acc < chance + config.early_stop_margin):
                return record(val_acc, epoch, False, "early-stopped")
    return record(val_acc, config.epochs)


def builtin_equations() -> dict[str, Equation]:
    """Backprop, feedback alignment and direct feedback alignment as equations."""
    return {
        "backprop": parse_equation("keep_left(ident(g), ident(g))"),
        "feedback_alignment": parse_equation("keep_left(ident(fa_act), ident(fa_act))"),
        "dfa": parse_equation("keep_left(ident(dfa_act), ident(dfa_act))"),
    }


__all__ = [
    "Activation", "Deltas", "FitnessRecord", "LayerCache", "MlpModel", "Optimizer", "OptimizerKind",
    "Schedule", "ShapeError", "TrainConfig", "accuracy", "backward_reference", "backward_with_equation",
    "builtin_equations", "central_difference", "finite_difference_grad", "forward", "lr_at", "output_error", "train_and_evaluate",
]
