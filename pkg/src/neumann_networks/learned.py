"""Trainable fully-connected regularizer with hand-written reverse-mode gradients.

Parameter layout: for each layer in order, the weight matrix of shape
``(fan_out, fan_in)`` flattened row-major, followed by its bias vector.
The step size ``eta`` is kept outside ``theta`` in :class:`ParamVector`.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from typing import Sequence

import numpy as np

from neumann_networks import linops
from neumann_networks.errors import DimensionError, DivergenceError
from neumann_networks.estimators import (
    EstimatorConfig,
    Regularizer,
    Variant,
    conjugate_gradient,
    tikhonov_operator,
)
from neumann_networks.linops import ForwardModel


class Activation(str, enum.Enum):
    RELU = "relu"
    ELU = "elu"


@dataclasses.dataclass(frozen=True)
class MLPArch:
    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.RELU

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))
        if len(sizes) < 3:
            raise ValueError("need at least one hidden layer")
        if sizes[0] != sizes[-1]:
            raise ValueError("input and output sizes must both equal p")
        if min(sizes) < 1:
            raise ValueError("layer sizes must be positive")

    @classmethod
    def from_hidden(cls, p: int, hidden: Sequence[int], activation="relu") -> "MLPArch":
        return cls((p, *hidden, p), Activation(activation))

    @property
    def p(self) -> int:
        return self.layer_sizes[0]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        s = self.layer_sizes
        return [(s[i + 1], s[i]) for i in range(len(s) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)

    def slices(self) -> list[tuple[slice, slice]]:
        """``(weight_slice, bias_slice)`` into ``theta`` for each layer."""
        out, pos = [], 0
        for o, i in self.shapes:
            w = slice(pos, pos + o * i)
            pos += o * i
            b = slice(pos, pos + o)
            pos += o
            out.append((w, b))
        return out

    def unpack(self, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise DimensionError(f"theta has shape {theta.shape}, expected ({self.n_params},)")
        return [(theta[w].reshape(shape), theta[b])
                for (w, b), shape in zip(self.slices(), self.shapes)]

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation.value}

    @classmethod
    def from_dict(cls, data: dict) -> "MLPArch":
        return cls(tuple(data["layer_sizes"]), data.get("activation", "relu"))


@dataclasses.dataclass
class ParamVector:
    theta: np.ndarray
    eta: float = 0.1

    def flat(self) -> np.ndarray:
        return np.append(self.theta, self.eta)

    @classmethod
    def from_flat(cls, flat: np.ndarray) -> "ParamVector":
        return cls(np.array(flat[:-1], dtype=np.float64), float(flat[-1]))


def init_params(arch: MLPArch, seed, weight_variance: float = 0.05, bias: float = 0.001,
                eta: float = 0.1) -> ParamVector:
    """Truncated-normal weights (cut at two standard deviations), constant biases.

    The underlying normal's scale is chosen so that the *truncated*
    distribution has variance ``weight_variance``.
    """
    rng = np.random.default_rng(seed)
    # Var of N(0, 1) truncated to [-2, 2].
    phi2 = np.exp(-2.0) / np.sqrt(2 * np.pi)
    mass = 0.9544997361036416
    trunc_var = 1.0 - 4.0 * phi2 / mass
    scale = np.sqrt(weight_variance / trunc_var)
    theta = np.empty(arch.n_params)
    for w, b in arch.slices():
        n = w.stop - w.start
        z = rng.standard_normal(n)
        bad = np.abs(z) > 2.0
        while bad.any():
            z[bad] = rng.standard_normal(int(bad.sum()))
            bad = np.abs(z) > 2.0
        theta[w] = scale * z
        theta[b] = bias
    return ParamVector(theta, float(eta))


def _act(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _act_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0).astype(np.float64)
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


@dataclasses.dataclass
class Tape:
    """Layer inputs and pre-activations from one forward pass."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]
    single: bool


def mlp_forward(arch: MLPArch, theta: np.ndarray, beta: np.ndarray) -> tuple[np.ndarray, Tape]:
    beta = np.asarray(beta, dtype=np.float64)
    single = beta.ndim == 1
    a = np.atleast_2d(beta)
    if a.shape[1] != arch.p:
        raise DimensionError(f"input has trailing dimension {a.shape[1]}, expected {arch.p}")
    layers = arch.unpack(theta)
    inputs, preacts = [], []
    for idx, (W, b) in enumerate(layers):
        inputs.append(a)
        z = a @ W.T + b
        preacts.append(z)
        a = z if idx == len(layers) - 1 else _act(arch.activation, z)
    return (a[0] if single else a), Tape(inputs, preacts, single)


def mlp_vjp(arch: MLPArch, theta: np.ndarray, tape: Tape,
            v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian products ``v^T dR/dtheta`` (summed over the batch) and ``v^T dR/dbeta``."""
    layers = arch.unpack(theta)
    g = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if len(tape.inputs) != len(layers) or g.shape != tape.preacts[-1].shape:
        raise DimensionError("tape does not match this network or cotangent")
    grad = np.empty(arch.n_params)
    for idx in range(len(layers) - 1, -1, -1):
        W, _ = layers[idx]
        if idx != len(layers) - 1:
            g = g * _act_grad(arch.activation, tape.preacts[idx])
        w_sl, b_sl = arch.slices()[idx]
        grad[w_sl] = (g.T @ tape.inputs[idx]).ravel()
        grad[b_sl] = g.sum(axis=0)
        g = g @ W
    return grad, (g[0] if tape.single else g)


class MLPRegularizer(Regularizer):
    tag = "LearnedMLP"

    def __init__(self, arch: MLPArch, theta: np.ndarray):
        self.arch = arch
        self.theta = np.asarray(theta, dtype=np.float64)

    def __call__(self, beta):
        return mlp_forward(self.arch, self.theta, beta)[0]


def _check(x, step, what="estimator block"):
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"non-finite values in {what} {step}", step=step)


def _cg_solve(model: ForwardModel, cfg: EstimatorConfig, b: np.ndarray) -> np.ndarray:
    return conjugate_gradient(tikhonov_operator(model, cfg.lam), b, cfg.cg_iters,
                              cfg.cg_tol).solution


@dataclasses.dataclass
class ForwardTrace:
    estimate: np.ndarray
    states: list[np.ndarray]
    tapes: list[Tape]
    reg_outputs: list[np.ndarray]
    start_direction: np.ndarray


def forward_trace(model: ForwardModel, arch: MLPArch, params: ParamVector,
                  cfg: EstimatorConfig, y: np.ndarray) -> ForwardTrace:
    """Run the estimator with an MLP regularizer, keeping what backprop needs.

    ``states[j]`` is the j-th series term (NN, PNN) or iterate (GDN); for
    NN and GDN the step size comes from ``params.eta``.
    """
    theta, eta = params.theta, params.eta
    y2 = np.atleast_2d(np.asarray(y, dtype=np.float64))
    Xty = linops.adjoint(model, y2)
    if cfg.variant is Variant.PNN:
        state = _cg_solve(model, cfg, Xty)
    else:
        state = eta * Xty
    start = state
    states, tapes, regs = [state], [], []
    total = state.copy()
    for j in range(1, cfg.blocks + 1):
        r_out, tape = mlp_forward(arch, theta, state)
        tapes.append(tape)
        regs.append(r_out)
        if cfg.variant is Variant.PNN:
            state = cfg.lam * _cg_solve(model, cfg, state) - r_out
        elif cfg.variant is Variant.NN:
            state = state - eta * linops.gram(model, state) - eta * r_out
        else:
            state = state - eta * linops.gram(model, state) - eta * r_out + start
        _check(state, j)
        states.append(state)
        total += state
    estimate = state if cfg.variant is Variant.GDN else total
    return ForwardTrace(estimate, states, tapes, regs, Xty)


def backprop_trace(model: ForwardModel, arch: MLPArch, params: ParamVector,
                   cfg: EstimatorConfig, trace: ForwardTrace,
                   residual: np.ndarray) -> tuple[np.ndarray, float]:
    """Reverse sweep through the blocks of a recorded forward pass.

    Returns ``(J_theta^T residual, J_eta^T residual)`` summed over the batch,
    where ``J`` is the Jacobian of the estimate. For PNN the CG blocks are
    differentiated as the exact operator ``(X^T X + lam I)^{-1}`` (symmetric,
    so its adjoint is another CG solve) and the eta gradient is zero.
    """
    theta, eta = params.theta, params.eta
    r = np.atleast_2d(np.asarray(residual, dtype=np.float64))
    if r.shape != trace.estimate.shape:
        raise DimensionError("residual shape does not match the estimate")
    B = cfg.blocks
    grad_theta = np.zeros(arch.n_params)
    grad_eta = 0.0
    summed = cfg.variant is not Variant.GDN
    # adj is the total cotangent reaching states[j].
    adj = r.copy()
    start_adj = np.zeros_like(r)
    for j in range(B, 0, -1):
        prev = trace.states[j - 1]
        g_theta, g_input = mlp_vjp(arch, theta, trace.tapes[j - 1], adj)
        if cfg.variant is Variant.PNN:
            grad_theta -= g_theta
            back = cfg.lam * _cg_solve(model, cfg, adj) - g_input
        else:
            grad_theta -= eta * g_theta
            grad_eta -= float(np.sum(adj * (linops.gram(model, prev) + trace.reg_outputs[j - 1])))
            back = adj - eta * linops.gram(model, adj) - eta * g_input
            if not summed:
                start_adj += adj
        adj = back + r if summed else back
    adj = adj + start_adj
    if cfg.variant is not Variant.PNN:
        grad_eta += float(np.sum(adj * trace.start_direction))
    if not (np.all(np.isfinite(grad_theta)) and np.isfinite(grad_eta)):
        raise DivergenceError("non-finite gradient")
    return grad_theta, grad_eta


def estimator_backprop(model: ForwardModel, arch: MLPArch, params: ParamVector,
                       cfg: EstimatorConfig, y: np.ndarray,
                       residual: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradient of ``0.5 * ||beta_hat(y) - beta||^2`` given ``residual = beta_hat - beta``.

    Equivalently the vector-Jacobian product of the estimate with
    ``residual``; batches are summed.
    """
    trace = forward_trace(model, arch, params, cfg, y)
    return backprop_trace(model, arch, params, cfg, trace, residual)


@dataclasses.dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(state: AdamState, theta: np.ndarray,
              grad: np.ndarray) -> tuple[np.ndarray, AdamState]:
    if theta.shape != grad.shape or state.m.shape != theta.shape:
        raise DimensionError("ADAM state, parameters and gradient must share a shape")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new_theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_theta, dataclasses.replace(state, m=m, v=v, t=t)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    estimator: EstimatorConfig
    batch_size: int = 64
    iterations: int = 20000
    lr: float = 1e-3
    decay_rate: float = 0.99
    decay_steps: int = 500
    seed: int = 0
    train_eta: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.iterations < 0 or self.decay_steps < 1:
            raise ValueError("batch_size, iterations and decay_steps must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")

    def lr_at(self, step: int) -> float:
        return self.lr * self.decay_rate ** (step / self.decay_steps)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["estimator"] = self.estimator.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["estimator"] = EstimatorConfig.from_dict(data["estimator"])
        return cls(**data)


@dataclasses.dataclass
class TrainHistory:
    steps: np.ndarray
    lr: np.ndarray
    batch_loss: np.ndarray
    final_loss: float

    def to_csv(self) -> str:
        lines = ["step,lr,batch_loss"]
        lines += [f"{int(s)},{lr!r},{loss!r}"
                  for s, lr, loss in zip(self.steps, self.lr, self.batch_loss)]
        return "\n".join(lines) + "\n"


def as_arrays(train_set) -> tuple[np.ndarray, np.ndarray]:
    """Accept ``(betas, ys)`` arrays, a Dataset, or a list of ``(beta, y)`` pairs."""
    if hasattr(train_set, "betas") and hasattr(train_set, "ys"):
        return np.asarray(train_set.betas, float), np.asarray(train_set.ys, float)
    if isinstance(train_set, tuple) and len(train_set) == 2 and np.ndim(train_set[0]) == 2:
        return np.asarray(train_set[0], float), np.asarray(train_set[1], float)
    pairs = list(train_set)
    return np.array([b for b, _ in pairs], float), np.array([y for _, y in pairs], float)


def empirical_risk(model: ForwardModel, arch: MLPArch, params: ParamVector,
                   cfg: EstimatorConfig, betas: np.ndarray, ys: np.ndarray) -> float:
    """Mean over samples of ``||beta_hat(y_i) - beta_i||^2``."""
    est = forward_trace(model, arch, params, cfg, ys).estimate
    return float(np.mean(np.sum((est - betas) ** 2, axis=1)))


def batch_gradient(model, arch, params, cfg, betas, ys) -> tuple[float, np.ndarray, float]:
    """Mean squared error of a batch and its gradient in ``(theta, eta)``."""
    trace = forward_trace(model, arch, params, cfg, ys)
    resid = trace.estimate - betas
    loss = float(np.mean(np.sum(resid ** 2, axis=1)))
    g_theta, g_eta = backprop_trace(model, arch, params, cfg, trace, resid * (2.0 / len(betas)))
    return loss, g_theta, g_eta


def train(model: ForwardModel, arch: MLPArch, train_set, cfg: TrainConfig,
          init: ParamVector | None = None) -> tuple[ParamVector, TrainHistory]:
    """Mini-batch ADAM on the mean squared reconstruction error.

    Batches are drawn by walking seeded per-epoch permutations of the
    training set. ``eta`` is optimized jointly with ``theta`` when
    ``cfg.train_eta`` is set (not used by PNN).
    """
    betas, ys = as_arrays(train_set)
    if len(betas) == 0:
        raise ValueError("empty training set")
    if betas.shape[1] != model.p or ys.shape[1] != model.m:
        raise DimensionError("training data does not match the forward model")
    rng = np.random.default_rng(cfg.seed)
    params = init if init is not None else init_params(arch, rng.integers(2 ** 32),
                                                       eta=cfg.estimator.eta)
    params = ParamVector(params.theta.copy(), params.eta)
    est_cfg = cfg.estimator
    fit_eta = cfg.train_eta and est_cfg.variant is not Variant.PNN
    flat = params.flat()
    state = AdamState.zeros(flat.size, lr=cfg.lr)
    n = len(betas)
    bs = min(cfg.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    losses = np.empty(cfg.iterations)
    lrs = np.empty(cfg.iterations)
    for step in range(cfg.iterations):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        try:
            loss, g_theta, g_eta = batch_gradient(model, arch, params, est_cfg,
                                                  betas[idx], ys[idx])
        except DivergenceError as exc:
            raise DivergenceError(f"training diverged at step {step}: {exc}", step=step) from exc
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss is non-finite at step {step}", step=step)
        grad = np.append(g_theta, g_eta if fit_eta else 0.0)
        state.lr = cfg.lr_at(step)
        flat, state = adam_step(state, flat, grad)
        params = ParamVector.from_flat(flat)
        losses[step] = loss
        lrs[step] = state.lr
    final = empirical_risk(model, arch, params, est_cfg, betas, ys)
    history = TrainHistory(np.arange(cfg.iterations), lrs, losses, final)
    return params, history


def save_sidecar(arch: MLPArch, params: ParamVector, cfg: TrainConfig | None) -> str:
    return json.dumps({
        "arch": arch.to_dict(),
        "eta": params.eta,
        "train_config": None if cfg is None else cfg.to_dict(),
        "layout": "per layer: weight (fan_out, fan_in) row-major, then bias",
    }, indent=2, sort_keys=True)
